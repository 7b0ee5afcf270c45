// flan: command-line front end for the flim library.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "flim/baselines.hpp"
#include "flim/binning.hpp"
#include "flim/decay_synth.hpp"
#include "flim/error.hpp"
#include "flim/eval_bench.hpp"
#include "flim/flan.hpp"
#include "flim/io.hpp"
#include "flim/quantize.hpp"
#include "flim/quantize_model.hpp"
#include "flim/training.hpp"

namespace {

using namespace flim;

constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumeric = 4;

std::string num(double v) {
  std::ostringstream o;
  o.precision(9);
  o << v;
  return o.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

void require_length(const std::vector<LabeledDecay>& data, int length, const std::string& what) {
  if (data.empty()) throw FormatError(what + " is empty");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (static_cast<int>(data[i].histogram.counts.size()) != length)
      throw FormatError(what + ": record " + std::to_string(i) + " has " +
                        std::to_string(data[i].histogram.counts.size()) + " bins but the model expects " +
                        std::to_string(length));
}

struct SynthOpts {
  std::size_t size = 1000;
  std::uint64_t seed = 1;
  std::string out;
  std::string text_out;
  double mono_fraction = 0.5;
  double np_min = 10.0;
  double np_max = 5000.0;
  std::string regime;
  int bins = 256;
};

int run_synth(const SynthOpts& o) {
  DatasetSpec spec;
  spec.size = o.size;
  spec.seed = o.seed;
  spec.mono_fraction = o.mono_fraction;
  spec.peak_count = {o.np_min, o.np_max};
  if (!o.regime.empty()) spec.peak_count = regime_range(parse_regime(o.regime));
  spec.instrument.num_bins = o.bins;
  const auto data = gen_dataset(spec);
  io::write_dataset(o.out, data);
  if (!o.text_out.empty()) io::write_text_atomic(o.text_out, io::dataset_to_text(data));
  std::cout << "synth: wrote " << data.size() << " records x " << o.bins << " bins to " << o.out << '\n';
  return 0;
}

struct CompressOpts {
  std::string in;
  std::string out;
  int bins_in = 256;
  int bins_out = 80;
};

int run_compress(const CompressOpts& o) {
  auto data = io::read_dataset(o.in);
  const auto spec = LogBinSpec::make(o.bins_in, o.bins_out);
  for (auto& r : data) {
    if (static_cast<int>(r.histogram.counts.size()) != o.bins_in)
      throw FormatError("record has " + std::to_string(r.histogram.counts.size()) + " bins, expected " +
                        std::to_string(o.bins_in));
    r.histogram = compress_histogram(r.histogram, spec);
  }
  io::write_dataset(o.out, data);
  std::cout << "compress: " << data.size() << " records " << o.bins_in << " -> " << o.bins_out
            << " bins (r = " << num(spec.ratio) << "), edges in " << o.out << ".edges\n";
  return 0;
}

struct TrainOpts {
  std::string variant = "flan";
  std::string train;
  std::string val;
  std::string out;
  std::string report;
  std::string loss_log;
  int epochs = 500;
  std::uint64_t seed = 1;
  std::size_t batch = 128;
  int patience = 20;
  double lr = 1e-3;
  std::uint32_t gate = 0;
};

int run_train(const TrainOpts& o) {
  auto model = build_flan(parse_variant(o.variant), default_widths(parse_variant(o.variant)), o.seed);
  model.gate_threshold = o.gate;
  const auto train_set = io::read_dataset(o.train);
  const auto val_set = io::read_dataset(o.val);
  require_length(train_set, model.input_length, "training set");
  require_length(val_set, model.input_length, "validation set");
  TrainConfig cfg;
  cfg.max_epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.batch_size = o.batch;
  cfg.patience = o.patience;
  cfg.initial_lr = o.lr;
  auto result = train(std::move(model), train_set, val_set, cfg);
  io::write_model(o.out, result.model);
  const std::string table = result.report.table();
  if (o.report.empty()) {
    std::cout << table;
  } else {
    io::write_text_atomic(o.report, table);
  }
  io::write_text_atomic(o.loss_log.empty() ? o.out + ".loss.csv" : o.loss_log, result.report.loss_csv());
  std::cout << "train: " << o.variant << " best epoch " << result.report.best_epoch << ", val MSE tau_a "
            << num(result.report.val_mse_tau_a) << " tau_i " << num(result.report.val_mse_tau_i) << " -> " << o.out
            << '\n';
  return 0;
}

struct InferOpts {
  std::string model;
  std::string data;
  std::string mode = "float";
  std::string out;
  long long gate = -1;
};

int run_infer(const InferOpts& o) {
  auto model = io::read_model(o.model);
  const auto data = io::read_dataset(o.data);
  require_length(data, model.input_length, "dataset");
  if (o.gate >= 0) model.gate_threshold = static_cast<std::uint32_t>(o.gate);
  const bool fixed = o.mode == "fixed";
  if (fixed && !model.is_quantized()) throw InvalidArgument("fixed mode needs a quantized model (run quantize)");
  std::ostringstream csv;
  csv.precision(9);
  csv << "index,tau_a,tau_i,gated\n";
  std::size_t gated = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& h = data[i].histogram;
    const bool bg = threshold_gate(h, model.gate_threshold) == GateDecision::Background;
    gated += bg;
    const auto p = fixed ? forward_fixed(model, h) : forward(model, h);
    csv << i << ',' << p.tau_a << ',' << p.tau_i << ',' << (bg ? 1 : 0) << '\n';
  }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    io::write_text_atomic(o.out, csv.str());
  }
  std::cerr << "infer: " << data.size() << " records (" << gated << " gated) in " << o.mode << " mode\n";
  return 0;
}

struct QuantizeOpts {
  std::string model;
  std::string out;
  std::string fm = "Q16.16";
  std::string param = "Q10.10";
  double max_saturation = 0.01;
};

int run_quantize(const QuantizeOpts& o) {
  const auto model = io::read_model(o.model);
  QuantizeReport rep;
  const auto q = quantize_model(model, parse_qformat(o.fm), parse_qformat(o.param), o.max_saturation, &rep);
  io::write_model(o.out, q);
  std::cout << "quantize: " << rep.parameters << " parameters to " << o.param << ", feature maps " << o.fm
            << ", saturated " << rep.saturated << " -> " << o.out << '\n';
  return 0;
}

struct ExportOpts {
  std::string model;
  std::string out;
};

int run_export(const ExportOpts& o) {
  const auto model = io::read_model(o.model);
  if (!model.is_quantized()) throw InvalidArgument("export-params needs a quantized model (run quantize)");
  const auto bytes = io::encode_params(model);
  io::write_file_atomic(o.out, bytes);
  std::cout << "export-params: " << bytes.size() << " bytes -> " << o.out << '\n';
  return 0;
}

struct BaselineOpts {
  std::string method;
  std::string data;
  std::string out;
  int order = 2;
  std::vector<double> tau_init;
  double a_init = 0.5;
  int window_begin = -1;
  int window_end = -1;
};

int run_baseline(const BaselineOpts& o) {
  const auto data = io::read_dataset(o.data);
  if (data.empty()) throw FormatError("dataset is empty");
  InstrumentConfig cfg;
  cfg.num_bins = static_cast<int>(data.front().histogram.counts.size());
  cfg.bin_width = data.front().histogram.bin_width;
  std::ostringstream csv;
  csv.precision(9);
  std::size_t refused = 0;
  if (o.method == "cmm") {
    CmmOptions opts;
    if (o.window_begin >= 0 || o.window_end >= 0)
      opts.window = BinWindow{std::max(o.window_begin, 0), o.window_end >= 0 ? o.window_end : cfg.num_bins};
    csv << "index,tau,status\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& h = data[i].histogram;
      if (h.total() == 0) {
        csv << i << ",,no_photons\n";
        ++refused;
        continue;
      }
      csv << i << ',' << cmm_estimate(h, cfg, opts) << ",ok\n";
    }
  } else if (o.method == "phasor") {
    csv << "index,g,s,g_calibrated,s_calibrated,tau,status\n";
    const PhasorPoint ref = irf_phasor(cfg);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& h = data[i].histogram;
      if (h.total() == 0) {
        csv << i << ",,,,,,no_photons\n";
        ++refused;
        continue;
      }
      const auto raw = phasor_transform(h, cfg);
      const auto p = calibrate_phasor(raw, ref);
      csv << i << ',' << raw.g << ',' << raw.s << ',' << p.g << ',' << p.s << ',';
      if (p.g > 0.0) {
        csv << phasor_lifetime(p, cfg) << ",ok\n";
      } else {
        csv << ",g_not_positive\n";
      }
    }
  } else if (o.method == "nlsf") {
    std::optional<DecayParams> init;
    if (!o.tau_init.empty()) {
      if (static_cast<int>(o.tau_init.size()) != o.order)
        throw InvalidArgument("--tau-init needs one lifetime per component");
      DecayParams p;
      if (o.order == 1) {
        p.components = {{1.0, o.tau_init[0]}};
      } else {
        p.components = {{o.a_init, o.tau_init[0]}, {1.0 - o.a_init, o.tau_init[1]}};
      }
      init = p;
    }
    csv << "index,amplitude,a1,tau1,a2,tau2,tau_a,tau_i,residual_norm,iterations,converged,status\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& h = data[i].histogram;
      if (static_cast<double>(h.total()) < NlsfOptions{}.min_photons) {
        csv << i << ",,,,,,,,,,,insufficient_photons\n";
        ++refused;
        continue;
      }
      const auto r = nlsf_fit(h, cfg, o.order, init);
      const auto& c = r.params.components;
      const auto lt = r.lifetimes();
      csv << i << ',' << r.params.peak_count << ',' << c[0].amplitude << ',' << c[0].tau << ',';
      if (c.size() > 1) {
        csv << c[1].amplitude << ',' << c[1].tau << ',';
      } else {
        csv << ",,";
      }
      csv << lt.tau_a << ',' << lt.tau_i << ',' << r.residual_norm << ',' << r.iterations << ','
          << (r.converged ? 1 : 0) << ",ok\n";
    }
  } else {
    throw InvalidArgument("unknown method '" + o.method + "' (expected cmm, phasor or nlsf)");
  }
  io::write_text_atomic(o.out, csv.str());
  std::cout << "baseline: " << o.method << " on " << data.size() << " records (" << refused << " refused) -> "
            << o.out << '\n';
  return 0;
}

struct EvalOpts {
  bool gt_image = false;
  std::string regime = "high";
  std::string methods = "cmm,phasor,nlsf";
  std::string out;
  std::string plot_data;
  std::string model_flan;
  std::string model_flan_ls;
  std::string mode = "float";
  int size = 256;
  std::uint64_t seed = 1;
  unsigned workers = 0;
};

int run_eval(const EvalOpts& o) {
  if (!o.gt_image) throw InvalidArgument("eval currently supports only --gt-image");
  GtImageSpec spec;
  spec.height = o.size;
  spec.width = o.size;
  spec.regime = parse_regime(o.regime);
  const bool fixed = o.mode == "fixed";
  std::vector<MethodSpec> methods;
  std::vector<NetworkModel> models;
  models.reserve(2);
  for (const auto& name : split(o.methods, ',')) {
    MethodSpec m;
    m.name = name;
    if (name == "cmm") {
      m.method = Method::Cmm;
    } else if (name == "phasor") {
      m.method = Method::Phasor;
    } else if (name == "nlsf") {
      m.method = Method::Nlsf;
    } else if (name == "flan" || name == "flan-ls") {
      const std::string& path = name == "flan" ? o.model_flan : o.model_flan_ls;
      if (path.empty()) throw InvalidArgument("method " + name + " needs --model-" + name);
      models.push_back(io::read_model(path));
      if (models.back().variant != parse_variant(name))
        throw FormatError(path + " holds a " + to_string(models.back().variant) + " model, not " + name);
      m.method = Method::Model;
      m.model = &models.back();
      m.fixed_point = fixed;
    } else {
      throw InvalidArgument("unknown method '" + name + "'");
    }
    methods.push_back(m);
  }
  const auto image = gen_gt_image(spec, o.seed);
  const auto rep = evaluate_gt_image(image, spec, methods, o.workers ? o.workers : default_workers());
  io::write_text_atomic(o.out, rep.csv());
  io::write_text_atomic(o.plot_data.empty() ? o.out + ".plot.txt" : o.plot_data, rep.plot_data());
  std::cout << "eval: " << o.size << "x" << o.size << " " << o.regime << " regime, " << methods.size()
            << " methods -> " << o.out << '\n';
  return 0;
}

struct BenchOpts {
  std::string model;
  std::string data;
  std::string batch_sizes = "1,4,32,128";
  std::string mode = "float";
  std::string out;
  int repetitions = 11;
  std::size_t size = 1000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
};

int run_bench(const BenchOpts& o) {
  const auto model = io::read_model(o.model);
  std::vector<Histogram> pixels;
  if (!o.data.empty()) {
    const auto data = io::read_dataset(o.data);
    require_length(data, model.input_length, "dataset");
    for (const auto& r : data) pixels.push_back(r.histogram);
  } else {
    DatasetSpec spec;
    spec.size = o.size;
    spec.seed = o.seed;
    spec.peak_count = regime_range(PhotonRegime::High);
    for (const auto& r : gen_dataset(spec)) pixels.push_back(prepare_for_model(model, r.histogram));
  }
  std::vector<std::size_t> sizes;
  for (const auto& s : split(o.batch_sizes, ',')) {
    try {
      sizes.push_back(static_cast<std::size_t>(std::stoull(s)));
    } catch (const std::exception&) {
      throw InvalidArgument("bad batch size '" + s + "'");
    }
  }
  const auto rows = bench_model(model, pixels, sizes, o.repetitions, o.mode == "fixed", o.workers);
  const auto csv = bench_csv(rows);
  if (o.out.empty()) {
    std::cout << csv;
  } else {
    io::write_text_atomic(o.out, csv);
  }
  std::cerr << "bench: " << to_string(model.variant) << " " << o.mode << " mode, " << rows.size()
            << " batch sizes\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FLIM lifetime estimation with adder networks"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value file supplying default flag values");

  SynthOpts synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
  c_synth->add_option("--size", synth.size, "Number of records")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  c_synth->add_option("--out", synth.out, "Output dataset (.flds)")->required();
  c_synth->add_option("--text", synth.text_out, "Optional text dump");
  c_synth->add_option("--mono-fraction", synth.mono_fraction, "Fraction of mono-exponential records")
      ->capture_default_str();
  c_synth->add_option("--np-min", synth.np_min, "Lowest peak photon count")->capture_default_str();
  c_synth->add_option("--np-max", synth.np_max, "Highest peak photon count")->capture_default_str();
  c_synth->add_option("--regime", synth.regime, "Photon regime high|mid|low (overrides --np-min/--np-max)");
  c_synth->add_option("--bins", synth.bins, "Number of time bins")->capture_default_str();

  CompressOpts comp;
  auto* c_comp = app.add_subcommand("compress", "Merge time bins on a log scale");
  c_comp->add_option("--data,--in", comp.in, "Input dataset")->required();
  c_comp->add_option("--out", comp.out, "Output dataset")->required();
  c_comp->add_option("--bins-in", comp.bins_in, "Original bin count")->capture_default_str();
  c_comp->add_option("--bins-out", comp.bins_out, "Merged bin count")->capture_default_str();

  TrainOpts tr;
  auto* c_train = app.add_subcommand("train", "Train a network");
  c_train->add_option("--variant", tr.variant, "flan | flan-ls")->capture_default_str();
  c_train->add_option("--train", tr.train, "Training dataset")->required();
  c_train->add_option("--val", tr.val, "Validation dataset")->required();
  c_train->add_option("--out", tr.out, "Output model (.flnm)")->required();
  c_train->add_option("--epochs", tr.epochs, "Maximum epochs")->capture_default_str();
  c_train->add_option("--seed", tr.seed, "Seed for initialization and shuffling")->capture_default_str();
  c_train->add_option("--batch-size", tr.batch, "Mini-batch size")->capture_default_str();
  c_train->add_option("--patience", tr.patience, "Early-stopping patience")->capture_default_str();
  c_train->add_option("--lr", tr.lr, "Initial learning rate")->capture_default_str();
  c_train->add_option("--gate", tr.gate, "Threshold gate stored in the model")->capture_default_str();
  c_train->add_option("--report", tr.report, "Write the epoch table here instead of stdout");
  c_train->add_option("--loss-log", tr.loss_log, "Loss CSV path (default <out>.loss.csv)");

  InferOpts inf;
  auto* c_inf = app.add_subcommand("infer", "Run a model over a dataset");
  c_inf->add_option("--model", inf.model, "Model file")->required();
  c_inf->add_option("--data", inf.data, "Dataset")->required();
  c_inf->add_option("--mode", inf.mode, "float | fixed")
      ->check(CLI::IsMember({"float", "fixed"}))
      ->capture_default_str();
  c_inf->add_option("--gate", inf.gate, "Override the model's threshold gate");
  c_inf->add_option("--out", inf.out, "Output CSV (default stdout)");

  QuantizeOpts q;
  auto* c_q = app.add_subcommand("quantize", "Attach a fixed-point parameter plane");
  c_q->add_option("--model", q.model, "Trained model")->required();
  c_q->add_option("--out", q.out, "Output model")->required();
  c_q->add_option("--fm-format", q.fm, "Feature-map format Qm.n")->capture_default_str();
  c_q->add_option("--param-format", q.param, "Parameter format Qm.n")->capture_default_str();
  c_q->add_option("--max-saturation", q.max_saturation, "Allowed fraction of clamped parameters")
      ->capture_default_str();

  ExportOpts ex;
  auto* c_ex = app.add_subcommand("export-params", "Write the quantized parameter plane");
  c_ex->add_option("--model", ex.model, "Quantized model")->required();
  c_ex->add_option("--out", ex.out, "Output file (.flnp)")->required();

  BaselineOpts bl;
  auto* c_bl = app.add_subcommand("baseline", "Classical lifetime estimators");
  c_bl->add_option("--method", bl.method, "cmm | phasor | nlsf")
      ->required()
      ->check(CLI::IsMember({"cmm", "phasor", "nlsf"}));
  c_bl->add_option("--data", bl.data, "Dataset")->required();
  c_bl->add_option("--out", bl.out, "Results CSV")->required();
  c_bl->add_option("--order", bl.order, "NLSF components (1 or 2)")->capture_default_str();
  c_bl->add_option("--tau-init", bl.tau_init, "NLSF initial lifetimes (ns)")->delimiter(',');
  c_bl->add_option("--a-init", bl.a_init, "NLSF initial fraction of the first component")->capture_default_str();
  c_bl->add_option("--window-begin", bl.window_begin, "CMM window start bin");
  c_bl->add_option("--window-end", bl.window_end, "CMM window end bin (exclusive)");

  EvalOpts ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate methods on a synthetic ground-truth image");
  c_ev->add_flag("--gt-image", ev.gt_image, "Use the synthetic ground-truth image");
  c_ev->add_option("--regime", ev.regime, "high | mid | low")
      ->check(CLI::IsMember({"high", "mid", "low"}))
      ->capture_default_str();
  c_ev->add_option("--methods", ev.methods, "Comma list of cmm,phasor,nlsf,flan,flan-ls")->capture_default_str();
  c_ev->add_option("--out", ev.out, "Report CSV")->required();
  c_ev->add_option("--plot-data", ev.plot_data, "Plot data path (default <out>.plot.txt)");
  c_ev->add_option("--model-flan", ev.model_flan, "FLAN model for method flan");
  c_ev->add_option("--model-flan-ls", ev.model_flan_ls, "FLAN+LS model for method flan-ls");
  c_ev->add_option("--mode", ev.mode, "float | fixed inference for models")
      ->check(CLI::IsMember({"float", "fixed"}))
      ->capture_default_str();
  c_ev->add_option("--size", ev.size, "Image height and width")->capture_default_str();
  c_ev->add_option("--seed", ev.seed, "Random seed")->capture_default_str();
  c_ev->add_option("--workers", ev.workers, "Worker threads (0 = available cores)")->capture_default_str();

  BenchOpts bn;
  auto* c_bn = app.add_subcommand("bench", "Time model inference");
  c_bn->add_option("--model", bn.model, "Model file")->required();
  c_bn->add_option("--data", bn.data, "Dataset (default: synthetic high-count set)");
  c_bn->add_option("--batch-sizes", bn.batch_sizes, "Comma list of batch sizes")->capture_default_str();
  c_bn->add_option("--mode", bn.mode, "float | fixed")
      ->check(CLI::IsMember({"float", "fixed"}))
      ->capture_default_str();
  c_bn->add_option("--repetitions", bn.repetitions, "Timed repetitions per batch size")->capture_default_str();
  c_bn->add_option("--size", bn.size, "Synthetic set size")->capture_default_str();
  c_bn->add_option("--seed", bn.seed, "Seed for the synthetic set")->capture_default_str();
  c_bn->add_option("--workers", bn.workers, "Worker threads")->capture_default_str();
  c_bn->add_option("--out", bn.out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth);
    if (c_comp->parsed()) return run_compress(comp);
    if (c_train->parsed()) return run_train(tr);
    if (c_inf->parsed()) return run_infer(inf);
    if (c_q->parsed()) return run_quantize(q);
    if (c_ex->parsed()) return run_export(ex);
    if (c_bl->parsed()) return run_baseline(bl);
    if (c_ev->parsed()) return run_eval(ev);
    if (c_bn->parsed()) return run_bench(bn);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
