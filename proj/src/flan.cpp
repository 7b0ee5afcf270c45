#include "flim/flan.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "flim/error.hpp"

namespace flim {

std::string to_string(Variant v) { return v == Variant::Flan ? "flan" : "flan-ls"; }

Variant parse_variant(const std::string& s) {
  if (s == "flan") return Variant::Flan;
  if (s == "flan-ls" || s == "flan_ls") return Variant::FlanLs;
  throw InvalidArgument("unknown variant '" + s + "' (expected flan or flan-ls)");
}

BnParams BnParams::identity(int channels) {
  const auto n = static_cast<std::size_t>(channels);
  BnParams bn;
  bn.gamma.assign(n, 1.0);
  bn.beta.assign(n, 0.0);
  bn.running_mean.assign(n, 0.0);
  bn.running_var.assign(n, 1.0);
  return bn;
}

void BnParams::validate() const {
  const auto n = gamma.size();
  if (beta.size() != n || running_mean.size() != n || running_var.size() != n)
    throw InvalidArgument("batch-norm vectors differ in length");
  if (!(epsilon > 0.0)) throw InvalidArgument("batch-norm epsilon must be > 0");
  for (double v : running_var)
    if (!(v >= 0.0)) throw InvalidArgument("batch-norm variance must be >= 0");
}

FoldedAffine fold_bn(const BnParams& bn) {
  bn.validate();
  FoldedAffine out;
  out.scale.resize(bn.gamma.size());
  out.shift.resize(bn.gamma.size());
  for (std::size_t i = 0; i < bn.gamma.size(); ++i) {
    const double s = bn.gamma[i] / std::sqrt(bn.running_var[i] + bn.epsilon);
    out.scale[i] = s;
    out.shift[i] = bn.beta[i] - s * bn.running_mean[i];
  }
  return out;
}

AdderLayer AdderLayer::conv(int kernel, int in_channels, int out_channels, int stride, bool relu) {
  AdderLayer l;
  l.kind = LayerKind::AdderConv;
  l.kernel = kernel;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.stride = stride;
  l.relu = relu;
  l.weights.assign(static_cast<std::size_t>(kernel) * in_channels * out_channels, 0.0);
  l.scale.assign(static_cast<std::size_t>(out_channels), 1.0);
  l.shift.assign(static_cast<std::size_t>(out_channels), 0.0);
  return l;
}

AdderLayer AdderLayer::dense(int in_features, int out_features, bool relu) {
  auto l = conv(1, in_features, out_features, 1, relu);
  l.kind = LayerKind::AdderDense;
  return l;
}

int AdderLayer::output_length(int input_length) const {
  if (input_length < kernel) return 0;
  return (input_length - kernel) / stride + 1;
}

std::size_t AdderLayer::parameter_count() const {
  return weights.size() + 2 * static_cast<std::size_t>(out_channels);
}

void AdderLayer::validate() const {
  if (kernel < 1 || stride < 1 || in_channels < 1 || out_channels < 1)
    throw InvalidArgument("adder layer dimensions must be >= 1");
  if (kind == LayerKind::AdderDense && (kernel != 1 || stride != 1))
    throw InvalidArgument("dense adder layer must have K = 1, S = 1");
  if (weights.size() != static_cast<std::size_t>(kernel) * in_channels * out_channels)
    throw InvalidArgument("weight tensor does not match K x CH_i x CH_o");
  const auto co = static_cast<std::size_t>(out_channels);
  if (scale.size() != co || shift.size() != co)
    throw InvalidArgument("affine vectors do not match output channels");
  if (bn) {
    bn->validate();
    if (bn->gamma.size() != co) throw InvalidArgument("batch-norm size mismatch");
  }
}

void fold_layer_bn(AdderLayer& layer) {
  if (!layer.bn) return;
  auto folded = fold_bn(*layer.bn);
  layer.scale = std::move(folded.scale);
  layer.shift = std::move(folded.shift);
  layer.bn.reset();
}

FlanWidths default_widths(Variant v) {
  if (v == Variant::Flan) return {16, 16, 20, 32};
  return {8, 8, 8, 12};
}

void NetworkModel::validate() const {
  if (input_length < 1) throw InvalidArgument("input length must be >= 1");
  if (pre_count < 0 || post_count < 0 || head_depth < 1)
    throw InvalidArgument("invalid network layout counts");
  const auto expected = static_cast<std::size_t>(pre_count + 2 + post_count + 2 * head_depth);
  if (layers.size() != expected) throw InvalidArgument("layer count does not match layout");
  for (const auto& l : layers) l.validate();

  int channels = 1;
  int width = input_length;
  auto chain = [&](const AdderLayer& l) {
    if (l.kind == LayerKind::AdderDense && width != 1) {
      channels *= width;
      width = 1;
    }
    if (l.in_channels != channels)
      throw InvalidArgument("layer input channels do not chain");
    width = l.output_length(width);
    if (width < 1) throw InvalidArgument("layer output length is < 1 (no padding)");
    channels = l.out_channels;
  };
  for (int i = 0; i < pre_count; ++i) chain(layers[static_cast<std::size_t>(i)]);
  const int skip_channels = channels;
  const int skip_width = width;
  const auto& ra = layers[residual_a()];
  const auto& rb = layers[residual_b()];
  if (ra.kind != LayerKind::AdderConv || rb.kind != LayerKind::AdderConv)
    throw InvalidArgument("residual block must hold adder convolutions");
  chain(ra);
  chain(rb);
  if (channels != skip_channels || rb.stride != 1 || ra.stride != 1)
    throw InvalidArgument("residual block must preserve channels with stride 1");
  if (rb.relu) throw InvalidArgument("second residual layer applies ReLU after the skip add");
  if ((skip_width - width) % 2 != 0) throw InvalidArgument("residual crop must be symmetric");
  for (int i = 0; i < post_count; ++i) chain(layers[post_begin() + static_cast<std::size_t>(i)]);
  const int trunk_channels = channels;
  const int trunk_width = width;
  for (int h = 0; h < 2; ++h) {
    channels = trunk_channels;
    width = trunk_width;
    for (int i = 0; i < head_depth; ++i) {
      const auto& l = layers[head_begin(h) + static_cast<std::size_t>(i)];
      if (l.kind != LayerKind::AdderDense) throw InvalidArgument("heads hold dense layers");
      chain(l);
    }
    const auto& last = layers[head_begin(h) + static_cast<std::size_t>(head_depth - 1)];
    if (channels != 1 || width != 1 || last.relu)
      throw InvalidArgument("each head must end in one linear scalar output");
  }
}

std::size_t NetworkModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

bool NetworkModel::has_unfolded_bn() const {
  return std::any_of(layers.begin(), layers.end(), [](const AdderLayer& l) { return l.bn.has_value(); });
}

bool NetworkModel::is_quantized() const {
  return fm_format.has_value() &&
         std::all_of(layers.begin(), layers.end(),
                     [](const AdderLayer& l) { return l.quantized.has_value(); });
}

int NetworkModel::strided_layer_count() const {
  return static_cast<int>(std::count_if(layers.begin(), layers.end(),
                                        [](const AdderLayer& l) { return l.stride > 1; }));
}

namespace {

void init_layer(AdderLayer& l, std::mt19937_64& rng, bool first, bool batch_norm) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& w : l.weights) w = first ? unit(rng) : normal(rng);
  if (batch_norm) l.bn = BnParams::identity(l.out_channels);
}

}  // namespace

NetworkModel build_flan(Variant variant) { return build_flan(variant, default_widths(variant)); }

NetworkModel build_flan(Variant variant, const FlanWidths& w, std::uint64_t init_seed) {
  NetworkModel m;
  m.variant = variant;
  int trunk_width = 0;
  if (variant == Variant::Flan) {
    m.input_length = 256;
    m.layers.push_back(AdderLayer::conv(7, 1, w.stem, 2, true));
    m.layers.push_back(AdderLayer::conv(5, w.stem, w.mid, 2, true));
    m.pre_count = 2;
    m.layers.push_back(AdderLayer::conv(3, w.mid, w.mid, 1, true));
    m.layers.push_back(AdderLayer::conv(3, w.mid, w.mid, 1, false));
    m.layers.push_back(AdderLayer::conv(3, w.mid, w.deep, 2, true));
    m.layers.push_back(AdderLayer::conv(3, w.deep, w.deep, 2, true));
    m.post_count = 2;
  } else {
    m.input_length = 80;
    m.layers.push_back(AdderLayer::conv(7, 1, w.stem, 2, true));
    m.pre_count = 1;
    m.layers.push_back(AdderLayer::conv(3, w.stem, w.stem, 1, true));
    m.layers.push_back(AdderLayer::conv(3, w.stem, w.stem, 1, false));
    m.layers.push_back(AdderLayer::conv(3, w.stem, w.deep, 2, true));
    m.post_count = 1;
  }
  int width = m.input_length;
  for (const auto& l : m.layers) width = l.output_length(width);
  trunk_width = width;
  const int flat = m.layers.back().out_channels * trunk_width;
  m.head_depth = 2;
  for (int h = 0; h < 2; ++h) {
    m.layers.push_back(AdderLayer::dense(flat, w.head, true));
    m.layers.push_back(AdderLayer::dense(w.head, 1, false));
  }
  std::mt19937_64 rng(init_seed);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const bool output_layer = m.layers[i].out_channels == 1 && m.layers[i].kind == LayerKind::AdderDense;
    init_layer(m.layers[i], rng, i == 0, !output_layer);
  }
  m.validate();
  return m;
}

void fold_model_bn(NetworkModel& model) {
  for (auto& l : model.layers) fold_layer_bn(l);
}

void snap_to_binary32(NetworkModel& model) {
  auto snap = [](std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  for (auto& l : model.layers) {
    snap(l.weights);
    snap(l.scale);
    snap(l.shift);
    if (l.bn) {
      snap(l.bn->gamma);
      snap(l.bn->beta);
      snap(l.bn->running_mean);
      snap(l.bn->running_var);
    }
  }
}

GateDecision threshold_gate(const Histogram& h, std::uint32_t threshold) {
  return h.total() > threshold ? GateDecision::Pass : GateDecision::Background;
}

std::vector<double> normalize_input(const Histogram& h) {
  std::vector<double> out(h.counts.size(), 0.0);
  if (h.counts.empty()) return out;
  const auto peak = *std::max_element(h.counts.begin(), h.counts.end());
  if (peak == 0) return out;
  const double inv = 1.0 / static_cast<double>(peak);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = h.counts[i] * inv;
  return out;
}

FeatureMap adder_accumulate(const FeatureMap& input, const AdderLayer& layer) {
  if (input.channels != layer.in_channels)
    throw InvalidArgument("adder layer expects " + std::to_string(layer.in_channels) +
                          " input channels, got " + std::to_string(input.channels));
  const int wo_count = layer.output_length(input.width);
  if (wo_count < 1) throw InvalidArgument("input narrower than the adder kernel");
  FeatureMap out(layer.out_channels, wo_count);
  for (int co = 0; co < layer.out_channels; ++co) {
    for (int wo = 0; wo < wo_count; ++wo) {
      double acc = 0.0;
      for (int ci = 0; ci < layer.in_channels; ++ci) {
        const double* x = &input.data[static_cast<std::size_t>(ci) * input.width +
                                      static_cast<std::size_t>(wo) * layer.stride];
        for (int k = 0; k < layer.kernel; ++k)
          acc += std::abs(x[k] - layer.weights[layer.weight_index(k, ci, co)]);
      }
      out.at(co, wo) = -acc;
    }
  }
  return out;
}

FeatureMap adder_conv_forward(const FeatureMap& input, const AdderLayer& layer) {
  if (layer.bn) throw InvalidArgument("layer carries unfolded batch-norm; fold before inference");
  auto out = adder_accumulate(input, layer);
  for (int co = 0; co < out.channels; ++co) {
    const double s = layer.scale[static_cast<std::size_t>(co)];
    const double b = layer.shift[static_cast<std::size_t>(co)];
    for (int w = 0; w < out.width; ++w) {
      double v = s * out.at(co, w) + b;
      if (layer.relu && v < 0.0) v = 0.0;
      out.at(co, w) = v;
    }
  }
  return out;
}

FeatureMap as_dense_input(FeatureMap fm) {
  fm.channels *= fm.width;
  fm.width = 1;
  return fm;
}

std::pair<int, int> skip_crop(int skip_width, int branch_width) {
  const int offset = (skip_width - branch_width) / 2;
  return {offset, branch_width};
}

void add_cropped_skip(FeatureMap& branch, const FeatureMap& skip) {
  if (branch.channels != skip.channels || skip.width < branch.width)
    throw InvalidArgument("residual shapes do not match");
  const int offset = skip_crop(skip.width, branch.width).first;
  for (int c = 0; c < branch.channels; ++c)
    for (int w = 0; w < branch.width; ++w) branch.at(c, w) += skip.at(c, w + offset);
}

namespace {

FeatureMap run_layer(const FeatureMap& in, const AdderLayer& layer) {
  if (layer.kind == LayerKind::AdderDense && in.width != 1)
    return adder_conv_forward(as_dense_input(in), layer);
  return adder_conv_forward(in, layer);
}

void check_input_length(const NetworkModel& model, std::size_t length) {
  if (length != static_cast<std::size_t>(model.input_length))
    throw FormatError("histogram has " + std::to_string(length) + " bins but the " +
                      to_string(model.variant) + " model expects " +
                      std::to_string(model.input_length));
}

}  // namespace

LifetimePair forward_normalized(const NetworkModel& model, const std::vector<double>& input) {
  check_input_length(model, input.size());
  FeatureMap x(1, model.input_length);
  x.data = input;
  for (int i = 0; i < model.pre_count; ++i) x = run_layer(x, model.layers[static_cast<std::size_t>(i)]);
  auto branch = run_layer(run_layer(x, model.layers[model.residual_a()]), model.layers[model.residual_b()]);
  add_cropped_skip(branch, x);
  for (auto& v : branch.data) v = std::max(v, 0.0);
  x = std::move(branch);
  for (int i = 0; i < model.post_count; ++i)
    x = run_layer(x, model.layers[model.post_begin() + static_cast<std::size_t>(i)]);
  double out[2];
  for (int h = 0; h < 2; ++h) {
    FeatureMap y = x;
    for (int i = 0; i < model.head_depth; ++i)
      y = run_layer(y, model.layers[model.head_begin(h) + static_cast<std::size_t>(i)]);
    out[h] = y.data.at(0);
  }
  return {out[0], out[1]};
}

LifetimePair forward(const NetworkModel& model, const Histogram& h, bool apply_gate) {
  check_input_length(model, h.counts.size());
  if (apply_gate && threshold_gate(h, model.gate_threshold) == GateDecision::Background)
    return {0.0, 0.0};
  return forward_normalized(model, normalize_input(h));
}

namespace {

using Wide = __int128;

Wide round_shift_right_wide(Wide value, int shift) {
  if (shift <= 0) return value * (Wide{1} << -shift);
  const Wide half = Wide{1} << (shift - 1);
  if (value >= 0) return (value + half) >> shift;
  return -((-value + half) >> shift);
}

std::int64_t narrow_wide(Wide v, const QFormat& fmt, SaturationCounter* stats) {
  constexpr Wide kMax = std::numeric_limits<std::int64_t>::max();
  if (v > kMax) v = kMax;
  if (v < -kMax) v = -kMax;
  return narrow(static_cast<std::int64_t>(v), fmt, stats);
}

FixedFeatureMap run_layer_fixed(FixedFeatureMap in, const AdderLayer& layer, const QFormat& fm,
                                SaturationCounter* stats) {
  if (layer.kind == LayerKind::AdderDense && in.width != 1) {
    in.channels *= in.width;
    in.width = 1;
  }
  return adder_conv_forward_fixed(in, layer, fm, stats);
}

}  // namespace

FixedFeatureMap adder_conv_forward_fixed(const FixedFeatureMap& input, const AdderLayer& layer,
                                         const QFormat& fm, SaturationCounter* stats) {
  if (!layer.quantized) throw InvalidArgument("layer has no quantized parameter plane");
  if (input.channels != layer.in_channels) throw InvalidArgument("fixed adder channel mismatch");
  const auto& q = *layer.quantized;
  if (!q.scale_exponent.empty() && q.scale_exponent.size() != static_cast<std::size_t>(layer.out_channels))
    throw InvalidArgument("scale exponent count does not match output channels");
  const int wo_count = layer.output_length(input.width);
  if (wo_count < 1) throw InvalidArgument("input narrower than the adder kernel");
  // Align activations and weights to a common fraction length before |x - w|.
  const int common = std::max(fm.fraction_bits, q.param_format.fraction_bits);
  const int x_shift = common - fm.fraction_bits;
  const int w_shift = common - q.param_format.fraction_bits;

  FixedFeatureMap out;
  out.channels = layer.out_channels;
  out.width = wo_count;
  out.data.assign(static_cast<std::size_t>(out.channels) * wo_count, 0);
  for (int co = 0; co < layer.out_channels; ++co) {
    const int e = q.exponent(co);
    const Wide scale = q.scale[static_cast<std::size_t>(co)];
    const Wide shift = Wide{q.shift[static_cast<std::size_t>(co)]} * (Wide{1} << (common + e));
    // scale * acc carries (param + e + common) fraction bits; narrow once back to fm.
    const int out_shift = q.param_format.fraction_bits + e + common - fm.fraction_bits;
    for (int wo = 0; wo < wo_count; ++wo) {
      std::int64_t acc = 0;
      for (int ci = 0; ci < layer.in_channels; ++ci) {
        const std::int64_t* x = &input.data[static_cast<std::size_t>(ci) * input.width +
                                            static_cast<std::size_t>(wo) * layer.stride];
        for (int k = 0; k < layer.kernel; ++k) {
          const std::int64_t xv = x[k] * (std::int64_t{1} << x_shift);
          const std::int64_t wv = q.weights[layer.weight_index(k, ci, co)] * (std::int64_t{1} << w_shift);
          acc += xv > wv ? xv - wv : wv - xv;
        }
      }
      const Wide y = scale * Wide{-acc} + shift;
      std::int64_t word = narrow_wide(round_shift_right_wide(y, out_shift), fm, stats);
      if (layer.relu && word < 0) word = 0;
      out.data[static_cast<std::size_t>(co) * wo_count + wo] = word;
    }
  }
  return out;
}

LifetimePair forward_fixed(const NetworkModel& model, const Histogram& h, const QFormat& fm,
                           bool apply_gate, SaturationCounter* stats) {
  check_input_length(model, h.counts.size());
  if (apply_gate && threshold_gate(h, model.gate_threshold) == GateDecision::Background)
    return {0.0, 0.0};
  if (!model.is_quantized()) throw InvalidArgument("model has no quantized parameter plane");
  FixedFeatureMap x;
  x.channels = 1;
  x.width = model.input_length;
  for (double v : normalize_input(h)) x.data.push_back(encode(v, fm, stats));
  for (int i = 0; i < model.pre_count; ++i)
    x = run_layer_fixed(std::move(x), model.layers[static_cast<std::size_t>(i)], fm, stats);
  auto branch = run_layer_fixed(run_layer_fixed(x, model.layers[model.residual_a()], fm, stats),
                                model.layers[model.residual_b()], fm, stats);
  const int offset = skip_crop(x.width, branch.width).first;
  for (int c = 0; c < branch.channels; ++c) {
    for (int w = 0; w < branch.width; ++w) {
      auto& v = branch.data[static_cast<std::size_t>(c) * branch.width + w];
      const auto s = x.data[static_cast<std::size_t>(c) * x.width + w + offset];
      v = std::max<std::int64_t>(narrow(v + s, fm, stats), 0);
    }
  }
  x = std::move(branch);
  for (int i = 0; i < model.post_count; ++i)
    x = run_layer_fixed(std::move(x), model.layers[model.post_begin() + static_cast<std::size_t>(i)], fm, stats);
  double out[2];
  for (int hd = 0; hd < 2; ++hd) {
    FixedFeatureMap y = x;
    for (int i = 0; i < model.head_depth; ++i)
      y = run_layer_fixed(std::move(y), model.layers[model.head_begin(hd) + static_cast<std::size_t>(i)], fm, stats);
    out[hd] = decode(y.data.at(0), fm);
  }
  return {out[0], out[1]};
}

LifetimePair forward_fixed(const NetworkModel& model, const Histogram& h, bool apply_gate) {
  if (!model.fm_format) throw InvalidArgument("model has no quantized parameter plane");
  return forward_fixed(model, h, *model.fm_format, apply_gate, nullptr);
}

}  // namespace flim
