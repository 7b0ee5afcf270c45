#include "flim/baselines.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "flim/error.hpp"

namespace flim {

namespace {

void require_uncompressed(const Histogram& h, const char* what) {
  if (h.bin_edges) throw InvalidArgument(std::string(what) + " expects an uncompressed histogram");
  if (h.counts.empty()) throw InvalidArgument(std::string(what) + ": empty histogram");
}

}  // namespace

double irf_centroid_bins(const InstrumentConfig& cfg) {
  const auto irf = normalized_irf(cfg);
  double m = 0.0;
  for (std::size_t t = 0; t < irf.size(); ++t) m += static_cast<double>(t) * irf[t];
  return m;
}

double cmm_estimate(const Histogram& h, const InstrumentConfig& cfg, const CmmOptions& opts) {
  require_uncompressed(h, "CMM");
  const int n = static_cast<int>(h.counts.size());
  const BinWindow w = opts.window.value_or(BinWindow{0, n});
  if (w.begin < 0 || w.end > n || w.begin >= w.end) throw InvalidArgument("CMM: empty or out-of-range window");
  double sum = 0.0;
  double moment = 0.0;
  for (int t = w.begin; t < w.end; ++t) {
    const double c = h.counts[static_cast<std::size_t>(t)];
    sum += c;
    moment += c * (t - w.begin);
  }
  if (!(sum > 0.0)) throw InvalidArgument("CMM: no photons in the window");
  double centroid = moment / sum;
  if (opts.bin_center_correction) centroid += 0.5;
  const double irf_ref = opts.irf_centroid.value_or(irf_centroid_bins(cfg)) - w.begin;
  return std::max(h.bin_width * (centroid - std::max(irf_ref, 0.0)), 0.0);
}

double phasor_omega(const Histogram& h, const InstrumentConfig& cfg) {
  (void)cfg;
  return 2.0 * std::numbers::pi / (static_cast<double>(h.counts.size()) * h.bin_width);
}

PhasorPoint phasor_transform(const Histogram& h, const InstrumentConfig& cfg, int harmonic) {
  require_uncompressed(h, "phasor");
  if (harmonic < 1) throw InvalidArgument("phasor harmonic must be >= 1");
  const double omega = phasor_omega(h, cfg) * harmonic;
  double sum = 0.0;
  double gc = 0.0;
  double sc = 0.0;
  for (std::size_t t = 0; t < h.counts.size(); ++t) {
    const double c = h.counts[t];
    const double phase = omega * static_cast<double>(t) * h.bin_width;
    sum += c;
    gc += c * std::cos(phase);
    sc += c * std::sin(phase);
  }
  if (!(sum > 0.0)) throw InvalidArgument("phasor: zero photons");
  return {gc / sum, sc / sum};
}

PhasorPoint irf_phasor(const InstrumentConfig& cfg) {
  cfg.validate();
  const auto irf = normalized_irf(cfg);
  const double omega = 2.0 * std::numbers::pi / static_cast<double>(irf.size());
  double g = 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t < irf.size(); ++t) {
    g += irf[t] * std::cos(omega * static_cast<double>(t));
    s += irf[t] * std::sin(omega * static_cast<double>(t));
  }
  return {g, s};
}

PhasorPoint calibrate_phasor(const PhasorPoint& measured, const PhasorPoint& reference) {
  const std::complex<double> ref(reference.g, reference.s);
  if (std::abs(ref) == 0.0) throw InvalidArgument("phasor calibration reference is zero");
  const auto c = std::complex<double>(measured.g, measured.s) / ref;
  return {c.real(), c.imag()};
}

double phasor_lifetime(const PhasorPoint& p, const InstrumentConfig& cfg) {
  if (!(p.g > 0.0)) throw InvalidArgument("phasor lifetime needs g > 0");
  Histogram ref;
  ref.counts.resize(static_cast<std::size_t>(cfg.num_bins));
  ref.bin_width = cfg.bin_width;
  return p.s / (p.g * phasor_omega(ref, cfg));
}

DecayParams default_nlsf_init(int model_order) {
  DecayParams p;
  if (model_order == 1) {
    p.components = {{1.0, 1.0}};
  } else if (model_order == 2) {
    p.components = {{0.5, 0.3}, {0.5, 2.0}};
  } else {
    throw InvalidArgument("model order must be 1 or 2");
  }
  return p;
}

namespace {

constexpr double kLogTauMin = -9.0;  // ~0.1 ps
constexpr double kLogTauMax = 7.0;   // ~1 us

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

struct ConvModel {
  std::vector<double> irf;        // unit sum
  std::vector<std::size_t> support;
  double bin_width = 0.0;
  double background = 0.0;
  int n = 0;

  std::vector<double> convolve(const std::vector<double>& s) const {
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::size_t j : support) {
      const double w = irf[j];
      for (std::size_t t = j; t < static_cast<std::size_t>(n); ++t) out[t] += w * s[t - j];
    }
    return out;
  }
};

// theta = [A, log tau_1, (log tau_2, u)]; a_1 = sigmoid(u).
struct Evaluation {
  std::vector<double> model;
  Eigen::MatrixXd jac;
};

Evaluation evaluate(const ConvModel& cm, const Eigen::VectorXd& theta, int order) {
  const int n = cm.n;
  const double amp = theta[0];
  std::vector<double> taus{std::exp(theta[1])};
  std::vector<double> weights{1.0};
  if (order == 2) {
    taus.push_back(std::exp(theta[2]));
    const double a = sigmoid(theta[3]);
    weights = {a, 1.0 - a};
  }
  Evaluation ev;
  ev.model.assign(static_cast<std::size_t>(n), cm.background);
  ev.jac = Eigen::MatrixXd::Zero(n, theta.size());
  std::vector<std::vector<double>> conv_e;
  for (std::size_t i = 0; i < taus.size(); ++i) {
    std::vector<double> e(static_cast<std::size_t>(n));
    std::vector<double> de(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
      const double x = t * cm.bin_width / taus[i];
      e[static_cast<std::size_t>(t)] = std::exp(-x);
      de[static_cast<std::size_t>(t)] = e[static_cast<std::size_t>(t)] * x;  // d/dlog tau
    }
    auto ce = cm.convolve(e);
    const auto cde = cm.convolve(de);
    const int col = i == 0 ? 1 : 2;
    for (int t = 0; t < n; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      ev.model[ti] += amp * weights[i] * ce[ti];
      ev.jac(t, 0) += weights[i] * ce[ti];
      ev.jac(t, col) = amp * weights[i] * cde[ti];
    }
    conv_e.push_back(std::move(ce));
  }
  if (order == 2) {
    const double a = weights[0];
    for (int t = 0; t < n; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      ev.jac(t, 3) = amp * a * (1.0 - a) * (conv_e[0][ti] - conv_e[1][ti]);
    }
  }
  return ev;
}

double sum_sq(const std::vector<double>& model, const std::vector<double>& data) {
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double r = data[i] - model[i];
    s += r * r;
  }
  return s;
}

void clamp_theta(Eigen::VectorXd& theta, int order) {
  theta[1] = std::clamp(theta[1], kLogTauMin, kLogTauMax);
  if (order == 2) {
    theta[2] = std::clamp(theta[2], kLogTauMin, kLogTauMax);
    theta[3] = std::clamp(theta[3], -40.0, 40.0);
  }
}

DecayParams to_params(const Eigen::VectorXd& theta, int order) {
  DecayParams p;
  p.peak_count = theta[0];
  if (order == 1) {
    p.components = {{1.0, std::exp(theta[1])}};
  } else {
    const double a = sigmoid(theta[3]);
    p.components = {{a, std::exp(theta[1])}, {1.0 - a, std::exp(theta[2])}};
    if (p.components[0].tau > p.components[1].tau) std::swap(p.components[0], p.components[1]);
  }
  return p;
}

}  // namespace

FitResult nlsf_fit(const Histogram& h, const InstrumentConfig& cfg, int model_order,
                   const std::optional<DecayParams>& init, const NlsfOptions& opts) {
  require_uncompressed(h, "NLSF");
  if (model_order != 1 && model_order != 2) throw InvalidArgument("model order must be 1 or 2");
  if (static_cast<double>(h.total()) < opts.min_photons)
    throw InvalidArgument("NLSF refused: " + std::to_string(h.total()) + " photons, need at least " +
                          std::to_string(static_cast<long long>(opts.min_photons)));
  if (opts.max_iterations < 1) throw InvalidArgument("max iterations must be >= 1");

  InstrumentConfig icfg = cfg;
  icfg.num_bins = static_cast<int>(h.counts.size());
  icfg.bin_width = h.bin_width;
  ConvModel cm;
  cm.irf = normalized_irf(icfg);
  cm.n = icfg.num_bins;
  cm.bin_width = h.bin_width;
  cm.background = cfg.background;
  const double irf_max = *std::max_element(cm.irf.begin(), cm.irf.end());
  for (std::size_t j = 0; j < cm.irf.size(); ++j)
    if (cm.irf[j] > 1e-16 * irf_max) cm.support.push_back(j);

  const std::vector<double> data(h.counts.begin(), h.counts.end());
  const DecayParams start = init.value_or(default_nlsf_init(model_order));
  if (static_cast<int>(start.components.size()) != model_order)
    throw InvalidArgument("initial guess has the wrong number of components");
  for (const auto& c : start.components)
    if (!(c.tau > 0.0)) throw InvalidArgument("initial lifetimes must be > 0");

  const int np = model_order == 1 ? 2 : 4;
  Eigen::VectorXd theta(np);
  theta[0] = 1.0;
  theta[1] = std::log(start.components[0].tau);
  if (model_order == 2) {
    theta[2] = std::log(start.components[1].tau);
    const double sum = start.components[0].amplitude + start.components[1].amplitude;
    const double a = std::clamp(sum > 0.0 ? start.components[0].amplitude / sum : 0.5, 1e-6, 1.0 - 1e-6);
    theta[3] = std::log(a / (1.0 - a));
  }
  clamp_theta(theta, model_order);
  {
    // Linear least squares for the amplitude at the initial shape.
    const auto ev = evaluate(cm, theta, model_order);
    double num = 0.0;
    double den = 0.0;
    for (int t = 0; t < cm.n; ++t) {
      const double m = ev.jac(t, 0);
      num += (data[static_cast<std::size_t>(t)] - cm.background) * m;
      den += m * m;
    }
    theta[0] = den > 0.0 ? num / den : 1.0;
  }

  auto ev = evaluate(cm, theta, model_order);
  double cost = sum_sq(ev.model, data);
  FitResult result;
  result.initial_residual_norm = std::sqrt(cost);
  double lambda = opts.lambda_init;
  const double scale = std::max(1.0, [&] {
    double s = 0.0;
    for (double d : data) s += d * d;
    return s;
  }());

  for (int it = 1; it <= opts.max_iterations; ++it) {
    result.iterations = it;
    Eigen::VectorXd r(cm.n);
    for (int t = 0; t < cm.n; ++t) r[t] = data[static_cast<std::size_t>(t)] - ev.model[static_cast<std::size_t>(t)];
    const Eigen::MatrixXd jtj = ev.jac.transpose() * ev.jac;
    const Eigen::VectorXd jtr = ev.jac.transpose() * r;
    if (cost <= 1e-28 * scale || jtr.lpNorm<Eigen::Infinity>() <= 1e-14 * scale) {
      result.converged = true;
      break;
    }
    bool accepted = false;
    while (!accepted && lambda < 1e16) {
      Eigen::MatrixXd a = jtj;
      for (int i = 0; i < np; ++i) a(i, i) += lambda * std::max(jtj(i, i), 1e-12);
      const Eigen::VectorXd step = a.ldlt().solve(jtr);
      Eigen::VectorXd trial = theta + step;
      clamp_theta(trial, model_order);
      if (!step.allFinite()) {
        lambda *= opts.lambda_factor;
        continue;
      }
      auto trial_ev = evaluate(cm, trial, model_order);
      const double trial_cost = sum_sq(trial_ev.model, data);
      if (std::isfinite(trial_cost) && trial_cost < cost) {
        const double rel = (std::sqrt(cost) - std::sqrt(trial_cost)) / std::sqrt(cost);
        theta = trial;
        ev = std::move(trial_ev);
        cost = trial_cost;
        lambda = std::max(lambda / opts.lambda_factor, 1e-12);
        accepted = true;
        if (rel < opts.tolerance) result.converged = true;
      } else {
        lambda *= opts.lambda_factor;
      }
    }
    // No descent direction left at any damping: a stationary point.
    if (!accepted) result.converged = true;
    if (result.converged) break;
  }
  result.params = to_params(theta, model_order);
  result.residual_norm = std::sqrt(cost);
  return result;
}

}  // namespace flim
