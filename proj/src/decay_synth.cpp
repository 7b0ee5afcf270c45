#include "flim/decay_synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "flim/error.hpp"

namespace flim {

void InstrumentConfig::validate() const {
  if (num_bins < 2) throw InvalidArgument("num_bins must be >= 2");
  if (!(bin_width > 0.0)) throw InvalidArgument("bin_width must be > 0");
  if (irf_center_bin < 0 || irf_center_bin >= num_bins)
    throw InvalidArgument("irf_center_bin outside [0, num_bins)");
  if (!(irf_fwhm > 0.0)) throw InvalidArgument("irf_fwhm must be > 0");
  if (irf_order < 1) throw InvalidArgument("irf_order must be >= 1");
  if (!(background >= 0.0)) throw InvalidArgument("background must be >= 0");
}

void DecayParams::validate() const {
  if (components.empty()) throw InvalidArgument("decay needs at least one component");
  double sum = 0.0;
  for (const auto& c : components) {
    if (!(c.amplitude >= 0.0)) throw InvalidArgument("negative amplitude fraction");
    if (!(c.tau > 0.0)) throw InvalidArgument("lifetime must be > 0");
    sum += c.amplitude;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw InvalidArgument("amplitude fractions must sum to 1");
  if (!(peak_count >= 1.0)) throw InvalidArgument("peak photon count must be >= 1");
}

std::uint64_t Histogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

std::vector<double> gen_irf(const InstrumentConfig& cfg) {
  cfg.validate();
  const double fwhm_bins = cfg.irf_fwhm / cfg.bin_width;
  const double two_n = 2.0 * cfg.irf_order;
  const double width_term = 2.0 * std::pow(0.5 * std::log(2.0), 1.0 / two_n) / fwhm_bins;
  std::vector<double> irf(static_cast<std::size_t>(cfg.num_bins));
  for (int t = 0; t < cfg.num_bins; ++t) {
    const double u = std::abs(static_cast<double>(t - cfg.irf_center_bin)) * width_term;
    irf[static_cast<std::size_t>(t)] = std::exp(-2.0 * std::pow(u, two_n));
  }
  return irf;
}

std::vector<double> normalized_irf(const InstrumentConfig& cfg) {
  auto irf = gen_irf(cfg);
  const double sum = std::accumulate(irf.begin(), irf.end(), 0.0);
  for (auto& v : irf) v /= sum;
  return irf;
}

std::vector<double> gen_pdf(const DecayParams& params, const InstrumentConfig& cfg) {
  params.validate();
  cfg.validate();
  std::vector<double> pdf(static_cast<std::size_t>(cfg.num_bins), 0.0);
  for (int t = 0; t < cfg.num_bins; ++t) {
    const double time = t * cfg.bin_width;
    double v = 0.0;
    for (const auto& c : params.components) v += c.amplitude * std::exp(-time / c.tau);
    pdf[static_cast<std::size_t>(t)] = v;
  }
  return pdf;
}

std::vector<double> convolve_truncated(const std::vector<double>& irf,
                                       const std::vector<double>& signal) {
  const std::size_t n = signal.size();
  std::vector<double> out(n, 0.0);
  const std::size_t m = std::min(irf.size(), n);
  for (std::size_t t = 0; t < n; ++t) {
    double acc = 0.0;
    const std::size_t kmax = std::min(t + 1, m);
    for (std::size_t k = 0; k < kmax; ++k) acc += irf[k] * signal[t - k];
    out[t] = acc;
  }
  return out;
}

std::vector<double> expected_counts(const DecayParams& params, const InstrumentConfig& cfg) {
  auto curve = convolve_truncated(normalized_irf(cfg), gen_pdf(params, cfg));
  const double peak = *std::max_element(curve.begin(), curve.end());
  if (!(peak > 0.0)) throw NumericError("degenerate decay: noiseless curve is all zero");
  const double gain = params.peak_count / peak;
  for (auto& v : curve) v = v * gain + cfg.background;
  return curve;
}

std::mt19937_64 derive_rng(std::uint64_t base, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

Histogram synthesize_decay(const DecayParams& params, const InstrumentConfig& cfg,
                           std::uint64_t seed, NoiseModel noise) {
  const auto mean = expected_counts(params, cfg);
  Histogram h;
  h.bin_width = cfg.bin_width;
  h.counts.resize(mean.size());
  if (noise == NoiseModel::None) {
    std::transform(mean.begin(), mean.end(), h.counts.begin(),
                   [](double m) { return static_cast<std::uint32_t>(std::llround(m)); });
    return h;
  }
  auto rng = derive_rng(seed, 0);
  for (std::size_t t = 0; t < mean.size(); ++t) {
    if (mean[t] <= 0.0) {
      h.counts[t] = 0;
      continue;
    }
    std::poisson_distribution<std::uint32_t> draw(mean[t]);
    h.counts[t] = draw(rng);
  }
  return h;
}

LifetimePair tau_labels(const DecayParams& params) {
  params.validate();
  double first = 0.0;
  double second = 0.0;
  for (const auto& c : params.components) {
    first += c.amplitude * c.tau;
    second += c.amplitude * c.tau * c.tau;
  }
  return {first, second / first};
}

void DatasetSpec::validate() const {
  if (size < 1) throw InvalidArgument("dataset size must be >= 1");
  if (!(mono_fraction >= 0.0 && mono_fraction <= 1.0))
    throw InvalidArgument("mono fraction must lie in [0, 1]");
  auto check = [](const Range& r, const char* name, double floor) {
    if (!(r.lo <= r.hi)) throw InvalidArgument(std::string("inverted range: ") + name);
    if (!(r.lo >= floor)) throw InvalidArgument(std::string("range below minimum: ") + name);
  };
  check(mono_tau, "mono tau", 1e-9);
  check(bi_tau1, "bi tau1", 1e-9);
  check(bi_tau2, "bi tau2", 1e-9);
  check(bi_amplitude, "bi amplitude", 0.0);
  if (bi_amplitude.hi > 1.0) throw InvalidArgument("bi amplitude range exceeds 1");
  check(peak_count, "peak count", 1.0);
  instrument.validate();
}

Range regime_range(PhotonRegime regime) {
  switch (regime) {
    case PhotonRegime::High: return {1000.0, 5000.0};
    case PhotonRegime::Mid: return {100.0, 1000.0};
    case PhotonRegime::Low: return {10.0, 100.0};
  }
  return {};
}

namespace {

double draw(std::mt19937_64& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

}  // namespace

std::vector<LabeledDecay> gen_dataset(const DatasetSpec& spec) {
  spec.validate();
  const auto n_mono = static_cast<std::size_t>(
      std::llround(static_cast<double>(spec.size) * spec.mono_fraction));
  std::vector<LabeledDecay> records(spec.size);
  for (std::size_t i = 0; i < spec.size; ++i) {
    auto rng = derive_rng(spec.seed, i);
    DecayParams p;
    if (i < n_mono) {
      p.components = {{1.0, draw(rng, spec.mono_tau)}};
    } else {
      const double tau1 = draw(rng, spec.bi_tau1);
      const double tau2 = draw(rng, spec.bi_tau2);
      const double a = draw(rng, spec.bi_amplitude);
      p.components = {{a, tau1}, {1.0 - a, tau2}};
    }
    p.peak_count = draw(rng, spec.peak_count);
    const std::uint64_t noise_seed = rng();
    records[i].histogram = synthesize_decay(p, spec.instrument, noise_seed);
    records[i].label = tau_labels(p);
    records[i].params = std::move(p);
  }
  auto shuffle_rng = derive_rng(spec.seed, ~std::uint64_t{0});
  std::shuffle(records.begin(), records.end(), shuffle_rng);
  return records;
}

}  // namespace flim
