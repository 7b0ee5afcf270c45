#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <utility>
#include <vector>

namespace flim {

// TCSPC acquisition geometry and the Gaussian-family IRF parameters.
struct InstrumentConfig {
  int num_bins = 256;
  double bin_width = 0.03906;  // ns
  int irf_center_bin = 14;
  double irf_fwhm = 0.167;     // ns
  int irf_order = 1;
  double background = 0.0;     // photons/bin added to the noiseless curve

  void validate() const;
};

struct DecayComponent {
  double amplitude = 1.0;  // fraction a_i
  double tau = 1.0;        // ns
};

struct DecayParams {
  std::vector<DecayComponent> components;
  double peak_count = 1000.0;

  void validate() const;
};

struct Histogram {
  std::vector<std::uint32_t> counts;
  // Original-bin edges, present only after log-scale merging.
  std::optional<std::vector<int>> bin_edges;
  double bin_width = 0.03906;

  std::size_t size() const { return counts.size(); }
  std::uint64_t total() const;
};

struct LifetimePair {
  double tau_a = 0.0;
  double tau_i = 0.0;

  friend bool operator==(const LifetimePair&, const LifetimePair&) = default;
};

struct LabeledDecay {
  Histogram histogram;
  LifetimePair label;
  DecayParams params;
};

enum class NoiseModel { Poisson, None };

std::vector<double> gen_irf(const InstrumentConfig& cfg);

// Unit-sum copy of gen_irf.
std::vector<double> normalized_irf(const InstrumentConfig& cfg);

std::vector<double> gen_pdf(const DecayParams& params, const InstrumentConfig& cfg);

// Linear convolution truncated to signal.size().
std::vector<double> convolve_truncated(const std::vector<double>& irf,
                                       const std::vector<double>& signal);

// Noiseless expected counts: IRF (unit sum) * PDF, rescaled so the max equals
// peak_count, plus the uniform background.
std::vector<double> expected_counts(const DecayParams& params, const InstrumentConfig& cfg);

Histogram synthesize_decay(const DecayParams& params, const InstrumentConfig& cfg,
                           std::uint64_t seed, NoiseModel noise = NoiseModel::Poisson);

LifetimePair tau_labels(const DecayParams& params);

// Independent stream for record `index` of a run seeded with `base`.
std::mt19937_64 derive_rng(std::uint64_t base, std::uint64_t index);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct DatasetSpec {
  std::size_t size = 1000;
  double mono_fraction = 0.5;
  Range mono_tau{0.1, 5.0};
  Range bi_tau1{0.1, 0.5};
  Range bi_tau2{1.0, 3.0};
  Range bi_amplitude{0.0, 1.0};  // weight of tau1
  Range peak_count{10.0, 5000.0};
  std::uint64_t seed = 1;
  InstrumentConfig instrument;

  void validate() const;
};

// Photon-count brackets used for evaluation.
enum class PhotonRegime { High, Mid, Low };
Range regime_range(PhotonRegime regime);

std::vector<LabeledDecay> gen_dataset(const DatasetSpec& spec);

}  // namespace flim
