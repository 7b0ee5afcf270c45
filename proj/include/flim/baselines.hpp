#pragma once

#include <optional>

#include "flim/decay_synth.hpp"

namespace flim {

// Half-open range of original bins [begin, end).
struct BinWindow {
  int begin = 0;
  int end = 0;
};

struct CmmOptions {
  // Defaults to the whole histogram.
  std::optional<BinWindow> window;
  // IRF centroid in bins; defaults to the centroid of the configured IRF.
  std::optional<double> irf_centroid;
  // Adds half a bin: counts in bin t were collected over [t, t+1).
  bool bin_center_correction = true;
};

// Centre-of-mass lifetime in ns, clamped at zero.
double cmm_estimate(const Histogram& h, const InstrumentConfig& cfg, const CmmOptions& opts = {});

// Centroid of the configured IRF in bins.
double irf_centroid_bins(const InstrumentConfig& cfg);

struct PhasorPoint {
  double g = 0.0;
  double s = 0.0;
};

// Angular frequency 2*pi / (num_bins * bin_width), rad/ns.
double phasor_omega(const Histogram& h, const InstrumentConfig& cfg);

PhasorPoint phasor_transform(const Histogram& h, const InstrumentConfig& cfg, int harmonic = 1);

// Phasor of the configured IRF over cfg.num_bins bins.
PhasorPoint irf_phasor(const InstrumentConfig& cfg);

// Removes the instrument response: measured / reference as complex numbers.
PhasorPoint calibrate_phasor(const PhasorPoint& measured, const PhasorPoint& reference);

// Mono-exponential inversion s / (g * omega).
double phasor_lifetime(const PhasorPoint& p, const InstrumentConfig& cfg);

struct NlsfOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;
  double min_photons = 50.0;
  double lambda_init = 1e-3;
  double lambda_factor = 10.0;
};

struct FitResult {
  DecayParams params;  // peak_count holds the fitted amplitude A
  double residual_norm = 0.0;
  double initial_residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  LifetimePair lifetimes() const { return tau_labels(params); }
};

DecayParams default_nlsf_init(int model_order);

// Levenberg-Marquardt fit of A * (IRF * p)(t) to the counts. Throws
// InvalidArgument for fewer than opts.min_photons photons.
FitResult nlsf_fit(const Histogram& h, const InstrumentConfig& cfg, int model_order,
                   const std::optional<DecayParams>& init = std::nullopt, const NlsfOptions& opts = {});

}  // namespace flim
