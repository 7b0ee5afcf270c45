#include <doctest.h>

#include <cmath>
#include <numbers>

#include "flim/baselines.hpp"
#include "flim/error.hpp"

using namespace flim;

namespace {

DecayParams mono(double tau, double np = 1000.0) {
  DecayParams p;
  p.components = {{1.0, tau}};
  p.peak_count = np;
  return p;
}

// Noise-free exponential without IRF, scaled to large integer counts.
Histogram ideal_exp(double tau_ns, int bins, double bw, double scale = 1e7) {
  Histogram h;
  h.bin_width = bw;
  for (int t = 0; t < bins; ++t) h.counts.push_back(static_cast<std::uint32_t>(std::llround(scale * std::exp(-t * bw / tau_ns))));
  return h;
}

}  // namespace

TEST_CASE("CMM on an IRF-free geometric decay") {
  InstrumentConfig cfg;
  cfg.num_bins = 2048;
  const auto h = ideal_exp(25 * cfg.bin_width, 2048, cfg.bin_width);
  CmmOptions o;
  o.irf_centroid = 0.0;
  CHECK(std::abs(cmm_estimate(h, cfg, o) - 25 * cfg.bin_width) <= 0.5 * cfg.bin_width);
}

TEST_CASE("CMM is invariant to positive scaling") {
  InstrumentConfig cfg;
  const auto h = synthesize_decay(mono(1.3), cfg, 3);
  Histogram h3 = h;
  for (auto& c : h3.counts) c *= 3;
  CHECK(cmm_estimate(h, cfg) == cmm_estimate(h3, cfg));
}

TEST_CASE("CMM Monte Carlo at high counts") {
  InstrumentConfig cfg;
  double sum = 0.0;
  for (int s = 0; s < 100; ++s) sum += cmm_estimate(synthesize_decay(mono(2.0, 5000.0), cfg, static_cast<std::uint64_t>(s)), cfg);
  const double mean = sum / 100.0;
  CHECK(mean >= 1.9);
  CHECK(mean <= 2.1);
}

TEST_CASE("CMM errors and options") {
  InstrumentConfig cfg;
  Histogram z;
  z.counts.assign(256, 0);
  CHECK_THROWS_AS(cmm_estimate(z, cfg), InvalidArgument);
  const auto h = synthesize_decay(mono(1.0), cfg, 1);
  CmmOptions o;
  o.window = BinWindow{10, 10};
  CHECK_THROWS_AS(cmm_estimate(h, cfg, o), InvalidArgument);
  o.window = BinWindow{0, 300};
  CHECK_THROWS_AS(cmm_estimate(h, cfg, o), InvalidArgument);
  o.window = BinWindow{20, 256};
  CHECK(cmm_estimate(h, cfg, o) >= 0.0);
  CHECK(irf_centroid_bins(cfg) == doctest::Approx(14.0).epsilon(1e-6));
}

TEST_CASE("phasor examples") {
  InstrumentConfig cfg;
  Histogram impulse;
  impulse.counts.assign(256, 0);
  impulse.counts[0] = 100;
  const auto p = phasor_transform(impulse, cfg);
  CHECK(p.g == doctest::Approx(1.0));
  CHECK(p.s == doctest::Approx(0.0));
  CHECK(phasor_lifetime(p, cfg) == doctest::Approx(0.0));

  Histogram flat;
  flat.counts.assign(256, 7);
  const auto f = phasor_transform(flat, cfg);
  CHECK(std::abs(f.g) < 1e-12);
  CHECK(std::abs(f.s) < 1e-12);

  const double omega = 2.0 * std::numbers::pi / (256 * cfg.bin_width);
  const auto q = phasor_transform(ideal_exp(1.0 / omega, 256, cfg.bin_width), cfg);
  CHECK(std::abs(q.g - 0.5) < 0.01);
  CHECK(std::abs(q.s - 0.5) < 0.01);
  CHECK(phasor_lifetime({0.5, 0.5}, cfg) == doctest::Approx(1.0 / omega));

  const double t2 = phasor_lifetime(phasor_transform(ideal_exp(2.0, 256, cfg.bin_width), cfg), cfg);
  CHECK(t2 >= 1.95);
  CHECK(t2 <= 2.05);
}

TEST_CASE("phasor IRF calibration") {
  InstrumentConfig cfg;
  const auto ref = irf_phasor(cfg);
  // IRF centred at bin 14: phase lag of 14 bins at the fundamental.
  CHECK(std::atan2(ref.s, ref.g) == doctest::Approx(2.0 * std::numbers::pi * 14.0 / 256.0).epsilon(1e-3));
  const auto id = calibrate_phasor(ref, ref);
  CHECK(id.g == doctest::Approx(1.0));
  CHECK(std::abs(id.s) < 1e-12);
  CHECK_THROWS_AS(calibrate_phasor(ref, {0.0, 0.0}), InvalidArgument);

  auto noiseless = mono(1.5, 1e6);
  const auto h = synthesize_decay(noiseless, cfg, 1, NoiseModel::None);
  const double raw = phasor_lifetime(phasor_transform(h, cfg), cfg);
  const double cal = phasor_lifetime(calibrate_phasor(phasor_transform(h, cfg), ref), cfg);
  CHECK(std::abs(cal - 1.5) < 0.05);
  CHECK(std::abs(raw - 1.5) > 0.3);
}

TEST_CASE("phasor properties") {
  InstrumentConfig cfg;
  for (double tau : {0.1, 0.3, 0.7, 1.0, 2.0, 3.5, 5.0}) {
    const auto p = phasor_transform(ideal_exp(tau, 256, cfg.bin_width), cfg);
    CHECK(std::abs(std::hypot(p.g - 0.5, p.s) - 0.5) < 0.01);
  }
  for (int s = 0; s < 50; ++s) {
    const auto p = phasor_transform(synthesize_decay(mono(0.2 + 0.1 * s, 50.0), cfg, static_cast<std::uint64_t>(s)), cfg);
    CHECK(p.g * p.g + p.s * p.s <= 1.0 + 1e-12);
  }
  CHECK_THROWS_AS(phasor_lifetime({0.0, 0.3}, cfg), InvalidArgument);
  Histogram z;
  z.counts.assign(256, 0);
  CHECK_THROWS_AS(phasor_transform(z, cfg), InvalidArgument);
  CHECK_THROWS_AS(phasor_transform(ideal_exp(1.0, 256, cfg.bin_width), cfg, 0), InvalidArgument);
}

TEST_CASE("NLSF on noise-free data") {
  InstrumentConfig cfg;
  const auto h = synthesize_decay(mono(1.5, 5000.0), cfg, 0, NoiseModel::None);
  const auto r = nlsf_fit(h, cfg, 1);
  CHECK(r.converged);
  CHECK(std::abs(r.params.components[0].tau - 1.5) < 1e-3);
  CHECK(r.residual_norm <= r.initial_residual_norm);
  CHECK(r.iterations <= 200);
}

TEST_CASE("NLSF started at the optimum stops quickly") {
  InstrumentConfig cfg;
  const auto h = synthesize_decay(mono(1.5, 5000.0), cfg, 0, NoiseModel::None);
  const auto r = nlsf_fit(h, cfg, 1, mono(1.5));
  CHECK(r.converged);
  CHECK(r.iterations <= 2);
  CHECK(std::abs(r.params.components[0].tau - 1.5) < 1e-3);
}

TEST_CASE("NLSF bi-exponential Monte Carlo") {
  InstrumentConfig cfg;
  DecayParams p;
  p.components = {{0.5, 0.3}, {0.5, 2.5}};
  p.peak_count = 5000.0;
  double sum = 0.0;
  for (int s = 0; s < 50; ++s) sum += nlsf_fit(synthesize_decay(p, cfg, static_cast<std::uint64_t>(s)), cfg, 2).lifetimes().tau_a;
  CHECK(std::abs(sum / 50.0 - 1.4) <= 0.15);
}

TEST_CASE("NLSF refuses low counts and bad arguments") {
  InstrumentConfig cfg;
  Histogram h;
  h.counts.assign(256, 0);
  h.counts[20] = 49;
  CHECK_THROWS_AS(nlsf_fit(h, cfg, 1), InvalidArgument);
  h.counts[21] = 1;
  CHECK_NOTHROW(nlsf_fit(h, cfg, 1));
  CHECK_THROWS_AS(nlsf_fit(h, cfg, 3), InvalidArgument);
  CHECK_THROWS_AS(nlsf_fit(h, cfg, 2, mono(1.0)), InvalidArgument);
  CHECK(default_nlsf_init(2).components[1].tau == 2.0);
}

TEST_CASE("NLSF residual never increases") {
  InstrumentConfig cfg;
  for (int s = 0; s < 20; ++s) {
    const auto h = synthesize_decay(mono(0.5 + 0.2 * s, 300.0), cfg, static_cast<std::uint64_t>(s));
    NlsfOptions o;
    double prev = INFINITY;
    for (int it = 1; it <= 6; ++it) {
      o.max_iterations = it;
      const auto r = nlsf_fit(h, cfg, 2, std::nullopt, o);
      CHECK(r.residual_norm <= prev * (1.0 + 1e-12));
      prev = r.residual_norm;
    }
  }
}
