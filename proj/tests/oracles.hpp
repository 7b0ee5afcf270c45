// Independent reference implementations shared by the unit and acceptance tests.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <random>
#include <vector>

#include "flim/flan.hpp"
#include "flim/quantize.hpp"

namespace oracle {

// Direct transcription of y[co][wo] = -sum_ci sum_k |x[ci][wo*S+k] - W[k][ci][co]|.
inline std::vector<double> adder_conv(const std::vector<double>& x, int ci_n, int wi, const flim::AdderLayer& l) {
  const int wo_n = (wi - l.kernel) / l.stride + 1;
  std::vector<double> y(static_cast<std::size_t>(l.out_channels) * wo_n, 0.0);
  for (int co = 0; co < l.out_channels; ++co)
    for (int wo = 0; wo < wo_n; ++wo) {
      double s = 0.0;
      for (int ci = 0; ci < ci_n; ++ci)
        for (int k = 0; k < l.kernel; ++k) {
          const double xv = x[static_cast<std::size_t>(ci) * wi + wo * l.stride + k];
          const double wv = l.weights[(static_cast<std::size_t>(k) * ci_n + ci) * l.out_channels + co];
          s += xv > wv ? xv - wv : wv - xv;
        }
      double v = l.scale[static_cast<std::size_t>(co)] * -s + l.shift[static_cast<std::size_t>(co)];
      if (l.relu && v < 0.0) v = 0.0;
      y[static_cast<std::size_t>(co) * wo_n + wo] = v;
    }
  return y;
}

// Fixed-point reference: exact integer value of scale*(-acc) + shift, then a
// single round-half-away-from-zero division and a clamp.
inline std::vector<std::int64_t> adder_conv_fixed(const std::vector<std::int64_t>& x, int ci_n, int wi,
                                                  const flim::AdderLayer& l, const flim::QFormat& fm) {
  const auto& q = *l.quantized;
  const int pf = q.param_format.fraction_bits;
  const int common = pf > fm.fraction_bits ? pf : fm.fraction_bits;
  const int wo_n = (wi - l.kernel) / l.stride + 1;
  std::vector<std::int64_t> y(static_cast<std::size_t>(l.out_channels) * wo_n, 0);
  for (int co = 0; co < l.out_channels; ++co)
    for (int wo = 0; wo < wo_n; ++wo) {
      const int e = q.scale_exponent.empty() ? 0 : q.scale_exponent[static_cast<std::size_t>(co)];
      const __int128 denom = __int128{1} << (pf + e + common - fm.fraction_bits);
      __int128 acc = 0;
      for (int k = 0; k < l.kernel; ++k)
        for (int ci = 0; ci < ci_n; ++ci) {
          const __int128 xv = __int128{x[static_cast<std::size_t>(ci) * wi + wo * l.stride + k]}
                              << (common - fm.fraction_bits);
          const __int128 wv = __int128{q.weights[(static_cast<std::size_t>(k) * ci_n + ci) * l.out_channels + co]}
                              << (common - pf);
          acc += xv > wv ? xv - wv : wv - xv;
        }
      const __int128 num = __int128{q.scale[static_cast<std::size_t>(co)]} * -acc +
                           (__int128{q.shift[static_cast<std::size_t>(co)]} << (common + e));
      const __int128 mag = num < 0 ? -num : num;
      __int128 quot = mag / denom;
      if ((mag % denom) * 2 >= denom) ++quot;
      __int128 v = num < 0 ? -quot : quot;
      if (v > fm.max_word()) v = fm.max_word();
      if (v < fm.min_word()) v = fm.min_word();
      if (l.relu && v < 0) v = 0;
      y[static_cast<std::size_t>(co) * wo_n + wo] = static_cast<std::int64_t>(v);
    }
  return y;
}

// Random small adder layer (no batch norm).
inline flim::AdderLayer random_layer(std::mt19937_64& rng, int& ci_n, int& wi) {
  std::uniform_int_distribution<int> kd(1, 5), cd(1, 4), sd(1, 3);
  std::uniform_real_distribution<double> wd(-2.0, 2.0), sc(-1.5, 1.5);
  const int k = kd(rng);
  ci_n = cd(rng);
  const int co = cd(rng);
  const int s = sd(rng);
  wi = k + std::uniform_int_distribution<int>(0, 12)(rng);
  auto l = flim::AdderLayer::conv(k, ci_n, co, s, rng() & 1);
  for (auto& w : l.weights) w = wd(rng);
  for (auto& v : l.scale) v = sc(rng);
  for (auto& v : l.shift) v = sc(rng);
  return l;
}

}  // namespace oracle
