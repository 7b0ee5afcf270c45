#pragma once

#include <cstdint>
#include <string>

#include "flim/flan.hpp"
#include "flim/quantize.hpp"

namespace flim {

struct QuantizeReport {
  std::uint64_t parameters = 0;
  std::uint64_t saturated = 0;
  double saturated_fraction() const {
    return parameters == 0 ? 0.0 : static_cast<double>(saturated) / static_cast<double>(parameters);
  }
};

inline constexpr int kMaxScaleExponent = 40;

// Encodes weights, scales and shifts in param_fmt. Each scale is stored as a
// multiplier word normalized into [2^(I-3), 2^(I-2)) plus a per-channel
// right-shift exponent, so its relative precision does not depend on its size. and records fm_fmt for
// activations. The float plane is kept for differential testing.
NetworkModel quantize_model(const NetworkModel& model, const QFormat& fm_fmt,
                            const QFormat& param_fmt, double max_saturated_fraction = 0.01,
                            QuantizeReport* report = nullptr);

}  // namespace flim
