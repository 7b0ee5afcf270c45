#include "flim/quantize_model.hpp"

#include <cmath>
#include <sstream>

#include "flim/error.hpp"

namespace flim {

NetworkModel quantize_model(const NetworkModel& model, const QFormat& fm_fmt,
                            const QFormat& param_fmt, double max_saturated_fraction,
                            QuantizeReport* report) {
  fm_fmt.validate();
  param_fmt.validate();
  if (model.has_unfolded_bn())
    throw InvalidArgument("model still carries batch-norm statistics; fold them first");
  model.validate();

  NetworkModel out = model;
  SaturationCounter stats;
  auto encode_all = [&](const std::vector<double>& values) {
    std::vector<std::int64_t> words;
    words.reserve(values.size());
    for (double v : values) words.push_back(encode(v, param_fmt, &stats));
    return words;
  };
  for (auto& layer : out.layers) {
    QuantizedLayer q;
    q.param_format = param_fmt;
    q.weights = encode_all(layer.weights);
    // Largest |s * 2^e| below 2^(integer_bits - 2), clear of saturation after rounding.
    const double top = std::ldexp(1.0, param_fmt.integer_bits - 2);
    for (double s : layer.scale) {
      int e = 0;
      while (e < kMaxScaleExponent && s != 0.0 && std::abs(std::ldexp(s, e + 1)) < top) ++e;
      q.scale.push_back(encode(std::ldexp(s, e), param_fmt, &stats));
      q.scale_exponent.push_back(e);
    }
    q.shift = encode_all(layer.shift);
    layer.quantized = std::move(q);
  }
  out.fm_format = fm_fmt;

  if (report) {
    report->parameters = stats.encoded;
    report->saturated = stats.saturated;
  }
  if (stats.fraction() > max_saturated_fraction) {
    std::ostringstream msg;
    msg << stats.saturated << " of " << stats.encoded << " parameters saturate in "
        << param_fmt.to_string() << " (limit " << max_saturated_fraction * 100.0 << "%)";
    throw NumericError(msg.str());
  }
  return out;
}

}  // namespace flim
