#include "flim/quantize.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "flim/error.hpp"

namespace flim {

void QFormat::validate() const {
  if (integer_bits < 1) throw InvalidArgument("QFormat needs at least one integer bit");
  if (fraction_bits < 0) throw InvalidArgument("QFormat fraction bits must be >= 0");
  if (width() > 48) throw InvalidArgument("QFormat wider than 48 bits is not supported");
}

std::int64_t QFormat::min_word() const { return -(std::int64_t{1} << (width() - 1)); }
std::int64_t QFormat::max_word() const { return (std::int64_t{1} << (width() - 1)) - 1; }

std::string QFormat::to_string() const {
  return "Q" + std::to_string(integer_bits) + "." + std::to_string(fraction_bits);
}

QFormat parse_qformat(const std::string& text) {
  QFormat f;
  char tail = 0;
  if (std::sscanf(text.c_str(), "Q%d.%d%c", &f.integer_bits, &f.fraction_bits, &tail) != 2 &&
      std::sscanf(text.c_str(), "q%d.%d%c", &f.integer_bits, &f.fraction_bits, &tail) != 2)
    throw InvalidArgument("bad fixed-point format '" + text + "' (expected Qm.n)");
  f.validate();
  return f;
}

std::int64_t narrow(std::int64_t value, const QFormat& fmt, SaturationCounter* stats) {
  if (stats) ++stats->encoded;
  if (value >= fmt.min_word() && value <= fmt.max_word()) return value;
  if (stats) ++stats->saturated;
  if (fmt.saturate) return value < fmt.min_word() ? fmt.min_word() : fmt.max_word();
  const auto bits = static_cast<unsigned>(fmt.width());
  const std::uint64_t mask = (std::uint64_t{1} << bits) - 1;
  std::uint64_t u = static_cast<std::uint64_t>(value) & mask;
  if (u >> (bits - 1)) u |= ~mask;
  return static_cast<std::int64_t>(u);
}

std::int64_t encode(double x, const QFormat& fmt, SaturationCounter* stats) {
  if (std::isnan(x)) throw NumericError("cannot encode NaN");
  const double scaled = std::round(std::ldexp(x, fmt.fraction_bits));  // half away from zero
  constexpr double kLimit = 9.0e18;
  if (scaled >= kLimit || scaled <= -kLimit) {
    if (stats) {
      ++stats->encoded;
      ++stats->saturated;
    }
    return scaled > 0 ? fmt.max_word() : fmt.min_word();
  }
  return narrow(static_cast<std::int64_t>(scaled), fmt, stats);
}

double decode(std::int64_t word, const QFormat& fmt) {
  return std::ldexp(static_cast<double>(word), -fmt.fraction_bits);
}

std::int64_t round_shift_right(std::int64_t value, int shift) {
  if (shift <= 0) return value << -shift;
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  if (value >= 0) return (value + half) >> shift;
  return -((-value + half) >> shift);
}

std::int64_t rescale(std::int64_t word, int from_fraction, int to_fraction) {
  return round_shift_right(word, from_fraction - to_fraction);
}

FixedTensor FixedTensor::from_real(const std::vector<double>& values, const QFormat& fmt,
                                   std::vector<std::size_t> shape, SaturationCounter* stats) {
  FixedTensor t;
  t.format = fmt;
  t.shape = std::move(shape);
  t.raw.reserve(values.size());
  for (double v : values) t.raw.push_back(encode(v, fmt, stats));
  return t;
}

std::vector<double> FixedTensor::to_real() const {
  std::vector<double> out;
  out.reserve(raw.size());
  for (auto w : raw) out.push_back(decode(w, format));
  return out;
}

}  // namespace flim
