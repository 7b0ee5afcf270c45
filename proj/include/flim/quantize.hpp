#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace flim {

// Two's-complement fixed point over (integer_bits + fraction_bits) bits; the
// sign bit is counted inside integer_bits.
struct QFormat {
  int integer_bits = 16;
  int fraction_bits = 16;
  bool saturate = true;

  void validate() const;
  int width() const { return integer_bits + fraction_bits; }
  std::int64_t min_word() const;
  std::int64_t max_word() const;
  // Smallest whole number of bytes holding one word.
  int byte_width() const { return (width() + 7) / 8; }
  std::string to_string() const;

  friend bool operator==(const QFormat&, const QFormat&) = default;
};

// Parses "Qm.n".
QFormat parse_qformat(const std::string& text);

inline constexpr QFormat kFeatureFormat{16, 16, true};
inline constexpr QFormat kParamFormat{10, 10, true};

// Counts clamped encodes. Not thread-safe; use one per worker.
struct SaturationCounter {
  std::uint64_t encoded = 0;
  std::uint64_t saturated = 0;
  double fraction() const {
    return encoded == 0 ? 0.0 : static_cast<double>(saturated) / static_cast<double>(encoded);
  }
};

std::int64_t encode(double x, const QFormat& fmt, SaturationCounter* stats = nullptr);
double decode(std::int64_t word, const QFormat& fmt);

// Clamp (or wrap, when saturate is off) an arbitrary integer into fmt's range.
std::int64_t narrow(std::int64_t value, const QFormat& fmt, SaturationCounter* stats = nullptr);

// Divide by 2^shift rounding half away from zero.
std::int64_t round_shift_right(std::int64_t value, int shift);

// Re-express a word of fraction length `from` at fraction length `to`.
std::int64_t rescale(std::int64_t word, int from_fraction, int to_fraction);

struct FixedTensor {
  std::vector<std::int64_t> raw;
  QFormat format;
  std::vector<std::size_t> shape;

  static FixedTensor from_real(const std::vector<double>& values, const QFormat& fmt,
                               std::vector<std::size_t> shape,
                               SaturationCounter* stats = nullptr);
  std::vector<double> to_real() const;
};

}  // namespace flim
