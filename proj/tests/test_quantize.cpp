#include <doctest.h>

#include <cmath>
#include <random>

#include "flim/error.hpp"
#include "flim/flan.hpp"
#include "flim/quantize.hpp"
#include "flim/quantize_model.hpp"

using namespace flim;

TEST_CASE("format geometry") {
  CHECK(kParamFormat.width() == 20);
  CHECK(kParamFormat.max_word() == (1 << 19) - 1);
  CHECK(kParamFormat.min_word() == -(1 << 19));
  CHECK(kParamFormat.byte_width() == 3);
  CHECK(kFeatureFormat.byte_width() == 4);
  CHECK(kParamFormat.to_string() == "Q10.10");
  CHECK(parse_qformat("Q16.16") == kFeatureFormat);
  CHECK(parse_qformat("Q8.24").fraction_bits == 24);
  CHECK_THROWS_AS(parse_qformat("16.16"), InvalidArgument);
  CHECK_THROWS_AS(parse_qformat("Q0.8"), InvalidArgument);
  CHECK_THROWS_AS(parse_qformat("Q40.20"), InvalidArgument);
}

TEST_CASE("encode and decode examples") {
  CHECK(encode(1.5, kParamFormat) == 1536);
  CHECK(decode(1536, kParamFormat) == 1.5);
  CHECK(encode(0.12345, kParamFormat) == 126);
  CHECK(decode(126, kParamFormat) == 0.123046875);
  CHECK(std::abs(decode(126, kParamFormat) - 0.12345) <= std::ldexp(1.0, -11));
  CHECK(encode(0.33, kParamFormat) == 338);
  CHECK(decode(338, kParamFormat) == 0.330078125);
  CHECK(decode(0, kParamFormat) == 0.0);
}

TEST_CASE("rounding is half away from zero") {
  const QFormat f{4, 0, true};
  CHECK(encode(0.5, f) == 1);
  CHECK(encode(-0.5, f) == -1);
  CHECK(encode(1.49, f) == 1);
  CHECK(round_shift_right(3, 1) == 2);
  CHECK(round_shift_right(-3, 1) == -2);
  CHECK(round_shift_right(5, 2) == 1);
  CHECK(round_shift_right(-6, 2) == -2);
  CHECK(round_shift_right(7, 0) == 7);
  CHECK(rescale(1536, 10, 16) == 1536 * 64);
  CHECK(rescale(1537 * 64 + 32, 16, 10) == 1538);
}

TEST_CASE("saturation clamps and counts") {
  SaturationCounter stats;
  CHECK(encode(512.0, kParamFormat, &stats) == kParamFormat.max_word());
  CHECK(encode(-1e9, kParamFormat, &stats) == kParamFormat.min_word());
  CHECK(encode(1.0, kParamFormat, &stats) == 1024);
  CHECK(stats.encoded == 3);
  CHECK(stats.saturated == 2);
  CHECK(encode(1e300, kFeatureFormat) == kFeatureFormat.max_word());
  CHECK_THROWS_AS(encode(std::nan(""), kFeatureFormat), NumericError);
}

TEST_CASE("wrapping mode keeps the low bits") {
  const QFormat f{4, 0, false};
  CHECK(narrow(8, f) == -8);
  CHECK(narrow(17, f) == 1);
  CHECK(narrow(-9, f) == 7);
}

TEST_CASE("round trip error bound") {
  std::mt19937_64 rng(11);
  for (int frac : {10, 16}) {
    const QFormat f{10, frac, true};
    const double lim = std::ldexp(1.0, 9) - 1.0;
    std::uniform_real_distribution<double> u(-lim, lim);
    const double bound = std::ldexp(1.0, -(frac + 1));
    double worst = 0.0;
    for (int i = 0; i < 100000; ++i) {
      const double x = u(rng);
      worst = std::max(worst, std::abs(decode(encode(x, f), f) - x));
    }
    CHECK(worst <= bound);
  }
}

TEST_CASE("fixed tensor round trip") {
  const std::vector<double> v{0.25, -1.5, 3.0};
  const auto t = FixedTensor::from_real(v, kFeatureFormat, {3});
  CHECK(t.raw == std::vector<std::int64_t>{16384, -98304, 196608});
  CHECK(t.to_real() == v);
}

TEST_CASE("quantize_model") {
  auto m = build_flan(Variant::FlanLs);
  SUBCASE("unfolded batch norm is refused") {
    CHECK_THROWS_AS(quantize_model(m, kFeatureFormat, kParamFormat), InvalidArgument);
  }
  fold_model_bn(m);
  SUBCASE("all-zero model gives zero words") {
    for (auto& l : m.layers) {
      std::fill(l.weights.begin(), l.weights.end(), 0.0);
      std::fill(l.scale.begin(), l.scale.end(), 0.0);
      std::fill(l.shift.begin(), l.shift.end(), 0.0);
    }
    const auto q = quantize_model(m, kFeatureFormat, kParamFormat);
    CHECK(q.is_quantized());
    for (const auto& l : q.layers) {
      for (auto w : l.quantized->weights) CHECK(w == 0);
      for (auto w : l.quantized->scale) CHECK(w == 0);
    }
  }
  SUBCASE("single weight example") {
    m.layers[0].weights[0] = 0.33;
    const auto q = quantize_model(m, kFeatureFormat, kParamFormat);
    CHECK(q.layers[0].quantized->weights[0] == 338);
    CHECK(q.fm_format == kFeatureFormat);
  }
  SUBCASE("scales are normalized with a power-of-two exponent") {
    m.layers[0].scale[0] = 0.1;
    m.layers[0].scale[1] = 1.7;
    m.layers[0].scale[2] = -0.003;
    const auto q = quantize_model(m, kFeatureFormat, kParamFormat);
    const auto& ql = *q.layers[0].quantized;
    CHECK(ql.exponent(0) == 11);
    CHECK(ql.scale[0] == 209715);  // round(204.8 * 1024)
    CHECK(ql.exponent(1) == 7);
    CHECK(ql.scale[1] == 222822);  // round(217.6 * 1024)
    CHECK(ql.exponent(2) == 16);
    CHECK(ql.scale[2] == -201327);  // round(-196.608 * 1024)
    CHECK(std::ldexp(decode(ql.scale[2], kParamFormat), -ql.exponent(2)) == doctest::Approx(-0.003).epsilon(1e-5));
  }
  SUBCASE("saturation beyond the limit is a hard error") {
    for (auto& w : m.layers[1].weights) w = 1000.0;
    QuantizeReport rep;
    CHECK_THROWS_AS(quantize_model(m, kFeatureFormat, kParamFormat, 0.01, &rep), NumericError);
    CHECK(rep.saturated == m.layers[1].weights.size());
    CHECK_NOTHROW(quantize_model(m, kFeatureFormat, kParamFormat, 1.0));
  }
}
