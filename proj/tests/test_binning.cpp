#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "flim/binning.hpp"
#include "flim/error.hpp"

using namespace flim;

namespace {

double geometric_sum(double r, int m) { return (std::pow(r, m) - 1.0) / (r - 1.0); }

Histogram make_hist(std::vector<std::uint32_t> counts) {
  Histogram h;
  h.counts = std::move(counts);
  return h;
}

}  // namespace

TEST_CASE("ratio solves the geometric series") {
  const double r = solve_ratio(256, 80);
  CHECK(r == doctest::Approx(1.0256).epsilon(1e-4));
  CHECK(std::abs(geometric_sum(r, 80) - 256.0) < 1e-8);
  CHECK(solve_ratio(3, 2) == doctest::Approx(2.0).epsilon(1e-14));
  const double near = solve_ratio(256, 255);
  CHECK(near > 1.0);
  CHECK(near < 1.0001);
}

TEST_CASE("ratio rejects impossible shapes") {
  CHECK_THROWS_AS(solve_ratio(256, 256), InvalidArgument);
  CHECK_THROWS_AS(solve_ratio(256, 300), InvalidArgument);
  CHECK_THROWS_AS(solve_ratio(256, 1), InvalidArgument);
}

TEST_CASE("edge examples") {
  CHECK(bin_edges(3, 2, 2.0) == std::vector<int>{0, 1, 3});
  const auto e = bin_edges(256, 80, solve_ratio(256, 80));
  REQUIRE(e.size() == 81);
  CHECK(e[0] == 0);
  CHECK(e[1] == 1);
  CHECK(e[80] == 256);
  int total = 0;
  for (std::size_t x = 1; x < e.size(); ++x) {
    const int w = e[x] - e[x - 1];
    CHECK(w >= 1);
    total += w;
    if (x >= 2) CHECK(w >= e[x - 1] - e[x - 2] - 1);
  }
  CHECK(total == 256);
  CHECK(e[80] - e[79] > e[1] - e[0]);
}

TEST_CASE("log bin spec") {
  const auto spec = LogBinSpec::make(256, 80);
  CHECK_NOTHROW(spec.validate());
  auto bad = spec;
  bad.edges[5] = bad.edges[4];
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = spec;
  bad.edges.back() = 255;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("compression examples") {
  const auto spec = LogBinSpec::make(3, 2);
  const auto merged = compress_histogram(make_hist({5, 2, 1}), spec);
  CHECK(merged.counts == std::vector<std::uint32_t>{5, 3});
  REQUIRE(merged.bin_edges.has_value());
  CHECK(*merged.bin_edges == std::vector<int>{0, 1, 3});
  const auto zero = compress_histogram(make_hist(std::vector<std::uint32_t>(256, 0)), LogBinSpec::make(256, 80));
  CHECK(zero.counts == std::vector<std::uint32_t>(80, 0));
}

TEST_CASE("compression conserves photons") {
  const auto spec = LogBinSpec::make(256, 80);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::uint32_t> u(0, 5000);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::uint32_t> c(256);
    for (auto& v : c) v = u(rng);
    const auto h = make_hist(c);
    const auto m = compress_histogram(h, spec);
    CHECK(m.total() == h.total());
    CHECK(m.counts.size() == 80);
  }
}

TEST_CASE("compression input validation") {
  const auto spec = LogBinSpec::make(256, 80);
  CHECK_THROWS_AS(compress_histogram(make_hist(std::vector<std::uint32_t>(100, 1)), spec), InvalidArgument);
  const auto once = compress_histogram(make_hist(std::vector<std::uint32_t>(256, 1)), spec);
  CHECK_THROWS_AS(compress_histogram(once, spec), InvalidArgument);
}
