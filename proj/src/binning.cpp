#include "flim/binning.hpp"

#include <cmath>
#include <string>

#include "flim/error.hpp"

namespace flim {

namespace {

// (r^M - 1)/(r - 1) - T, evaluated as a Horner sum to stay accurate near r = 1.
double geometric_residual(double r, int merged_bins, int original_bins) {
  double sum = 0.0;
  for (int x = 0; x < merged_bins; ++x) sum = sum * r + 1.0;
  return sum - static_cast<double>(original_bins);
}

}  // namespace

double solve_ratio(int original_bins, int merged_bins) {
  if (merged_bins <= 1) throw InvalidArgument("merged bin count must be > 1");
  if (merged_bins >= original_bins)
    throw InvalidArgument("merged bin count must be < original bin count");
  double lo = 1.0 + 1e-12;
  double hi = 2.0;
  // For M < T the residual is negative at lo; M >= log2(T+1) keeps it positive at 2.
  while (geometric_residual(hi, merged_bins, original_bins) < 0.0) hi *= 2.0;
  for (int it = 0; it < 400 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (geometric_residual(mid, merged_bins, original_bins) < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  const double rl = geometric_residual(lo, merged_bins, original_bins);
  const double rh = geometric_residual(hi, merged_bins, original_bins);
  return std::abs(rl) < std::abs(rh) ? lo : hi;
}

std::vector<int> bin_edges(int original_bins, int merged_bins, double ratio) {
  if (!(ratio > 1.0)) throw InvalidArgument("ratio must be > 1");
  std::vector<int> edges(static_cast<std::size_t>(merged_bins) + 1);
  double partial = 0.0;  // (r^x - 1)/(r - 1) accumulated as sum of r^k
  double power = 1.0;
  for (int x = 0; x <= merged_bins; ++x) {
    edges[static_cast<std::size_t>(x)] = static_cast<int>(std::floor(partial + 1e-9));
    partial += power;
    power *= ratio;
  }
  edges.back() = original_bins;
  for (std::size_t x = 1; x < edges.size(); ++x) {
    if (edges[x] <= edges[x - 1])
      throw NumericError("log bin edges are not strictly increasing at index " +
                         std::to_string(x));
  }
  return edges;
}

LogBinSpec LogBinSpec::make(int original_bins, int merged_bins) {
  LogBinSpec spec;
  spec.original_bins = original_bins;
  spec.merged_bins = merged_bins;
  spec.ratio = solve_ratio(original_bins, merged_bins);
  spec.edges = bin_edges(original_bins, merged_bins, spec.ratio);
  return spec;
}

void LogBinSpec::validate() const {
  if (edges.size() != static_cast<std::size_t>(merged_bins) + 1)
    throw InvalidArgument("edge count must be merged_bins + 1");
  if (edges.front() != 0 || edges.back() != original_bins)
    throw InvalidArgument("edges must span [0, original_bins]");
  for (std::size_t x = 1; x < edges.size(); ++x)
    if (edges[x] <= edges[x - 1]) throw InvalidArgument("edges must be strictly increasing");
}

Histogram compress_histogram(const Histogram& h, const LogBinSpec& spec) {
  if (h.bin_edges) throw InvalidArgument("histogram is already log-compressed");
  spec.validate();
  if (h.counts.size() != static_cast<std::size_t>(spec.original_bins))
    throw InvalidArgument("histogram length " + std::to_string(h.counts.size()) +
                          " does not match " + std::to_string(spec.original_bins) +
                          " original bins");
  Histogram out;
  out.bin_width = h.bin_width;
  out.bin_edges = spec.edges;
  out.counts.assign(static_cast<std::size_t>(spec.merged_bins), 0);
  for (int x = 0; x < spec.merged_bins; ++x) {
    std::uint32_t sum = 0;
    for (int t = spec.edges[x]; t < spec.edges[x + 1]; ++t) sum += h.counts[t];
    out.counts[static_cast<std::size_t>(x)] = sum;
  }
  return out;
}

}  // namespace flim
