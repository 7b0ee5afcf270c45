#pragma once

#include <vector>

#include "flim/decay_synth.hpp"

namespace flim {

// Geometric merge of T original bins into M bins whose widths grow by ~r.
struct LogBinSpec {
  int original_bins = 256;
  int merged_bins = 80;
  double ratio = 1.0;
  std::vector<int> edges;  // M + 1 original-bin indices, 0 .. T

  static LogBinSpec make(int original_bins, int merged_bins);
  void validate() const;
};

// Unique r > 1 with (r^M - 1)/(r - 1) = T.
double solve_ratio(int original_bins, int merged_bins);

std::vector<int> bin_edges(int original_bins, int merged_bins, double ratio);

Histogram compress_histogram(const Histogram& h, const LogBinSpec& spec);

}  // namespace flim
