#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flim/decay_synth.hpp"
#include "flim/quantize.hpp"

namespace flim {

enum class LayerKind : std::uint8_t { AdderConv = 0, AdderDense = 1 };
enum class Variant : std::uint8_t { Flan = 0, FlanLs = 1 };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

// Channel-major feature map: data[ch * width + w].
struct FeatureMap {
  int channels = 0;
  int width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int w) : channels(c), width(w), data(static_cast<std::size_t>(c) * w, 0.0) {}
  double& at(int c, int w) { return data[static_cast<std::size_t>(c) * width + w]; }
  double at(int c, int w) const { return data[static_cast<std::size_t>(c) * width + w]; }
};

struct FixedFeatureMap {
  int channels = 0;
  int width = 0;
  std::vector<std::int64_t> data;
};

// Batch-norm statistics and affine parameters prior to folding.
struct BnParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double epsilon = 1e-4;

  static BnParams identity(int channels);
  void validate() const;
};

struct FoldedAffine {
  std::vector<double> scale;
  std::vector<double> shift;
};

FoldedAffine fold_bn(const BnParams& bn);

// Per-layer words in the parameter format.
struct QuantizedLayer {
  QFormat param_format = kParamFormat;
  std::vector<std::int64_t> weights;
  std::vector<std::int64_t> scale;
  std::vector<std::int64_t> shift;
  // Per-channel scale = decode(scale word) * 2^-scale_exponent; empty means 0.
  std::vector<int> scale_exponent;

  int exponent(int channel) const {
    return scale_exponent.empty() ? 0 : scale_exponent[static_cast<std::size_t>(channel)];
  }
};

// Adder convolution (or dense layer, stored as a K=1 convolution over the
// flattened input) followed by a per-channel affine and optional ReLU.
struct AdderLayer {
  LayerKind kind = LayerKind::AdderConv;
  int kernel = 1;
  int in_channels = 1;
  int out_channels = 1;
  int stride = 1;
  bool relu = true;
  // K x CH_i x CH_o, index (k * in_channels + ci) * out_channels + co.
  std::vector<double> weights;
  std::vector<double> scale;
  std::vector<double> shift;
  // Present while the layer is trained with batch statistics; fold_layer_bn()
  // replaces it with scale/shift.
  std::optional<BnParams> bn;
  std::optional<QuantizedLayer> quantized;

  static AdderLayer conv(int kernel, int in_channels, int out_channels, int stride, bool relu);
  static AdderLayer dense(int in_features, int out_features, bool relu);

  std::size_t weight_index(int k, int ci, int co) const {
    return (static_cast<std::size_t>(k) * in_channels + ci) * out_channels + co;
  }
  int output_length(int input_length) const;
  std::size_t parameter_count() const;
  void validate() const;
};

void fold_layer_bn(AdderLayer& layer);

struct FlanWidths {
  int stem = 16;
  int mid = 16;
  int deep = 20;
  int head = 32;
};

FlanWidths default_widths(Variant v);

// Layer list layout: [pre...][residual_a][residual_b][post...][head_a...][head_i...].
// Each head ends in a single-output dense layer without ReLU.
struct NetworkModel {
  Variant variant = Variant::Flan;
  int input_length = 256;
  std::uint32_t gate_threshold = 0;
  std::vector<AdderLayer> layers;
  int pre_count = 0;
  int post_count = 0;
  int head_depth = 0;
  std::optional<QFormat> fm_format;

  std::size_t residual_a() const { return static_cast<std::size_t>(pre_count); }
  std::size_t residual_b() const { return residual_a() + 1; }
  std::size_t post_begin() const { return residual_b() + 1; }
  std::size_t head_begin(int head) const {
    return post_begin() + static_cast<std::size_t>(post_count) +
           static_cast<std::size_t>(head) * static_cast<std::size_t>(head_depth);
  }

  void validate() const;
  std::size_t parameter_count() const;
  bool has_unfolded_bn() const;
  bool is_quantized() const;
  int strided_layer_count() const;
};

NetworkModel build_flan(Variant variant);
NetworkModel build_flan(Variant variant, const FlanWidths& widths, std::uint64_t init_seed = 42);

void fold_model_bn(NetworkModel& model);

// Rounds every float parameter to binary32 so the in-memory model matches its
// serialized form.
void snap_to_binary32(NetworkModel& model);

enum class GateDecision { Pass, Background };

GateDecision threshold_gate(const Histogram& h, std::uint32_t threshold);

// Scales counts so the peak bin equals 1.
std::vector<double> normalize_input(const Histogram& h);

// -sum |x - w| with k innermost, ch_i next.
FeatureMap adder_accumulate(const FeatureMap& input, const AdderLayer& layer);

// Pre-affine accumulation, folded affine, then ReLU when enabled.
FeatureMap adder_conv_forward(const FeatureMap& input, const AdderLayer& layer);

// Flattens a feature map into in_features x 1 for dense layers.
FeatureMap as_dense_input(FeatureMap fm);

// Adds the centre crop of `skip` to `branch` in place.
void add_cropped_skip(FeatureMap& branch, const FeatureMap& skip);
std::pair<int, int> skip_crop(int skip_width, int branch_width);

LifetimePair forward_normalized(const NetworkModel& model, const std::vector<double>& input);
LifetimePair forward(const NetworkModel& model, const Histogram& h, bool apply_gate = true);

FixedFeatureMap adder_conv_forward_fixed(const FixedFeatureMap& input, const AdderLayer& layer,
                                         const QFormat& fm_fmt,
                                         SaturationCounter* stats = nullptr);

LifetimePair forward_fixed(const NetworkModel& model, const Histogram& h, const QFormat& fm_fmt,
                           bool apply_gate = true, SaturationCounter* stats = nullptr);
LifetimePair forward_fixed(const NetworkModel& model, const Histogram& h, bool apply_gate = true);

}  // namespace flim
