#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flim/decay_synth.hpp"
#include "flim/flan.hpp"

namespace flim::io {

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::uint16_t kModelVersion = 1;
inline constexpr std::uint16_t kParamsVersion = 2;

// Labels as binary32 (tau_a, tau_i) followed by the component list.
inline constexpr std::uint8_t kLabelPairWithComponents = 1;

using Bytes = std::vector<std::uint8_t>;

Bytes encode_dataset(const std::vector<LabeledDecay>& records);
std::vector<LabeledDecay> decode_dataset(const Bytes& bytes);

Bytes encode_model(const NetworkModel& model);
NetworkModel decode_model(const Bytes& bytes);

// Hardware-facing parameter plane; requires a quantized model.
Bytes encode_params(const NetworkModel& model);
// Restores the quantized plane into a model with matching architecture.
void decode_params(const Bytes& bytes, NetworkModel& model);

Bytes read_file(const std::filesystem::path& path);
// Writes via a sibling temp file and rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<LabeledDecay> read_dataset(const std::filesystem::path& path);
// Also writes `<path>.edges` when the records carry log-bin edges.
void write_dataset(const std::filesystem::path& path, const std::vector<LabeledDecay>& records);

NetworkModel read_model(const std::filesystem::path& path);
void write_model(const std::filesystem::path& path, const NetworkModel& model);

// One record per line: counts, then tau_a and tau_i.
std::string dataset_to_text(const std::vector<LabeledDecay>& records);
std::string edges_to_text(const std::vector<int>& edges);
std::vector<int> edges_from_text(const std::string& text);

}  // namespace flim::io
