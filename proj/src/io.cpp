#include "flim/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include "flim/error.hpp"

namespace flim::io {

namespace {

class Writer {
 public:
  void bytes(const char* magic) { out_.insert(out_.end(), magic, magic + 4); }
  void u8(std::uint32_t v) { out_.push_back(static_cast<std::uint8_t>(v)); }
  void u16(std::uint32_t v) { uint_le(v, 2); }
  void u32(std::uint32_t v) { uint_le(v, 4); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void sint(std::int64_t v, int width) { uint_le(static_cast<std::uint64_t>(v), width); }
  void blob(const Bytes& b) { out_.insert(out_.end(), b.begin(), b.end()); }
  Bytes take() { return std::move(out_); }

 private:
  void uint_le(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(const Bytes& b, const char* what) : b_(b), what_(what) {}

  void magic(const char* m) {
    need(4);
    if (std::memcmp(&b_[pos_], m, 4) != 0)
      throw FormatError(std::string(what_) + ": bad magic (expected " + std::string(m, 4) + ")");
    pos_ += 4;
  }
  std::uint32_t u8() { return static_cast<std::uint32_t>(uint_le(1)); }
  std::uint32_t u16() { return static_cast<std::uint32_t>(uint_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_le(4)); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  std::int64_t sint(int width) {
    std::uint64_t u = uint_le(width);
    const int bits = 8 * width;
    if (bits < 64 && (u >> (bits - 1)) & 1U) u |= ~((std::uint64_t{1} << bits) - 1);
    return static_cast<std::int64_t>(u);
  }
  Bytes blob(std::size_t n) {
    need(n);
    Bytes out(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
              b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  void version(std::uint16_t expected) {
    const auto v = u16();
    if (v != expected)
      throw FormatError(std::string(what_) + ": unsupported version " + std::to_string(v) +
                        " (expected " + std::to_string(expected) + ")");
  }
  void finish() const {
    if (pos_ != b_.size()) throw FormatError(std::string(what_) + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError(std::string(what_) + ": truncated file");
  }
  std::uint64_t uint_le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{b_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  const Bytes& b_;
  const char* what_;
  std::size_t pos_ = 0;
};

constexpr double kFemtosecondsPerNs = 1e6;

}  // namespace

Bytes encode_dataset(const std::vector<LabeledDecay>& records) {
  const std::size_t bins = records.empty() ? 0 : records.front().histogram.counts.size();
  const double bin_width = records.empty() ? 0.0 : records.front().histogram.bin_width;
  if (bins > 0xFFFF) throw FormatError("dataset: more than 65535 bins");
  if (records.size() > 0xFFFFFFFFu) throw FormatError("dataset: too many records");
  Writer w;
  w.bytes("FLDS");
  w.u16(kDatasetVersion);
  w.u16(static_cast<std::uint32_t>(bins));
  w.u32(static_cast<std::uint32_t>(std::llround(bin_width * kFemtosecondsPerNs)));
  w.u32(static_cast<std::uint32_t>(records.size()));
  w.u8(kLabelPairWithComponents);
  for (const auto& r : records) {
    if (r.histogram.counts.size() != bins) throw FormatError("dataset: records differ in length");
    for (auto c : r.histogram.counts) {
      if (c > 0xFFFF) throw FormatError("dataset: bin count exceeds u16");
      w.u16(c);
    }
    w.f32(r.label.tau_a);
    w.f32(r.label.tau_i);
    if (r.params.components.size() > 0xFF) throw FormatError("dataset: too many components");
    w.u8(static_cast<std::uint32_t>(r.params.components.size()));
    for (const auto& c : r.params.components) {
      w.f32(c.amplitude);
      w.f32(c.tau);
    }
  }
  return w.take();
}

std::vector<LabeledDecay> decode_dataset(const Bytes& bytes) {
  Reader r(bytes, "dataset");
  r.magic("FLDS");
  r.version(kDatasetVersion);
  const auto bins = r.u16();
  const double bin_width = r.u32() / kFemtosecondsPerNs;
  const auto count = r.u32();
  const auto label_format = r.u8();
  if (label_format != kLabelPairWithComponents)
    throw FormatError("dataset: unknown label format " + std::to_string(label_format));
  std::vector<LabeledDecay> out(count);
  for (auto& rec : out) {
    rec.histogram.bin_width = bin_width;
    rec.histogram.counts.resize(bins);
    for (auto& c : rec.histogram.counts) c = r.u16();
    rec.label.tau_a = r.f32();
    rec.label.tau_i = r.f32();
    const auto n = r.u8();
    rec.params.components.resize(n);
    for (auto& c : rec.params.components) {
      c.amplitude = r.f32();
      c.tau = r.f32();
    }
    // Peak count is not stored; the observed peak stands in for it.
    const auto peak = rec.histogram.counts.empty()
                          ? 0u
                          : *std::max_element(rec.histogram.counts.begin(), rec.histogram.counts.end());
    rec.params.peak_count = std::max(1.0, static_cast<double>(peak));
  }
  r.finish();
  return out;
}

namespace {

void write_params_layer(Writer& w, const AdderLayer& l) {
  const auto& q = *l.quantized;
  w.u8(static_cast<std::uint32_t>(l.kind));
  w.u8(static_cast<std::uint32_t>(l.kernel));
  w.u16(static_cast<std::uint32_t>(l.in_channels));
  w.u16(static_cast<std::uint32_t>(l.out_channels));
  w.u8(static_cast<std::uint32_t>(l.stride));
  w.u8(static_cast<std::uint32_t>(q.param_format.integer_bits));
  w.u8(static_cast<std::uint32_t>(q.param_format.fraction_bits));
  const int width = q.param_format.byte_width();
  for (auto v : q.weights) w.sint(v, width);
  for (auto v : q.scale) w.sint(v, width);
  for (int c = 0; c < l.out_channels; ++c) w.u8(static_cast<std::uint32_t>(q.exponent(c)));
  for (auto v : q.shift) w.sint(v, width);
}

void check_layer_fits(const AdderLayer& l) {
  if (l.kernel > 0xFF || l.stride > 0xFF || l.in_channels > 0xFFFF || l.out_channels > 0xFFFF)
    throw FormatError("layer dimensions exceed the file format field widths");
}

}  // namespace

Bytes encode_params(const NetworkModel& model) {
  if (!model.is_quantized()) throw InvalidArgument("parameter export needs a quantized model");
  if (model.layers.size() > 0xFF) throw FormatError("too many layers for the parameter format");
  Writer w;
  w.bytes("FLNP");
  w.u16(kParamsVersion);
  w.u8(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& l : model.layers) {
    check_layer_fits(l);
    write_params_layer(w, l);
  }
  return w.take();
}

void decode_params(const Bytes& bytes, NetworkModel& model) {
  Reader r(bytes, "parameter file");
  r.magic("FLNP");
  r.version(kParamsVersion);
  const auto count = r.u8();
  if (count != model.layers.size()) throw FormatError("parameter file: layer count mismatch");
  for (auto& l : model.layers) {
    const auto kind = r.u8();
    const auto k = r.u8();
    const auto ci = r.u16();
    const auto co = r.u16();
    const auto s = r.u8();
    if (kind != static_cast<std::uint32_t>(l.kind) || k != static_cast<std::uint32_t>(l.kernel) ||
        ci != static_cast<std::uint32_t>(l.in_channels) ||
        co != static_cast<std::uint32_t>(l.out_channels) || s != static_cast<std::uint32_t>(l.stride))
      throw FormatError("parameter file: layer shape does not match the architecture");
    QuantizedLayer q;
    q.param_format.integer_bits = static_cast<int>(r.u8());
    q.param_format.fraction_bits = static_cast<int>(r.u8());
    q.param_format.validate();
    const int width = q.param_format.byte_width();
    auto words = [&](std::size_t n) {
      std::vector<std::int64_t> v(n);
      for (auto& x : v) x = r.sint(width);
      return v;
    };
    q.weights = words(l.weights.size());
    q.scale = words(static_cast<std::size_t>(l.out_channels));
    q.scale_exponent.resize(static_cast<std::size_t>(l.out_channels));
    for (auto& e : q.scale_exponent) e = static_cast<int>(r.u8());
    q.shift = words(static_cast<std::size_t>(l.out_channels));
    l.quantized = std::move(q);
  }
  r.finish();
}

Bytes encode_model(const NetworkModel& model) {
  model.validate();
  if (model.has_unfolded_bn()) throw InvalidArgument("fold batch-norm before saving a model");
  if (model.layers.size() > 0xFF || model.input_length > 0xFFFF)
    throw FormatError("model too large for the file format");
  Writer w;
  w.bytes("FLNM");
  w.u16(kModelVersion);
  w.u8(static_cast<std::uint32_t>(model.variant));
  w.u16(static_cast<std::uint32_t>(model.input_length));
  w.u32(model.gate_threshold);
  w.u8(static_cast<std::uint32_t>(model.pre_count));
  w.u8(static_cast<std::uint32_t>(model.post_count));
  w.u8(static_cast<std::uint32_t>(model.head_depth));
  w.u8(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& l : model.layers) {
    check_layer_fits(l);
    w.u8(static_cast<std::uint32_t>(l.kind));
    w.u8(static_cast<std::uint32_t>(l.kernel));
    w.u16(static_cast<std::uint32_t>(l.in_channels));
    w.u16(static_cast<std::uint32_t>(l.out_channels));
    w.u8(static_cast<std::uint32_t>(l.stride));
    w.u8(l.relu ? 1U : 0U);
  }
  for (const auto& l : model.layers) {
    for (double v : l.weights) w.f32(v);
    for (double v : l.scale) w.f32(v);
    for (double v : l.shift) w.f32(v);
  }
  if (model.is_quantized()) {
    w.u8(1);
    w.u8(static_cast<std::uint32_t>(model.fm_format->integer_bits));
    w.u8(static_cast<std::uint32_t>(model.fm_format->fraction_bits));
    w.u8(model.fm_format->saturate ? 1U : 0U);
    const auto params = encode_params(model);
    w.u32(static_cast<std::uint32_t>(params.size()));
    w.blob(params);
  } else {
    w.u8(0);
  }
  return w.take();
}

NetworkModel decode_model(const Bytes& bytes) {
  Reader r(bytes, "model");
  r.magic("FLNM");
  r.version(kModelVersion);
  NetworkModel m;
  const auto variant = r.u8();
  if (variant > 1) throw FormatError("model: unknown variant tag");
  m.variant = static_cast<Variant>(variant);
  m.input_length = static_cast<int>(r.u16());
  m.gate_threshold = r.u32();
  m.pre_count = static_cast<int>(r.u8());
  m.post_count = static_cast<int>(r.u8());
  m.head_depth = static_cast<int>(r.u8());
  const auto count = r.u8();
  for (std::uint32_t i = 0; i < count; ++i) {
    AdderLayer l;
    const auto kind = r.u8();
    if (kind > 1) throw FormatError("model: unknown layer kind");
    l.kind = static_cast<LayerKind>(kind);
    l.kernel = static_cast<int>(r.u8());
    l.in_channels = static_cast<int>(r.u16());
    l.out_channels = static_cast<int>(r.u16());
    l.stride = static_cast<int>(r.u8());
    l.relu = r.u8() != 0;
    m.layers.push_back(std::move(l));
  }
  for (auto& l : m.layers) {
    l.weights.resize(static_cast<std::size_t>(l.kernel) * l.in_channels * l.out_channels);
    l.scale.resize(static_cast<std::size_t>(l.out_channels));
    l.shift.resize(static_cast<std::size_t>(l.out_channels));
    for (auto& v : l.weights) v = r.f32();
    for (auto& v : l.scale) v = r.f32();
    for (auto& v : l.shift) v = r.f32();
  }
  if (r.u8() != 0) {
    QFormat fm;
    fm.integer_bits = static_cast<int>(r.u8());
    fm.fraction_bits = static_cast<int>(r.u8());
    fm.saturate = r.u8() != 0;
    fm.validate();
    const auto n = r.u32();
    decode_params(r.blob(n), m);
    m.fm_format = fm;
  }
  r.finish();
  try {
    m.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("model: inconsistent architecture: ") + e.what());
  }
  return m;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw FormatError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw FormatError("cannot move output into place: " + path.string());
  }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, Bytes(text.begin(), text.end()));
}

std::vector<LabeledDecay> read_dataset(const std::filesystem::path& path) {
  auto records = decode_dataset(read_file(path));
  auto sidecar = path;
  sidecar += ".edges";
  if (std::filesystem::exists(sidecar)) {
    const auto bytes = read_file(sidecar);
    auto edges = edges_from_text(std::string(bytes.begin(), bytes.end()));
    if (!records.empty() && edges.size() != records.front().histogram.counts.size() + 1)
      throw FormatError("edges sidecar does not match the dataset bin count");
    for (auto& r : records) r.histogram.bin_edges = edges;
  }
  return records;
}

void write_dataset(const std::filesystem::path& path, const std::vector<LabeledDecay>& records) {
  const auto bytes = encode_dataset(records);
  if (!records.empty() && records.front().histogram.bin_edges) {
    auto sidecar = path;
    sidecar += ".edges";
    write_text_atomic(sidecar, edges_to_text(*records.front().histogram.bin_edges));
  }
  write_file_atomic(path, bytes);
}

NetworkModel read_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

void write_model(const std::filesystem::path& path, const NetworkModel& model) {
  write_file_atomic(path, encode_model(model));
}

std::string dataset_to_text(const std::vector<LabeledDecay>& records) {
  std::ostringstream out;
  out.precision(9);
  for (const auto& r : records) {
    for (auto c : r.histogram.counts) out << c << ',';
    out << r.label.tau_a << ',' << r.label.tau_i << '\n';
  }
  return out.str();
}

std::string edges_to_text(const std::vector<int>& edges) {
  std::ostringstream out;
  for (int e : edges) out << e << '\n';
  return out.str();
}

std::vector<int> edges_from_text(const std::string& text) {
  std::istringstream in(text);
  std::vector<int> edges;
  int v = 0;
  while (in >> v) edges.push_back(v);
  if (!in.eof()) throw FormatError("edges sidecar: non-integer entry");
  return edges;
}

}  // namespace flim::io
