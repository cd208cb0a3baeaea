#pragma once

// "NANO" checkpoint container. All integers little-endian.
//
//   magic      4 bytes  "NANO"
//   version    u16      kCheckpointVersion
//   config     6 x u32  vocab_size d_model n_layers n_heads d_ff max_seq
//   n_meta     u32      then per entry: u16 key length, key, u32 value length, value
//   n_tensors  u32      then per entry (the directory):
//                         u16 name length, name, 4-byte dtype tag ("f64\0" | "q4g\0"),
//                         u8 ndim, ndim x u32 dims, u64 offset, u64 byte length
//   payload             offsets are relative to the first payload byte
//
// f64 tensors are row-major IEEE-754 doubles. The q4g payload is defined
// in gptq.hpp.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nanodistill/error.hpp"
#include "nanodistill/linalg.hpp"
#include "nanodistill/nanomodel.hpp"

namespace nanodistill {

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::array<char, 4> kDtypeF64 = {'f', '6', '4', '\0'};
inline constexpr std::array<char, 4> kDtypeQ4G = {'q', '4', 'g', '\0'};

namespace io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void chars(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw InvalidArgument("string too long for u16 length");
    u16(static_cast<std::uint16_t>(s.size()));
    chars(s);
  }
  void str32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    chars(s);
  }
  std::size_t size() const { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data, std::string what = "file")
      : data_(data), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string chars(std::size_t n) {
    auto b = bytes(n);
    return {reinterpret_cast<const char*>(b.data()), b.size()};
  }
  std::string str16() { return chars(u16()); }
  std::string str32() { return chars(u32()); }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_)
      throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", " + std::to_string(data_.size() - pos_) + " left)");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return data;
}

// Writes through a sibling temporary and renames, so readers never observe a
// half-written file.
inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::string read_text(const std::filesystem::path& path) {
  auto b = read_file(path);
  return {b.begin(), b.end()};
}

}  // namespace io

struct TensorRecord {
  std::string name;
  std::array<char, 4> dtype = kDtypeF64;
  std::vector<std::uint32_t> shape;
  std::vector<std::uint8_t> payload;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const std::string* meta(std::string_view key) const {
    for (const auto& [k, v] : metadata)
      if (k == key) return &v;
    return nullptr;
  }
};

inline TensorRecord f64_record(const std::string& name, const Matrix& m) {
  TensorRecord t;
  t.name = name;
  t.dtype = kDtypeF64;
  if (m.rows() == 1) {
    t.shape = {static_cast<std::uint32_t>(m.cols())};
  } else {
    t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  }
  io::ByteWriter w;
  for (double v : m.values()) w.f64(v);
  t.payload = w.take();
  return t;
}

inline Matrix f64_matrix(const TensorRecord& t) {
  if (t.dtype != kDtypeF64) throw FormatError("tensor " + t.name + " is not f64");
  const std::size_t rows = t.shape.size() == 2 ? t.shape[0] : 1;
  const std::size_t cols = t.shape.empty() ? 0 : t.shape.back();
  if (t.payload.size() != rows * cols * 8) throw FormatError("tensor " + t.name + ": payload size mismatch");
  io::ByteReader r(t.payload, t.name);
  std::vector<double> data(rows * cols);
  for (double& v : data) v = r.f64();
  return Matrix(rows, cols, std::move(data));
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.chars("NANO");
  w.u16(kCheckpointVersion);
  for (std::size_t v : {ck.config.vocab_size, ck.config.d_model, ck.config.n_layers, ck.config.n_heads,
                        ck.config.d_ff, ck.config.max_seq})
    w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(ck.metadata.size()));
  for (const auto& [k, v] : ck.metadata) {
    w.str16(k);
    w.str32(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    w.str16(t.name);
    for (char c : t.dtype) w.u8(static_cast<std::uint8_t>(c));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(d);
    w.u64(offset);
    w.u64(t.payload.size());
    offset += t.payload.size();
  }
  for (const auto& t : ck.tensors) w.bytes(t.payload);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> data) {
  io::ByteReader r(data, "checkpoint");
  if (r.chars(4) != "NANO") throw FormatError("checkpoint: bad magic");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw VersionMismatch(version, kCheckpointVersion);
  Checkpoint ck;
  ck.config.vocab_size = r.u32();
  ck.config.d_model = r.u32();
  ck.config.n_layers = r.u32();
  ck.config.n_heads = r.u32();
  ck.config.d_ff = r.u32();
  ck.config.max_seq = r.u32();
  try {
    ck.config.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const auto n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str16();
    std::string v = r.str32();
    ck.metadata.emplace_back(std::move(k), std::move(v));
  }
  const auto n_tensors = r.u32();
  struct Entry {
    std::uint64_t offset, length;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorRecord t;
    t.name = r.str16();
    for (char& c : t.dtype) c = static_cast<char>(r.u8());
    if (t.dtype != kDtypeF64 && t.dtype != kDtypeQ4G)
      throw FormatError("checkpoint: tensor " + t.name + " has unknown dtype tag");
    const auto ndim = r.u8();
    if (ndim < 1 || ndim > 2) throw FormatError("checkpoint: tensor " + t.name + " has ndim " + std::to_string(ndim));
    for (std::uint8_t d = 0; d < ndim; ++d) t.shape.push_back(r.u32());
    entries.push_back({r.u64(), r.u64()});
    ck.tensors.push_back(std::move(t));
  }
  const std::size_t payload_start = r.position();
  const std::size_t payload_size = data.size() - payload_start;
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    const auto [off, len] = entries[i];
    if (off > payload_size || len > payload_size - off)
      throw FormatError("checkpoint: tensor " + ck.tensors[i].name + " extends past end of file (truncated?)");
    auto b = data.subspan(payload_start + off, len);
    ck.tensors[i].payload.assign(b.begin(), b.end());
    if (ck.tensors[i].dtype == kDtypeF64) {
      std::size_t count = 1;
      for (auto d : ck.tensors[i].shape) count *= d;
      if (count * 8 != len) throw FormatError("checkpoint: tensor " + ck.tensors[i].name + " byte length disagrees with shape");
    }
  }
  return ck;
}

inline Checkpoint to_checkpoint(const NanoModel& model) {
  Checkpoint ck;
  ck.config = model.config();
  for (const auto& [name, m] : model.params()) ck.tensors.push_back(f64_record(name, m));
  return ck;
}

// Rebuilds the base model. Tensors outside the model's parameter set (adapters,
// extra records) are ignored; quantized base tensors are rejected.
inline NanoModel model_from_checkpoint(const Checkpoint& ck) {
  NanoModel model(ck.config);
  for (auto& [name, p] : model.params()) {
    const TensorRecord* t = ck.find(name);
    if (!t) throw FormatError("checkpoint: missing tensor " + name);
    if (t->dtype != kDtypeF64)
      throw FormatError("checkpoint: tensor " + name + " is quantized; load it as a quantized model");
    Matrix m = f64_matrix(*t);
    if (!m.same_shape(p))
      throw FormatError("checkpoint: tensor " + name + " is " + m.shape_string() + ", header config implies " +
                        p.shape_string());
    p = std::move(m);
  }
  return model;
}

inline void save_checkpoint(const NanoModel& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(to_checkpoint(model)));
}

inline NanoModel load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return model_from_checkpoint(decode_checkpoint(bytes));
}

}  // namespace nanodistill
