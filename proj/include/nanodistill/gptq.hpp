#pragma once

// Weight-only post-training quantization (w4a16 by default): a round-to-nearest
// baseline, GPTQ error propagation, nibble packing and the memory estimate.
//
// Weights are out x in; groups run along the input dimension of each row.
// Dequantized value = (code - zero) * scale, scales stored as IEEE half.
//
// q4g tensor payload (little-endian), shape = [rows, cols]:
//   u32 group_size, u8 bits, 3 x u8 reserved (0)
//   codes   rows x ceil(cols / 2) bytes; low nibble = even column (bits = 8: one byte per code)
//   scales  rows x groups u16 half floats, row-major
//   zeros   rows x groups codes, flat row-major, nibble-packed the same way

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nanodistill/checkpoint.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/util.hpp"

namespace nanodistill {

// ---------------------------------------------------------------------------
// IEEE binary16

namespace half {

inline double to_double(std::uint16_t h) {
  const int sign = (h >> 15) & 1;
  const int exp = (h >> 10) & 0x1f;
  const int frac = h & 0x3ff;
  double v;
  if (exp == 0)
    v = std::ldexp(static_cast<double>(frac), -24);
  else if (exp == 31)
    v = frac ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
  else
    v = std::ldexp(static_cast<double>(frac | 0x400), exp - 25);
  return sign ? -v : v;
}

inline constexpr double kMax = 65504.0;
inline constexpr double kMinSubnormal = 0x1p-24;

// Smallest half >= x, for finite 0 <= x <= kMax.
inline std::uint16_t from_double_ceil(double x) {
  if (!(x >= 0.0) || x > kMax) throw NumericalError("value " + std::to_string(x) + " has no half-precision ceiling");
  if (x == 0.0) return 0;
  int e;
  std::frexp(x, &e);  // x = m * 2^e, m in [0.5, 1)
  const int unbiased = e - 1;
  if (unbiased < -14) return static_cast<std::uint16_t>(std::ceil(std::ldexp(x, 24)));  // subnormal
  const double m = std::ldexp(x, -unbiased);                                             // [1, 2)
  int frac = static_cast<int>(std::ceil((m - 1.0) * 1024.0));
  int biased = unbiased + 15;
  if (frac == 1024) {
    frac = 0;
    ++biased;
  }
  if (biased >= 31) throw NumericalError("half ceiling overflow");
  return static_cast<std::uint16_t>((biased << 10) | frac);
}

// Round-to-nearest-even half.
inline std::uint16_t from_double(double x) {
  if (std::isnan(x)) return 0x7e00;
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  const double a = std::abs(x);
  if (a >= 65520.0) return sign | 0x7c00;
  if (a < std::ldexp(1.0, -14)) return sign | static_cast<std::uint16_t>(std::nearbyint(std::ldexp(a, 24)));
  int e;
  std::frexp(a, &e);
  const int unbiased = e - 1;
  int frac = static_cast<int>(std::nearbyint((std::ldexp(a, -unbiased) - 1.0) * 1024.0));
  int biased = unbiased + 15;
  if (frac == 1024) {
    frac = 0;
    ++biased;
  }
  return sign | static_cast<std::uint16_t>((biased << 10) | frac);
}

}  // namespace half

// ---------------------------------------------------------------------------
// Nibble packing

inline std::vector<std::uint8_t> pack_nibbles(const std::vector<std::uint8_t>& codes) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > 15) throw InvalidArgument("code " + std::to_string(codes[i]) + " does not fit a nibble");
    out[i / 2] |= static_cast<std::uint8_t>(i % 2 ? codes[i] << 4 : codes[i]);
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_nibbles(const std::vector<std::uint8_t>& bytes, std::size_t count) {
  if (bytes.size() < (count + 1) / 2) throw FormatError("nibble stream shorter than its code count");
  std::vector<std::uint8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = i % 2 ? bytes[i / 2] >> 4 : bytes[i / 2] & 0x0f;
  return out;
}

// ---------------------------------------------------------------------------
// Plan and quantized layer

struct QuantPlan {
  unsigned weight_bits = 4;
  unsigned activation_bits = 16;
  std::size_t group_size = 128;
  std::vector<std::string> include = {"layers.*"};
  std::vector<std::string> exclude;
  double damp_fraction = 0.01;

  void validate() const {
    if (weight_bits != 2 && weight_bits != 3 && weight_bits != 4 && weight_bits != 8)
      throw InvalidArgument("weight bits must be one of 2, 3, 4, 8");
    if (activation_bits != 16) throw InvalidArgument("only 16-bit activations are supported (weight-only)");
    if (group_size < 1) throw InvalidArgument("group size must be >= 1");
    if (!(damp_fraction >= 0.0)) throw InvalidArgument("dampening fraction must be >= 0");
  }

  bool selects(const std::string& name) const { return matches_any(include, name) && !matches_any(exclude, name); }
  unsigned max_code() const { return (1u << weight_bits) - 1; }
};

class QuantizedLinear {
 public:
  QuantizedLinear() = default;
  QuantizedLinear(std::size_t rows, std::size_t cols, std::size_t group_size, unsigned bits)
      : rows_(rows), cols_(cols), group_(std::clamp<std::size_t>(group_size, 1, cols)), bits_(bits),
        codes_(rows * cols), scales_(rows * groups()), zeros_(rows * groups()) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t group_size() const { return group_; }
  unsigned bits() const { return bits_; }
  std::size_t groups() const { return (cols_ + group_ - 1) / group_; }

  std::uint8_t code(std::size_t r, std::size_t c) const { return codes_[r * cols_ + c]; }
  std::uint8_t zero(std::size_t r, std::size_t g) const { return zeros_[r * groups() + g]; }
  std::uint16_t scale_bits(std::size_t r, std::size_t g) const { return scales_[r * groups() + g]; }
  double scale(std::size_t r, std::size_t g) const { return half::to_double(scale_bits(r, g)); }

  void set_group(std::size_t r, std::size_t g, std::uint16_t scale_bits, std::uint8_t zero) {
    scales_[r * groups() + g] = scale_bits;
    zeros_[r * groups() + g] = zero;
  }
  void set_code(std::size_t r, std::size_t c, std::uint8_t code) { codes_[r * cols_ + c] = code; }

  double value(std::size_t r, std::size_t c) const {
    const std::size_t g = c / group_;
    return (static_cast<double>(code(r, c)) - static_cast<double>(zero(r, g))) * scale(r, g);
  }

  Matrix dequantize() const {
    Matrix w(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) w(r, c) = value(r, c);
    return w;
  }

  // Packed bytes: codes + half scales + zero codes.
  static std::size_t storage_bytes(std::size_t rows, std::size_t cols, std::size_t group_size, unsigned bits) {
    const std::size_t g = std::clamp<std::size_t>(group_size, 1, cols);
    const std::size_t ngroups = (cols + g - 1) / g;
    if (bits > 4) return rows * cols + rows * ngroups * 2 + rows * ngroups;
    return rows * ((cols + 1) / 2) + rows * ngroups * 2 + (rows * ngroups + 1) / 2;
  }
  std::size_t storage_bytes() const { return storage_bytes(rows_, cols_, group_, bits_); }

  std::vector<std::uint8_t> encode() const {
    io::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(group_));
    w.u8(static_cast<std::uint8_t>(bits_));
    for (int i = 0; i < 3; ++i) w.u8(0);
    if (bits_ > 4) {
      w.bytes(codes_);
    } else {
      for (std::size_t r = 0; r < rows_; ++r) {
        std::vector<std::uint8_t> row(codes_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                                      codes_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_));
        w.bytes(pack_nibbles(row));
      }
    }
    for (auto s : scales_) w.u16(s);
    if (bits_ > 4)
      w.bytes(zeros_);
    else
      w.bytes(pack_nibbles(zeros_));
    return w.take();
  }

  static QuantizedLinear decode(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> payload,
                                const std::string& name) {
    io::ByteReader r(payload, name);
    const std::uint32_t group = r.u32();
    const unsigned bits = r.u8();
    r.bytes(3);
    if (group == 0 || cols == 0 || rows == 0) throw FormatError(name + ": empty quantized tensor");
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8) throw FormatError(name + ": unsupported bit width");
    QuantizedLinear q(rows, cols, group, bits);
    if (payload.size() != 8 + q.storage_bytes()) throw FormatError(name + ": q4g payload size mismatch");
    const unsigned max_code = (1u << bits) - 1;
    if (bits > 4) {
      auto b = r.bytes(rows * cols);
      q.codes_.assign(b.begin(), b.end());
    } else {
      const std::size_t per_row = (cols + 1) / 2;
      for (std::size_t i = 0; i < rows; ++i) {
        auto b = r.bytes(per_row);
        const auto codes = unpack_nibbles(std::vector<std::uint8_t>(b.begin(), b.end()), cols);
        std::copy(codes.begin(), codes.end(), q.codes_.begin() + static_cast<std::ptrdiff_t>(i * cols));
      }
    }
    for (auto& s : q.scales_) s = r.u16();
    const std::size_t nz = rows * q.groups();
    if (bits > 4) {
      auto b = r.bytes(nz);
      q.zeros_.assign(b.begin(), b.end());
    } else {
      auto b = r.bytes((nz + 1) / 2);
      q.zeros_ = unpack_nibbles(std::vector<std::uint8_t>(b.begin(), b.end()), nz);
    }
    for (auto c : q.codes_)
      if (c > max_code) throw FormatError(name + ": code exceeds bit width");
    for (auto z : q.zeros_)
      if (z > max_code) throw FormatError(name + ": zero point exceeds bit width");
    return q;
  }

  friend bool operator==(const QuantizedLinear&, const QuantizedLinear&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0, group_ = 1;
  unsigned bits_ = 4;
  std::vector<std::uint8_t> codes_;
  std::vector<std::uint16_t> scales_;
  std::vector<std::uint8_t> zeros_;
};

namespace detail {

struct GroupParams {
  std::uint16_t scale_bits;
  double scale;
  std::uint8_t zero;
};

// Asymmetric min/max over values, with the range widened to contain 0 so the
// zero point stays inside the code range. The scale is rounded up to half so
// the full range remains representable.
inline GroupParams group_params(std::span<const double> values, unsigned max_code) {
  double lo = 0.0, hi = 0.0;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double raw = std::max((hi - lo) / max_code, half::kMinSubnormal);
  GroupParams p;
  p.scale_bits = half::from_double_ceil(raw);
  p.scale = half::to_double(p.scale_bits);
  p.zero = static_cast<std::uint8_t>(std::clamp(std::nearbyint(-lo / p.scale), 0.0, static_cast<double>(max_code)));
  return p;
}

inline std::uint8_t quantize_value(double w, const GroupParams& p, unsigned max_code) {
  return static_cast<std::uint8_t>(
      std::clamp(std::nearbyint(w / p.scale) + p.zero, 0.0, static_cast<double>(max_code)));
}

inline double dequantize_value(std::uint8_t code, const GroupParams& p) {
  return (static_cast<double>(code) - static_cast<double>(p.zero)) * p.scale;
}

}  // namespace detail

inline QuantizedLinear rtn_quantize(const Matrix& w, const QuantPlan& plan) {
  plan.validate();
  if (w.empty()) throw DimensionError("rtn_quantize: empty weight");
  QuantizedLinear q(w.rows(), w.cols(), plan.group_size, plan.weight_bits);
  const unsigned mc = plan.max_code();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    for (std::size_t g = 0; g < q.groups(); ++g) {
      const std::size_t b = g * q.group_size(), e = std::min(w.cols(), b + q.group_size());
      const auto p = detail::group_params(row.subspan(b, e - b), mc);
      q.set_group(r, g, p.scale_bits, p.zero);
      for (std::size_t c = b; c < e; ++c) q.set_code(r, c, detail::quantize_value(row[c], p, mc));
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Hessian of the layer-wise reconstruction loss

class HessianAccumulator {
 public:
  explicit HessianAccumulator(std::size_t dim) : h_(dim, dim) {}

  std::size_t dim() const { return h_.rows(); }
  std::size_t samples() const { return count_; }
  const Matrix& hessian() const { return h_; }

  // H += 2 X^T X for X with one sample per row.
  void add(const Matrix& x) {
    if (x.cols() != dim())
      throw DimensionError("hessian: inputs have width " + std::to_string(x.cols()) + ", layer expects " +
                           std::to_string(dim()));
    const std::size_t d = dim();
    for (std::size_t n = 0; n < x.rows(); ++n) {
      const auto v = x.row(n);
      for (std::size_t i = 0; i < d; ++i) {
        if (v[i] == 0.0) continue;
        const double s = 2.0 * v[i];
        double* hr = h_.row(i).data();
        for (std::size_t j = i; j < d; ++j) hr[j] += s * v[j];
      }
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) h_(j, i) = h_(i, j);
    count_ += x.rows();
  }

 private:
  Matrix h_;
  std::size_t count_ = 0;
};

// GPTQ on one layer: columns in natural order; each column's rounding error is
// pushed into the remaining columns through the upper Cholesky factor of
// (H + lambda I)^-1, lambda = damp_fraction * mean(diag H). Groups take their
// parameters from the error-updated weights when they are first reached.
inline QuantizedLinear gptq_quantize_layer(const Matrix& weight, const Matrix& hessian, const QuantPlan& plan) {
  plan.validate();
  const std::size_t rows = weight.rows(), cols = weight.cols();
  if (weight.empty()) throw DimensionError("gptq: empty weight");
  if (hessian.rows() != cols || hessian.cols() != cols)
    throw DimensionError("gptq: hessian is " + hessian.shape_string() + " for weight " + weight.shape_string());
  Matrix w = weight;
  Matrix h = hessian;
  for (std::size_t i = 0; i < cols; ++i) {
    if (h(i, i) == 0.0) {  // input never active: its weights cannot matter
      h(i, i) = 1.0;
      for (std::size_t r = 0; r < rows; ++r) w(r, i) = 0.0;
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < cols; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(cols);
  for (std::size_t i = 0; i < cols; ++i) h(i, i) += plan.damp_fraction * mean_diag;
  Matrix u;
  try {
    u = cholesky(spd_inverse(h)).transposed();
  } catch (const NotPositiveDefinite& e) {
    throw NumericalError(std::string("gptq: hessian singular even after dampening (") + e.what() + ")");
  }

  QuantizedLinear q(rows, cols, plan.group_size, plan.weight_bits);
  const unsigned mc = plan.max_code();
  const std::size_t gs = q.group_size();
  std::vector<detail::GroupParams> params(rows);
  std::vector<double> column(gs);
  for (std::size_t i = 0; i < cols; ++i) {
    if (i % gs == 0) {
      const std::size_t e = std::min(cols, i + gs);
      for (std::size_t r = 0; r < rows; ++r) {
        params[r] = detail::group_params(w.row(r).subspan(i, e - i), mc);
        q.set_group(r, i / gs, params[r].scale_bits, params[r].zero);
      }
    }
    const double d = u(i, i);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::uint8_t code = detail::quantize_value(w(r, i), params[r], mc);
      q.set_code(r, i, code);
      const double err = (w(r, i) - detail::dequantize_value(code, params[r])) / d;
      double* wr = w.row(r).data();
      const double* ur = u.row(i).data();
      for (std::size_t j = i + 1; j < cols; ++j) wr[j] -= err * ur[j];
    }
  }
  return q;
}

// ||(W - What) X^T||_F^2 for calibration inputs X (one sample per row).
inline double reconstruction_error(const Matrix& w, const QuantizedLinear& q, const Matrix& x) {
  const Matrix diff = w - q.dequantize();
  const Matrix y = matmul_nt(x, diff);
  double s = 0.0;
  for (double v : y.values()) s += v * v;
  return s;
}

// ---------------------------------------------------------------------------
// Whole model

class QuantModel {
 public:
  QuantModel(NanoModel model, std::map<std::string, QuantizedLinear> layers, QuantPlan plan)
      : model_(std::move(model)), layers_(std::move(layers)), plan_(std::move(plan)) {
    for (const auto& [name, q] : layers_) model_.param(name) = q.dequantize();
  }

  // Full-precision view with every quantized layer replaced by its dequantized weights.
  const NanoModel& model() const { return model_; }
  const std::map<std::string, QuantizedLinear>& layers() const { return layers_; }
  const QuantPlan& plan() const { return plan_; }

  Checkpoint to_checkpoint() const {
    Checkpoint ck = nanodistill::to_checkpoint(model_);
    ck.metadata.emplace_back("quant.weight_bits", std::to_string(plan_.weight_bits));
    ck.metadata.emplace_back("quant.group_size", std::to_string(plan_.group_size));
    ck.metadata.emplace_back("quant.damp_fraction", strprintf("%.17g", plan_.damp_fraction));
    for (auto& t : ck.tensors) {
      auto it = layers_.find(t.name);
      if (it == layers_.end()) continue;
      t.dtype = kDtypeQ4G;
      t.payload = it->second.encode();
    }
    return ck;
  }

  static QuantModel from_checkpoint(const Checkpoint& ck) {
    Checkpoint fp = ck;
    std::map<std::string, QuantizedLinear> layers;
    for (auto& t : fp.tensors) {
      if (t.dtype != kDtypeQ4G) continue;
      if (t.shape.size() != 2) throw FormatError("q4g tensor " + t.name + " must be 2-D");
      QuantizedLinear q = QuantizedLinear::decode(t.shape[0], t.shape[1], t.payload, t.name);
      t = f64_record(t.name, q.dequantize());
      layers.emplace(t.name, std::move(q));
    }
    QuantPlan plan;
    if (const auto* b = ck.meta("quant.weight_bits")) plan.weight_bits = static_cast<unsigned>(std::stoul(*b));
    if (const auto* g = ck.meta("quant.group_size")) plan.group_size = std::stoul(*g);
    if (const auto* d = ck.meta("quant.damp_fraction")) plan.damp_fraction = std::stod(*d);
    return QuantModel(model_from_checkpoint(fp), std::move(layers), plan);
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, encode_checkpoint(to_checkpoint())); }
  static QuantModel load(const std::filesystem::path& path) {
    return from_checkpoint(decode_checkpoint(io::read_file(path)));
  }

 private:
  NanoModel model_;
  std::map<std::string, QuantizedLinear> layers_;
  QuantPlan plan_;
};

inline std::vector<std::string> planned_layers(const NanoModel& model, const QuantPlan& plan) {
  std::vector<std::string> out;
  for (const auto& name : model.linear_layer_names())
    if (plan.selects(name)) out.push_back(name);
  return out;
}

// Quantizes the selected block linears one at a time in execution order; the
// Hessian of each layer comes from inputs produced by the partially quantized
// model, so later layers see (and compensate for) earlier rounding.
inline QuantModel quantize_model(const NanoModel& model, const TokenBatch& calibration, const QuantPlan& plan,
                                 bool use_gptq = true) {
  plan.validate();
  const auto names = planned_layers(model, plan);
  if (names.empty()) throw InvalidArgument("quantization plan [" + join(plan.include, ", ") + "] matches no layer");
  if (use_gptq && calibration.size() == 0) throw InvalidArgument("quantize_model: empty calibration set");
  NanoModel work = model;
  std::map<std::string, QuantizedLinear> layers;
  for (const auto& name : names) {
    const Matrix& w = work.param(name);
    QuantizedLinear q;
    if (use_gptq) {
      HessianAccumulator acc(w.cols());
      const ForwardPass pass(work, calibration);
      for (std::size_t s = 0; s < calibration.size(); ++s) acc.add(pass.linear_input(s, name));
      q = gptq_quantize_layer(w, acc.hessian(), plan);
    } else {
      q = rtn_quantize(w, plan);
    }
    work.param(name) = q.dequantize();
    layers.emplace(name, std::move(q));
  }
  return QuantModel(model, std::move(layers), plan);
}

// ---------------------------------------------------------------------------
// Memory accounting: full-precision parameters at 2 bytes (16-bit equivalent),
// quantized layers at their packed size.

inline std::size_t estimate_memory(const NanoModel& model) { return 2 * model.parameter_count(); }

inline std::size_t estimate_memory(const QuantModel& qm) {
  std::size_t bytes = 0;
  for (const auto& [name, p] : qm.model().params()) {
    auto it = qm.layers().find(name);
    bytes += it == qm.layers().end() ? 2 * p.size() : it->second.storage_bytes();
  }
  return bytes;
}

// Size the model would have after applying `plan`, without quantizing.
inline std::size_t estimate_memory(const NanoModel& model, const QuantPlan& plan) {
  plan.validate();
  const auto names = planned_layers(model, plan);
  std::size_t bytes = 0;
  for (const auto& [name, p] : model.params()) {
    const bool q = std::find(names.begin(), names.end(), name) != names.end();
    bytes += q ? QuantizedLinear::storage_bytes(p.rows(), p.cols(), plan.group_size, plan.weight_bits) : 2 * p.size();
  }
  return bytes;
}

struct BudgetCheck {
  bool pass = true;
  std::string warning;  // set when no budget constrains the run
};

inline BudgetCheck check_budget(std::size_t estimate, std::optional<std::size_t> budget) {
  if (!budget) return {true, "no memory budget set; constraint relaxed"};
  if (*budget == 0) throw InvalidArgument("memory budget must be > 0");
  return {estimate <= *budget, {}};
}

}  // namespace nanodistill
