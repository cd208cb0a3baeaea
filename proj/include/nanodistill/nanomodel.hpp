#pragma once

// Miniature decoder-only transformer with exact reverse-mode gradients.
//
// Architecture: learned token + position embeddings, n_layers pre-LN blocks
// (causal multi-head attention, GELU MLP), final layer norm, untied output
// head. Linear weights are stored out x in and applied as y = x W^T.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "nanodistill/error.hpp"
#include "nanodistill/linalg.hpp"
#include "nanodistill/tokenizer.hpp"

namespace nanodistill {

struct ModelConfig {
  std::size_t vocab_size = CharTokenizer::kVocabSize;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq = 48;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq < 1) {
      throw InvalidArgument("model config: all sizes must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw InvalidArgument("model config: d_model " + std::to_string(d_model) +
                            " not divisible by n_heads " + std::to_string(n_heads));
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Parameter and gradient containers. Ordered so iteration is deterministic.
// One-dimensional parameters (layer-norm gains and biases) are 1 x n.
using ParamMap = std::map<std::string, Matrix>;
using GradientMap = ParamMap;

inline bool is_matrix_param(const Matrix& m) { return m.rows() > 1 && m.cols() > 1; }

inline std::string layer_prefix(std::size_t layer) {
  return "layers." + std::to_string(layer) + ".";
}

// Low-rank update scale * A B on top of a frozen linear weight W (out x in):
// A is out x r, B is r x in.
struct LowRankPair {
  Matrix a;
  Matrix b;
};

struct AdapterSet {
  double scale = 1.0;
  std::map<std::string, LowRankPair> pairs;

  const LowRankPair* find(const std::string& layer) const {
    auto it = pairs.find(layer);
    return it == pairs.end() ? nullptr : &it->second;
  }
};

class NanoModel {
 public:
  NanoModel() = default;

  // All parameters zero, shapes per config.
  explicit NanoModel(ModelConfig config) : config_(config) {
    config_.validate();
    const auto d = config_.d_model, f = config_.d_ff, v = config_.vocab_size;
    params_["tok_emb"] = Matrix(v, d);
    params_["pos_emb"] = Matrix(config_.max_seq, d);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = layer_prefix(l);
      params_[p + "ln1.g"] = Matrix(1, d);
      params_[p + "ln1.b"] = Matrix(1, d);
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) params_[p + w] = Matrix(d, d);
      params_[p + "ln2.g"] = Matrix(1, d);
      params_[p + "ln2.b"] = Matrix(1, d);
      params_[p + "mlp.w1"] = Matrix(f, d);
      params_[p + "mlp.w2"] = Matrix(d, f);
    }
    params_["ln_f.g"] = Matrix(1, d);
    params_["ln_f.b"] = Matrix(1, d);
    params_["head"] = Matrix(v, d);
  }

  static NanoModel initialized(ModelConfig config, Rng& rng) {
    NanoModel m(config);
    const double d = static_cast<double>(config.d_model);
    const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    for (auto& [name, w] : m.params_) {
      if (name.ends_with(".g")) {
        w.fill(1.0);
      } else if (name.ends_with(".b")) {
        // zeros
      } else if (name == "tok_emb" || name == "pos_emb") {
        for (double& x : w.values()) x = 0.1 * rng.normal();
      } else {
        double stddev = 1.0 / std::sqrt(static_cast<double>(w.cols()));
        if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) stddev *= depth_scale;
        if (name == "head") stddev = 1.0 / std::sqrt(d);
        for (double& x : w.values()) x = stddev * rng.normal();
      }
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  Matrix& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("no parameter named '" + name + "'");
    return it->second;
  }
  const Matrix& param(const std::string& name) const {
    return const_cast<NanoModel*>(this)->param(name);
  }

  // Names of every linear (projection) weight inside the blocks.
  std::vector<std::string> linear_layer_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = layer_prefix(l);
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"})
        out.push_back(p + w);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : params_) n += m.size();
    return n;
  }

  // Throws if any parameter is non-finite or has a shape that disagrees with the config.
  void validate() const {
    const NanoModel reference(config_);
    if (reference.params_.size() != params_.size())
      throw DimensionError("model has unexpected parameter set");
    for (const auto& [name, ref] : reference.params_) {
      auto it = params_.find(name);
      if (it == params_.end()) throw DimensionError("missing parameter " + name);
      if (!it->second.same_shape(ref))
        throw DimensionError("parameter " + name + " is " + it->second.shape_string() +
                             ", config implies " + ref.shape_string());
      if (!it->second.all_finite()) throw NumericalError("parameter " + name + " is not finite");
    }
  }

  friend bool operator==(const NanoModel& a, const NanoModel& b) {
    return a.config_ == b.config_ && a.params_ == b.params_;
  }

 private:
  ModelConfig config_;
  ParamMap params_;
};

// A token sequence. loss_mask[p] != 0 marks position p, whose target is
// tokens[p + 1], as supervised. An empty mask supervises every position
// that has a successor.
struct Sequence {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return tokens.size(); }
  bool supervised(std::size_t p) const {
    if (p + 1 >= tokens.size()) return false;
    return loss_mask.empty() || loss_mask[p] != 0;
  }
  bool masked_out(std::size_t p) const { return !loss_mask.empty() && loss_mask[p] == 0; }
  int label(std::size_t p) const { return tokens[p + 1]; }
};

struct TokenBatch {
  std::vector<Sequence> sequences;

  std::size_t size() const { return sequences.size(); }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
};

// One (sequence length x vocab) matrix per sequence.
using Logits = std::vector<Matrix>;

namespace detail {

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix hat;
  std::vector<double> rstd;
};

inline Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias,
                                 LayerNormCache& cache) {
  const std::size_t n = x.rows(), d = x.cols();
  cache.hat = Matrix(n, d);
  cache.rstd.assign(n, 0.0);
  Matrix y(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xr = x.row(i);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rstd;
      cache.hat(i, j) = h;
      y(i, j) = gain(0, j) * h + bias(0, j);
    }
  }
  return y;
}

// Accumulates dx; dgain/dbias may be null when the parameters are frozen.
inline void layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                                Matrix& dx, Matrix* dgain, Matrix* dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  std::vector<double> dhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dhat = 0.0, mean_dhat_hat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dhat[j] = dy(i, j) * gain(0, j);
      mean_dhat += dhat[j];
      mean_dhat_hat += dhat[j] * cache.hat(i, j);
      if (dgain) (*dgain)(0, j) += dy(i, j) * cache.hat(i, j);
      if (dbias) (*dbias)(0, j) += dy(i, j);
    }
    mean_dhat /= static_cast<double>(d);
    mean_dhat_hat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) += cache.rstd[i] * (dhat[j] - mean_dhat - cache.hat(i, j) * mean_dhat_hat);
    }
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// Linear layer with an optional low-rank adapter: y = x W^T + s (x B^T) A^T.
struct LinearCache {
  Matrix z;  // x B^T, present only when adapted
};

inline Matrix linear_forward(const Matrix& x, const Matrix& w, const LowRankPair* adapter,
                             double scale, LinearCache& cache) {
  Matrix y = matmul_nt(x, w);
  if (adapter) {
    cache.z = matmul_nt(x, adapter->b);
    y.add_scaled(matmul_nt(cache.z, adapter->a), scale);
  }
  return y;
}

struct LinearGrads {
  Matrix* dw = nullptr;
  Matrix* da = nullptr;
  Matrix* db = nullptr;
};

inline void linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w,
                            const LowRankPair* adapter, double scale, const LinearCache& cache,
                            Matrix& dx, LinearGrads grads) {
  dx += matmul(dy, w);
  if (grads.dw) matmul_tn_accumulate(dy, x, *grads.dw);
  if (adapter) {
    Matrix dz = matmul(dy, adapter->a);
    dz *= scale;
    if (grads.da) {
      Matrix da = matmul_tn(dy, cache.z);
      grads.da->add_scaled(da, scale);
    }
    if (grads.db) matmul_tn_accumulate(dz, x, *grads.db);
    dx += matmul(dz, adapter->b);
  }
}

struct BlockCache {
  Matrix x_in;
  LayerNormCache ln1;
  Matrix h1;
  Matrix q, k, v;
  LinearCache lq, lk, lv, lo, l1, l2;
  std::vector<Matrix> probs;  // per head, L x L lower triangular
  Matrix attn;                // concatenated heads, input of wo
  Matrix x_mid;
  LayerNormCache ln2;
  Matrix h2;
  Matrix u;  // pre-activation, L x d_ff
  Matrix g;  // gelu(u), input of w2
};

struct SequenceCache {
  std::vector<int> tokens;
  std::vector<BlockCache> blocks;
  Matrix x_final;
  LayerNormCache lnf;
  Matrix hf;
  Matrix logits;
};

}  // namespace detail

// Gradients produced by one backward pass.
struct BackwardResult {
  GradientMap base;     // keyed like NanoModel::params(); empty when not requested
  GradientMap adapter;  // keyed "<layer>.A" / "<layer>.B"; empty without adapters
};

struct BackwardOptions {
  bool base_params = true;
  bool adapter_params = true;
};

// Runs the forward pass over a batch and keeps every activation needed to
// backpropagate an arbitrary logit-space gradient.
class ForwardPass {
 public:
  ForwardPass(const NanoModel& model, const TokenBatch& batch, const AdapterSet* adapters = nullptr)
      : model_(&model), batch_(&batch), adapters_(adapters) {
    caches_.reserve(batch.size());
    for (const auto& seq : batch.sequences) caches_.push_back(run(seq.tokens));
  }

  const TokenBatch& batch() const { return *batch_; }
  std::size_t size() const { return caches_.size(); }
  const Matrix& logits(std::size_t seq) const { return caches_[seq].logits; }
  Logits logits() const {
    Logits out;
    out.reserve(caches_.size());
    for (const auto& c : caches_) out.push_back(c.logits);
    return out;
  }

  // Attention probabilities of (sequence, layer, head).
  const Matrix& attention(std::size_t seq, std::size_t layer, std::size_t head) const {
    return caches_[seq].blocks[layer].probs[head];
  }

  // Input activations (rows = positions) that feed the named linear layer.
  const Matrix& linear_input(std::size_t seq, const std::string& linear) const {
    const auto [layer, kind] = parse_linear(linear);
    const auto& b = caches_[seq].blocks[layer];
    if (kind == "attn.wq" || kind == "attn.wk" || kind == "attn.wv") return b.h1;
    if (kind == "attn.wo") return b.attn;
    if (kind == "mlp.w1") return b.h2;
    if (kind == "mlp.w2") return b.g;
    throw InvalidArgument("unknown linear layer " + linear);
  }

  // Reverse-mode gradient of sum(logits .* loss_grad). Rows of loss_grad at
  // positions whose explicit loss mask is zero are ignored.
  BackwardResult backward(const Logits& loss_grad, BackwardOptions opts = {}) const {
    if (loss_grad.size() != caches_.size())
      throw DimensionError("backward: loss_grad has " + std::to_string(loss_grad.size()) +
                           " sequences, batch has " + std::to_string(caches_.size()));
    BackwardResult result;
    if (opts.base_params) {
      for (const auto& [name, p] : model_->params()) result.base[name] = Matrix(p.rows(), p.cols());
    }
    if (adapters_ && opts.adapter_params) {
      for (const auto& [name, pair] : adapters_->pairs) {
        result.adapter[name + ".A"] = Matrix(pair.a.rows(), pair.a.cols());
        result.adapter[name + ".B"] = Matrix(pair.b.rows(), pair.b.cols());
      }
    }
    for (std::size_t s = 0; s < caches_.size(); ++s) {
      if (!loss_grad[s].same_shape(caches_[s].logits))
        throw DimensionError("backward: loss_grad[" + std::to_string(s) + "] is " +
                             loss_grad[s].shape_string() + ", logits are " +
                             caches_[s].logits.shape_string());
      if (!loss_grad[s].all_finite()) throw NumericalError("backward: non-finite loss gradient");
      Matrix dlogits = loss_grad[s];
      const Sequence& seq = batch_->sequences[s];
      for (std::size_t p = 0; p < seq.size(); ++p) {
        if (seq.masked_out(p)) std::fill(dlogits.row(p).begin(), dlogits.row(p).end(), 0.0);
      }
      backprop(caches_[s], dlogits, result, opts);
    }
    return result;
  }

 private:
  static std::pair<std::size_t, std::string> parse_linear(const std::string& name) {
    if (!name.starts_with("layers.")) throw InvalidArgument("not a block linear: " + name);
    const auto dot = name.find('.', 7);
    return {std::stoul(name.substr(7, dot - 7)), name.substr(dot + 1)};
  }

  const LowRankPair* adapter_for(const std::string& name) const {
    return adapters_ ? adapters_->find(name) : nullptr;
  }
  double adapter_scale() const { return adapters_ ? adapters_->scale : 0.0; }

  detail::SequenceCache run(const std::vector<int>& tokens) const {
    using namespace detail;
    const ModelConfig& cfg = model_->config();
    const std::size_t n = tokens.size(), d = cfg.d_model;
    if (n == 0) throw InvalidArgument("forward: empty sequence");
    if (n > cfg.max_seq)
      throw InvalidArgument("forward: sequence length " + std::to_string(n) + " exceeds max_seq " +
                            std::to_string(cfg.max_seq));
    SequenceCache c;
    c.tokens = tokens;
    const Matrix& tok = model_->param("tok_emb");
    const Matrix& pos = model_->param("pos_emb");
    Matrix x(n, d);
    for (std::size_t p = 0; p < n; ++p) {
      const int t = tokens[p];
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
        throw InvalidArgument("forward: token id " + std::to_string(t) + " out of range [0, " +
                              std::to_string(cfg.vocab_size) + ")");
      for (std::size_t j = 0; j < d; ++j) x(p, j) = tok(t, j) + pos(p, j);
    }

    const std::size_t nh = cfg.n_heads, hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double s = adapter_scale();
    c.blocks.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string pre = layer_prefix(l);
      BlockCache& b = c.blocks[l];
      b.x_in = x;
      b.h1 = layer_norm_forward(x, model_->param(pre + "ln1.g"), model_->param(pre + "ln1.b"), b.ln1);
      b.q = linear_forward(b.h1, model_->param(pre + "attn.wq"), adapter_for(pre + "attn.wq"), s, b.lq);
      b.k = linear_forward(b.h1, model_->param(pre + "attn.wk"), adapter_for(pre + "attn.wk"), s, b.lk);
      b.v = linear_forward(b.h1, model_->param(pre + "attn.wv"), adapter_for(pre + "attn.wv"), s, b.lv);
      b.attn = Matrix(n, d);
      b.probs.assign(nh, Matrix(n, n));
      for (std::size_t h = 0; h < nh; ++h) {
        Matrix& pr = b.probs[h];
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < n; ++i) {
          double mx = -INFINITY;
          for (std::size_t j = 0; j <= i; ++j) {
            pr(i, j) = att_scale * dot(&b.q(i, off), &b.k(j, off), hd);
            mx = std::max(mx, pr(i, j));
          }
          double sum = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            pr(i, j) = std::exp(pr(i, j) - mx);
            sum += pr(i, j);
          }
          const double inv = 1.0 / sum;
          for (std::size_t j = 0; j <= i; ++j) {
            pr(i, j) *= inv;
            axpy(pr(i, j), &b.v(j, off), &b.attn(i, off), hd);
          }
        }
      }
      x += linear_forward(b.attn, model_->param(pre + "attn.wo"), adapter_for(pre + "attn.wo"), s, b.lo);
      b.x_mid = x;
      b.h2 = layer_norm_forward(x, model_->param(pre + "ln2.g"), model_->param(pre + "ln2.b"), b.ln2);
      b.u = linear_forward(b.h2, model_->param(pre + "mlp.w1"), adapter_for(pre + "mlp.w1"), s, b.l1);
      b.g = Matrix(b.u.rows(), b.u.cols());
      for (std::size_t i = 0; i < b.u.size(); ++i) b.g.values()[i] = gelu(b.u.values()[i]);
      x += linear_forward(b.g, model_->param(pre + "mlp.w2"), adapter_for(pre + "mlp.w2"), s, b.l2);
    }
    c.x_final = x;
    c.hf = layer_norm_forward(x, model_->param("ln_f.g"), model_->param("ln_f.b"), c.lnf);
    c.logits = matmul_nt(c.hf, model_->param("head"));
    return c;
  }

  void backprop(const detail::SequenceCache& c, const Matrix& dlogits, BackwardResult& out,
                const BackwardOptions& opts) const {
    using namespace detail;
    const ModelConfig& cfg = model_->config();
    const std::size_t n = c.tokens.size(), d = cfg.d_model;
    const bool base = opts.base_params;
    auto base_grad = [&](const std::string& name) -> Matrix* {
      return base ? &out.base.at(name) : nullptr;
    };
    const double s = adapter_scale();
    auto linear_grads = [&](const std::string& name) {
      LinearGrads g;
      g.dw = base_grad(name);
      if (adapter_for(name) && opts.adapter_params) {
        g.da = &out.adapter.at(name + ".A");
        g.db = &out.adapter.at(name + ".B");
      }
      return g;
    };

    Matrix dhf = matmul(dlogits, model_->param("head"));
    if (base) matmul_tn_accumulate(dlogits, c.hf, out.base.at("head"));
    Matrix dx(n, d);
    layer_norm_backward(dhf, model_->param("ln_f.g"), c.lnf, dx, base_grad("ln_f.g"), base_grad("ln_f.b"));

    const std::size_t nh = cfg.n_heads, hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
      const std::string pre = layer_prefix(li);
      const BlockCache& b = c.blocks[li];

      // MLP branch: x_out = x_mid + w2(gelu(w1(ln2(x_mid))))
      Matrix dg(n, cfg.d_ff);
      linear_backward(dx, b.g, model_->param(pre + "mlp.w2"), adapter_for(pre + "mlp.w2"), s, b.l2, dg,
                      linear_grads(pre + "mlp.w2"));
      Matrix du(n, cfg.d_ff);
      for (std::size_t i = 0; i < du.size(); ++i) du.values()[i] = dg.values()[i] * gelu_grad(b.u.values()[i]);
      Matrix dh2(n, d);
      linear_backward(du, b.h2, model_->param(pre + "mlp.w1"), adapter_for(pre + "mlp.w1"), s, b.l1, dh2,
                      linear_grads(pre + "mlp.w1"));
      layer_norm_backward(dh2, model_->param(pre + "ln2.g"), b.ln2, dx, base_grad(pre + "ln2.g"),
                          base_grad(pre + "ln2.b"));

      // Attention branch: x_mid = x_in + wo(attn(ln1(x_in)))
      Matrix dattn(n, d);
      linear_backward(dx, b.attn, model_->param(pre + "attn.wo"), adapter_for(pre + "attn.wo"), s, b.lo,
                      dattn, linear_grads(pre + "attn.wo"));
      Matrix dq(n, d), dk(n, d), dv(n, d);
      std::vector<double> dp(n);
      for (std::size_t h = 0; h < nh; ++h) {
        const Matrix& pr = b.probs[h];
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < n; ++i) {
          const double* dout = &dattn(i, off);
          double weighted = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            dp[j] = dot(dout, &b.v(j, off), hd);
            weighted += pr(i, j) * dp[j];
            axpy(pr(i, j), dout, &dv(j, off), hd);
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = pr(i, j) * (dp[j] - weighted) * att_scale;
            axpy(ds, &b.k(j, off), &dq(i, off), hd);
            axpy(ds, &b.q(i, off), &dk(j, off), hd);
          }
        }
      }
      Matrix dh1(n, d);
      linear_backward(dq, b.h1, model_->param(pre + "attn.wq"), adapter_for(pre + "attn.wq"), s, b.lq, dh1,
                      linear_grads(pre + "attn.wq"));
      linear_backward(dk, b.h1, model_->param(pre + "attn.wk"), adapter_for(pre + "attn.wk"), s, b.lk, dh1,
                      linear_grads(pre + "attn.wk"));
      linear_backward(dv, b.h1, model_->param(pre + "attn.wv"), adapter_for(pre + "attn.wv"), s, b.lv, dh1,
                      linear_grads(pre + "attn.wv"));
      layer_norm_backward(dh1, model_->param(pre + "ln1.g"), b.ln1, dx, base_grad(pre + "ln1.g"),
                          base_grad(pre + "ln1.b"));
    }

    if (base) {
      Matrix& dtok = out.base.at("tok_emb");
      Matrix& dpos = out.base.at("pos_emb");
      for (std::size_t p = 0; p < n; ++p) {
        axpy(1.0, dx.row(p).data(), dtok.row(static_cast<std::size_t>(c.tokens[p])).data(), d);
        axpy(1.0, dx.row(p).data(), dpos.row(p).data(), d);
      }
    }
  }

  const NanoModel* model_;
  const TokenBatch* batch_;
  const AdapterSet* adapters_;
  std::vector<detail::SequenceCache> caches_;
};

inline Logits forward(const NanoModel& model, const TokenBatch& batch,
                      const AdapterSet* adapters = nullptr) {
  return ForwardPass(model, batch, adapters).logits();
}

inline Matrix forward(const NanoModel& model, const std::vector<int>& tokens,
                      const AdapterSet* adapters = nullptr) {
  TokenBatch batch{{Sequence{tokens, {}}}};
  return ForwardPass(model, batch, adapters).logits(0);
}

// Exact gradient of sum(logits .* loss_grad) with respect to every parameter.
inline GradientMap backward(const NanoModel& model, const TokenBatch& batch, const Logits& loss_grad) {
  return ForwardPass(model, batch).backward(loss_grad).base;
}

struct GenerationParams {
  double temperature = 0.7;
  double top_p = 0.95;
  std::size_t max_new_tokens = 32;
  int stop_token = CharTokenizer::kEos;
};

// Index sampled from the tempered, nucleus-truncated distribution of `logits`.
inline std::size_t sample_nucleus(std::span<const double> logits, double temperature, double top_p,
                                  Rng& rng) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
  const std::size_t v = logits.size();
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> prob(v);
  double sum = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    prob[i] = std::exp((logits[i] - mx) / temperature);
    sum += prob[i];
  }
  std::vector<std::size_t> order(v);
  for (std::size_t i = 0; i < v; ++i) order[i] = i;
  // Stable: ties keep the lower id first, so greedy picks the lowest argmax.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < v) {
    mass += prob[order[keep]] / sum;
    ++keep;
    if (mass >= top_p) break;
  }
  double r = rng.uniform() * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    r -= prob[order[i]] / sum;
    if (r < 0.0) return order[i];
  }
  return order[keep - 1];
}

// Autoregressive sampling. Stops at the stop token, max_new_tokens, or max_seq.
inline std::vector<int> generate(const NanoModel& model, const std::vector<int>& prompt,
                                 const GenerationParams& params, Rng& rng,
                                 const AdapterSet* adapters = nullptr) {
  if (prompt.empty()) throw InvalidArgument("generate: empty prompt");
  if (!(params.temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (!(params.top_p > 0.0 && params.top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
  std::vector<int> tokens = prompt;
  if (tokens.size() > model.config().max_seq)
    tokens.erase(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(model.config().max_seq));
  std::vector<int> out;
  while (out.size() < params.max_new_tokens && tokens.size() < model.config().max_seq) {
    const Matrix logits = forward(model, tokens, adapters);
    const int next = static_cast<int>(sample_nucleus(logits.row(logits.rows() - 1), params.temperature,
                                                     params.top_p, rng));
    if (next == params.stop_token) break;
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

}  // namespace nanodistill
