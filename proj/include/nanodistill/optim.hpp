#pragma once

// Adam with decoupled weight decay, and Muon (orthogonalized momentum) with an
// Adam fallback for vector-shaped parameters.

#include <cmath>
#include <map>
#include <string>

#include "nanodistill/error.hpp"
#include "nanodistill/linalg.hpp"
#include "nanodistill/lora.hpp"

namespace nanodistill {

enum class OptimizerKind { adam, muon };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "muon"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "muon") return OptimizerKind::muon;
  throw InvalidArgument("unknown optimizer '" + s + "' (expected adam or muon)");
}

namespace detail {

inline void check_step_inputs(const ParamRefs& params, const GradientMap& grads, double lr, double wd) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be finite and >= 0");
  if (!(wd >= 0.0) || !std::isfinite(wd)) throw InvalidArgument("weight decay must be finite and >= 0");
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw DimensionError("no gradient for parameter " + name);
    if (!it->second.same_shape(*p))
      throw DimensionError("gradient for " + name + " is " + it->second.shape_string() +
                           ", parameter is " + p->shape_string());
    if (!it->second.all_finite()) throw NumericalError("non-finite gradient for " + name);
  }
}

// Odd quintic p(X) = aX + b(XX^T)X + c(XX^T)^2 X.
struct Quintic {
  double a, b, c;
};

// Fast-growth coefficients: inflate small singular values quickly but leave
// the spectrum oscillating in roughly [0.7, 1.2].
inline constexpr Quintic kNsGrowth{3.4445, -4.7750, 2.0315};
// Contraction onto 1 (the order-2 Newton-Schulz quintic); applied last.
inline constexpr Quintic kNsFinish{1.875, -1.25, 0.375};

inline void ns_iterate(Matrix& x, const Quintic& q) {
  const Matrix gram = matmul_nt(x, x);  // rows x rows
  Matrix poly = gram * q.b;
  poly.add_scaled(matmul(gram, gram), q.c);
  Matrix next = matmul(poly, x);
  next.add_scaled(x, q.a);
  x = std::move(next);
}

}  // namespace detail

// Approximate orthogonal polar factor of g (the U V^T of its SVD).
//
// g is scaled to unit Frobenius norm, then iterated `steps` times. All but the
// final two iterations use the fast-growth quintic; the last two contract the
// singular values onto 1. Tall inputs are handled through their transpose.
inline Matrix newton_schulz(const Matrix& g, std::size_t steps = 5) {
  if (g.empty()) throw DimensionError("newton_schulz: empty matrix");
  if (steps == 0) throw InvalidArgument("newton_schulz: steps must be >= 1");
  if (!g.all_finite()) throw NumericalError("newton_schulz: non-finite input");
  const double norm = frobenius_norm(g);
  if (norm == 0.0) throw NumericalError("newton_schulz: zero matrix has no orthogonal factor");
  const bool tall = g.rows() > g.cols();
  Matrix x = tall ? g.transposed() : g;
  x *= 1.0 / norm;
  const std::size_t finish = steps >= 3 ? 2 : steps - 1;
  for (std::size_t i = 0; i < steps; ++i) {
    detail::ns_iterate(x, i + finish < steps ? detail::kNsGrowth : detail::kNsFinish);
  }
  return tall ? x.transposed() : x;
}

// ||O O^T - I||_F / sqrt(min(rows, cols)), with the Gram taken on the short side.
inline double orthogonality_error(const Matrix& o) {
  const Matrix gram = o.rows() <= o.cols() ? matmul_nt(o, o) : matmul_tn(o, o);
  double s = 0.0;
  for (std::size_t i = 0; i < gram.rows(); ++i)
    for (std::size_t j = 0; j < gram.cols(); ++j) {
      const double d = gram(i, j) - (i == j ? 1.0 : 0.0);
      s += d * d;
    }
  return std::sqrt(s / static_cast<double>(gram.rows()));
}

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
};

// One bias-corrected Adam step with decoupled weight decay:
//   p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)
inline void adam_step(const ParamRefs& params, const GradientMap& grads, AdamState& state, double lr,
                      double weight_decay) {
  detail::check_step_inputs(params, grads, lr, weight_decay);
  if (params.empty()) return;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, p] : params) {
    const Matrix& g = grads.at(name);
    auto [mi, m_new] = state.m.try_emplace(name, p->rows(), p->cols());
    auto [vi, v_new] = state.v.try_emplace(name, p->rows(), p->cols());
    Matrix& m = mi->second;
    Matrix& v = vi->second;
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double gi = g.values()[i];
      double& mv = m.values()[i];
      double& vv = v.values()[i];
      mv = state.beta1 * mv + (1.0 - state.beta1) * gi;
      vv = state.beta2 * vv + (1.0 - state.beta2) * gi * gi;
      double& pv = p->values()[i];
      pv *= decay;
      pv -= lr * (mv / c1) / (std::sqrt(vv / c2) + state.eps);
    }
  }
}

struct MuonState {
  double momentum = 0.95;
  std::size_t ns_steps = 5;
  std::size_t step = 0;
  std::map<std::string, Matrix> buffers;
  AdamState fallback;
  // Routing counters, cumulative over steps.
  std::size_t orthogonal_updates = 0;
  std::size_t fallback_updates = 0;
  std::size_t skipped_zero = 0;
};

// One Muon step. Matrix-shaped parameters get
//   buf <- mu buf + g;  p <- p (1 - lr wd) - lr sqrt(max(1, rows/cols)) NS(buf)
// while vectors and scalars are handed to Adam with the same lr and wd. A
// parameter whose momentum buffer is exactly zero is left alone.
inline void muon_step(const ParamRefs& params, const GradientMap& grads, MuonState& state, double lr,
                      double weight_decay) {
  detail::check_step_inputs(params, grads, lr, weight_decay);
  ++state.step;
  ParamRefs vectors;
  for (const auto& [name, p] : params) {
    if (!is_matrix_param(*p)) {
      vectors[name] = p;
      continue;
    }
    const Matrix& g = grads.at(name);
    auto [it, fresh] = state.buffers.try_emplace(name, p->rows(), p->cols());
    Matrix& buf = it->second;
    buf *= state.momentum;
    buf += g;
    if (frobenius_norm(buf) == 0.0) {
      ++state.skipped_zero;
      continue;
    }
    const Matrix o = newton_schulz(buf, state.ns_steps);
    const double shape_gain =
        std::sqrt(std::max(1.0, static_cast<double>(p->rows()) / static_cast<double>(p->cols())));
    *p *= 1.0 - lr * weight_decay;
    p->add_scaled(o, -lr * shape_gain);
    ++state.orthogonal_updates;
  }
  if (!vectors.empty()) {
    adam_step(vectors, grads, state.fallback, lr, weight_decay);
    state.fallback_updates += vectors.size();
  }
}

// Either optimizer behind one interface.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind) : kind_(kind) {}
  OptimizerKind kind() const { return kind_; }

  void step(const ParamRefs& params, const GradientMap& grads, double lr, double weight_decay) {
    if (kind_ == OptimizerKind::adam)
      adam_step(params, grads, adam_, lr, weight_decay);
    else
      muon_step(params, grads, muon_, lr, weight_decay);
  }

  const AdamState& adam_state() const { return adam_; }
  const MuonState& muon_state() const { return muon_; }

 private:
  OptimizerKind kind_;
  AdamState adam_;
  MuonState muon_;
};

}  // namespace nanodistill
