#include <gtest/gtest.h>

#include <cmath>

#include "nanodistill/optim.hpp"
#include "test_util.hpp"

using namespace nanodistill;
using nanodistill::testing::random_orthonormal;
using nanodistill::testing::singular_values;

namespace {

struct Params {
  ParamMap values;
  GradientMap grads;
};

Params two_tensor_params(Rng& rng) {
  Params p;
  p.values["w"] = gaussian(rng, 6, 4);
  p.values["bias"] = gaussian(rng, 1, 4);
  p.grads["w"] = gaussian(rng, 6, 4);
  p.grads["bias"] = gaussian(rng, 1, 4);
  return p;
}

}  // namespace

TEST(Adam, ZeroGradientNoDecayLeavesParams) {
  Rng rng(1);
  Params p = two_tensor_params(rng);
  for (auto& [_, g] : p.grads) g.fill(0.0);
  const ParamMap before = p.values;
  AdamState state;
  for (int i = 0; i < 3; ++i) adam_step(param_refs(p.values), p.grads, state, 1e-3, 0.0);
  EXPECT_EQ(p.values, before);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  // Scalar simulation: with g constant, mhat = g and vhat = g^2 exactly, so
  // every step moves by lr * |g| / (|g| + eps).
  ParamMap params{{"x", Matrix(1, 1, 0.0)}};
  GradientMap grads{{"x", Matrix(1, 1, 0.37)}};
  AdamState state;
  const double lr = 1e-3;
  double prev = 0.0;
  for (int i = 0; i < 200; ++i) {
    adam_step(param_refs(params), grads, state, lr, 0.0);
    const double now = params["x"](0, 0);
    EXPECT_NEAR(prev - now, lr * 0.37 / (0.37 + 1e-8), 1e-12);
    prev = now;
  }
  EXPECT_EQ(state.step, 200u);
}

TEST(Adam, DecoupledDecayShrinksByFactor) {
  ParamMap params{{"x", Matrix(1, 3, 2.5)}};
  GradientMap grads{{"x", Matrix(1, 3, 0.0)}};
  AdamState state;
  for (int i = 1; i <= 10; ++i) {
    adam_step(param_refs(params), grads, state, 1e-3, 2.0);
    EXPECT_NEAR(params["x"](0, 1), 2.5 * std::pow(0.998, i), 1e-14);
  }
}

TEST(Adam, RejectsBadInputs) {
  Rng rng(2);
  Params p = two_tensor_params(rng);
  AdamState state;
  GradientMap bad = p.grads;
  bad["w"](2, 1) = std::nan("");
  try {
    adam_step(param_refs(p.values), bad, state, 1e-3, 0.0);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
  GradientMap missing = p.grads;
  missing.erase("bias");
  EXPECT_THROW(adam_step(param_refs(p.values), missing, state, 1e-3, 0.0), DimensionError);
  GradientMap wrong = p.grads;
  wrong["w"] = Matrix(4, 6);
  EXPECT_THROW(adam_step(param_refs(p.values), wrong, state, 1e-3, 0.0), DimensionError);
  EXPECT_THROW(adam_step(param_refs(p.values), p.grads, state, -1.0, 0.0), InvalidArgument);
}

TEST(Adam, Deterministic) {
  Rng rng(3);
  Params p = two_tensor_params(rng);
  Params q = p;
  AdamState s1, s2;
  for (int i = 0; i < 5; ++i) {
    adam_step(param_refs(p.values), p.grads, s1, 1e-2, 0.1);
    adam_step(param_refs(q.values), q.grads, s2, 1e-2, 0.1);
  }
  EXPECT_EQ(p.values, q.values);
}

TEST(NewtonSchulz, OrthogonalInputIsAlmostFixed) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix q = random_orthonormal(rng, 16, 16);
    EXPECT_LT(max_abs_diff(newton_schulz(q, 5), q), 5e-2);
    const Matrix tall = random_orthonormal(rng, 24, 8);
    EXPECT_LT(max_abs_diff(newton_schulz(tall, 5), tall), 5e-2);
  }
}

TEST(NewtonSchulz, SingularValuesNearOneForWideGaussian) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto sv = singular_values(newton_schulz(gaussian(rng, 16, 32), 5));
    ASSERT_EQ(sv.size(), 16u);
    EXPECT_GE(sv.front(), 0.7);
    EXPECT_LE(sv.back(), 1.3);
  }
}

TEST(NewtonSchulz, ScaleInvariance) {
  Rng rng(12);
  const Matrix g = gaussian(rng, 16, 64);
  // Power-of-two scaling commutes exactly with the Frobenius normalization.
  EXPECT_EQ(newton_schulz(g * 4.0), newton_schulz(g));
  EXPECT_EQ(newton_schulz(g * 0.125), newton_schulz(g));
  EXPECT_LT(max_abs_diff(newton_schulz(g * 10.0), newton_schulz(g)), 1e-12);
  EXPECT_LT(max_abs_diff(newton_schulz(g * 3.7e-5), newton_schulz(g)), 1e-12);
}

TEST(NewtonSchulz, OrthogonalityBoundOverShapes) {
  Rng rng(13);
  for (auto [r, c] : {std::pair{16, 16}, {16, 64}, {64, 16}, {8, 32}}) {
    for (int trial = 0; trial < 30; ++trial) {
      const Matrix o = newton_schulz(gaussian(rng, r, c), 5);
      EXPECT_EQ(o.rows(), static_cast<std::size_t>(r));
      EXPECT_LE(orthogonality_error(o), 0.35) << r << "x" << c;
    }
  }
}

TEST(NewtonSchulz, TallIsTransposeOfWide) {
  Rng rng(14);
  const Matrix g = gaussian(rng, 40, 12);
  EXPECT_LT(max_abs_diff(newton_schulz(g), newton_schulz(g.transposed()).transposed()), 1e-13);
}

TEST(NewtonSchulz, ErrorsOnDegenerateInput) {
  EXPECT_THROW(newton_schulz(Matrix(4, 4)), NumericalError);
  EXPECT_THROW(newton_schulz(Matrix::identity(3), 0), InvalidArgument);
}

TEST(Muon, OrthogonalMomentumGivesScaledUpdate) {
  Rng rng(20);
  const Matrix q = random_orthonormal(rng, 12, 4);  // tall: gain sqrt(3)
  ParamMap params{{"w", Matrix(12, 4)}};
  GradientMap grads{{"w", q}};
  MuonState state;
  const double lr = 0.01;
  muon_step(param_refs(params), grads, state, lr, 0.0);
  const Matrix expected = q * (-lr * std::sqrt(3.0));
  EXPECT_LT(max_abs_diff(params["w"], expected), 5e-2 * lr * std::sqrt(3.0));
  EXPECT_EQ(state.orthogonal_updates, 1u);
}

TEST(Muon, VectorsRouteToAdamFallback) {
  Rng rng(21);
  Params p = two_tensor_params(rng);
  MuonState state;
  muon_step(param_refs(p.values), p.grads, state, 1e-3, 0.0);
  EXPECT_EQ(state.orthogonal_updates, 1u);
  EXPECT_EQ(state.fallback_updates, 1u);
  EXPECT_EQ(state.fallback.step, 1u);
  EXPECT_TRUE(state.fallback.m.count("bias"));
  EXPECT_FALSE(state.fallback.m.count("w"));
  EXPECT_TRUE(state.buffers.count("w"));
  EXPECT_FALSE(state.buffers.count("bias"));
}

TEST(Muon, GradientScaleLeavesUpdateUnchanged) {
  Rng rng(22);
  ParamMap a{{"w", gaussian(rng, 8, 16)}};
  ParamMap b = a;
  const Matrix g = gaussian(rng, 8, 16);
  MuonState sa, sb;
  muon_step(param_refs(a), {{"w", g}}, sa, 0.02, 0.0);
  muon_step(param_refs(b), {{"w", g * 10.0}}, sb, 0.02, 0.0);
  EXPECT_LT(max_abs_diff(a["w"], b["w"]), 1e-14);
}

TEST(Muon, ZeroGradientNoDecayLeavesParams) {
  Rng rng(23);
  Params p = two_tensor_params(rng);
  for (auto& [_, g] : p.grads) g.fill(0.0);
  const ParamMap before = p.values;
  MuonState state;
  muon_step(param_refs(p.values), p.grads, state, 1e-2, 0.0);
  EXPECT_EQ(p.values, before);
  EXPECT_EQ(state.skipped_zero, 1u);
}

TEST(Muon, MomentumAccumulates) {
  ParamMap params{{"w", Matrix(2, 2)}};
  MuonState state;
  const Matrix g{{1.0, 0.0}, {0.0, 2.0}};
  muon_step(param_refs(params), {{"w", g}}, state, 0.0, 0.0);
  muon_step(param_refs(params), {{"w", g}}, state, 0.0, 0.0);
  EXPECT_NEAR(state.buffers["w"](1, 1), 2.0 * 0.95 + 2.0, 1e-15);
  EXPECT_EQ(params["w"], Matrix(2, 2));  // lr = 0
}

TEST(Optimizer, DispatchesByKind) {
  EXPECT_EQ(optimizer_from_string("adam"), OptimizerKind::adam);
  EXPECT_EQ(to_string(OptimizerKind::muon), "muon");
  EXPECT_THROW(optimizer_from_string("sgd"), InvalidArgument);
  Rng rng(24);
  Params p = two_tensor_params(rng);
  Optimizer opt(OptimizerKind::muon);
  opt.step(param_refs(p.values), p.grads, 1e-3, 0.0);
  EXPECT_EQ(opt.muon_state().step, 1u);
  EXPECT_EQ(opt.adam_state().step, 0u);
}
