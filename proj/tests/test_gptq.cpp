#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nanodistill/distill.hpp"
#include "nanodistill/gptq.hpp"
#include "test_util.hpp"

using namespace nanodistill;

namespace {

// Brute-force oracle: smallest non-negative finite half >= x.
std::uint16_t half_ceil_by_search(double x) {
  for (std::uint32_t b = 0; b < 0x7c00; ++b)
    if (half::to_double(static_cast<std::uint16_t>(b)) >= x) return static_cast<std::uint16_t>(b);
  return 0x7c00;
}

Matrix correlated_inputs(Rng& rng, std::size_t n, std::size_t d) {
  const Matrix mix = gaussian(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  Matrix x = matmul(gaussian(rng, n, d), mix);
  // A shared low-rank component makes neighbouring columns strongly correlated.
  const Matrix common = gaussian(rng, n, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) += 2.0 * common(i, j % 2);
  return x;
}

QuantPlan plan_with_group(std::size_t g) {
  QuantPlan p;
  p.group_size = g;
  return p;
}

}  // namespace

TEST(Half, DecodesKnownPatterns) {
  EXPECT_EQ(half::to_double(0x3c00), 1.0);
  EXPECT_EQ(half::to_double(0xc000), -2.0);
  EXPECT_EQ(half::to_double(0x0001), 0x1p-24);
  EXPECT_EQ(half::to_double(0x0400), 0x1p-14);
  EXPECT_EQ(half::to_double(0x7bff), 65504.0);
  EXPECT_EQ(half::to_double(0x3555), 0.333251953125);
}

TEST(Half, CeilingMatchesExhaustiveSearch) {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const double x = std::ldexp(rng.uniform(), static_cast<int>(rng.below(40)) - 28);
    EXPECT_EQ(half::from_double_ceil(x), half_ceil_by_search(x)) << x;
  }
  for (double x : {0.0, 1.0, 0x1p-24, 0x1p-25, 0.1, 65504.0, 1.0 + 0x1p-11})
    EXPECT_EQ(half::from_double_ceil(x), half_ceil_by_search(x)) << x;
  EXPECT_THROW(half::from_double_ceil(70000.0), NumericalError);
}

TEST(Half, NearestRoundTrips) {
  for (std::uint32_t b = 0; b < 0x7c00; b += 7) {
    const auto h = static_cast<std::uint16_t>(b);
    EXPECT_EQ(half::from_double(half::to_double(h)), h);
    EXPECT_EQ(half::from_double(-half::to_double(h)), h | 0x8000);
  }
}

TEST(Nibbles, Examples) {
  EXPECT_EQ(pack_nibbles({1, 2}), std::vector<std::uint8_t>{0x21});
  EXPECT_EQ(pack_nibbles({15}), std::vector<std::uint8_t>{0x0f});
  EXPECT_THROW(pack_nibbles({16}), InvalidArgument);
  Rng rng(2);
  for (std::size_t n = 0; n < 40; ++n) {
    std::vector<std::uint8_t> codes(n);
    for (auto& c : codes) c = static_cast<std::uint8_t>(rng.below(16));
    EXPECT_EQ(unpack_nibbles(pack_nibbles(codes), n), codes);
  }
}

TEST(Hessian, Examples) {
  HessianAccumulator acc(4);
  acc.add(Matrix{{0, 0, 1, 0}});
  Matrix expected(4, 4);
  expected(2, 2) = 2.0;
  EXPECT_EQ(acc.hessian(), expected);
  EXPECT_EQ(acc.samples(), 1u);
  EXPECT_THROW(acc.add(Matrix(1, 3)), DimensionError);

  Rng rng(3);
  HessianAccumulator mc(16);
  for (int b = 0; b < 16; ++b) mc.add(gaussian(rng, 256, 16));
  const Matrix& h = mc.hessian();
  EXPECT_EQ(h, h.transposed());
  Matrix normalized = h * (1.0 / (2.0 * 4096));
  EXPECT_LT(max_abs_diff(normalized, Matrix::identity(16)), 0.1);
}

TEST(Rtn, LosslessOnRepresentableGrid) {
  // 16 values k * 0.125 - 0.5: the grid of scale 1/8, zero point 4.
  Matrix w(3, 16);
  Rng rng(4);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<int> ks(16);
    for (int k = 0; k < 16; ++k) ks[k] = k;
    rng.shuffle(ks);
    for (std::size_t c = 0; c < 16; ++c) w(r, c) = ks[c] * 0.125 - 0.5;
  }
  const QuantizedLinear q = rtn_quantize(w, plan_with_group(16));
  EXPECT_EQ(q.dequantize(), w);
  EXPECT_EQ(q.scale(0, 0), 0.125);
  EXPECT_EQ(q.zero(0, 0), 4);
}

TEST(Rtn, ConstantGroups) {
  Matrix w(2, 8, 0.0);
  for (std::size_t c = 0; c < 8; ++c) w(1, c) = 0.9375;  // 15 * 2^-4
  const QuantizedLinear q = rtn_quantize(w, plan_with_group(8));
  EXPECT_EQ(q.scale(0, 0), 0x1p-24);  // floor for an all-zero group
  for (std::size_t c = 1; c < 8; ++c) {
    EXPECT_EQ(q.code(0, c), q.code(0, 0));
    EXPECT_EQ(q.code(1, c), q.code(1, 0));
  }
  EXPECT_EQ(q.dequantize(), w);
}

TEST(Rtn, ErrorWithinHalfScale) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = gaussian(rng, 8, 100, 0.3);
    const QuantizedLinear q = rtn_quantize(w, plan_with_group(32));
    EXPECT_EQ(q.groups(), 4u);
    const Matrix d = q.dequantize();
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 100; ++c) EXPECT_LE(std::abs(w(r, c) - d(r, c)), q.scale(r, c / 32) / 2 * (1 + 1e-15));
  }
}

TEST(Gptq, DiagonalHessianEqualsRtn) {
  Rng rng(6);
  const Matrix w = gaussian(rng, 16, 48);
  std::vector<double> diag(48);
  for (double& v : diag) v = 0.1 + rng.uniform();
  const Matrix h = Matrix::diagonal(diag);
  const QuantizedLinear g = gptq_quantize_layer(w, h, plan_with_group(16));
  const QuantizedLinear r = rtn_quantize(w, plan_with_group(16));
  EXPECT_EQ(g, r);
  const Matrix x = gaussian(rng, 64, 48);
  EXPECT_LE(reconstruction_error(w, g, x), reconstruction_error(w, r, x) + 1e-9);
}

TEST(Gptq, BeatsRtnOnCorrelatedInputs) {
  int wins = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + trial);
    const Matrix w = gaussian(rng, 64, 64);
    const Matrix x = correlated_inputs(rng, 256, 64);
    HessianAccumulator acc(64);
    acc.add(x);
    const QuantizedLinear g = gptq_quantize_layer(w, acc.hessian(), QuantPlan{});
    const QuantizedLinear r = rtn_quantize(w, QuantPlan{});
    EXPECT_EQ(g.groups(), 1u);  // group 128 clamped to 64 columns
    wins += reconstruction_error(w, g, x) <= reconstruction_error(w, r, x);
    EXPECT_TRUE(g.dequantize().all_finite());
  }
  EXPECT_GE(wins, 90);
}

TEST(Gptq, DeadColumnsAndErrors) {
  Rng rng(7);
  const Matrix w = gaussian(rng, 4, 6);
  Matrix x = gaussian(rng, 20, 6);
  for (std::size_t i = 0; i < 20; ++i) x(i, 3) = 0.0;
  HessianAccumulator acc(6);
  acc.add(x);
  const QuantizedLinear q = gptq_quantize_layer(w, acc.hessian(), plan_with_group(3));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(q.value(r, 3), 0.0);
  EXPECT_THROW(gptq_quantize_layer(w, Matrix(5, 5), QuantPlan{}), DimensionError);
  Matrix indefinite = Matrix::identity(6);
  indefinite(0, 0) = -50.0;
  EXPECT_THROW(gptq_quantize_layer(w, indefinite, QuantPlan{}), NumericalError);
}

class QuantModelTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / "nanodistill_gptq_test";
    std::filesystem::remove_all(dir_);
    Rng rng(8);
    ModelConfig c = nanodistill::testing::tiny_config();
    c.d_model = 32;
    c.d_ff = 64;
    model_ = NanoModel::initialized(c, rng);
    calib_ = nanodistill::testing::random_batch(rng, 16, 6, 12, 100);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
  NanoModel model_{ModelConfig{}};
  TokenBatch calib_;
};

TEST_F(QuantModelTest, ExcludedTensorsUntouchedAndKlFinite) {
  QuantPlan plan = plan_with_group(16);
  plan.exclude = {"*.mlp.w2"};
  const QuantModel qm = quantize_model(model_, calib_, plan);
  EXPECT_EQ(qm.layers().size(), 10u);
  for (const auto& [name, p] : model_.params()) {
    if (qm.layers().count(name)) {
      EXPECT_FALSE(qm.model().param(name) == p) << name;
    } else {
      EXPECT_EQ(qm.model().param(name), p) << name;
    }
  }
  double kl = 0.0;
  std::size_t rows = 0;
  for (const auto& seq : calib_.sequences) {
    const Matrix a = tempered_softmax(forward(model_, seq.tokens), 1.0);
    const Matrix b = tempered_softmax(forward(qm.model(), seq.tokens), 1.0);
    kl += kl_loss(a, b, 1.0) * a.rows();
    rows += a.rows();
  }
  kl /= rows;
  EXPECT_TRUE(std::isfinite(kl));
  EXPECT_GT(kl, 0.0);
  EXPECT_LT(kl, 0.1);
}

TEST_F(QuantModelTest, Errors) {
  QuantPlan none;
  none.include = {"tok_emb"};
  EXPECT_THROW(quantize_model(model_, calib_, none), InvalidArgument);
  EXPECT_THROW(quantize_model(model_, TokenBatch{}, QuantPlan{}), InvalidArgument);
  QuantPlan bad;
  bad.weight_bits = 5;
  EXPECT_THROW(quantize_model(model_, calib_, bad), InvalidArgument);
}

TEST_F(QuantModelTest, CheckpointRoundTripIsBitExact) {
  const QuantModel qm = quantize_model(model_, calib_, plan_with_group(16));
  qm.save(dir_ / "q.ckpt");
  const QuantModel back = QuantModel::load(dir_ / "q.ckpt");
  EXPECT_EQ(back.model(), qm.model());
  EXPECT_EQ(back.layers(), qm.layers());
  EXPECT_EQ(encode_checkpoint(back.to_checkpoint()), io::read_file(dir_ / "q.ckpt"));
  // A quantized checkpoint is not a plain model.
  EXPECT_THROW(load_checkpoint(dir_ / "q.ckpt"), FormatError);
  // Payload byte layout of one layer: header then nibble codes.
  const auto& [name, layer] = *qm.layers().begin();
  const auto payload = layer.encode();
  EXPECT_EQ(payload.size(), 8 + layer.storage_bytes());
  EXPECT_EQ(payload[0], 16);  // group size, little-endian
  EXPECT_EQ(payload[4], 4);   // bits
  EXPECT_EQ(payload[8], static_cast<std::uint8_t>(layer.code(0, 0) | layer.code(0, 1) << 4));
}

TEST_F(QuantModelTest, MemoryEstimate) {
  EXPECT_EQ(estimate_memory(model_), 2 * model_.parameter_count());
  QuantPlan plan = plan_with_group(16);
  const QuantModel qm = quantize_model(model_, calib_, plan);
  EXPECT_EQ(estimate_memory(model_, plan), estimate_memory(qm));
  std::size_t expected = 0;
  for (const auto& [name, p] : model_.params()) {
    if (!qm.layers().count(name)) {
      expected += 2 * p.size();
      continue;
    }
    const std::size_t groups = (p.cols() + 15) / 16;
    expected += p.rows() * ((p.cols() + 1) / 2) + p.rows() * groups * 2 + (p.rows() * groups + 1) / 2;
  }
  EXPECT_EQ(estimate_memory(qm), expected);
}

TEST(Memory, LinearCompressionAtWidth256) {
  // Counting oracle: a 256-wide linear at 16 bits vs 4-bit codes with
  // group-128 half scales and 4-bit zeros.
  const double fp = 256.0 * 256 * 2;
  const double q = 256.0 * 128 + 256.0 * 2 * 2 + 256.0 * 2 / 2;
  EXPECT_EQ(QuantizedLinear::storage_bytes(256, 256, 128, 4), q);
  EXPECT_GE(fp / q, 3.5);
  ModelConfig c;
  c.vocab_size = 100;
  c.d_model = 256;
  c.n_heads = 4;
  c.d_ff = 1024;
  c.n_layers = 4;
  c.max_seq = 32;
  const NanoModel m(c);
  std::size_t linear = 0;
  for (const auto& n : m.linear_layer_names()) linear += m.param(n).size();
  ASSERT_GE(static_cast<double>(linear) / m.parameter_count(), 0.8);
  EXPECT_GE(static_cast<double>(estimate_memory(m)) / estimate_memory(m, QuantPlan{}), 1.9);
  QuantPlan empty;
  empty.include = {};
  EXPECT_EQ(estimate_memory(m, empty), estimate_memory(m));
}

TEST(Memory, BudgetBoundary) {
  EXPECT_TRUE(check_budget(1000, 1000).pass);
  EXPECT_FALSE(check_budget(1001, 1000).pass);
  const BudgetCheck unset = check_budget(1u << 30, std::nullopt);
  EXPECT_TRUE(unset.pass);
  EXPECT_FALSE(unset.warning.empty());
  EXPECT_THROW(check_budget(1, 0), InvalidArgument);
}
