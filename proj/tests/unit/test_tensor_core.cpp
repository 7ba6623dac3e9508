#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dcs/core/error.hpp"
#include "dcs/core/gumbel.hpp"
#include "dcs/core/nn.hpp"
#include "dcs/core/optim.hpp"
#include "dcs/core/rng.hpp"
#include "dcs/verify/gradcheck.hpp"

using namespace dcs;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, bool grad = false) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor({r, c}, v, grad);
}

}  // namespace

// Reference outputs of the SplitMix64 sequence (seed 0 is the published
// test vector; the others were computed with an independent script).
TEST(Rng, MatchesSplitMixReferenceStream) {
  Rng a(0);
  EXPECT_EQ(a.next_u64(), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(a.next_u64(), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(a.next_u64(), 0x06c45d188009454fULL);
  Rng b(42);
  EXPECT_EQ(b.next_u64(), 0xbdd732262feb6e95ULL);
  EXPECT_EQ(b.next_u64(), 0x28efe333b266f103ULL);
  EXPECT_EQ(b.counter(), 2u);
}

TEST(Rng, ForkAndUniform) {
  const Rng f = Rng(42).fork(3);
  EXPECT_EQ(f.seed(), 0x117bdba5bf9acb03ULL);
  Rng g = f;
  EXPECT_EQ(g.next_u64(), 0x8bce2674af8cec1fULL);
  Rng u(7);
  EXPECT_DOUBLE_EQ(u.uniform(), 0.3898297483912715);
}

TEST(Rng, CounterResumesStream) {
  Rng a(9);
  for (int i = 0; i < 5; ++i) a.next_u64();
  Rng b(9, 5);
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, BelowAndPermutation) {
  Rng r(3);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.below(7), 7u);
  auto p = r.permutation(50);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(p[i], i);
}

TEST(Tensor, BroadcastingShapes) {
  const Tensor a = Tensor::full({2, 3, 4}, 1.0);
  const Tensor b = Tensor({4}, {1, 2, 3, 4});
  const Tensor c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 4}));
  EXPECT_DOUBLE_EQ(c.at(7), 5.0);
  EXPECT_EQ(mul(Tensor::full({3, 1}, 2.0), Tensor::full({1, 4}, 3.0)).shape(), (Shape{3, 4}));
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), Error);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  Rng rng(11);
  const Tensor a = random_matrix(5, 7, rng), b = random_matrix(7, 3, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
  EXPECT_THROW(matmul(a, a), Error);
}

TEST(Tensor, SoftmaxRowsSumToOneAndReluNonNegative) {
  Rng rng(5);
  const Tensor x = scale(random_matrix(6, 9, rng), 30.0);
  const Tensor s = softmax(x, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 9; ++j) row += s(i, j);
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
  const Tensor r = relu(x);
  for (double v : r.values()) EXPECT_GE(v, 0.0);
}

TEST(Tensor, BackwardAccumulatesOverReuse) {
  const Tensor x = Tensor({3}, {1.0, -2.0, 0.5}, true);
  sum(add(mul(x, x), x)).backward();
  const auto g = x.grad();
  EXPECT_DOUBLE_EQ(g[0], 3.0);
  EXPECT_DOUBLE_EQ(g[1], -3.0);
  EXPECT_DOUBLE_EQ(g[2], 2.0);
}

TEST(Tensor, MaxTiesGoToLowestIndex) {
  const Tensor x = Tensor({1, 4}, {2.0, 5.0, 5.0, 1.0}, true);
  const Tensor m = max(x, 1);
  EXPECT_DOUBLE_EQ(m.item(), 5.0);
  sum(m).backward();
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(Tensor, CrossEntropyMatchesLogSumExp) {
  const Tensor logits = Tensor::matrix({{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}});
  const std::vector<std::size_t> y{1, 0};
  const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 2.0;
  const double l1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)) + 1.0;
  EXPECT_NEAR(cross_entropy(logits, y).item(), 0.5 * (l0 + l1), 1e-12);
}

TEST(Tensor, LeafValuesWritableOnlyOnLeaves) {
  Tensor x = Tensor::zeros({2}, true);
  x.mutable_values()[1] = 4.0;
  EXPECT_DOUBLE_EQ(x.at(1), 4.0);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(y.mutable_values(), Error);
}

// Two hand-computed AdamW steps on a scalar (lr 0.1, wd 0.05).
TEST(AdamW, MatchesHandComputedSteps) {
  ParameterSet ps;
  ps.add("w", Tensor::scalar(1.0, true));
  Parameter& w = ps.get("w");
  AdamW opt({&w}, 0.1, 0.05);
  sum(scale(w.tensor, 0.5)).backward();
  opt.step();
  EXPECT_NEAR(w.tensor.item(), 0.8950000019999999, 1e-15);
  sum(scale(w.tensor, -0.25)).backward();
  opt.step();
  EXPECT_NEAR(w.tensor.item(), 0.8638912986978462, 1e-15);
  EXPECT_EQ(opt.state().step, 2u);
}

TEST(AdamW, RequiresGradientAndSkipsFrozen) {
  ParameterSet ps;
  ps.add("a", Tensor::scalar(1.0, true));
  ps.add("b", Tensor::scalar(2.0, true));
  AdamW opt(ps.parameters(), 0.1, 0.0);
  EXPECT_THROW(opt.step(), Error);
  ps.set_trainable("b", false);
  sum(ps.get("a").tensor).backward();
  opt.step();
  EXPECT_EQ(ps.get("b").tensor.item(), 2.0);
  EXPECT_NE(ps.get("a").tensor.item(), 1.0);
}

TEST(Schedule, WarmupThenCosine) {
  const CosineWarmupSchedule s;
  EXPECT_DOUBLE_EQ(s.lr_at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.lr_at(5), 2.5e-4);
  // Peak learning rate reached at the end of the 10 warmup epochs.
  EXPECT_DOUBLE_EQ(s.lr_at(10), 5e-4);
  EXPECT_NEAR(s.lr_at(155), 2.505e-4, 1e-15);
  EXPECT_NEAR(s.lr_at(300), 1e-6, 1e-18);
  EXPECT_THROW(s.lr_at(301), Error);
}

TEST(Gumbel, RowsAreDistributions) {
  Rng rng(2);
  const Tensor z = random_matrix(5, 8, rng);
  const Tensor y = gumbel_softmax(z, 0.7, rng);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_GE(y(i, j), 0.0);
      s += y(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Gumbel, StraightThroughIsOneHotWithSoftGradient) {
  Rng rng(4);
  const Tensor z = random_matrix(3, 6, rng, true);
  const auto noise = sample_gumbel_noise(18, rng);
  const Tensor hard = gumbel_softmax(z, 0.5, noise, GumbelMode::HardStraightThrough);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_TRUE(hard(i, j) == 0.0 || hard(i, j) == 1.0);
      s += hard(i, j);
    }
    EXPECT_EQ(s, 1.0);
  }
  const Tensor w = random_matrix(3, 6, rng);
  sum(mul(hard, w)).backward();
  const std::vector<double> g_hard(z.grad().begin(), z.grad().end());
  Tensor z2 = z.detach();
  z2.set_requires_grad(true);
  sum(mul(gumbel_softmax(z2, 0.5, noise), w)).backward();
  for (std::size_t i = 0; i < g_hard.size(); ++i) EXPECT_NEAR(g_hard[i], z2.grad()[i], 1e-12);
}

TEST(Gumbel, RejectsBadArguments) {
  Rng rng(1);
  EXPECT_THROW(gumbel_softmax(Tensor::zeros({2, 3}), 0.0, rng), Error);
  EXPECT_THROW(gumbel_softmax(Tensor::zeros({2, 1}), 1.0, rng), Error);
  EXPECT_THROW(gumbel_softmax(Tensor::zeros({2, 3}), 1.0, std::vector<double>(5)), Error);
}

// Uniform logits: argmax frequencies approach 1/G (smaller run than the
// acceptance check, band widened to match).
TEST(Gumbel, ArgmaxFrequenciesUniform) {
  const std::size_t g = 8, draws = 20000;
  Rng rng(77);
  const Tensor z = Tensor::zeros({draws, g});
  const Tensor y = gumbel_softmax(z, 1.0, rng);
  std::vector<std::size_t> counts(g);
  for (std::size_t i = 0; i < draws; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < g; ++j)
      if (y(i, j) > y(i, arg)) arg = j;
    ++counts[arg];
  }
  for (std::size_t c : counts) EXPECT_NEAR(static_cast<double>(c) / draws, 0.125, 0.0117);
}

TEST(Norms, BatchNormTrainStatistics) {
  ParameterSet ps;
  const BatchNorm1d bn(ps, "bn", 3);
  Rng rng(6);
  const Tensor x = add_scalar(scale(random_matrix(40, 3, rng), 3.0), 2.0);
  const Tensor y = bn(x, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 40; ++i) m += y(i, c);
    m /= 40;
    for (std::size_t i = 0; i < 40; ++i) v += (y(i, c) - m) * (y(i, c) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 40, 1.0, 1e-4);
  }
  // Running mean moved 10% of the way to the batch mean.
  double bm = 0.0;
  for (std::size_t i = 0; i < 40; ++i) bm += x(i, 0);
  EXPECT_NEAR(ps.get("bn.running_mean").tensor.at(0), 0.1 * bm / 40, 1e-12);
  EXPECT_THROW(bn(Tensor::zeros({1, 3}), true), Error);
}

TEST(Norms, LayerNormRows) {
  ParameterSet ps;
  const LayerNorm ln(ps, "ln", 5);
  Rng rng(8);
  const Tensor y = ln(random_matrix(4, 5, rng));
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < 5; ++j) m += y(i, j);
    EXPECT_NEAR(m, 0.0, 1e-12);
  }
}

TEST(Norms, DropoutScalesKeptUnits) {
  Rng rng(1);
  const Tensor x = Tensor::full({100, 10}, 1.0);
  const Tensor off = dropout(x, 0.5, ForwardContext{false, nullptr});
  EXPECT_EQ(off.values()[0], 1.0);
  const Tensor on = dropout(x, 0.5, ForwardContext{true, &rng});
  std::size_t kept = 0;
  for (double v : on.values()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000, 0.5, 0.06);
}

TEST(Parameters, RegistryHashAndRounding) {
  ParameterSet ps;
  ps.add("a.w", Tensor({2}, {0.1, 0.2}, true));
  ps.add_buffer("a.stat", Tensor({1}, {0.3}));
  EXPECT_THROW(ps.add("a.w", Tensor::zeros({1})), Error);
  EXPECT_FALSE(ps.get("a.stat").tensor.requires_grad());
  const auto h = ps.hash("a.");
  ps.round_to_float();
  EXPECT_EQ(ps.get("a.w").tensor.at(0), static_cast<double>(0.1f));
  EXPECT_NE(ps.hash("a."), h);
  EXPECT_EQ(ps.parameter_count(), 2u);
}

TEST(Gradcheck, SuitePassesOnFewInstances) {
  for (const auto& c : run_gradcheck_suite(3, 99)) EXPECT_TRUE(c.passed) << c.name << " " << c.max_error;
}

TEST(Gradcheck, DetectsWrongGradient) {
  // A deliberately wrong custom op must be caught.
  const Tensor x = Tensor({2}, {0.3, -0.7}, true);
  const ScalarFn f = [](const std::vector<Tensor>& in) {
    const Tensor sq = square(in[0]);
    return sum(add(sq, scale(sq.detach(), 1.0)));
  };
  EXPECT_GT(gradcheck(f, {x}).error, 0.1);
}
