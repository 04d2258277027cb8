#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fedmarl/nn.hpp"
#include "test_util.hpp"

using namespace fedmarl;
using namespace fedmarl::nn;
using testutil::oracle_loss;
using testutil::random_spec;

TEST(InitParams, DeterministicPerSeed) {
  const MlpSpec s{2, {3}, 2, Activation::relu};
  EXPECT_TRUE(init_params(s, 7) == init_params(s, 7));
  EXPECT_FALSE(init_params(s, 7) == init_params(s, 8));
}

TEST(InitParams, LengthMatchesShapeArithmetic) {
  const MlpSpec s{2, {3}, 2, Activation::relu};
  EXPECT_EQ(init_params(s, 3).size(), 17u);
  EXPECT_EQ(s.param_count(), 17u);
}

TEST(InitParams, BiasesZeroWeightsWithinFanInBound) {
  const MlpSpec s{6, {256}, 2, Activation::relu};
  const auto p = init_params(s, 0);
  std::size_t off = 0;
  for (const auto& l : p.layout()) {
    for (std::size_t k = 0; k < l.size(); ++k) {
      if (l.name.ends_with(".bias")) {
        EXPECT_EQ(p[off + k], 0.0);
      } else {
        EXPECT_LE(std::abs(p[off + k]), 1.0 / std::sqrt(static_cast<double>(l.dims[1])));
      }
    }
    off += l.size();
  }
}

TEST(MlpSpec, RejectsNoHiddenLayer) {
  MlpSpec s{2, {}, 2, Activation::relu};
  EXPECT_THROW(s.layout(), ConfigError);
  EXPECT_EQ(agent_qnet_spec(12).hidden_dims, std::vector<std::size_t>{256});
}

TEST(Forward, ZeroParamsGiveUniformLoss) {
  Rng rng(1);
  for (std::size_t M : {2u, 10u}) {
    const MlpSpec s{4, {5}, M, Activation::relu};
    const auto b = testutil::random_batch(7, 4, M, rng);
    EXPECT_NEAR(forward(ParamVector(s.layout()), s, b).loss, std::log(static_cast<double>(M)), 1e-15);
  }
  EXPECT_NEAR(std::log(2.0), 0.6931, 1e-4);
  EXPECT_NEAR(std::log(10.0), 2.3026, 1e-4);
}

TEST(Forward, MatchesStraightLineOracle) {
  Rng rng(42);
  for (auto act : {Activation::relu, Activation::tanh}) {
    for (int k = 0; k < 20; ++k) {
      const auto s = random_spec(rng, act);
      const auto p = testutil::random_params(s, rng, 0.5);
      const auto b = testutil::random_batch(1 + uniform_index(rng, 8), s.input_dim, s.output_dim, rng);
      const double got = forward(p, s, b).loss;
      EXPECT_LE(testutil::rel_err(got, oracle_loss(p, s, b), 1e-300), 1e-12);
    }
  }
}

TEST(Forward, Deterministic) {
  Rng rng(9);
  const MlpSpec s{3, {4}, 3, Activation::relu};
  const auto p = init_params(s, 1);
  const auto b = testutil::random_batch(5, 3, 3, rng);
  const auto a = forward(p, s, b), c = forward(p, s, b);
  EXPECT_EQ(a.loss, c.loss);
  EXPECT_EQ(a.logits.data, c.logits.data);
}

TEST(Forward, RejectsBadShapes) {
  Rng rng(2);
  const MlpSpec s{3, {4}, 2, Activation::relu};
  const auto p = init_params(s, 1);
  EXPECT_THROW(forward(p, s, testutil::random_batch(4, 2, 2, rng)), DimensionError);
  Batch empty;
  empty.inputs = Matrix(0, 3);
  EXPECT_THROW(forward(p, s, empty), DimensionError);
  EXPECT_THROW(backward(p, s, empty), DimensionError);
  auto bad = testutil::random_batch(3, 3, 2, rng);
  bad.labels[0] = 2;
  EXPECT_THROW(forward(p, s, bad), DimensionError);
  EXPECT_THROW(forward(init_params(MlpSpec{3, {5}, 2, Activation::relu}, 1), s, testutil::random_batch(2, 3, 2, rng)),
               DimensionError);
}

TEST(Backward, MatchesCentralFiniteDifferences) {
  Rng rng(2024);
  const double h = 1e-5;
  int instances = 0;
  double worst = 0.0;
  for (auto act : {Activation::tanh, Activation::relu}) {
    for (int k = 0; k < 60; ++k, ++instances) {
      const auto s = random_spec(rng, act);
      const auto p = testutil::random_params(s, rng, 0.7);
      const auto b = testutil::random_batch(1 + uniform_index(rng, 6), s.input_dim, s.output_dim, rng);
      const auto g = backward(p, s, b);
      ASSERT_TRUE(g.same_layout(p));
      for (std::size_t i = 0; i < p.size(); ++i) {
        auto hi = p, lo = p;
        hi[i] += h;
        lo[i] -= h;
        const double fd = (oracle_loss(hi, s, b) - oracle_loss(lo, s, b)) / (2 * h);
        worst = std::max(worst, testutil::rel_err(g[i], fd));
      }
    }
  }
  EXPECT_GE(instances, 100);
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, DuplicatedBatchGivesSameGradient) {
  Rng rng(5);
  const MlpSpec s{3, {4}, 3, Activation::tanh};
  const auto p = init_params(s, 3);
  const auto b = testutil::random_batch(6, 3, 3, rng);
  Batch twice;
  twice.inputs = Matrix(12, 3);
  for (std::size_t r = 0; r < 12; ++r)
    std::copy(b.inputs.row(r % 6).begin(), b.inputs.row(r % 6).end(), twice.inputs.row(r).begin());
  for (std::size_t r = 0; r < 12; ++r) twice.labels.push_back(b.labels[r % 6]);
  const auto g1 = backward(p, s, b), g2 = backward(p, s, twice);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-14);
}

TEST(SgdStep, Examples) {
  const auto p = ParamVector::flat({1, 2});
  EXPECT_EQ(sgd_step(p, ParamVector::flat({1, 1}), 0.5), ParamVector::flat({0.5, 1.5}));
  EXPECT_EQ(sgd_step(p, ParamVector::flat({3, 4}), 0.0), p);
  EXPECT_EQ(sgd_step(p, ParamVector::flat({0, 0}), 0.3), p);
  EXPECT_THROW(sgd_step(p, ParamVector::flat({1, 1, 1}), 0.1), DimensionError);
}

TEST(SgdStep, LossDecreasesOnMostSeeds) {
  int ok = 0;
  const int seeds = 100;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const MlpSpec s{4, {8}, 3, Activation::relu};
    auto p = init_params(s, static_cast<std::uint64_t>(seed));
    const auto b = testutil::random_batch(10, 4, 3, rng);
    double prev = forward(p, s, b).loss;
    bool strict = true;
    for (int it = 0; it < 50; ++it) {
      p = sgd_step(p, backward(p, s, b), 0.05);
      const double l = forward(p, s, b).loss;
      strict = strict && l < prev;
      prev = l;
    }
    ok += strict;
  }
  EXPECT_GE(ok, 95);
}

TEST(ParamVector, ArithmeticExactOnRepresentableSums) {
  // Values on a coarse dyadic grid keep every sum exact.
  Rng rng(11);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> a(16), b(16);
    for (auto& v : a) v = static_cast<double>(static_cast<std::int64_t>(uniform_index(rng, 1u << 20)) - (1 << 19)) / 1024.0;
    for (auto& v : b) v = static_cast<double>(static_cast<std::int64_t>(uniform_index(rng, 1u << 20)) - (1 << 19)) / 1024.0;
    const auto pa = ParamVector::flat(a), pb = ParamVector::flat(b);
    EXPECT_TRUE((pa + pb) - pb == pa);
  }
}

TEST(ParamVector, LayoutMismatchThrows) {
  const auto a = ParamVector::flat({1, 2});
  ParamVector b(Layout{{"w", {2}}}, {1, 2});
  EXPECT_THROW(a + b, DimensionError);
  EXPECT_THROW(ParamVector(Layout{{"w", {3}}}, {1, 2}), DimensionError);
}

TEST(ParamVector, BinaryRoundTrip) {
  const auto p = init_params(MlpSpec{5, {7, 3}, 4, Activation::tanh}, 99);
  std::stringstream ss;
  write_params(ss, p);
  EXPECT_TRUE(read_params(ss) == p);
}

TEST(ParamVector, CorruptRecordRejected) {
  const auto p = init_params(MlpSpec{2, {3}, 2, Activation::relu}, 1);
  std::stringstream ss;
  write_params(ss, p);
  const std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_params(truncated), ArtifactError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream badmagic(bad);
  EXPECT_THROW(read_params(badmagic), ArtifactError);
}
