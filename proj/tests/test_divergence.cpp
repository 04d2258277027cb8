#include <gtest/gtest.h>

#include <sstream>

#include "fedmarl/divergence.hpp"

using namespace fedmarl;
using namespace fedmarl::analysis;

namespace {

// 1-D two-class shard: `ones` points labelled 1 around +1, the rest around -1.
nn::Batch shard(std::size_t rows, std::size_t ones, Rng& rng) {
  std::normal_distribution<double> g(0.0, 0.5);
  nn::Batch b;
  b.inputs = nn::Matrix(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = r < ones ? 1 : 0;
    b.inputs(r, 0) = (y ? 1.0 : -1.0) + g(rng);
    b.labels.push_back(y);
  }
  return b;
}

DivergenceSetup toy(std::uint64_t seed) {
  Rng rng(seed);
  DivergenceSetup s;
  s.model = nn::MlpSpec{1, {2}, 2, nn::Activation::tanh};
  s.shards = {shard(20, 15, rng), shard(20, 5, rng)};
  s.lr = 0.1;
  s.epochs = 3;
  s.rounds = 8;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Divergence, SingleIidClientIsExactlyZero) {
  auto s = toy(1);
  s.shards.resize(1);
  const auto r = divergence_track(s);
  ASSERT_EQ(r.divergence.size(), s.rounds);
  for (double d : r.divergence) EXPECT_EQ(d, 0.0);
  for (double e : r.eps_t) EXPECT_EQ(e, 0.0);
  EXPECT_FALSE(r.any_violation());
}

TEST(Divergence, EpsilonZeroWhenMixtureMatches) {
  // Equal sizes with mirrored label mixes: the pair reproduces the pool.
  const auto r = divergence_track(toy(2));
  for (double e : r.eps_t) EXPECT_NEAR(e, 0.0, 1e-15);
  auto s = toy(2);
  s.select = [](std::size_t, std::span<const double> losses) {
    fl::Mask m(losses.size(), 0);
    m[0] = 1;
    return m;
  };
  const auto one = divergence_track(s);
  // Client 0 holds 75% label 1 against a pooled 50%.
  for (double e : one.eps_t) EXPECT_NEAR(e, 0.25, 1e-12);
}

TEST(Divergence, ToyDivergenceWithinBound) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = divergence_track(toy(seed));
    ASSERT_EQ(r.bound.size(), r.divergence.size());
    ASSERT_EQ(r.sigma.size(), 2u);
    EXPECT_GT(r.c_max, 0.0);
    for (std::size_t t = 0; t < r.bound.size(); ++t) {
      EXPECT_GE(r.divergence[t], 0.0);
      EXPECT_TRUE(std::isfinite(r.bound[t]));
      EXPECT_EQ(r.violation[t], r.divergence[t] > r.bound[t] ? 1 : 0);
    }
    EXPECT_FALSE(r.any_violation()) << "seed " << seed;
  }
}

TEST(Divergence, DeterministicPerSeed) {
  const auto a = divergence_track(toy(3)), b = divergence_track(toy(3));
  EXPECT_EQ(a.divergence, b.divergence);
  EXPECT_EQ(a.bound, b.bound);
}

TEST(Divergence, InvalidSelectionRejected) {
  auto s = toy(4);
  s.select = [](std::size_t, std::span<const double> losses) { return fl::Mask(losses.size(), 0); };
  EXPECT_THROW(divergence_track(s), ConfigError);
}

TEST(Divergence, CsvLayout) {
  const auto r = divergence_track(toy(5));
  std::stringstream ss;
  write_divergence_csv(ss, r);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "round,divergence,bound,eps_t,violation");
  std::size_t rows = 0;
  while (std::getline(ss, line)) ++rows;
  EXPECT_EQ(rows, r.divergence.size());
}
