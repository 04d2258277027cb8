#include <gtest/gtest.h>

#include <sstream>

#include "fedmarl/analysis.hpp"

using namespace fedmarl;
using namespace fedmarl::analysis;

namespace {

fl::RoundRecord record(double acc, double H, double B, double reward = 0.0) {
  fl::RoundRecord r;
  r.mask = {1, 1};
  r.H_t = H;
  r.B_t = B;
  r.acc = acc;
  r.reward = reward;
  return r;
}

}  // namespace

TEST(Utility, Anchors) {
  EXPECT_NEAR(utility(1.0, UtilityVariant::increasing), 0.0, 1e-12);
  EXPECT_NEAR(utility(1.0, UtilityVariant::paper_formula), 0.0, 1e-12);
  const double u0 = 10.0 - 20.0 / (1.0 + std::exp(0.35));
  EXPECT_NEAR(utility(0.0, UtilityVariant::paper_formula), u0, 1e-12);
  EXPECT_NEAR(u0, 1.731, 2e-3);  // 1.7324
  EXPECT_NEAR(utility(0.0, UtilityVariant::increasing), -u0, 1e-12);
  EXPECT_THROW(utility(1.5), ConfigError);
  EXPECT_THROW(utility(-0.1), ConfigError);
}

TEST(Utility, IncreasingVariantStrictlyIncreasing) {
  double prev = utility(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double u = utility(i / 1000.0);
    EXPECT_GT(u, prev);
    prev = u;
  }
}

TEST(RoundReward, HandExample) {
  EXPECT_NEAR(round_reward(record(0.4, 8.0, 5.0), 0.4, {1.0, 0.2, 0.1}), -2.1, 1e-12);
  EXPECT_GT(round_reward(record(0.6, 8.0, 5.0), 0.4, {1.0, 0.0, 0.0}), 0.0);
}

TEST(RoundReward, LinearInWeights) {
  Rng rng(1);
  for (int k = 0; k < 1000; ++k) {
    const auto rec = record(uniform01(rng), 10.0 * uniform01(rng), 5.0 * uniform01(rng));
    const double prev = uniform01(rng);
    const RewardWeights w{uniform01(rng), uniform01(rng), uniform01(rng)};
    const double c = 0.1 + 4.0 * uniform01(rng);
    const double base = round_reward(rec, prev, w);
    EXPECT_NEAR(round_reward(rec, prev, {c * w.w1, c * w.w2, c * w.w3}), c * base, 1e-12 * (1.0 + std::abs(c * base)));
  }
}

TEST(RoundReward, IncompleteRecordRejected) {
  auto r = record(0.5, std::nan(""), 1.0);
  EXPECT_THROW(round_reward(r, 0.4, {}), ConfigError);
  r = record(0.5, 1.0, 1.0);
  r.mask.clear();
  EXPECT_THROW(round_reward(r, 0.4, {}), ConfigError);
}

TEST(EpisodeObjective, Examples) {
  const std::vector<fl::RoundRecord> ep{record(0.3, 4.0, 1.0), record(0.5, 6.0, 3.0)};
  EXPECT_NEAR(episode_objective(ep, {1.0, 0.2, 0.1}), -1.9, 1e-12);
  EXPECT_EQ(episode_objective(ep, {1.0, 0.0, 0.0}), 0.5);
  auto faster = ep;
  faster[0].H_t = 3.0;
  EXPECT_GT(episode_objective(faster, {}), episode_objective(ep, {}));
}

TEST(EpisodeObjective, TelescopesOverRounds) {
  Rng rng(2);
  for (int k = 0; k < 200; ++k) {
    const std::size_t T = 1 + uniform_index(rng, 20);
    const RewardWeights w{uniform01(rng), uniform01(rng), uniform01(rng)};
    const double acc0 = uniform01(rng);
    std::vector<fl::RoundRecord> ep;
    for (std::size_t t = 0; t < T; ++t) ep.push_back(record(uniform01(rng), 10.0 * uniform01(rng), 4.0 * uniform01(rng)));
    // Per-round contributions with raw accuracy differences.
    double sum = 0.0, prev = acc0;
    for (const auto& r : ep) {
      sum += w.w1 * (r.acc - prev) - w.w2 * r.H_t - w.w3 * r.B_t;
      prev = r.acc;
    }
    EXPECT_NEAR(episode_objective(ep, w), sum + w.w1 * acc0, 1e-10);
  }
}

TEST(Summarize, SumsAndRequiresRewards) {
  const std::vector<fl::RoundRecord> ep{record(0.3, 4.0, 1.0, -1.0), record(0.5, 6.0, 3.0, -2.5)};
  const auto s = summarize("x", 3, ep);
  EXPECT_EQ(s.acc_T, 0.5);
  EXPECT_EQ(s.sum_H, 10.0);
  EXPECT_EQ(s.sum_B, 4.0);
  EXPECT_EQ(s.total_reward, -3.5);
  auto missing = ep;
  missing[1].reward.reset();
  EXPECT_THROW(summarize("x", 3, missing), ConfigError);
  EXPECT_THROW(summarize("x", 3, std::vector<fl::RoundRecord>{}), ConfigError);
}

TEST(MeanStd, SampleStandardDeviation) {
  EXPECT_EQ(mean_std(std::vector<double>{4.0}).std, 0.0);
  const auto m = mean_std(std::vector<double>{1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.std, std::sqrt(5.0 / 3.0), 1e-12);
}

TEST(Report, NormalizationAndOrder) {
  const std::vector<RunSummary> runs{{"select_all", 0, 0.6, 30.0, 10.0, -5.0},
                                     {"fedmarl", 0, 0.62, 12.0, 4.0, -1.0},
                                     {"select_all", 1, 0.64, 34.0, 10.0, -6.0},
                                     {"fedmarl", 1, 0.60, 14.0, 5.0, -2.0}};
  const auto rows = report(runs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].policy, "select_all");
  EXPECT_EQ(rows[0].seeds, 2u);
  EXPECT_DOUBLE_EQ(*rows[1].norm_latency, 1.0);
  EXPECT_DOUBLE_EQ(*rows[1].norm_comm, 1.0);
  EXPECT_DOUBLE_EQ(*rows[0].norm_latency, 32.0 / 13.0);
  EXPECT_DOUBLE_EQ(*rows[0].norm_comm, 10.0 / 4.5);
  EXPECT_NEAR(rows[0].acc_std, std::sqrt(0.0008), 1e-12);
  const auto one = report(std::vector<RunSummary>{{"random_drop", 4, 0.5, 3.0, 2.0, -1.0}});
  EXPECT_EQ(one[0].acc_std, 0.0);
  EXPECT_FALSE(one[0].norm_latency.has_value());
  EXPECT_THROW(report(std::vector<RunSummary>{}), ConfigError);
}

TEST(Report, CsvHeaderAndEmptyNormalizedColumns) {
  const auto rows = report(std::vector<RunSummary>{{"random_drop", 4, 0.5, 3.0, 2.0, -1.0}});
  std::stringstream ss;
  write_summary_csv(ss, rows);
  std::string header, line;
  std::getline(ss, header);
  std::getline(ss, line);
  EXPECT_EQ(header, "policy,seeds,acc_mean,acc_std,sum_H_mean,sum_B_mean,reward_mean,reward_std,norm_latency,norm_comm");
  EXPECT_EQ(line, "random_drop,1,0.5,0,3,2,-1,0,,");
}
