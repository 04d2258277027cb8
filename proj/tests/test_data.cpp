#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "fedmarl/data.hpp"

using namespace fedmarl;
using namespace fedmarl::data;

namespace {

Dataset small(std::size_t per_class = 200, std::uint64_t seed = 1) { return gen_dataset({10, 32, per_class, 3.5}, seed); }

// Plain softmax regression, trained with minibatch SGD.
double linear_train_accuracy(const Dataset& ds, std::size_t epochs, double lr, std::uint64_t seed) {
  const std::size_t M = ds.num_classes, D = ds.dim(), n = ds.size();
  std::vector<double> W(M * D, 0.0), b(M, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::vector<double> z(M);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += 10) {
      const std::size_t end = std::min(n, start + 10);
      std::vector<double> gW(M * D, 0.0), gb(M, 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto x = ds.examples.row(order[k]);
        double mx = -1e300;
        for (std::size_t m = 0; m < M; ++m) {
          z[m] = b[m];
          for (std::size_t j = 0; j < D; ++j) z[m] += W[m * D + j] * x[j];
          mx = std::max(mx, z[m]);
        }
        double s = 0.0;
        for (auto& v : z) s += (v = std::exp(v - mx));
        for (std::size_t m = 0; m < M; ++m) {
          const double g = z[m] / s - (static_cast<int>(m) == ds.labels[order[k]] ? 1.0 : 0.0);
          gb[m] += g;
          for (std::size_t j = 0; j < D; ++j) gW[m * D + j] += g * x[j];
        }
      }
      const double scale = lr / static_cast<double>(end - start);
      for (std::size_t i = 0; i < W.size(); ++i) W[i] -= scale * gW[i];
      for (std::size_t m = 0; m < M; ++m) b[m] -= scale * gb[m];
    }
  }
  std::size_t hit = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto x = ds.examples.row(r);
    std::size_t best = 0;
    double best_z = -1e300;
    for (std::size_t m = 0; m < M; ++m) {
      double v = b[m];
      for (std::size_t j = 0; j < D; ++j) v += W[m * D + j] * x[j];
      if (v > best_z) best_z = v, best = m;
    }
    hit += static_cast<int>(best) == ds.labels[r];
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace

TEST(GenDataset, CountsPerClass) {
  const auto ds = small();
  EXPECT_EQ(ds.size(), 2000u);
  std::vector<int> c(10, 0);
  for (int y : ds.labels) ++c[static_cast<std::size_t>(y)];
  for (int v : c) EXPECT_EQ(v, 200);
}

TEST(GenDataset, DeterministicPerSeed) {
  const auto a = small(), b = small();
  EXPECT_EQ(a.examples.data, b.examples.data);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.examples.data, small(200, 2).examples.data);
}

TEST(GenDataset, LinearlySeparableEnough) {
  EXPECT_GE(linear_train_accuracy(small(), 100, 0.05, 3), 0.90);
}

TEST(GenDataset, RejectsBadOptions) {
  EXPECT_THROW(gen_dataset({1, 32, 10, 3.5}, 1), ConfigError);
  EXPECT_THROW(gen_dataset({10, 32, 10, 0.0}, 1), ConfigError);
}

TEST(SplitTrainTest, StratifiedAndDisjoint) {
  const auto ds = small(100);
  const auto s = split_train_test(ds, 0.2, 4);
  EXPECT_EQ(s.test.size(), 200u);
  EXPECT_EQ(s.train.size(), 800u);
  for (double p : s.test.label_distribution()) EXPECT_DOUBLE_EQ(p, 0.1);
}

TEST(Partition, SingleClientDominantCount) {
  const auto ds = gen_dataset({2, 4, 50, 3.5}, 2);
  const auto plan = partition_noniid(ds, {1, 3.0, 20, 20}, 5);
  ASSERT_EQ(plan.sizes, std::vector<std::size_t>{20});
  int dom = 0;
  for (auto i : plan.client_shards[0]) dom += ds.labels[i] == plan.dominant_label[0];
  EXPECT_EQ(dom, 16);
  EXPECT_EQ(plan.client_shards[0].size() - static_cast<std::size_t>(dom), 4u);
}

TEST(Partition, DominantCountIsCeiling) {
  EXPECT_EQ(dominant_count(20), 16u);
  EXPECT_EQ(dominant_count(21), 17u);
  EXPECT_EQ(dominant_count(23), 19u);
  EXPECT_EQ(dominant_count(25), 20u);
  EXPECT_EQ(dominant_count(1), 1u);
}

TEST(Partition, SizesBoundedAndShardsDisjoint) {
  const auto ds = small(800);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto plan = partition_noniid(ds, {100, 3.0, 20, 60}, seed);
    ASSERT_EQ(plan.num_clients(), 100u);
    std::set<std::size_t> seen;
    for (std::size_t c = 0; c < 100; ++c) {
      EXPECT_GE(plan.sizes[c], 20u);
      EXPECT_LE(plan.sizes[c], 60u);
      EXPECT_EQ(plan.client_shards[c].size(), plan.sizes[c]);
      std::size_t dom = 0;
      for (auto i : plan.client_shards[c]) {
        EXPECT_TRUE(seen.insert(i).second);
        dom += ds.labels[i] == plan.dominant_label[c];
      }
      EXPECT_GE(static_cast<double>(dom) / static_cast<double>(plan.sizes[c]), 0.8);
    }
  }
}

TEST(Partition, ShardFarFromUniform) {
  const auto ds = small(400);
  const std::vector<double> uniform(10, 0.1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto plan = partition_noniid(ds, {40, 3.0, 40, 40}, seed);
    for (const auto& shard : plan.client_shards)
      EXPECT_GE(tv_distance(shard_label_distribution(ds, shard), uniform), 0.5);
  }
}

TEST(Partition, UnionCloseToParentForLargePools) {
  const auto ds = small(800);
  const auto parent = ds.label_distribution();
  for (std::size_t K : {50u, 100u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto plan = partition_noniid(ds, {K, 3.0, 20, 60}, seed);
      std::vector<std::size_t> all;
      for (const auto& s : plan.client_shards) all.insert(all.end(), s.begin(), s.end());
      EXPECT_LT(tv_distance(shard_label_distribution(ds, all), parent), 0.1) << "K=" << K << " seed=" << seed;
    }
  }
}

TEST(Partition, DeterministicPerSeed) {
  const auto ds = small();
  const auto a = partition_noniid(ds, {40, 3.0, 20, 60}, 9), b = partition_noniid(ds, {40, 3.0, 20, 60}, 9);
  EXPECT_EQ(a.client_shards, b.client_shards);
  EXPECT_EQ(a.dominant_label, b.dominant_label);
}

TEST(Partition, PowerLawSkewsSmall) {
  const PartitionOptions opt{40, 3.0, 20, 60};
  EXPECT_EQ(power_law_size(0.0, opt), 20u);
  EXPECT_EQ(power_law_size(1.0, opt), 60u);
  EXPECT_EQ(power_law_size(0.5, opt), 25u);
}

TEST(Partition, InfeasibleDemandThrows) {
  const auto ds = gen_dataset({2, 4, 10, 3.5}, 1);
  EXPECT_THROW(partition_noniid(ds, {5, 3.0, 20, 20}, 1), ConfigError);
  EXPECT_THROW(partition_noniid(ds, {5, 3.0, 30, 20}, 1), ConfigError);
}

TEST(DatasetCsv, RoundTripIsExact) {
  const auto ds = gen_dataset({3, 5, 7, 3.5}, 8);
  std::stringstream ss;
  write_dataset_csv(ss, ds);
  const auto back = read_dataset_csv(ss, 3);
  EXPECT_EQ(back.examples.data, ds.examples.data);
  EXPECT_EQ(back.labels, ds.labels);
}

TEST(DatasetCsv, MalformedRejected) {
  std::stringstream bad("1.0,2.0,7\n");
  EXPECT_THROW(read_dataset_csv(bad, 3), ArtifactError);
}

TEST(ShardPlanIo, RoundTrip) {
  const auto ds = small();
  const auto plan = partition_noniid(ds, {12, 3.0, 20, 60}, 2);
  std::stringstream csv, jsonl;
  write_shard_plan(csv, jsonl, plan);
  const auto back = read_shard_plan(jsonl);
  EXPECT_EQ(back.client_shards, plan.client_shards);
  EXPECT_EQ(back.dominant_label, plan.dominant_label);
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "client_id,dominant_label,size");
}

TEST(Partition, DominantLabelUniformPerClientAndBalanced) {
  const auto ds = small(400);
  std::vector<int> first(10, 0);
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto plan = partition_noniid(ds, {20, 3.0, 20, 20}, seed);
    ++first[static_cast<std::size_t>(plan.dominant_label[3])];
    std::vector<int> per(10, 0);
    for (int d : plan.dominant_label) ++per[static_cast<std::size_t>(d)];
    for (int v : per) ASSERT_EQ(v, 2);
  }
  // Binomial(2000, 0.1): sd ~ 13.4.
  for (int v : first) EXPECT_NEAR(v, 200, 60);
}
