#pragma once

// Desk-scale classification data and non-IID client sharding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <cstdio>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmarl/error.hpp"
#include "fedmarl/nn.hpp"
#include "fedmarl/rng.hpp"

namespace fedmarl::data {

struct Dataset {
  nn::Matrix examples;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return examples.cols; }

  nn::Batch as_batch() const { return nn::Batch{examples, labels}; }

  nn::Batch subset(std::span<const std::size_t> idx) const {
    return nn::gather(nn::Batch{examples, labels}, idx);
  }

  // Empirical label distribution P(m).
  std::vector<double> label_distribution() const {
    std::vector<double> p(num_classes, 0.0);
    for (int y : labels) p[static_cast<std::size_t>(y)] += 1.0;
    for (double& v : p) v /= static_cast<double>(labels.size());
    return p;
  }
};

struct GenOptions {
  std::size_t num_classes = 10;
  std::size_t dim = 32;
  std::size_t n_per_class = 400;
  double cluster_radius = 3.5;
};

// One Gaussian cluster per class with unit covariance; class means are drawn
// once per class uniformly on a sphere of radius `cluster_radius`. Rows are
// laid out class-major.
inline Dataset gen_dataset(const GenOptions& opt, std::uint64_t seed) {
  if (opt.num_classes < 2) throw ConfigError("gen_dataset: need at least 2 classes");
  if (opt.dim < 2) throw ConfigError("gen_dataset: feature dim must be >= 2");
  if (opt.n_per_class < 1) throw ConfigError("gen_dataset: n_per_class must be >= 1");
  if (!(opt.cluster_radius > 0.0)) throw ConfigError("gen_dataset: cluster_radius must be positive");

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> means(opt.num_classes, std::vector<double>(opt.dim));
  for (auto& mu : means) {
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (double& v : mu) {
        v = gauss(rng);
        n2 += v * v;
      }
    } while (n2 < 1e-12);
    const double scale = opt.cluster_radius / std::sqrt(n2);
    for (double& v : mu) v *= scale;
  }

  Dataset ds;
  ds.num_classes = opt.num_classes;
  ds.examples = nn::Matrix(opt.num_classes * opt.n_per_class, opt.dim);
  ds.labels.resize(opt.num_classes * opt.n_per_class);
  std::size_t r = 0;
  for (std::size_t c = 0; c < opt.num_classes; ++c) {
    for (std::size_t k = 0; k < opt.n_per_class; ++k, ++r) {
      auto row = ds.examples.row(r);
      for (std::size_t j = 0; j < opt.dim; ++j) row[j] = means[c][j] + gauss(rng);
      ds.labels[r] = static_cast<int>(c);
    }
  }
  return ds;
}

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

// Stratified hold-out: within every class, round(test_fraction * count)
// randomly chosen examples go to the test set. Relative order is preserved.
inline TrainTestSplit split_train_test(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("split_train_test: test_fraction must be in (0, 1)");
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<char> is_test(ds.size(), 0);
  for (auto& idx : by_class) {
    auto perm = idx;
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < n_test; ++k) is_test[perm[k]] = 1;
  }
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < ds.size(); ++i) (is_test[i] ? te : tr).push_back(i);

  auto pick = [&](const std::vector<std::size_t>& idx) {
    Dataset out;
    out.num_classes = ds.num_classes;
    auto b = ds.subset(idx);
    out.examples = std::move(b.inputs);
    out.labels = std::move(b.labels);
    return out;
  };
  return {pick(tr), pick(te)};
}

struct ShardPlan {
  std::vector<std::vector<std::size_t>> client_shards;
  std::vector<int> dominant_label;
  std::vector<std::size_t> sizes;

  std::size_t num_clients() const { return sizes.size(); }
};

struct PartitionOptions {
  std::size_t num_clients = 40;
  double alpha = 3.0;
  std::size_t min_size = 20;
  std::size_t max_size = 60;
};

// ceil(0.8 * d) in integer arithmetic.
constexpr std::size_t dominant_count(std::size_t d) { return (4 * d + 4) / 5; }

// Bounded discrete power law: floor(min + (max - min + 1) * u^alpha), clipped.
inline std::size_t power_law_size(double u, const PartitionOptions& opt) {
  const double span = static_cast<double>(opt.max_size - opt.min_size + 1);
  const auto v = static_cast<std::size_t>(std::floor(static_cast<double>(opt.min_size) + span * std::pow(u, opt.alpha)));
  return std::clamp(v, opt.min_size, opt.max_size);
}

// Label-skewed shards: each client has one dominant label
// holding ceil(0.8 * D_n) of its examples; every remaining example takes a
// label drawn uniformly from the other classes. Shards are disjoint.
inline ShardPlan partition_noniid(const Dataset& ds, const PartitionOptions& opt, std::uint64_t seed) {
  if (opt.num_clients < 1) throw ConfigError("partition_noniid: need at least one client");
  if (opt.min_size < 1 || opt.min_size > opt.max_size)
    throw ConfigError("partition_noniid: need 1 <= min_size <= max_size");
  if (!(opt.alpha > 0.0)) throw ConfigError("partition_noniid: alpha must be positive");
  if (ds.num_classes < 2) throw ConfigError("partition_noniid: need at least 2 classes");

  Rng rng(seed);
  const std::size_t M = ds.num_classes;
  std::vector<std::vector<std::size_t>> pool(M);
  for (std::size_t i = 0; i < ds.size(); ++i) pool[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (auto& p : pool) std::shuffle(p.begin(), p.end(), rng);

  auto take = [&](std::size_t label, std::size_t client) {
    if (pool[label].empty())
      throw ConfigError("partition_noniid: infeasible demand, label " + std::to_string(label) +
                        " exhausted while filling client " + std::to_string(client));
    const auto i = pool[label].back();
    pool[label].pop_back();
    return i;
  };

  // Dominant labels come from consecutive shuffled permutations of the label
  // set: uniform per client, balanced across the pool.
  std::vector<std::size_t> deck;
  auto next_dominant = [&] {
    if (deck.empty()) {
      deck.resize(M);
      std::iota(deck.begin(), deck.end(), std::size_t{0});
      std::shuffle(deck.begin(), deck.end(), rng);
    }
    const auto v = deck.back();
    deck.pop_back();
    return v;
  };

  ShardPlan plan;
  for (std::size_t c = 0; c < opt.num_clients; ++c) {
    const std::size_t d = power_law_size(uniform01(rng), opt);
    const auto dom = next_dominant();
    const std::size_t n_dom = dominant_count(d);
    std::vector<std::size_t> shard;
    shard.reserve(d);
    for (std::size_t k = 0; k < n_dom; ++k) shard.push_back(take(dom, c));
    for (std::size_t k = n_dom; k < d; ++k) {
      auto other = uniform_index(rng, M - 1);
      if (other >= dom) ++other;
      shard.push_back(take(other, c));
    }
    plan.client_shards.push_back(std::move(shard));
    plan.dominant_label.push_back(static_cast<int>(dom));
    plan.sizes.push_back(d);
  }
  return plan;
}

// Total-variation distance between two distributions over the same support.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

inline std::vector<double> shard_label_distribution(const Dataset& ds, std::span<const std::size_t> shard) {
  std::vector<double> p(ds.num_classes, 0.0);
  for (auto i : shard) p[static_cast<std::size_t>(ds.labels[i])] += 1.0;
  for (double& v : p) v /= static_cast<double>(shard.size());
  return p;
}

// ---- CSV / JSON-lines I/O -------------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// One row per example: features..., label.
inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (double v : ds.examples.row(r)) os << format_double(v) << ',';
    os << ds.labels[r] << '\n';
  }
}

inline Dataset read_dataset_csv(std::istream& is, std::size_t num_classes) {
  Dataset ds;
  ds.num_classes = num_classes;
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> flat;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw ArtifactError("dataset csv line " + std::to_string(lineno) + ": too few columns");
    const std::size_t d = cells.size() - 1;
    if (ds.examples.cols == 0) ds.examples.cols = d;
    if (d != ds.examples.cols)
      throw ArtifactError("dataset csv line " + std::to_string(lineno) + ": inconsistent column count");
    try {
      for (std::size_t j = 0; j < d; ++j) flat.push_back(std::stod(cells[j]));
      const int y = std::stoi(cells.back());
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw std::out_of_range("label");
      ds.labels.push_back(y);
    } catch (const std::logic_error&) {
      throw ArtifactError("dataset csv line " + std::to_string(lineno) + ": malformed value");
    }
  }
  ds.examples.rows = ds.labels.size();
  ds.examples.data = std::move(flat);
  return ds;
}

// Summary CSV (client_id,dominant_label,size) plus a JSON-lines sidecar with
// each client's index list.
inline void write_shard_plan(std::ostream& csv, std::ostream& jsonl, const ShardPlan& plan) {
  csv << "client_id,dominant_label,size\n";
  for (std::size_t c = 0; c < plan.num_clients(); ++c) {
    csv << c << ',' << plan.dominant_label[c] << ',' << plan.sizes[c] << '\n';
    nlohmann::json j;
    j["client_id"] = c;
    j["dominant_label"] = plan.dominant_label[c];
    j["indices"] = plan.client_shards[c];
    jsonl << j.dump() << '\n';
  }
}

inline ShardPlan read_shard_plan(std::istream& jsonl) {
  ShardPlan plan;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(jsonl, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.at("client_id").get<std::size_t>() != plan.num_clients())
        throw ArtifactError("shard plan line " + std::to_string(lineno) + ": client ids out of order");
      plan.dominant_label.push_back(j.at("dominant_label").get<int>());
      plan.client_shards.push_back(j.at("indices").get<std::vector<std::size_t>>());
      plan.sizes.push_back(plan.client_shards.back().size());
    } catch (const nlohmann::json::exception& e) {
      throw ArtifactError("shard plan line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return plan;
}

}  // namespace fedmarl::data
