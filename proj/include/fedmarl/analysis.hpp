#pragma once

// Reward shaping, episode objective and per-policy summary tables.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedmarl/engine.hpp"
#include "fedmarl/error.hpp"

namespace fedmarl::analysis {

// `paper_formula` is 10 - 20 / (1 + e^{0.35 (1 - x)}) verbatim, which
// decreases in x; `increasing` flips the exponent sign.
enum class UtilityVariant { increasing, paper_formula };

inline double utility(double acc, UtilityVariant variant = UtilityVariant::increasing) {
  if (!(acc >= 0.0 && acc <= 1.0)) throw ConfigError("utility: accuracy must be a fraction in [0, 1]");
  const double e = variant == UtilityVariant::paper_formula ? 0.35 * (1.0 - acc) : 0.35 * (acc - 1.0);
  return 10.0 - 20.0 / (1.0 + std::exp(e));
}

struct RewardWeights {
  double w1 = 1.0;
  double w2 = 0.2;
  double w3 = 0.1;

  bool operator==(const RewardWeights&) const = default;

  void validate() const {
    if (!(w1 >= 0.0 && w2 >= 0.0 && w3 >= 0.0)) throw ConfigError("reward weights must be nonnegative");
    if (w1 == 0.0 && w2 == 0.0 && w3 == 0.0) throw ConfigError("reward weights must not all be zero");
  }
};

// r_t = w1 [U(Acc(t)) - U(Acc(t-1))] - w2 H_t - w3 B_t
inline double round_reward(const fl::RoundRecord& rec, double prev_acc, const RewardWeights& w,
                           UtilityVariant variant = UtilityVariant::increasing) {
  if (!std::isfinite(rec.H_t) || !std::isfinite(rec.B_t) || !std::isfinite(rec.acc) || rec.mask.empty())
    throw ConfigError("round_reward: incomplete round record");
  return w.w1 * (utility(rec.acc, variant) - utility(prev_acc, variant)) - w.w2 * rec.H_t - w.w3 * rec.B_t;
}

// w1 Acc(T) - w2 sum H_t - w3 sum B_t, on raw accuracy.
inline double episode_objective(std::span<const fl::RoundRecord> records, const RewardWeights& w) {
  if (records.empty()) return 0.0;
  double h = 0.0, b = 0.0;
  for (const auto& r : records) {
    h += r.H_t;
    b += r.B_t;
  }
  return w.w1 * records.back().acc - w.w2 * h - w.w3 * b;
}

struct RunSummary {
  std::string policy;
  std::uint64_t seed = 0;
  double acc_T = 0.0;
  double sum_H = 0.0;
  double sum_B = 0.0;
  double total_reward = 0.0;
};

inline RunSummary summarize(const std::string& policy, std::uint64_t seed, std::span<const fl::RoundRecord> records) {
  if (records.empty()) throw ConfigError("summarize: no round records");
  RunSummary s{policy, seed, records.back().acc, 0.0, 0.0, 0.0};
  for (const auto& r : records) {
    if (!r.reward) throw ConfigError("summarize: round record without reward");
    s.sum_H += r.H_t;
    s.sum_B += r.B_t;
    s.total_reward += *r.reward;
  }
  return s;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std, 0 for a single value
};

inline MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct SummaryRow {
  std::string policy;
  std::size_t seeds = 0;
  double acc_mean = 0.0, acc_std = 0.0;
  double sum_H_mean = 0.0, sum_B_mean = 0.0;
  double reward_mean = 0.0, reward_std = 0.0;
  std::optional<double> norm_latency, norm_comm;  // relative to the fedmarl row
};

// Per-policy aggregates in first-appearance order. Normalized columns divide
// by the "fedmarl" row when present.
inline std::vector<SummaryRow> report(std::span<const RunSummary> runs) {
  if (runs.empty()) throw ConfigError("report: no runs");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunSummary*>> by;
  for (const auto& r : runs) {
    if (!by.count(r.policy)) order.push_back(r.policy);
    by[r.policy].push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& name : order) {
    const auto& v = by[name];
    std::vector<double> acc, h, b, rew;
    for (const auto* r : v) {
      acc.push_back(r->acc_T);
      h.push_back(r->sum_H);
      b.push_back(r->sum_B);
      rew.push_back(r->total_reward);
    }
    SummaryRow row;
    row.policy = name;
    row.seeds = v.size();
    const auto a = mean_std(acc), rw = mean_std(rew);
    row.acc_mean = a.mean;
    row.acc_std = a.std;
    row.sum_H_mean = mean_std(h).mean;
    row.sum_B_mean = mean_std(b).mean;
    row.reward_mean = rw.mean;
    row.reward_std = rw.std;
    rows.push_back(row);
  }
  auto ref = std::find_if(rows.begin(), rows.end(), [](const SummaryRow& r) { return r.policy == "fedmarl"; });
  if (ref != rows.end()) {
    const double h = ref->sum_H_mean, b = ref->sum_B_mean;
    for (auto& r : rows) {
      if (h > 0.0) r.norm_latency = r.sum_H_mean / h;
      if (b > 0.0) r.norm_comm = r.sum_B_mean / b;
    }
  }
  return rows;
}

inline void write_summary_csv(std::ostream& os, std::span<const SummaryRow> rows) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  os << "policy,seeds,acc_mean,acc_std,sum_H_mean,sum_B_mean,reward_mean,reward_std,norm_latency,norm_comm\n";
  for (const auto& r : rows) {
    os << r.policy << ',' << r.seeds << ',' << num(r.acc_mean) << ',' << num(r.acc_std) << ','
       << num(r.sum_H_mean) << ',' << num(r.sum_B_mean) << ',' << num(r.reward_mean) << ','
       << num(r.reward_std) << ',' << opt(r.norm_latency) << ',' << opt(r.norm_comm) << '\n';
  }
}

}  // namespace fedmarl::analysis
