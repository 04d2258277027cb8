#pragma once

// Client-selection policies. Every policy maps the post-probe round context
// to a mask with at least one selected client.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedmarl/engine.hpp"
#include "fedmarl/error.hpp"
#include "fedmarl/marl.hpp"
#include "fedmarl/rng.hpp"

namespace fedmarl::policies {

using fl::Mask;

inline Mask select_all(std::size_t n) {
  if (n < 1) throw ConfigError("select_all: N must be >= 1");
  return Mask(n, 1);
}

// Keeps a uniformly random subset of round((1 - p) N) clients, at least one.
inline Mask random_drop(std::size_t n, double p, Rng& rng) {
  if (n < 1) throw ConfigError("random_drop: N must be >= 1");
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("random_drop: p must lie in [0, 1)");
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((1.0 - p) * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  Mask m(n, 0);
  for (std::size_t i = 0; i < keep; ++i) m[idx[i]] = 1;
  return m;
}

// Selects the floor(N/2) clients with the smallest probe latency; ties by index.
inline Mask top_half_speed(std::span<const double> probe_latency) {
  const std::size_t n = probe_latency.size();
  if (n < 2) throw ConfigError("top_half_speed: N must be >= 2");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return probe_latency[a] < probe_latency[b]; });
  Mask m(n, 0);
  for (std::size_t i = 0; i < n / 2; ++i) m[idx[i]] = 1;
  return m;
}

// Rejects clients whose probing loss is strictly above the mean, at most
// ceil(N/2) of them, highest loss first (ties by lower index). With
// strict_half the ceil(N/2) highest-loss clients are rejected regardless of
// the mean. Never rejects everyone.
inline Mask probing_loss_reject(std::span<const double> losses, bool strict_half = false) {
  const std::size_t n = losses.size();
  if (n < 2) throw ConfigError("probing_loss_reject: N must be >= 2");
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i)
    if (strict_half || losses[i] > mean) cand.push_back(i);
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return losses[a] > losses[b]; });
  const std::size_t cap = std::min<std::size_t>((n + 1) / 2, n - 1);
  Mask m(n, 1);
  for (std::size_t k = 0; k < std::min(cap, cand.size()); ++k) m[cand[k]] = 0;
  return m;
}

// Greedy VDN decision with epsilon = 0; an all-zero decision is repaired by
// selecting the agent with the largest Q(s,1) - Q(s,0).
inline Mask repair_by_q_gap(Mask raw, const nn::Matrix& q) {
  if (std::find(raw.begin(), raw.end(), 1) != raw.end()) return raw;
  std::size_t best = 0;
  for (std::size_t n = 1; n < raw.size(); ++n)
    if (q(n, 1) - q(n, 0) > q(best, 1) - q(best, 0)) best = n;
  raw[best] = 1;
  return raw;
}

inline Mask fedmarl_policy(std::span<const marl::AgentState> states, const marl::PolicyArtifact& artifact) {
  if (states.empty()) throw ConfigError("fedmarl_policy: no agents");
  const auto q = artifact.qnet.q_values(states);
  Mask raw(states.size());
  for (std::size_t n = 0; n < states.size(); ++n) raw[n] = marl::greedy(q(n, 0), q(n, 1));
  return repair_by_q_gap(std::move(raw), q);
}

enum class Kind { select_all, random_drop, top_half_speed, probing_loss_reject, fedmarl };

struct PolicySpec {
  Kind kind = Kind::select_all;
  double drop_p = 0.5;
  bool strict_half = false;
};

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::select_all: return "select_all";
    case Kind::random_drop: return "random_drop";
    case Kind::top_half_speed: return "top_half_speed";
    case Kind::probing_loss_reject: return "probing_loss_reject";
    case Kind::fedmarl: return "fedmarl";
  }
  return "?";
}

inline Kind parse_kind(const std::string& s) {
  for (Kind k : {Kind::select_all, Kind::random_drop, Kind::top_half_speed, Kind::probing_loss_reject, Kind::fedmarl})
    if (kind_name(k) == s) return k;
  throw ConfigError("unknown policy '" + s + "'");
}

// Stateful wrapper used by the experiment loop: owns the artifact (for
// fedmarl) and the policy random stream.
class SelectionPolicy {
 public:
  SelectionPolicy(PolicySpec spec, std::shared_ptr<const marl::PolicyArtifact> artifact, std::uint64_t seed)
      : spec_(spec), artifact_(std::move(artifact)), rng_(seed) {
    if (spec_.kind == Kind::fedmarl && !artifact_)
      throw ArtifactError("fedmarl policy requires a trained policy artifact");
  }

  const PolicySpec& spec() const { return spec_; }
  std::string name() const { return kind_name(spec_.kind); }

  Mask select(const fl::RoundContext& ctx) {
    const std::size_t n = ctx.clients.size();
    switch (spec_.kind) {
      case Kind::select_all: return select_all(n);
      case Kind::random_drop: return random_drop(n, spec_.drop_p, rng_);
      case Kind::top_half_speed: return top_half_speed(ctx.probe_lat);
      case Kind::probing_loss_reject: return probing_loss_reject(ctx.probe_loss, spec_.strict_half);
      case Kind::fedmarl: {
        marl::Normalizer norm = artifact_->normalizer;
        norm.freeze();
        std::vector<marl::AgentState> states;
        for (const auto& o : ctx.observations) states.push_back(marl::build_state(o, norm, artifact_->features));
        return fedmarl_policy(states, *artifact_);
      }
    }
    throw ConfigError("unhandled policy kind");
  }

 private:
  PolicySpec spec_;
  std::shared_ptr<const marl::PolicyArtifact> artifact_;
  Rng rng_;
};

}  // namespace fedmarl::policies
