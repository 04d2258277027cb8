#pragma once

// Value-decomposition multi-agent Q-learning: per-agent state features, a
// shared Q-network with a target copy, replay buffer, epsilon-greedy acting
// and the joint TD update on Q_tot = sum_n Q(s_n)[a_n].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmarl/engine.hpp"
#include "fedmarl/error.hpp"
#include "fedmarl/nn.hpp"
#include "fedmarl/rng.hpp"

namespace fedmarl::marl {

using nn::Matrix;
using nn::ParamVector;
using AgentState = std::vector<double>;
using JointAction = std::vector<int>;

struct FeatureSpec {
  std::size_t dt_p = 3;
  std::size_t dt_c = 5;

  // [L, H^p window, H^u window, B, D, t/T]
  std::size_t dim() const { return 1 + dt_p + dt_c + 3; }
  bool operator==(const FeatureSpec&) const = default;
};

inline std::vector<double> raw_features(const fl::AgentObservation& o, const FeatureSpec& fs) {
  if (o.probe_hist.size() != fs.dt_p || o.upload_hist.size() != fs.dt_c)
    throw DimensionError("observation history windows do not match feature spec");
  if (o.T == 0) throw ConfigError("observation with T = 0");
  std::vector<double> f;
  f.reserve(fs.dim());
  f.push_back(o.probe_loss);
  f.insert(f.end(), o.probe_hist.begin(), o.probe_hist.end());
  f.insert(f.end(), o.upload_hist.begin(), o.upload_hist.end());
  f.push_back(o.comm_cost);
  f.push_back(o.data_size);
  f.push_back(static_cast<double>(o.t) / static_cast<double>(o.T));
  for (double v : f)
    if (!std::isfinite(v)) throw ConfigError("non-finite raw observation");
  return f;
}

// Running per-feature z-score (Welford). Updated while training, frozen for
// deployment; features with sigma < 1e-8 map to 0; outputs clamp to [-5, 5].
class Normalizer {
 public:
  static constexpr double kMinSigma = 1e-8;
  static constexpr double kClamp = 5.0;

  Normalizer() = default;
  explicit Normalizer(std::size_t dim) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  static Normalizer from_stats(std::vector<double> mean, std::vector<double> sigma, std::uint64_t count) {
    if (mean.size() != sigma.size()) throw ArtifactError("normalizer: mean/sigma length mismatch");
    Normalizer n(mean.size());
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      if (!(sigma[i] >= 0.0) || !std::isfinite(sigma[i]) || !std::isfinite(mean[i]))
        throw ArtifactError("normalizer: bad statistics");
      n.m2_[i] = sigma[i] * sigma[i] * static_cast<double>(count);
    }
    n.mean_ = std::move(mean);
    n.sigma_ = std::move(sigma);
    n.count_ = count;
    n.frozen_ = true;
    return n;
  }

  std::size_t dim() const { return mean_.size(); }
  std::uint64_t count() const { return count_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }

  const std::vector<double>& mean() const { return mean_; }
  std::vector<double> sigma() const {
    std::vector<double> s(dim(), 0.0);
    for (std::size_t i = 0; i < dim(); ++i) s[i] = sigma_at(i);
    return s;
  }

  void update(std::span<const double> x) {
    if (frozen_) return;
    check(x);
    ++count_;
    const double n = static_cast<double>(count_);
    sigma_.clear();
    for (std::size_t i = 0; i < dim(); ++i) {
      const double d = x[i] - mean_[i];
      mean_[i] += d / n;
      m2_[i] += d * (x[i] - mean_[i]);
    }
  }

  AgentState normalize(std::span<const double> x) const {
    check(x);
    AgentState z(dim(), 0.0);
    if (count_ == 0) return z;
    for (std::size_t i = 0; i < dim(); ++i) {
      const double s = sigma_at(i);
      if (s < kMinSigma) continue;
      z[i] = std::clamp((x[i] - mean_[i]) / s, -kClamp, kClamp);
    }
    return z;
  }

 private:
  void check(std::span<const double> x) const {
    if (x.size() != dim()) throw DimensionError("normalizer: feature length mismatch");
  }

  double sigma_at(std::size_t i) const {
    if (!sigma_.empty()) return sigma_[i];
    if (count_ == 0) return 0.0;
    return std::sqrt(m2_[i] / static_cast<double>(count_));
  }

  std::vector<double> mean_;
  std::vector<double> m2_;
  std::vector<double> sigma_;  // exact values when restored from an artifact
  std::uint64_t count_ = 0;
  bool frozen_ = false;
};

// Folds the observation into the running statistics (unless frozen) and
// returns the normalized state.
inline AgentState build_state(const fl::AgentObservation& obs, Normalizer& norm, const FeatureSpec& fs) {
  const auto raw = raw_features(obs, fs);
  norm.update(raw);
  return norm.normalize(raw);
}

// Shared Q-network: one online and one target parameter set evaluated for
// every agent.
struct QNet {
  nn::MlpSpec spec;
  ParamVector online;
  ParamVector target;

  static QNet create(std::size_t state_dim, std::uint64_t seed, std::size_t hidden = 256) {
    QNet q;
    q.spec = nn::MlpSpec{state_dim, {hidden}, 2, nn::Activation::relu};
    q.online = nn::init_params(q.spec, seed);
    q.target = q.online;
    return q;
  }

  // N x 2 matrix of action values.
  Matrix q_values(std::span<const AgentState> states, bool use_target = false) const {
    return nn::predict(use_target ? target : online, spec, stack(states));
  }

  Matrix stack(std::span<const AgentState> states) const {
    Matrix m(states.size(), spec.input_dim);
    for (std::size_t n = 0; n < states.size(); ++n) {
      if (states[n].size() != spec.input_dim) throw DimensionError("agent state length mismatch");
      std::copy(states[n].begin(), states[n].end(), m.row(n).begin());
    }
    return m;
  }
};

inline void sync_target(QNet& q) { q.target = q.online; }

// Greedy action of one agent; ties go to action 1 (participate).
inline int greedy(double q0, double q1) { return q1 >= q0 ? 1 : 0; }

inline JointAction act(std::span<const AgentState> states, const QNet& qnet, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  JointAction a(states.size(), 0);
  if (states.empty()) return a;
  const Matrix q = qnet.q_values(states);
  for (std::size_t n = 0; n < states.size(); ++n) {
    if (uniform01(rng) < epsilon)
      a[n] = uniform01(rng) < 0.5 ? 0 : 1;
    else
      a[n] = greedy(q(n, 0), q(n, 1));
  }
  return a;
}

inline double q_tot(std::span<const AgentState> states, std::span<const int> actions, const QNet& qnet,
                    bool use_target = false) {
  if (states.size() != actions.size()) throw DimensionError("q_tot: states/actions length mismatch");
  if (states.empty()) return 0.0;
  const Matrix q = qnet.q_values(states, use_target);
  double s = 0.0;
  for (std::size_t n = 0; n < states.size(); ++n) s += q(n, static_cast<std::size_t>(actions[n]));
  return s;
}

struct Transition {
  std::vector<AgentState> states;
  JointAction actions;
  double reward = 0.0;
  std::vector<AgentState> next_states;
  bool terminal = false;
};

// Fixed-capacity FIFO ring buffer.
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 4096));
  }

  void push(T item) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
    } else {
      items_[static_cast<std::size_t>(inserted_ % capacity_)] = std::move(item);
    }
    ++inserted_;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t inserted() const { return inserted_; }

  // Items in insertion order, oldest first.
  std::vector<const T*> ordered() const {
    std::vector<const T*> out;
    const std::size_t start = items_.size() < capacity_ ? 0 : static_cast<std::size_t>(inserted_ % capacity_);
    for (std::size_t k = 0; k < items_.size(); ++k) out.push_back(&items_[(start + k) % items_.size()]);
    return out;
  }

  // Uniform sample with replacement.
  std::vector<const T*> sample(std::size_t k, Rng& rng) const {
    if (k > items_.size()) throw ConfigError("replay buffer holds fewer items than the requested batch");
    std::vector<const T*> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(&items_[uniform_index(rng, items_.size())]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<T> items_;
  std::uint64_t inserted_ = 0;
};

struct TdResult {
  double loss = 0.0;
  ParamVector grad;
};

// Mean squared TD error over the batch and its gradient w.r.t. the online
// parameters, with y = r + gamma * sum_n max_a Q_target(s'_n)[a] (y = r when
// terminal).
inline TdResult td_loss_and_grad(std::span<const Transition* const> batch, const QNet& qnet, double gamma) {
  if (batch.empty()) throw ConfigError("td update on empty batch");
  std::vector<AgentState> cur, nxt;
  std::vector<std::size_t> cur_off, nxt_off;
  for (const auto* tr : batch) {
    if (tr->states.size() != tr->actions.size()) throw DimensionError("transition states/actions mismatch");
    cur_off.push_back(cur.size());
    cur.insert(cur.end(), tr->states.begin(), tr->states.end());
    nxt_off.push_back(nxt.size());
    if (!tr->terminal) nxt.insert(nxt.end(), tr->next_states.begin(), tr->next_states.end());
  }
  const Matrix inputs = qnet.stack(cur);
  const Matrix q = nn::predict(qnet.online, qnet.spec, inputs);
  Matrix qn;
  if (!nxt.empty()) qn = qnet.q_values(nxt, true);

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Matrix dq(cur.size(), 2);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto* tr = batch[b];
    double y = tr->reward;
    if (!tr->terminal) {
      double s = 0.0;
      for (std::size_t n = 0; n < tr->next_states.size(); ++n) {
        const auto r = nxt_off[b] + n;
        s += std::max(qn(r, 0), qn(r, 1));
      }
      y += gamma * s;
    }
    double qt = 0.0;
    for (std::size_t n = 0; n < tr->actions.size(); ++n)
      qt += q(cur_off[b] + n, static_cast<std::size_t>(tr->actions[n]));
    const double err = y - qt;
    loss += err * err * inv_b;
    for (std::size_t n = 0; n < tr->actions.size(); ++n)
      dq(cur_off[b] + n, static_cast<std::size_t>(tr->actions[n])) = -2.0 * err * inv_b;
  }
  return {loss, nn::backward_from_output(qnet.online, qnet.spec, inputs, dq)};
}

// One SGD step on a uniformly sampled minibatch; returns the pre-step loss.
// A positive max_grad_norm rescales larger gradients to that norm.
inline double td_train_step(const ReplayBuffer<Transition>& buffer, QNet& qnet, double gamma,
                            std::size_t batch_size, double lr, Rng& rng, double max_grad_norm = 0.0) {
  if (buffer.size() < batch_size || batch_size == 0)
    throw ConfigError("td_train_step: replay buffer smaller than batch size");
  const auto batch = buffer.sample(batch_size, rng);
  auto res = td_loss_and_grad(batch, qnet, gamma);
  if (max_grad_norm > 0.0) {
    const double g = res.grad.norm();
    if (g > max_grad_norm) res.grad *= max_grad_norm / g;
  }
  qnet.online = nn::sgd_step(qnet.online, res.grad, lr);
  return res.loss;
}

struct MarlHyperparams {
  double gamma = 0.99;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t buffer_capacity = 10000;
  std::size_t warmup = 200;
  std::size_t sync_period = 50;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_anneal_fraction = 0.6;
  std::size_t hidden = 256;
  double max_grad_norm = 10.0;

  bool operator==(const MarlHyperparams&) const = default;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("marl.gamma must lie in [0, 1]");
    if (!(lr > 0.0)) throw ConfigError("marl.lr must be positive");
    if (batch_size == 0 || buffer_capacity < batch_size) throw ConfigError("marl.buffer_capacity must be >= batch_size > 0");
    if (sync_period == 0) throw ConfigError("marl.sync_period must be positive");
    if (!(eps_start >= 0.0 && eps_start <= 1.0 && eps_end >= 0.0 && eps_end <= 1.0))
      throw ConfigError("marl epsilon values must lie in [0, 1]");
    if (!(eps_anneal_fraction > 0.0 && eps_anneal_fraction <= 1.0))
      throw ConfigError("marl.eps_anneal_fraction must lie in (0, 1]");
    if (hidden == 0) throw ConfigError("marl.hidden must be positive");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("marl.max_grad_norm must be nonnegative");
  }

  // Linear anneal eps_start -> eps_end over the first eps_anneal_fraction of episodes.
  double epsilon(std::size_t episode, std::size_t episodes) const {
    const double horizon = eps_anneal_fraction * static_cast<double>(episodes);
    if (horizon <= 0.0) return eps_end;
    const double f = static_cast<double>(episode) / horizon;
    return f >= 1.0 ? eps_end : eps_start + (eps_end - eps_start) * f;
  }
};

inline nlohmann::json to_json(const MarlHyperparams& h) {
  return {{"gamma", h.gamma},         {"lr", h.lr},
          {"batch_size", h.batch_size}, {"buffer_capacity", h.buffer_capacity},
          {"warmup", h.warmup},       {"sync_period", h.sync_period},
          {"eps_start", h.eps_start}, {"eps_end", h.eps_end},
          {"eps_anneal_fraction", h.eps_anneal_fraction}, {"hidden", h.hidden},
          {"max_grad_norm", h.max_grad_norm}};
}

// Trained policy: online Q parameters plus frozen normalizer statistics.
struct PolicyArtifact {
  QNet qnet;
  Normalizer normalizer;
  FeatureSpec features;
  MarlHyperparams hyper;
  std::uint64_t seed = 0;
};

inline std::filesystem::path params_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".params";
  return p;
}
inline std::filesystem::path sidecar_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".json";
  return p;
}

// Writes <base>.params (binary ParamVector) and <base>.json (sidecar).
inline void save_artifact(const PolicyArtifact& a, const std::filesystem::path& base) {
  {
    std::ofstream os(params_path(base), std::ios::binary);
    if (!os) throw ArtifactError("cannot write " + params_path(base).string());
    nn::write_params(os, a.qnet.online);
  }
  nlohmann::json j;
  j["format"] = "fedmarl-policy-v1";
  j["state_dim"] = a.qnet.spec.input_dim;
  j["hidden"] = a.qnet.spec.hidden_dims;
  j["dt_p"] = a.features.dt_p;
  j["dt_c"] = a.features.dt_c;
  j["seed"] = a.seed;
  j["hyperparams"] = to_json(a.hyper);
  j["normalizer"] = {{"mean", a.normalizer.mean()}, {"sigma", a.normalizer.sigma()}, {"count", a.normalizer.count()}};
  std::ofstream os(sidecar_path(base));
  if (!os) throw ArtifactError("cannot write " + sidecar_path(base).string());
  os << j.dump(2) << '\n';
}

inline PolicyArtifact load_artifact(const std::filesystem::path& base) {
  std::ifstream js(sidecar_path(base));
  std::ifstream ps(params_path(base), std::ios::binary);
  if (!js || !ps) throw ArtifactError("policy artifact not found at " + base.string());
  PolicyArtifact a;
  try {
    const auto j = nlohmann::json::parse(js);
    if (j.at("format") != "fedmarl-policy-v1") throw ArtifactError("unknown policy artifact format");
    a.features.dt_p = j.at("dt_p").get<std::size_t>();
    a.features.dt_c = j.at("dt_c").get<std::size_t>();
    a.seed = j.at("seed").get<std::uint64_t>();
    const auto& h = j.at("hyperparams");
    a.hyper.gamma = h.at("gamma");
    a.hyper.lr = h.at("lr");
    a.hyper.batch_size = h.at("batch_size");
    a.hyper.buffer_capacity = h.at("buffer_capacity");
    a.hyper.warmup = h.at("warmup");
    a.hyper.sync_period = h.at("sync_period");
    a.hyper.eps_start = h.at("eps_start");
    a.hyper.eps_end = h.at("eps_end");
    a.hyper.eps_anneal_fraction = h.at("eps_anneal_fraction");
    a.hyper.hidden = h.at("hidden");
    a.hyper.max_grad_norm = h.at("max_grad_norm");
    const auto& n = j.at("normalizer");
    a.normalizer = Normalizer::from_stats(n.at("mean").get<std::vector<double>>(),
                                          n.at("sigma").get<std::vector<double>>(), n.at("count").get<std::uint64_t>());
    a.qnet.spec = nn::MlpSpec{j.at("state_dim").get<std::size_t>(), j.at("hidden").get<std::vector<std::size_t>>(), 2,
                              nn::Activation::relu};
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("corrupt policy sidecar: " + std::string(e.what()));
  }
  if (a.qnet.spec.input_dim != a.features.dim() || a.normalizer.dim() != a.features.dim())
    throw ArtifactError("policy artifact state dimension disagrees with its history windows");
  a.qnet.online = nn::read_params(ps);
  if (a.qnet.online.layout() != a.qnet.spec.layout()) throw ArtifactError("policy parameters do not match sidecar shape");
  a.qnet.target = a.qnet.online;
  return a;
}

}  // namespace fedmarl::marl
