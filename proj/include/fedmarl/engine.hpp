#pragma once

// One federated round: probing epoch on every sampled client, a selection
// decision, completion of local training on the selected clients, weighted
// aggregation and test-set scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmarl/data.hpp"
#include "fedmarl/error.hpp"
#include "fedmarl/nn.hpp"
#include "fedmarl/rng.hpp"
#include "fedmarl/traces.hpp"

namespace fedmarl::fl {

using nn::ParamVector;
using Mask = std::vector<int>;

struct TrainOptions {
  double lr = 0.05;
  std::size_t batch_size = 10;  // 0 = full batch
};

struct LocalResult {
  ParamVector params;
  double first_epoch_loss = 0.0;
};

// Minibatch SGD for `epochs` epochs. Minibatches follow a fresh shuffle each
// epoch; full-batch training (batch_size 0 or >= shard size) keeps the shard
// order and consumes no randomness. first_epoch_loss is the mean pre-step
// loss over the first epoch's minibatches.
inline LocalResult run_epochs(ParamVector params, const nn::MlpSpec& spec, const nn::Batch& shard,
                              std::size_t epochs, const TrainOptions& opt, Rng& rng) {
  if (shard.size() == 0) throw DimensionError("local training on empty shard");
  const std::size_t n = shard.size();
  const bool full = opt.batch_size == 0 || opt.batch_size >= n;
  std::vector<std::size_t> order(n);
  LocalResult res;
  for (std::size_t e = 0; e < epochs; ++e) {
    double loss_sum = 0.0;
    std::size_t steps = 0;
    if (full) {
      auto [loss, grad] = nn::loss_and_grad(params, spec, shard);
      params = nn::sgd_step(params, grad, opt.lr);
      loss_sum = loss;
      steps = 1;
    } else {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < n; s += opt.batch_size) {
        const std::size_t len = std::min(opt.batch_size, n - s);
        const auto mb = nn::gather(shard, std::span<const std::size_t>(order.data() + s, len));
        auto [loss, grad] = nn::loss_and_grad(params, spec, mb);
        params = nn::sgd_step(params, grad, opt.lr);
        loss_sum += loss;
        ++steps;
      }
    }
    if (e == 0) res.first_epoch_loss = loss_sum / static_cast<double>(steps);
  }
  res.params = std::move(params);
  return res;
}

struct LocalUpdate {
  ParamVector delta;
  double first_epoch_loss = 0.0;
};

inline LocalUpdate local_train(const ParamVector& params, const nn::MlpSpec& spec, const nn::Batch& shard,
                               std::size_t epochs, const TrainOptions& opt, Rng& rng) {
  if (epochs < 1) throw ConfigError("local_train: epochs must be >= 1");
  auto r = run_epochs(params, spec, shard, epochs, opt, rng);
  return {r.params - params, r.first_epoch_loss};
}

// Immutable per-experiment environment: task model, data, client shards,
// device profiles, traces and costs.
struct FlTask {
  nn::MlpSpec model;
  data::Dataset train;
  nn::Batch test;
  data::ShardPlan plan;
  std::vector<nn::Batch> shards;
  std::vector<std::vector<double>> shard_label_dist;
  std::vector<traces::ClientProfile> profiles;
  traces::TraceTable traces;
  traces::CommCosts costs;

  std::size_t num_clients() const { return shards.size(); }

  static FlTask build(nn::MlpSpec model, data::Dataset train, data::Dataset test, data::ShardPlan plan,
                      std::vector<traces::ClientProfile> profiles, traces::TraceTable traces,
                      traces::CommCosts costs) {
    if (profiles.size() != plan.num_clients())
      throw ConfigError("client profile count does not match shard plan");
    FlTask t;
    t.model = std::move(model);
    for (std::size_t c = 0; c < plan.num_clients(); ++c) {
      t.shards.push_back(train.subset(plan.client_shards[c]));
      t.shard_label_dist.push_back(data::shard_label_distribution(train, plan.client_shards[c]));
    }
    t.test = test.as_batch();
    t.train = std::move(train);
    t.plan = std::move(plan);
    t.profiles = std::move(profiles);
    t.traces = std::move(traces);
    t.costs = std::move(costs);
    return t;
  }
};

struct GlobalState {
  std::size_t round = 0;
  ParamVector params;
  std::vector<double> acc;  // Acc(0..round)
};

struct RoundRecord {
  std::size_t t = 0;
  std::vector<std::size_t> clients;
  std::vector<double> probe_loss;
  std::vector<double> probe_lat;
  Mask mask;
  std::vector<double> rest_lat;
  std::vector<double> upload_lat;
  std::vector<double> download_lat;
  double H_t = 0.0;
  double B_t = 0.0;
  double acc = 0.0;
  std::optional<double> reward;

  std::size_t num_selected() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

inline void check_mask(std::span<const int> mask, std::size_t n) {
  if (mask.size() != n) throw DimensionError("selection mask length mismatch");
  bool any = false;
  for (int a : mask) {
    if (a != 0 && a != 1) throw ConfigError("selection mask entries must be 0 or 1");
    any = any || a == 1;
  }
  if (!any) throw ConfigError("selection mask selects no client");
}

// H_t = max_n probe_n + max_{n selected} (rest_n + upload_n).
inline double round_latency(std::span<const double> probe, std::span<const double> rest,
                            std::span<const double> upload, std::span<const int> mask) {
  check_mask(mask, probe.size());
  double p = 0.0, r = 0.0;
  for (std::size_t n = 0; n < probe.size(); ++n) {
    p = std::max(p, probe[n]);
    if (mask[n]) r = std::max(r, rest[n] + upload[n]);
  }
  return p + r;
}

// B_t = sum_n B_n a_n.
inline double round_cost(std::span<const double> costs, std::span<const int> mask) {
  double b = 0.0;
  for (std::size_t n = 0; n < costs.size(); ++n)
    if (mask[n]) b += costs[n];
  return b;
}

// Weighted mean of client models: sum_n (w_n / sum w) * models_n.
inline ParamVector aggregate(std::span<const ParamVector> models, std::span<const double> weights) {
  if (models.empty() || models.size() != weights.size()) throw DimensionError("aggregate: bad inputs");
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw ConfigError("aggregate: total weight must be positive");
  ParamVector out(models.front().layout());
  for (std::size_t k = 0; k < models.size(); ++k) {
    models[k].check_layout(out);
    const double q = weights[k] / total;
    auto o = out.values();
    const auto m = models[k].values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += q * m[i];
  }
  return out;
}

// Stream tags for per-episode randomness.
enum class StreamTag : std::uint64_t { init = 1, sample = 2, train = 3, latency = 4, policy = 5 };

inline std::uint64_t tagged_seed(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0, std::uint64_t b = 0) {
  return derive_seed(seed, {static_cast<std::uint64_t>(tag), a, b});
}

struct ProbeResult {
  std::size_t round = 0;
  std::vector<std::size_t> clients;
  std::vector<double> losses;
  std::vector<traces::LatencyDraw> draws;
  std::vector<ParamVector> cached;  // post-probe params per client
  std::vector<Rng> rngs;            // training stream, continued by selected clients

  std::vector<double> probe_latencies() const {
    std::vector<double> v;
    for (const auto& d : draws) v.push_back(d.probe);
    return v;
  }
};

// Every sampled client trains one epoch from the global model. Client n uses
// training and latency streams derived from (round_seed, round, client id).
inline ProbeResult probing_phase(const GlobalState& global, const FlTask& task,
                                 std::span<const std::size_t> clients, std::size_t post_probe_epochs,
                                 const TrainOptions& opt, std::uint64_t round_seed) {
  if (clients.empty()) throw ConfigError("probing_phase: need at least one client");
  ProbeResult pr;
  pr.round = global.round + 1;
  for (auto c : clients) {
    if (c >= task.num_clients()) throw ConfigError("probing_phase: client id out of range");
    Rng train_rng(tagged_seed(round_seed, StreamTag::train, pr.round, c));
    Rng lat_rng(tagged_seed(round_seed, StreamTag::latency, pr.round, c));
    auto r = run_epochs(global.params, task.model, task.shards[c], 1, opt, train_rng);
    pr.clients.push_back(c);
    pr.losses.push_back(r.first_epoch_loss);
    pr.cached.push_back(std::move(r.params));
    pr.rngs.push_back(train_rng);
    pr.draws.push_back(traces::sample_latency(task.traces, task.profiles[c], post_probe_epochs, lat_rng));
  }
  return pr;
}

struct RoundOutcome {
  GlobalState global;
  RoundRecord record;
};

// Selected clients continue from their cached post-probe state, then the
// server averages their models weighted by D_n over the selected set.
inline RoundOutcome complete_and_aggregate(const GlobalState& global, const FlTask& task, ProbeResult probe,
                                           std::span<const int> mask, std::size_t post_probe_epochs,
                                           const TrainOptions& opt) {
  const std::size_t N = probe.clients.size();
  check_mask(mask, N);

  std::vector<ParamVector> finals;
  std::vector<double> weights;
  for (std::size_t n = 0; n < N; ++n) {
    if (!mask[n]) continue;
    const auto c = probe.clients[n];
    auto r = run_epochs(std::move(probe.cached[n]), task.model, task.shards[c], post_probe_epochs, opt,
                        probe.rngs[n]);
    finals.push_back(std::move(r.params));
    weights.push_back(static_cast<double>(task.shards[c].size()));
  }

  RoundOutcome out;
  out.global.round = global.round + 1;
  out.global.params = aggregate(finals, weights);
  out.global.acc = global.acc;
  const double acc = nn::accuracy(out.global.params, task.model, task.test);
  out.global.acc.push_back(acc);

  auto& rec = out.record;
  rec.t = out.global.round;
  rec.clients = probe.clients;
  rec.probe_loss = probe.losses;
  rec.mask.assign(mask.begin(), mask.end());
  std::vector<double> costs;
  for (std::size_t n = 0; n < N; ++n) {
    const auto& d = probe.draws[n];
    rec.probe_lat.push_back(d.probe);
    rec.rest_lat.push_back(d.rest);
    rec.upload_lat.push_back(d.upload);
    rec.download_lat.push_back(d.download);
    costs.push_back(task.costs(probe.clients[n]));
  }
  rec.H_t = round_latency(rec.probe_lat, rec.rest_lat, rec.upload_lat, rec.mask);
  rec.B_t = round_cost(costs, rec.mask);
  rec.acc = acc;
  return out;
}

// Raw per-agent observation for one sampled client slot.
struct AgentObservation {
  double probe_loss = 0.0;
  std::vector<double> probe_hist;   // length dt_p, ends with the current round
  std::vector<double> upload_hist;  // length dt_c, previous rounds
  double comm_cost = 0.0;
  double data_size = 0.0;
  std::size_t t = 0;
  std::size_t T = 1;
};

struct EpisodeParams {
  std::size_t N = 8;
  std::size_t T = 10;
  std::size_t post_probe_epochs = 5;
  TrainOptions train{};
  std::size_t dt_p = 3;
  std::size_t dt_c = 5;

  void validate(std::size_t K) const {
    if (N < 1 || N > K) throw ConfigError("need 1 <= N <= K");
    if (T < 1) throw ConfigError("T must be >= 1");
    if (dt_p < 1 || dt_c < 1) throw ConfigError("history windows must be >= 1");
    if (!(train.lr > 0.0)) throw ConfigError("lr must be positive");
  }
};

// What a selection policy sees after the probing phase of round t.
struct RoundContext {
  std::size_t t = 0;
  std::size_t T = 0;
  std::vector<std::size_t> clients;
  std::vector<double> probe_loss;
  std::vector<double> probe_lat;
  std::vector<traces::ClientProfile> profiles;
  std::vector<AgentObservation> observations;
};

// Sequential FL episode of T rounds. Client sampling, model init and every
// client stream derive from the episode seed, so two policies run under the
// same seed see identical clients and latency draws.
class FlEpisode {
 public:
  FlEpisode(const FlTask& task, EpisodeParams params, std::uint64_t seed)
      : task_(&task), p_(params), seed_(seed), hist_p_(task.num_clients()), hist_u_(task.num_clients()) {
    p_.validate(task.num_clients());
    global_.params = nn::init_params(task.model, tagged_seed(seed, StreamTag::init));
    global_.acc.push_back(nn::accuracy(global_.params, task.model, task.test));
  }

  bool done() const { return global_.round >= p_.T; }
  const GlobalState& global() const { return global_; }
  const EpisodeParams& params() const { return p_; }

  const RoundContext& begin_round() {
    if (done()) throw ConfigError("episode already finished");
    const std::size_t t = global_.round + 1;
    Rng srng(tagged_seed(seed_, StreamTag::sample, t));
    std::vector<std::size_t> all(task_->num_clients());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    for (std::size_t i = 0; i < p_.N; ++i) std::swap(all[i], all[i + uniform_index(srng, all.size() - i)]);
    std::vector<std::size_t> clients(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(p_.N));
    std::sort(clients.begin(), clients.end());

    probe_ = probing_phase(global_, *task_, clients, p_.post_probe_epochs, p_.train, seed_);

    ctx_ = RoundContext{};
    ctx_.t = t;
    ctx_.T = p_.T;
    ctx_.clients = clients;
    ctx_.probe_loss = probe_->losses;
    ctx_.probe_lat = probe_->probe_latencies();
    for (std::size_t n = 0; n < clients.size(); ++n) {
      const auto c = clients[n];
      ctx_.profiles.push_back(task_->profiles[c]);
      AgentObservation o;
      o.probe_loss = probe_->losses[n];
      std::vector<double> hp = hist_p_[c];
      hp.push_back(probe_->draws[n].probe);
      o.probe_hist = window(hp, p_.dt_p);
      std::vector<double> hu = hist_u_[c];
      if (hu.empty()) hu.push_back(probe_->draws[n].upload);
      o.upload_hist = window(hu, p_.dt_c);
      o.comm_cost = task_->costs(c);
      o.data_size = static_cast<double>(task_->shards[c].size());
      o.t = t;
      o.T = p_.T;
      ctx_.observations.push_back(std::move(o));
    }
    return ctx_;
  }

  RoundRecord finish_round(std::span<const int> mask) {
    if (!probe_) throw ConfigError("finish_round called before begin_round");
    for (std::size_t n = 0; n < probe_->clients.size(); ++n) {
      const auto c = probe_->clients[n];
      hist_p_[c].push_back(probe_->draws[n].probe);
      hist_u_[c].push_back(probe_->draws[n].upload);
    }
    auto out = complete_and_aggregate(global_, *task_, std::move(*probe_), mask, p_.post_probe_epochs, p_.train);
    probe_.reset();
    global_ = std::move(out.global);
    return std::move(out.record);
  }

  // Last `len` values; missing leading entries repeat the oldest available.
  static std::vector<double> window(const std::vector<double>& h, std::size_t len) {
    std::vector<double> w(len);
    const std::size_t have = h.size();
    for (std::size_t i = 0; i < len; ++i) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(have) - static_cast<std::ptrdiff_t>(len - i);
      w[i] = h[src < 0 ? 0 : static_cast<std::size_t>(src)];
    }
    return w;
  }

 private:
  const FlTask* task_;
  EpisodeParams p_;
  std::uint64_t seed_;
  GlobalState global_;
  std::vector<std::vector<double>> hist_p_;
  std::vector<std::vector<double>> hist_u_;
  std::optional<ProbeResult> probe_;
  RoundContext ctx_;
};

// ---- JSON-lines -----------------------------------------------------------

inline nlohmann::json to_json(const RoundRecord& r) {
  nlohmann::json j;
  j["t"] = r.t;
  j["clients"] = r.clients;
  j["probe_loss"] = r.probe_loss;
  j["probe_lat"] = r.probe_lat;
  j["mask"] = r.mask;
  j["rest_lat"] = r.rest_lat;
  j["upload_lat"] = r.upload_lat;
  j["download_lat"] = r.download_lat;
  j["H_t"] = r.H_t;
  j["B_t"] = r.B_t;
  j["acc"] = r.acc;
  j["reward"] = r.reward ? nlohmann::json(*r.reward) : nlohmann::json(nullptr);
  return j;
}

inline RoundRecord record_from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.t = j.at("t").get<std::size_t>();
  r.clients = j.at("clients").get<std::vector<std::size_t>>();
  r.probe_loss = j.at("probe_loss").get<std::vector<double>>();
  r.probe_lat = j.at("probe_lat").get<std::vector<double>>();
  r.mask = j.at("mask").get<Mask>();
  r.rest_lat = j.at("rest_lat").get<std::vector<double>>();
  r.upload_lat = j.at("upload_lat").get<std::vector<double>>();
  if (j.contains("download_lat")) r.download_lat = j.at("download_lat").get<std::vector<double>>();
  r.H_t = j.at("H_t").get<double>();
  r.B_t = j.at("B_t").get<double>();
  r.acc = j.at("acc").get<double>();
  if (!j.at("reward").is_null()) r.reward = j.at("reward").get<double>();
  return r;
}

inline void write_records_jsonl(std::ostream& os, std::span<const RoundRecord> records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

}  // namespace fedmarl::fl
