#pragma once

// VDN training loop over simulated FL episodes.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fedmarl/analysis.hpp"
#include "fedmarl/engine.hpp"
#include "fedmarl/marl.hpp"
#include "fedmarl/policies.hpp"

namespace fedmarl::marl {

struct TrainSetup {
  fl::EpisodeParams episode;
  MarlHyperparams hyper;
  std::size_t episodes = 150;
  analysis::RewardWeights weights;
  analysis::UtilityVariant utility = analysis::UtilityVariant::increasing;
  std::uint64_t seed = 0;
};

struct TrainResult {
  PolicyArtifact artifact;
  std::vector<double> episode_rewards;
  std::vector<double> mean_td_loss;  // per episode, NaN before warmup ends
  std::size_t train_steps = 0;
};

enum class TrainStream : std::uint64_t { qnet = 11, act = 12, replay = 13, episode = 14 };

inline std::uint64_t train_seed(std::uint64_t seed, TrainStream s, std::uint64_t k = 0) {
  return derive_seed(seed, {static_cast<std::uint64_t>(s), k});
}

// One transition per round; a TD step per round once the buffer holds
// max(warmup, batch_size) transitions; target synced every sync_period steps.
// `on_episode` (optional) observes (episode index, total reward).
inline TrainResult train_marl(const fl::FlTask& task, const TrainSetup& setup,
                              const std::function<void(std::size_t, double)>& on_episode = {}) {
  setup.hyper.validate();
  setup.weights.validate();
  setup.episode.validate(task.num_clients());
  const FeatureSpec fs{setup.episode.dt_p, setup.episode.dt_c};
  const auto& h = setup.hyper;

  TrainResult res;
  QNet q = QNet::create(fs.dim(), train_seed(setup.seed, TrainStream::qnet), h.hidden);
  Normalizer norm(fs.dim());
  ReplayBuffer<Transition> buffer(h.buffer_capacity);
  Rng act_rng(train_seed(setup.seed, TrainStream::act));
  Rng replay_rng(train_seed(setup.seed, TrainStream::replay));
  const std::size_t ready = std::max(h.warmup, h.batch_size);

  for (std::size_t ep = 0; ep < setup.episodes; ++ep) {
    const double eps = h.epsilon(ep, setup.episodes);
    fl::FlEpisode env(task, setup.episode, train_seed(setup.seed, TrainStream::episode, ep));
    std::optional<Transition> pending;
    double total = 0.0, loss_sum = 0.0;
    std::size_t loss_n = 0;
    while (!env.done()) {
      const auto& ctx = env.begin_round();
      std::vector<AgentState> states;
      for (const auto& o : ctx.observations) states.push_back(build_state(o, norm, fs));
      if (pending) {
        pending->next_states = states;
        buffer.push(std::move(*pending));
        pending.reset();
      }
      const auto raw = act(states, q, eps, act_rng);
      const auto mask = policies::repair_by_q_gap(raw, q.q_values(states));
      const double prev_acc = env.global().acc.back();
      auto rec = env.finish_round(mask);
      const double r = analysis::round_reward(rec, prev_acc, setup.weights, setup.utility);
      total += r;
      pending = Transition{std::move(states), mask, r, {}, env.done()};
      if (buffer.size() >= ready) {
        loss_sum += td_train_step(buffer, q, h.gamma, h.batch_size, h.lr, replay_rng, h.max_grad_norm);
        ++loss_n;
        if (++res.train_steps % h.sync_period == 0) sync_target(q);
      }
    }
    if (pending) buffer.push(std::move(*pending));
    res.episode_rewards.push_back(total);
    res.mean_td_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : std::nan(""));
    if (on_episode) on_episode(ep, total);
  }

  norm.freeze();
  res.artifact.qnet = std::move(q);
  res.artifact.normalizer = std::move(norm);
  res.artifact.features = fs;
  res.artifact.hyper = h;
  res.artifact.seed = setup.seed;
  return res;
}

}  // namespace fedmarl::marl
