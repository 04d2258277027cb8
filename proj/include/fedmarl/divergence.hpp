#pragma once

// Weight-divergence tracking between federated training and centralized SGD
// on the pooled client data, with the recursive divergence bound evaluated
// from empirically estimated constants.
//
// Both trajectories use full-batch gradient steps, one per epoch, from the
// same initial parameters. With u_n = 1 + lr * sum_m P_n(m) sigma_m and
// q_n = D_n a_n / sum D a, the bound at round t is
//
//   sum_n q_n [ u_n^E d_{t-1} + lr eps N M c_max
//               + lr c_max sum_m |P_n(m) - P(m)| sum_{j=1}^{E-1} u_n^j ]
//
// where d_{t-1} is the measured divergence after the previous round.

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "fedmarl/engine.hpp"
#include "fedmarl/error.hpp"
#include "fedmarl/nn.hpp"
#include "fedmarl/rng.hpp"

namespace fedmarl::analysis {

using Selector = std::function<fl::Mask(std::size_t t, std::span<const double> probe_losses)>;

struct DivergenceSetup {
  nn::MlpSpec model;
  std::vector<nn::Batch> shards;  // every client participates in probing each round
  double lr = 0.05;
  std::size_t epochs = 6;  // E: probe epoch + post-probe epochs
  std::size_t rounds = 10;
  std::uint64_t seed = 0;
  Selector select;  // empty = select all
  std::size_t lipschitz_probes = 4;
  double probe_radius = 1e-2;
};

struct DivergenceReport {
  std::vector<double> divergence;  // ||W_glb^t - V_iid^{Et}||, t = 1..T
  std::vector<double> bound;
  std::vector<int> violation;
  std::vector<double> eps_t;
  std::vector<double> sigma;  // per class
  double c_max = 0.0;
  double eps = 0.0;

  bool any_violation() const {
    for (int v : violation)
      if (v) return true;
    return false;
  }
};

namespace detail {

inline nn::Batch concat(std::span<const nn::Batch> parts) {
  nn::Batch out;
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.size();
  out.inputs = nn::Matrix(rows, parts.front().inputs.cols);
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.inputs.data.begin(), p.inputs.data.end(), out.inputs.data.begin() + static_cast<std::ptrdiff_t>(r * out.inputs.cols));
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    r += p.size();
  }
  return out;
}

inline std::vector<double> label_dist(const nn::Batch& b, std::size_t M) {
  std::vector<double> p(M, 0.0);
  for (int y : b.labels) p[static_cast<std::size_t>(y)] += 1.0;
  for (double& v : p) v /= static_cast<double>(b.size());
  return p;
}

inline nn::ParamVector full_batch_step(const nn::ParamVector& w, const nn::MlpSpec& spec, const nn::Batch& b,
                                       double lr, double* loss) {
  auto [l, g] = nn::loss_and_grad(w, spec, b);
  if (loss) *loss = l;
  return nn::sgd_step(w, g, lr);
}

}  // namespace detail

inline DivergenceReport divergence_track(const DivergenceSetup& s) {
  if (s.shards.empty()) throw ConfigError("divergence_track: no clients");
  if (s.epochs < 1 || s.rounds < 1) throw ConfigError("divergence_track: epochs and rounds must be >= 1");
  for (const auto& sh : s.shards)
    if (sh.size() == 0) throw ConfigError("divergence_track: empty shard");
  const std::size_t K = s.shards.size();
  const std::size_t M = s.model.output_dim;
  const std::size_t E = s.epochs;

  const nn::Batch pooled = detail::concat(s.shards);
  const auto P = detail::label_dist(pooled, M);
  std::vector<std::vector<double>> Pn;
  for (const auto& sh : s.shards) Pn.push_back(detail::label_dist(sh, M));

  std::vector<nn::Batch> by_class(M);
  {
    std::vector<std::vector<std::size_t>> idx(M);
    for (std::size_t i = 0; i < pooled.size(); ++i) idx[static_cast<std::size_t>(pooled.labels[i])].push_back(i);
    for (std::size_t m = 0; m < M; ++m)
      if (!idx[m].empty()) by_class[m] = nn::gather(pooled, idx[m]);
  }

  DivergenceReport rep;
  std::vector<nn::ParamVector> visited;
  std::vector<std::pair<nn::ParamVector, nn::ParamVector>> pairs;
  std::vector<std::vector<double>> q_hist;

  nn::ParamVector W = nn::init_params(s.model, s.seed);
  nn::ParamVector V = W;
  visited.push_back(W);

  for (std::size_t t = 1; t <= s.rounds; ++t) {
    std::vector<nn::ParamVector> cen{V};
    for (std::size_t e = 0; e < E; ++e) cen.push_back(detail::full_batch_step(cen.back(), s.model, pooled, s.lr, nullptr));

    std::vector<nn::ParamVector> local(K, W);
    std::vector<double> probe_loss(K);
    for (std::size_t n = 0; n < K; ++n) {
      pairs.emplace_back(local[n], cen[0]);
      local[n] = detail::full_batch_step(local[n], s.model, s.shards[n], s.lr, &probe_loss[n]);
      visited.push_back(local[n]);
    }
    const fl::Mask mask = s.select ? s.select(t, probe_loss) : fl::Mask(K, 1);
    fl::check_mask(mask, K);

    std::vector<nn::ParamVector> finals;
    std::vector<double> weights;
    std::vector<double> q(K, 0.0);
    double dsum = 0.0;
    for (std::size_t n = 0; n < K; ++n)
      if (mask[n]) dsum += static_cast<double>(s.shards[n].size());
    for (std::size_t n = 0; n < K; ++n) {
      if (!mask[n]) continue;
      for (std::size_t e = 1; e < E; ++e) {
        pairs.emplace_back(local[n], cen[e]);
        local[n] = detail::full_batch_step(local[n], s.model, s.shards[n], s.lr, nullptr);
        visited.push_back(local[n]);
      }
      finals.push_back(local[n]);
      weights.push_back(static_cast<double>(s.shards[n].size()));
      q[n] = static_cast<double>(s.shards[n].size()) / dsum;
    }
    W = fl::aggregate(finals, weights);
    V = cen.back();
    for (std::size_t e = 1; e <= E; ++e) visited.push_back(cen[e]);
    visited.push_back(W);
    pairs.emplace_back(W, V);

    double eps_t = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      double mix = 0.0;
      for (std::size_t n = 0; n < K; ++n) mix += q[n] * Pn[n][m];
      eps_t = std::max(eps_t, std::abs(P[m] - mix));
    }
    rep.eps_t.push_back(eps_t);
    rep.divergence.push_back(nn::distance(W, V));
    q_hist.push_back(std::move(q));
  }

  // Per-class gradient of the class-conditional mean log-likelihood.
  auto class_grad = [&](const nn::ParamVector& w, std::size_t m) {
    return nn::backward(w, s.model, by_class[m]);
  };

  Rng rng(derive_seed(s.seed, {0x51u}));
  std::normal_distribution<double> g01(0.0, 1.0);
  for (std::size_t k = 0, n0 = visited.size(); k < n0; k += std::max<std::size_t>(1, n0 / 64)) {
    for (std::size_t r = 0; r < s.lipschitz_probes; ++r) {
      nn::ParamVector d(visited[k].layout());
      for (double& v : d.values()) v = g01(rng);
      d *= s.probe_radius / d.norm();
      pairs.emplace_back(visited[k], visited[k] + d);
    }
  }

  rep.sigma.assign(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    if (by_class[m].size() == 0) continue;
    for (const auto& w : visited) rep.c_max = std::max(rep.c_max, class_grad(w, m).norm());
    for (const auto& [a, b] : pairs) {
      const double dw = nn::distance(a, b);
      if (dw < 1e-12) continue;
      rep.sigma[m] = std::max(rep.sigma[m], nn::distance(class_grad(a, m), class_grad(b, m)) / dw);
    }
  }
  for (double e : rep.eps_t) rep.eps = std::max(rep.eps, e);

  std::vector<double> u(K);
  for (std::size_t n = 0; n < K; ++n) {
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) acc += Pn[n][m] * rep.sigma[m];
    u[n] = 1.0 + s.lr * acc;
  }
  double prev = 0.0;
  for (std::size_t t = 0; t < s.rounds; ++t) {
    double b = 0.0;
    for (std::size_t n = 0; n < K; ++n) {
      const double q = q_hist[t][n];
      if (q == 0.0) continue;
      double skew = 0.0;
      for (std::size_t m = 0; m < M; ++m) skew += std::abs(Pn[n][m] - P[m]);
      double geo = 0.0;
      for (std::size_t j = 1; j < E; ++j) geo += std::pow(u[n], static_cast<double>(j));
      b += q * (std::pow(u[n], static_cast<double>(E)) * prev +
                s.lr * rep.eps * static_cast<double>(K) * static_cast<double>(M) * rep.c_max +
                s.lr * rep.c_max * skew * geo);
    }
    rep.bound.push_back(b);
    rep.violation.push_back(rep.divergence[t] > b ? 1 : 0);
    prev = rep.divergence[t];
  }
  return rep;
}

inline void write_divergence_csv(std::ostream& os, const DivergenceReport& r) {
  os << "round,divergence,bound,eps_t,violation\n";
  char buf[128];
  for (std::size_t t = 0; t < r.divergence.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%d\n", t + 1, r.divergence[t], r.bound[t], r.eps_t[t],
                  r.violation[t]);
    os << buf;
  }
}

}  // namespace fedmarl::analysis
