#pragma once

// Experiment configuration, task construction from a master seed, and the
// evaluation loop shared by the CLI and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmarl/analysis.hpp"
#include "fedmarl/data.hpp"
#include "fedmarl/engine.hpp"
#include "fedmarl/error.hpp"
#include "fedmarl/marl.hpp"
#include "fedmarl/policies.hpp"
#include "fedmarl/training.hpp"
#include "fedmarl/traces.hpp"

namespace fedmarl {

struct ExperimentConfig {
  std::string preset = "desk";

  // dataset
  std::size_t num_classes = 10;
  std::size_t feature_dim = 32;
  std::size_t n_per_class = 400;
  double cluster_radius = 3.5;
  double test_fraction = 0.2;

  // partition
  std::size_t K = 40;
  double alpha = 3.0;
  std::size_t min_size = 20;
  std::size_t max_size = 60;

  // federated rounds
  std::size_t N = 8;
  std::size_t T = 10;
  std::size_t post_probe_epochs = 5;
  double lr = 0.05;
  std::size_t batch_size = 10;
  std::vector<std::size_t> task_hidden{32};

  // traces
  double trace_sigma = 0.15;
  std::size_t samples_per_cell = 200;
  double comm_cost_default = 1.0;
  std::map<std::size_t, double> comm_cost_overrides;

  // reward
  analysis::RewardWeights weights;
  analysis::UtilityVariant utility = analysis::UtilityVariant::increasing;

  // policy
  std::string policy = "select_all";
  double drop_p = 0.5;
  bool strict_half = false;

  // MARL
  marl::MarlHyperparams marl;
  std::size_t episodes = 150;
  std::size_t dt_p = 3;
  std::size_t dt_c = 5;

  std::uint64_t seed = 1;

  bool operator==(const ExperimentConfig& o) const = default;

  void validate() const {
    auto need = [](bool ok, const std::string& field, const std::string& msg) {
      if (!ok) throw ConfigError("field '" + field + "': " + msg);
    };
    need(num_classes >= 2, "dataset.num_classes", "must be >= 2");
    need(feature_dim >= 2, "dataset.feature_dim", "must be >= 2");
    need(n_per_class >= 1, "dataset.n_per_class", "must be positive");
    need(cluster_radius > 0.0, "dataset.cluster_radius", "must be positive");
    need(test_fraction > 0.0 && test_fraction < 1.0, "dataset.test_fraction", "must lie in (0, 1)");
    need(K >= 1, "partition.K", "must be positive");
    need(alpha > 0.0, "partition.alpha", "must be positive");
    need(min_size >= 1 && min_size <= max_size, "partition.min_size", "need 1 <= min_size <= max_size");
    need(N >= 1, "fl.N", "must be positive");
    need(N <= K, "fl.N", "must not exceed partition.K (" + std::to_string(K) + ")");
    need(T >= 1, "fl.T", "must be >= 1");
    need(lr > 0.0, "fl.lr", "must be positive");
    need(!task_hidden.empty(), "fl.task_hidden", "need at least one hidden layer");
    for (auto hd : task_hidden) need(hd >= 1, "fl.task_hidden", "widths must be positive");
    need(trace_sigma >= 0.0, "traces.sigma", "must be nonnegative");
    need(samples_per_cell >= 1, "traces.samples_per_cell", "must be positive");
    need(comm_cost_default >= 0.0, "traces.comm_cost_default", "must be nonnegative");
    for (const auto& [c, v] : comm_cost_overrides)
      need(v >= 0.0, "traces.comm_cost_overrides." + std::to_string(c), "must be nonnegative");
    need(weights.w1 >= 0.0 && weights.w2 >= 0.0 && weights.w3 >= 0.0, "reward.weights", "must be nonnegative");
    need(weights.w1 + weights.w2 + weights.w3 > 0.0, "reward.weights", "must not all be zero");
    try {
      policies::parse_kind(policy);
    } catch (const ConfigError& e) {
      need(false, "policy.name", e.what());
    }
    need(drop_p >= 0.0 && drop_p < 1.0, "policy.drop_p", "must lie in [0, 1)");
    need(dt_p >= 1, "marl.dt_p", "must be positive");
    need(dt_c >= 1, "marl.dt_c", "must be positive");
    try {
      marl.validate();
    } catch (const ConfigError& e) {
      need(false, "marl", e.what());
    }
  }

  data::GenOptions gen_options() const { return {num_classes, feature_dim, n_per_class, cluster_radius}; }
  data::PartitionOptions partition_options() const { return {K, alpha, min_size, max_size}; }
  nn::MlpSpec task_model() const { return nn::MlpSpec{feature_dim, task_hidden, num_classes, nn::Activation::relu}; }

  traces::TraceCatalog catalog() const {
    auto c = traces::TraceCatalog::standard();
    c.sigma = trace_sigma;
    c.samples_per_cell = samples_per_cell;
    return c;
  }

  fl::EpisodeParams episode_params() const {
    fl::EpisodeParams p;
    p.N = N;
    p.T = T;
    p.post_probe_epochs = post_probe_epochs;
    p.train = {lr, batch_size};
    p.dt_p = dt_p;
    p.dt_c = dt_c;
    return p;
  }

  policies::PolicySpec policy_spec(const std::string& name) const {
    return {policies::parse_kind(name), drop_p, strict_half};
  }

  marl::TrainSetup train_setup() const {
    marl::TrainSetup s;
    s.episode = episode_params();
    s.hyper = marl;
    s.episodes = episodes;
    s.weights = weights;
    s.utility = utility;
    s.seed = stream_seed(seed, "marl");
    return s;
  }
};

// Named presets. "desk" is the default desk-scale setting; the paper-* presets
// use a pool of 100 clients, 10 per round and longer horizons with the MLP
// task model.
inline ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  if (name == "desk") return c;
  const std::map<std::string, std::pair<std::size_t, std::size_t>> full{
      {"paper-lenet", {15, 300}}, {"paper-vgg6", {20, 200}}, {"paper-resnet18", {15, 300}}, {"paper-lstm", {15, 200}}};
  auto it = full.find(name);
  if (it == full.end()) throw ConfigError("unknown preset '" + name + "'");
  c.K = 100;
  c.N = 10;
  c.n_per_class = 800;
  c.T = it->second.first;
  c.episodes = it->second.second;
  return c;
}

namespace config_detail {

inline const char* utility_name(analysis::UtilityVariant v) {
  return v == analysis::UtilityVariant::increasing ? "increasing" : "paper_formula";
}

}  // namespace config_detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& [k, v] : c.comm_cost_overrides) overrides[std::to_string(k)] = v;
  return {
      {"preset", c.preset},
      {"seed", c.seed},
      {"dataset",
       {{"num_classes", c.num_classes},
        {"feature_dim", c.feature_dim},
        {"n_per_class", c.n_per_class},
        {"cluster_radius", c.cluster_radius},
        {"test_fraction", c.test_fraction}}},
      {"partition", {{"K", c.K}, {"alpha", c.alpha}, {"min_size", c.min_size}, {"max_size", c.max_size}}},
      {"fl",
       {{"N", c.N},
        {"T", c.T},
        {"post_probe_epochs", c.post_probe_epochs},
        {"lr", c.lr},
        {"batch_size", c.batch_size},
        {"task_hidden", c.task_hidden}}},
      {"traces",
       {{"sigma", c.trace_sigma},
        {"samples_per_cell", c.samples_per_cell},
        {"comm_cost_default", c.comm_cost_default},
        {"comm_cost_overrides", overrides}}},
      {"reward",
       {{"w1", c.weights.w1}, {"w2", c.weights.w2}, {"w3", c.weights.w3}, {"utility", config_detail::utility_name(c.utility)}}},
      {"policy", {{"name", c.policy}, {"drop_p", c.drop_p}, {"strict_half", c.strict_half}}},
      {"marl",
       {{"episodes", c.episodes},
        {"dt_p", c.dt_p},
        {"dt_c", c.dt_c},
        {"gamma", c.marl.gamma},
        {"lr", c.marl.lr},
        {"batch_size", c.marl.batch_size},
        {"buffer_capacity", c.marl.buffer_capacity},
        {"warmup", c.marl.warmup},
        {"sync_period", c.marl.sync_period},
        {"eps_start", c.marl.eps_start},
        {"eps_end", c.marl.eps_end},
        {"eps_anneal_fraction", c.marl.eps_anneal_fraction},
        {"hidden", c.marl.hidden},
        {"max_grad_norm", c.marl.max_grad_norm}}},
  };
}

// Starts from the named preset (key "preset", default "desk") and applies
// every field present in the document. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c = preset_config(j.value("preset", std::string("desk")));

  auto section = [&](const char* name, const std::set<std::string>& allowed) -> const nlohmann::json* {
    if (!j.contains(name)) return nullptr;
    const auto& s = j.at(name);
    if (!s.is_object()) throw ConfigError(std::string("field '") + name + "': must be an object");
    for (const auto& [k, _] : s.items())
      if (!allowed.count(k)) throw ConfigError(std::string("field '") + name + "." + k + "': unknown key");
    return &s;
  };
  for (const auto& [k, _] : j.items()) {
    static const std::set<std::string> top{"preset", "seed", "dataset", "partition", "fl", "traces", "reward", "policy", "marl"};
    if (!top.count(k)) throw ConfigError("field '" + k + "': unknown key");
  }
  auto get = [](const nlohmann::json* s, const char* sec, const char* key, auto& dst) {
    if (!s || !s->contains(key)) return;
    try {
      dst = s->at(key).get<std::decay_t<decltype(dst)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("field '") + sec + "." + key + "': wrong type");
    }
  };

  if (j.contains("seed")) {
    try {
      c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("field 'seed': must be a nonnegative integer");
    }
  }
  if (auto s = section("dataset", {"num_classes", "feature_dim", "n_per_class", "cluster_radius", "test_fraction"})) {
    get(s, "dataset", "num_classes", c.num_classes);
    get(s, "dataset", "feature_dim", c.feature_dim);
    get(s, "dataset", "n_per_class", c.n_per_class);
    get(s, "dataset", "cluster_radius", c.cluster_radius);
    get(s, "dataset", "test_fraction", c.test_fraction);
  }
  if (auto s = section("partition", {"K", "alpha", "min_size", "max_size"})) {
    get(s, "partition", "K", c.K);
    get(s, "partition", "alpha", c.alpha);
    get(s, "partition", "min_size", c.min_size);
    get(s, "partition", "max_size", c.max_size);
  }
  if (auto s = section("fl", {"N", "T", "post_probe_epochs", "lr", "batch_size", "task_hidden"})) {
    get(s, "fl", "N", c.N);
    get(s, "fl", "T", c.T);
    get(s, "fl", "post_probe_epochs", c.post_probe_epochs);
    get(s, "fl", "lr", c.lr);
    get(s, "fl", "batch_size", c.batch_size);
    get(s, "fl", "task_hidden", c.task_hidden);
  }
  if (auto s = section("traces", {"sigma", "samples_per_cell", "comm_cost_default", "comm_cost_overrides"})) {
    get(s, "traces", "sigma", c.trace_sigma);
    get(s, "traces", "samples_per_cell", c.samples_per_cell);
    get(s, "traces", "comm_cost_default", c.comm_cost_default);
    if (s->contains("comm_cost_overrides")) {
      const auto& o = s->at("comm_cost_overrides");
      if (!o.is_object()) throw ConfigError("field 'traces.comm_cost_overrides': must be an object");
      c.comm_cost_overrides.clear();
      for (const auto& [k, v] : o.items()) {
        std::size_t id = 0;
        try {
          std::size_t pos = 0;
          id = std::stoul(k, &pos);
          if (pos != k.size()) throw std::invalid_argument(k);
        } catch (const std::logic_error&) {
          throw ConfigError("field 'traces.comm_cost_overrides." + k + "': key must be a client id");
        }
        if (!v.is_number()) throw ConfigError("field 'traces.comm_cost_overrides." + k + "': must be a number");
        c.comm_cost_overrides[id] = v.get<double>();
      }
    }
  }
  if (auto s = section("reward", {"w1", "w2", "w3", "utility"})) {
    get(s, "reward", "w1", c.weights.w1);
    get(s, "reward", "w2", c.weights.w2);
    get(s, "reward", "w3", c.weights.w3);
    if (s->contains("utility")) {
      std::string u;
      get(s, "reward", "utility", u);
      if (u == "increasing")
        c.utility = analysis::UtilityVariant::increasing;
      else if (u == "paper_formula")
        c.utility = analysis::UtilityVariant::paper_formula;
      else
        throw ConfigError("field 'reward.utility': expected 'increasing' or 'paper_formula'");
    }
  }
  if (auto s = section("policy", {"name", "drop_p", "strict_half"})) {
    get(s, "policy", "name", c.policy);
    get(s, "policy", "drop_p", c.drop_p);
    get(s, "policy", "strict_half", c.strict_half);
  }
  if (auto s = section("marl", {"episodes", "dt_p", "dt_c", "gamma", "lr", "batch_size", "buffer_capacity", "warmup",
                                "sync_period", "eps_start", "eps_end", "eps_anneal_fraction", "hidden", "max_grad_norm"})) {
    get(s, "marl", "episodes", c.episodes);
    get(s, "marl", "dt_p", c.dt_p);
    get(s, "marl", "dt_c", c.dt_c);
    get(s, "marl", "gamma", c.marl.gamma);
    get(s, "marl", "lr", c.marl.lr);
    get(s, "marl", "batch_size", c.marl.batch_size);
    get(s, "marl", "buffer_capacity", c.marl.buffer_capacity);
    get(s, "marl", "warmup", c.marl.warmup);
    get(s, "marl", "sync_period", c.marl.sync_period);
    get(s, "marl", "eps_start", c.marl.eps_start);
    get(s, "marl", "eps_end", c.marl.eps_end);
    get(s, "marl", "eps_anneal_fraction", c.marl.eps_anneal_fraction);
    get(s, "marl", "hidden", c.marl.hidden);
    get(s, "marl", "max_grad_norm", c.marl.max_grad_norm);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// Everything generated from the master seed before any FL round runs.
struct GeneratedArtifacts {
  data::Dataset train;
  data::Dataset test;
  data::ShardPlan plan;
  std::vector<traces::ClientProfile> profiles;
  traces::TraceTable traces;
};

inline GeneratedArtifacts generate(const ExperimentConfig& c) {
  c.validate();
  GeneratedArtifacts g;
  const auto ds = data::gen_dataset(c.gen_options(), stream_seed(c.seed, "data"));
  auto split = data::split_train_test(ds, c.test_fraction, derive_seed(stream_seed(c.seed, "data"), {1}));
  g.train = std::move(split.train);
  g.test = std::move(split.test);
  g.plan = data::partition_noniid(g.train, c.partition_options(), derive_seed(stream_seed(c.seed, "data"), {2}));
  g.profiles = traces::assign_profiles(g.plan.sizes, c.catalog(), derive_seed(stream_seed(c.seed, "traces"), {1}));
  g.traces = traces::gen_synthetic_traces(c.catalog(), stream_seed(c.seed, "traces"));
  return g;
}

// On-disk layout of a generated experiment directory.
namespace files {
inline constexpr const char* config = "config.json";
inline constexpr const char* train = "train.csv";
inline constexpr const char* test = "test.csv";
inline constexpr const char* shards = "shards.csv";
inline constexpr const char* shard_index = "shards.jsonl";
inline constexpr const char* traces = "traces.csv";
inline constexpr const char* profiles = "profiles.csv";
inline constexpr const char* policy = "policy";
inline constexpr const char* train_log = "train_rewards.csv";
}  // namespace files

inline std::vector<std::filesystem::path> write_artifacts(const std::filesystem::path& dir, const ExperimentConfig& c,
                                                          const GeneratedArtifacts& g) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto open = [&](const char* name) {
    written.push_back(dir / name);
    std::ofstream os(written.back(), std::ios::binary);
    if (!os) throw Error("cannot write " + written.back().string());
    return os;
  };
  open(files::config) << to_json(c).dump(2) << '\n';
  {
    auto os = open(files::train);
    data::write_dataset_csv(os, g.train);
  }
  {
    auto os = open(files::test);
    data::write_dataset_csv(os, g.test);
  }
  {
    auto csv = open(files::shards);
    auto jsonl = open(files::shard_index);
    data::write_shard_plan(csv, jsonl, g.plan);
  }
  {
    auto os = open(files::traces);
    traces::write_trace_csv(os, g.traces);
  }
  {
    auto os = open(files::profiles);
    traces::write_profiles_csv(os, g.profiles);
  }
  return written;
}

// Reloads what write_artifacts produced; missing or unreadable files raise
// ArtifactError.
inline GeneratedArtifacts read_artifacts(const std::filesystem::path& dir, const ExperimentConfig& c) {
  auto open = [&](const char* name) {
    std::ifstream is(dir / name, std::ios::binary);
    if (!is) throw ArtifactError("missing generated artifact " + (dir / name).string() + " (run 'gen' first)");
    return is;
  };
  GeneratedArtifacts g;
  {
    auto is = open(files::train);
    g.train = data::read_dataset_csv(is, c.num_classes);
  }
  {
    auto is = open(files::test);
    g.test = data::read_dataset_csv(is, c.num_classes);
  }
  {
    auto is = open(files::shard_index);
    g.plan = data::read_shard_plan(is);
  }
  {
    auto is = open(files::traces);
    g.traces = traces::read_trace_csv(is);
  }
  {
    auto is = open(files::profiles);
    g.profiles = traces::read_profiles_csv(is);
  }
  if (g.plan.num_clients() != c.K) throw ArtifactError("generated shard plan does not match config partition.K");
  if (g.train.examples.cols != c.feature_dim) throw ArtifactError("generated dataset does not match config feature_dim");
  for (const auto& shard : g.plan.client_shards)
    for (auto i : shard)
      if (i >= g.train.size()) throw ArtifactError("shard index out of range of the training set");
  return g;
}

inline fl::FlTask build_task(const ExperimentConfig& c, GeneratedArtifacts g) {
  return fl::FlTask::build(c.task_model(), std::move(g.train), std::move(g.test), std::move(g.plan),
                           std::move(g.profiles), std::move(g.traces),
                           traces::CommCosts(c.comm_cost_default, c.comm_cost_overrides));
}

inline fl::FlTask build_task(const ExperimentConfig& c) { return build_task(c, generate(c)); }

// Runs one T-round episode under `policy` and fills in per-round rewards.
inline std::vector<fl::RoundRecord> run_episode(const fl::FlTask& task, const fl::EpisodeParams& params,
                                                policies::SelectionPolicy& policy, std::uint64_t episode_seed,
                                                const analysis::RewardWeights& weights,
                                                analysis::UtilityVariant utility) {
  fl::FlEpisode env(task, params, episode_seed);
  std::vector<fl::RoundRecord> records;
  while (!env.done()) {
    const auto& ctx = env.begin_round();
    const auto mask = policy.select(ctx);
    const double prev = env.global().acc.back();
    auto rec = env.finish_round(mask);
    rec.reward = analysis::round_reward(rec, prev, weights, utility);
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::uint64_t eval_episode_seed(std::uint64_t master, std::uint64_t seed) {
  return derive_seed(stream_seed(master, "eval"), {seed});
}

struct EvalRun {
  std::uint64_t seed = 0;
  std::vector<fl::RoundRecord> records;
  analysis::RunSummary summary;
};

// Evaluates one policy over the given seeds. Episode seeds depend only on
// (master seed, seed), so every policy sees the same client draws per seed.
inline std::vector<EvalRun> evaluate_policy(const fl::FlTask& task, const ExperimentConfig& c, const std::string& policy,
                                            std::shared_ptr<const marl::PolicyArtifact> artifact,
                                            const std::vector<std::uint64_t>& seeds) {
  const auto spec = c.policy_spec(policy);
  if (spec.kind == policies::Kind::fedmarl) {
    if (!artifact) throw ArtifactError("policy 'fedmarl' requires a trained policy artifact");
    if (artifact->features != marl::FeatureSpec{c.dt_p, c.dt_c})
      throw ConfigError("policy artifact history windows (dt_p/dt_c) do not match the config");
  }
  std::vector<EvalRun> out;
  for (auto s : seeds) {
    const auto es = eval_episode_seed(c.seed, s);
    policies::SelectionPolicy pol(spec, artifact, fl::tagged_seed(es, fl::StreamTag::policy));
    EvalRun run;
    run.seed = s;
    run.records = run_episode(task, c.episode_params(), pol, es, c.weights, c.utility);
    run.summary = analysis::summarize(policy, s, run.records);
    out.push_back(std::move(run));
  }
  return out;
}

}  // namespace fedmarl
