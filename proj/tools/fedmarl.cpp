// fedmarl: generate, train, run and compare client-selection experiments.
//
//   fedmarl gen     --out DIR [--config PATH | --preset NAME]
//   fedmarl train   --out DIR [--config PATH]
//   fedmarl run     --out DIR --policy NAME [--seeds 0,1,2]
//   fedmarl compare --out DIR [--policies a,b,c] [--seeds 0,1,2]
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 missing artifact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmarl/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedmarl;

namespace {

struct Common {
  std::string out = "fedmarl-out";
  std::string config;
  std::string preset;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_csv(s)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("--seeds: '" + item + "' is not a nonnegative integer");
    }
  }
  if (out.empty()) throw ConfigError("--seeds: need at least one seed");
  return out;
}

// gen resolves --config / --preset; later stages default to the config that
// gen wrote into the output directory.
ExperimentConfig resolve_config(const Common& o, bool from_out_dir) {
  if (!o.config.empty() && !o.preset.empty()) throw ConfigError("use either --config or --preset, not both");
  if (!o.config.empty()) return load_config(o.config);
  if (!o.preset.empty()) return preset_config(o.preset);
  if (from_out_dir) {
    const auto p = fs::path(o.out) / files::config;
    if (!fs::exists(p)) throw ArtifactError("missing " + p.string() + " (run 'gen' first)");
    return load_config(p.string());
  }
  return preset_config("desk");
}

std::shared_ptr<const marl::PolicyArtifact> maybe_artifact(const fs::path& dir, bool required) {
  const auto base = dir / files::policy;
  if (!required && !fs::exists(marl::params_path(base))) return nullptr;
  return std::make_shared<const marl::PolicyArtifact>(marl::load_artifact(base));
}

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << body;
}

int cmd_gen(const Common& o) {
  const auto c = resolve_config(o, false);
  const auto g = generate(c);
  for (const auto& p : write_artifacts(o.out, c, g)) std::cout << p.string() << '\n';
  return 0;
}

int cmd_train(const Common& o) {
  const auto c = resolve_config(o, true);
  auto task = build_task(c, read_artifacts(o.out, c));
  std::ostringstream log;
  log << "episode,total_reward,epsilon\n";
  const auto setup = c.train_setup();
  auto res = marl::train_marl(task, setup, [&](std::size_t ep, double r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.6g\n", ep, r, setup.hyper.epsilon(ep, setup.episodes));
    log << buf;
    if ((ep + 1) % 10 == 0 || ep + 1 == setup.episodes)
      std::cerr << "episode " << ep + 1 << "/" << setup.episodes << " reward " << r << '\n';
  });
  const auto base = fs::path(o.out) / files::policy;
  marl::save_artifact(res.artifact, base);
  write_file(fs::path(o.out) / files::train_log, log.str());
  std::cout << marl::params_path(base).string() << '\n'
            << marl::sidecar_path(base).string() << '\n'
            << (fs::path(o.out) / files::train_log).string() << '\n';
  return 0;
}

// Runs each policy over the seeds, writing runs/<policy>/seed-<s>.jsonl, and
// returns the per-run summaries.
std::vector<analysis::RunSummary> run_policies(const Common& o, const ExperimentConfig& c,
                                               const std::vector<std::string>& policies,
                                               const std::vector<std::uint64_t>& seeds) {
  for (const auto& p : policies) policies::parse_kind(p);
  auto task = build_task(c, read_artifacts(o.out, c));
  std::shared_ptr<const marl::PolicyArtifact> artifact;
  for (const auto& p : policies)
    if (p == "fedmarl") artifact = maybe_artifact(o.out, true);
  std::vector<analysis::RunSummary> all;
  for (const auto& p : policies) {
    const auto dir = fs::path(o.out) / "runs" / p;
    fs::create_directories(dir);
    for (auto& run : evaluate_policy(task, c, p, artifact, seeds)) {
      std::ostringstream os;
      fl::write_records_jsonl(os, run.records);
      const auto path = dir / ("seed-" + std::to_string(run.seed) + ".jsonl");
      write_file(path, os.str());
      std::cout << path.string() << '\n';
      all.push_back(run.summary);
    }
  }
  return all;
}

void write_summary(const fs::path& path, const std::vector<analysis::RunSummary>& runs) {
  std::ostringstream os;
  analysis::write_summary_csv(os, analysis::report(runs));
  write_file(path, os.str());
  std::cout << path.string() << '\n';
}

int cmd_run(const Common& o, const std::string& policy, const std::string& seeds) {
  auto c = resolve_config(o, true);
  const std::string name = policy.empty() ? c.policy : policy;
  const auto runs = run_policies(o, c, {name}, parse_seeds(seeds));
  write_summary(fs::path(o.out) / "runs" / name / "summary.csv", runs);
  return 0;
}

int cmd_compare(const Common& o, const std::string& list, const std::string& seeds) {
  auto c = resolve_config(o, true);
  std::vector<std::string> names = split_csv(list);
  if (names.empty()) {
    names = {"select_all", "random_drop", "top_half_speed", "probing_loss_reject"};
    if (fs::exists(marl::params_path(fs::path(o.out) / files::policy))) names.push_back("fedmarl");
  }
  const auto runs = run_policies(o, c, names, parse_seeds(seeds));
  write_summary(fs::path(o.out) / "compare.csv", runs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trace-driven federated learning with learned client selection"};
  app.require_subcommand(1);
  Common o;
  std::string policy, policies_list, seeds = "0,1,2,3,4";

  auto add_common = [&](CLI::App* sub, bool allow_preset) {
    sub->add_option("--out", o.out, "Experiment directory")->capture_default_str();
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    if (allow_preset) sub->add_option("--preset", o.preset, "Named preset: desk, paper-lenet, paper-vgg6, paper-resnet18, paper-lstm");
  };
  auto* gen = app.add_subcommand("gen", "Generate dataset, client shards and latency traces");
  add_common(gen, true);
  auto* train = app.add_subcommand("train", "Train the client-selection policy");
  add_common(train, false);
  auto* run = app.add_subcommand("run", "Evaluate one policy over a list of seeds");
  add_common(run, false);
  run->add_option("--policy", policy, "Policy name (default: policy.name from the config)");
  run->add_option("--seeds", seeds, "Comma-separated evaluation seeds")->capture_default_str();
  auto* cmp = app.add_subcommand("compare", "Evaluate several policies and merge their summaries");
  add_common(cmp, false);
  cmp->add_option("--policies", policies_list, "Comma-separated policy names (default: all available)");
  cmp->add_option("--seeds", seeds, "Comma-separated evaluation seeds")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*train) return cmd_train(o);
    if (*run) return cmd_run(o, policy, seeds);
    if (*cmp) return cmd_compare(o, policies_list, seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
