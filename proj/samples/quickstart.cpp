// Builds the desk task, trains a short selection policy and compares it with
// the baselines on a few seeds. Prints the summary CSV to stdout.

#include <iostream>
#include <memory>

#include "fedmarl/experiment.hpp"

int main() {
  using namespace fedmarl;
  ExperimentConfig c = preset_config("desk");
  c.episodes = 40;

  const auto task = build_task(c);
  auto trained = marl::train_marl(task, c.train_setup(), [](std::size_t ep, double r) {
    if ((ep + 1) % 10 == 0) std::cerr << "episode " << ep + 1 << " reward " << r << '\n';
  });
  auto artifact = std::make_shared<const marl::PolicyArtifact>(std::move(trained.artifact));

  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<analysis::RunSummary> runs;
  for (const char* p : {"select_all", "random_drop", "top_half_speed", "probing_loss_reject", "fedmarl"})
    for (const auto& r : evaluate_policy(task, c, p, artifact, seeds)) runs.push_back(r.summary);
  analysis::write_summary_csv(std::cout, analysis::report(runs));
}
