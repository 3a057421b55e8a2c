// Runs the adaptation ablation and prints per-seed target IoU.
// Optional argument: a config file overriding the training setup and the
// [synthetic] section.
#include <cstdlib>
#include <iostream>

#include "experiment.hpp"
#include "mtuda/config.hpp"

int main(int argc, char** argv) {
  using namespace mtuda::testing;
  auto e = default_experiment();
  if (argc > 1) {
    const auto tree = mtuda::load_config_file(argv[1]);
    auto merged = e.base.to_json();
    merged.merge_patch(tree);
    merged.erase("synthetic");
    e.base = mtuda::TrainConfig::from_json(merged);
    if (tree.contains("synthetic")) {
      auto s = mtuda::synthetic_to_json(e.data);
      s.merge_patch(tree.at("synthetic"));
      e.data = mtuda::synthetic_from_json(s);
    }
    e.seeds = e.base.seeds;
  }
  if (argc > 2) {
    e.variants.clear();
    for (int i = 2; i < argc; ++i) e.variants.push_back(static_cast<Variant>(std::stoi(argv[i])));
  }
  e.trace = std::getenv("MTUDA_TRACE") != nullptr;
  run_experiment(e, std::cout);
  return 0;
}
