#include "yearspan/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace yearspan;
  CLI::App app{"Year-span circuit experiments on GPT-2 small"};
  ExperimentConfig config;
  std::size_t n = 0;
  bool list = false;
  std::string out = config.out.string();
  std::string checkpoint, vocab, merges;
  app.add_option("--experiment,-e", config.experiment, "Experiment id (see --list)");
  app.add_option("--checkpoint", checkpoint, "GPT-2 safetensors file or directory (default: $YEARSPAN_CHECKPOINT)");
  app.add_option("--vocab", vocab, "encoder.json (default: bundled)");
  app.add_option("--merges", merges, "vocab.bpe (default: bundled)");
  app.add_option("--seed", config.seed, "Dataset seed")->capture_default_str();
  app.add_option("--n", n, "Dataset size (default: per experiment)");
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--limit", config.limit, "Scan only the first N neurons (0 = all)")->capture_default_str();
  app.add_flag("--list", list, "List experiment ids and exit");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& e : experiment_catalog()) {
      std::cout << e.id << "\t" << e.artifact << " (n=" << e.default_n << ")\n";
    }
    return 0;
  }
  if (config.experiment.empty()) {
    std::cerr << "error: --experiment is required; use --list for the valid ids\n";
    return 2;
  }
  config.out = out;
  config.checkpoint = checkpoint;
  config.vocab = vocab;
  config.merges = merges;
  if (n > 0) config.n = n;
  try {
    const auto result = run_experiment(config);
    for (const auto& f : result.files) std::cout << f.string() << "\n";
    std::cout << result.summary.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
