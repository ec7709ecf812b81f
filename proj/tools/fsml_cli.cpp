// Command-line front end; talks to the library only through its C interface.

#include <cstdio>
#include <cstdint>
#include <string>

#include <CLI11.hpp>

#include "fsml/fsml.h"

namespace {

int report_failure(fsml_status s) {
  std::fprintf(stderr, "error (%s): %s\n", fsml_status_name(s), fsml_last_error());
  return static_cast<int>(s);
}

void print_and_free(char* text) {
  if (!text) return;
  std::fputs(text, stdout);
  fsml_free_string(text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot meta-learning with meta-dropout"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::size_t jobs = 1;
  bool force = false;
  std::string checkpoint;
  bool inject_fault = false;

  app.add_option("--config", config_path, "experiment config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "seed overriding the config's seed list");
  app.add_option("--out", out, "output directory")->capture_default_str();
  app.add_option("--jobs", jobs, "worker threads for eval episodes and ablation cells")
      ->check(CLI::PositiveNumber);
  app.add_flag("--force", force, "evaluate despite an architecture hash mismatch");
  app.add_option("--checkpoint", checkpoint, "checkpoint path (default OUT/checkpoint.fsml)");

  auto* train = app.add_subcommand("train", "meta-train and write a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on novel-class episodes");
  auto* ablate = app.add_subcommand("ablate", "run the ablation grid and write a CSV table");
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as FSDS");
  auto* oracle = app.add_subcommand("oracle-check", "run the oracle gates");
  oracle->add_flag("--inject-fault", inject_fault, "flip the meta-gradient sign (gate self-test)")
      ->group("");

  CLI11_PARSE(app, argc, argv);

  if (oracle->parsed()) {
    char* report = nullptr;
    const fsml_status s = fsml_oracle_check(inject_fault ? FSML_FAULT_FLIP_META_GRADIENT : 0u, &report);
    print_and_free(report);
    if (s != FSML_OK) return report_failure(s);
    return 0;
  }

  if (config_path.empty()) {
    std::fprintf(stderr, "error: --config is required for this subcommand\n");
    return FSML_ERR_INVALID_ARGUMENT;
  }
  fsml_experiment* exp = nullptr;
  fsml_status s = fsml_experiment_from_file(config_path.c_str(), &exp);
  if (s != FSML_OK) return report_failure(s);

  if (seed_opt->count() > 0) fsml_experiment_set_seed(exp, seed);
  fsml_experiment_set_out(exp, out.c_str());
  fsml_experiment_set_jobs(exp, jobs);
  fsml_experiment_set_force(exp, force ? 1 : 0);
  fsml_experiment_set_checkpoint(exp, checkpoint.c_str());

  char* summary = nullptr;
  if (train->parsed()) s = fsml_train(exp, &summary);
  else if (eval->parsed()) s = fsml_eval(exp, &summary);
  else if (ablate->parsed()) s = fsml_ablate(exp, &summary);
  else if (gen->parsed()) s = fsml_gen_data(exp, &summary);
  fsml_experiment_destroy(exp);

  print_and_free(summary);
  if (s != FSML_OK) return report_failure(s);
  return 0;
}
