#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "fsml/config.hpp"
#include "fsml/oracle.hpp"

namespace fsml {

struct Assets {
  Dataset full;
  SplitViews views;
};

/// Loads or generates the dataset and cuts the split.
Assets load_assets(const ExperimentConfig& cfg);

/// Network spec for the training stage of `cfg` on `assets`.
NetworkSpec network_spec(const ExperimentConfig& cfg, const Assets& assets);

/// Runs the configured regime from a freshly initialized network.
KnowledgeState<float> train_model(const ExperimentConfig& cfg, const Assets& assets,
                                  std::uint64_t seed);

struct CommandOptions {
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::size_t jobs = 1;
  bool force = false;
  std::optional<std::string> checkpoint;
};

/// Each command returns the text the CLI prints on success.
std::string cmd_train(const ExperimentConfig& cfg, const CommandOptions& opt);
std::string cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opt);
std::string cmd_ablate(const ExperimentConfig& cfg, const CommandOptions& opt);
std::string cmd_gen_data(const ExperimentConfig& cfg, const CommandOptions& opt);
/// Returns the gate report; the caller maps passed() to the exit code.
oracle::GateReport cmd_oracle_check(const oracle::Faults& faults = {});

}  // namespace fsml
