#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fsml/data.hpp"
#include "fsml/eval.hpp"
#include "fsml/meta.hpp"
#include "fsml/nn.hpp"

namespace fsml {

struct DatasetSource {
  std::optional<std::string> path;
  std::optional<SyntheticSpec> synthetic;
};

/// Either class counts (contiguous ids) or explicit class lists.
struct SplitConfig {
  std::optional<std::array<std::size_t, 3>> counts;
  std::optional<SplitSpec> explicit_classes;

  SplitSpec resolve(std::size_t n_classes) const;
};

struct AblationConfig {
  std::vector<Arm> arms{Arm::None, Arm::M, Arm::D, Arm::MD};
  std::vector<std::set<LayerTag>> placements;  // meta-dropout placements
  std::vector<DropoutKind> kinds;              // meta-dropout kinds
  std::vector<std::size_t> batch_sizes;
  std::vector<Regime> regimes;
  DropoutSpec meta_dropout;  // keep_prob and block_size for the M arms
  DropoutSpec task_dropout;  // the D arms

  std::vector<AblationCell> cells() const;
};

/// Architecture and training episode shape; the rest of the network spec
/// (input shape, head width) follows from the data and regime.
struct ExperimentConfig {
  Regime regime = Regime::PretrainFinetune;
  DatasetSource dataset;
  SplitConfig split;
  std::array<std::size_t, 4> widths{8, 8, 8, 8};
  HeadKind head = HeadKind::Cosine;
  double cosine_scale = 10.0;
  std::set<LayerTag> meta_tags{LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv3, LayerTag::Conv4};
  TrainConfig train;
  EpisodeSpec train_episode{5, 1, 16};  // ways and shots of episodic training tasks
  MetaTestConfig meta_test;
  EpisodeSpec episode{5, 1, 16};
  std::size_t n_eval_episodes = kDefaultEvalEpisodes;
  std::vector<std::uint64_t> seeds{0};
  std::optional<AblationConfig> ablation;
};

/// Parses and validates a config document. Unknown keys, wrong types, and
/// invalid values are ConfigErrors naming the offending key path.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON form (every field, defaults filled in).
std::string config_json(const ExperimentConfig& cfg);
/// Hex digests of the canonical form and of the architecture alone.
std::string config_hash(const ExperimentConfig& cfg);
std::string arch_hash(const NetworkSpec& spec, const std::set<LayerTag>& meta_tags);

std::string to_hex(std::uint64_t v);

}  // namespace fsml
