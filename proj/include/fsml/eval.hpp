#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fsml/meta.hpp"

namespace fsml {

struct EvalReport {
  std::size_t n_episodes = 0;
  std::vector<double> per_episode_acc;
  double mean_acc = 0.0;
  double ci95_halfwidth = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kDefaultEvalEpisodes = 600;

struct MeanCi {
  double mean = 0.0;
  double halfwidth = 0.0;
};

/// Mean and 1.96 * std(ddof=1) / sqrt(n); the halfwidth of a single value is 0.
/// Sums run over the sorted values so the result ignores input order.
MeanCi ci95(std::span<const double> values);

/// "62.71 ± 0.87" for mean 0.62713 and halfwidth 0.0087.
std::string format_percent(double mean, double halfwidth);

struct EvalOptions {
  std::size_t jobs = 1;
  /// Precompute backbone features once when adaptation cannot change them.
  bool feature_cache = true;
  std::string config_hash;
};

/// True when meta_test on `state` under `cfg` only ever touches the head and
/// masks no activation before flatten, so features can be computed once.
template <class Real>
bool feature_cache_applies(const KnowledgeState<Real>& state, const MetaTestConfig& cfg);

/// meta_test followed by query prediction, using precomputed features for both
/// sets. Bitwise identical to the uncached path when feature_cache_applies.
template <class Real>
std::vector<int> adapt_and_predict_cached(const KnowledgeState<Real>& state,
                                          const Tensor<Real>& support_features,
                                          std::span<const int> support_labels,
                                          const Tensor<Real>& query_features, std::size_t ways,
                                          const MetaTestConfig& cfg, std::uint64_t seed);

/// Eval-mode backbone features [n, d] of `images` [n, c, h, w].
template <class Real>
Tensor<Real> backbone_features(const Network<Real>& net, const Tensor<Real>& images);

/// Runs `n_episodes` independent episodes on `novel`, each adapting from the
/// same stored state. Episode i samples with stream ("eval-episode", i) and
/// adapts with ("eval-adapt", i), so any job count gives the same report.
template <class Real>
EvalReport evaluate_fewshot(const KnowledgeState<Real>& state, const Dataset& novel,
                            const EpisodeSpec& espec, const MetaTestConfig& mcfg,
                            std::size_t n_episodes, std::uint64_t seed,
                            const EvalOptions& opts = {});

/// {n_episodes, mean_acc, ci95, seed, config_hash, per_episode_acc}
std::string report_json(const EvalReport& report, bool per_episode = true);

// ---------------------------------------------------------------- ablation

enum class Arm { None, M, D, MD };

std::string_view arm_name(Arm arm) noexcept;  // none, M, D, M&D
Arm parse_arm(std::string_view name);

struct AblationCell {
  Regime regime = Regime::PretrainFinetune;
  Arm arm = Arm::None;
  DropoutKind kind = DropoutKind::DropBlock;
  std::set<LayerTag> placement;
  std::size_t batch_size = 64;
};

/// "on group 4", "on group 3&4", "on last flatten layer".
std::string placement_label(const std::set<LayerTag>& placement);

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<EvalReport> report;
  std::string error;
};

struct CellResult {
  AblationCell cell;
  std::vector<SeedOutcome> seeds;
  /// Mean of the per-seed means and the CI of those means; empty when every
  /// seed failed.
  std::optional<MeanCi> aggregate;
};

using CellRunner = std::function<EvalReport(const AblationCell&, std::uint64_t seed)>;

/// Runs every (cell, seed) pair. A throwing pair is recorded and the grid
/// continues. With jobs > 1 pairs run concurrently; results are merged by
/// position, so the output does not depend on the job count.
std::vector<CellResult> run_ablation(const std::vector<AblationCell>& cells,
                                     const std::vector<std::uint64_t>& seeds,
                                     const CellRunner& runner, std::size_t jobs = 1);

/// Header plus one row per (cell, seed) and one "mean" row per cell.
std::string ablation_csv(const std::vector<CellResult>& results);

}  // namespace fsml
