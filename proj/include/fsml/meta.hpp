#pragma once

// Meta-knowledge / task-knowledge training.
//
// Every trainer here uses FIRST-ORDER meta-gradients: the gradient of the
// meta-loss with respect to w is taken with the adapted task parameters
// theta* held constant. Nothing is differentiated through the inner loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fsml/data.hpp"
#include "fsml/nn.hpp"

namespace fsml {

enum class Regime { Episodic, PretrainFinetune };

std::string_view regime_name(Regime r) noexcept;
Regime parse_regime(std::string_view name);

/// How the task head starts each training episode.
enum class HeadInit {
  Persistent,  // one prototype, moved by the outer step like w
  Redraw,      // fresh draw from the init distribution per episode
};

struct TrainConfig {
  std::size_t M = 1;  // training tasks per meta-epoch (episodic)
  std::size_t N = 1;  // query samples per class in each training task (episodic)
  std::size_t inner_steps = 0;
  double inner_lr = 0.01;
  double meta_lr = 0.01;
  double momentum = 0.0;
  std::size_t meta_epochs = 1;
  std::size_t batch_size = 64;  // pretrain mini-batch size
  std::optional<DropoutSpec> meta_dropout;
  std::uint64_t seed = 0;
  HeadInit head_init = HeadInit::Persistent;

  void validate() const;
};

struct MetaTestConfig {
  std::size_t Q = 1;  // target tasks (episodes) when used by evaluation
  bool freeze_meta = true;
  std::size_t finetune_steps = 100;
  double finetune_lr = 0.1;
  std::optional<DropoutSpec> task_dropout;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double meta_loss = 0.0;
  std::optional<double> task_loss;
  double wall_ms = 0.0;
};

template <class Real>
struct KnowledgeState {
  Network<Real> net;
  ParamPartition partition;
  std::vector<DropoutSpec> meta_dropout;  // registered via apply_meta_dropout
  std::vector<EpochLog> log;

  ParamStore<Real> meta_snapshot() const;
  ParamStore<Real> task_snapshot() const;
};

template <class Real>
KnowledgeState<Real> make_state(Network<Real> net, const std::set<LayerTag>& meta_tags);

/// Builds a scalar loss on a tape from the bound parameters.
template <class Real>
using LossBuilder = std::function<Var(Tape<Real>&, const ParamVars&)>;

/// Gradient descent on the `task_ids` entries of `params` only; every other
/// parameter is a constant on the tape. Returns the adapted task parameters.
/// `last_loss`, when given, receives the loss of the final step.
template <class Real>
ParamStore<Real> inner_adapt(const ParamStore<Real>& params, const std::set<std::string>& task_ids,
                             const LossBuilder<Real>& task_loss, std::size_t steps, Real lr,
                             double* last_loss = nullptr);

/// Gradient of `meta_loss` with respect to the `wrt` entries of `params`, all
/// other entries (in particular an adapted theta*) held constant.
template <class Real>
Gradients<Real> first_order_meta_gradient(const ParamStore<Real>& params,
                                          const std::set<std::string>& wrt,
                                          const LossBuilder<Real>& meta_loss,
                                          double* loss_value = nullptr);

/// Cross-entropy of the network on a labeled batch, under `ctx`.
template <class Real>
LossBuilder<Real> classification_loss(const Network<Real>& net, const LabeledBatch<Real>& batch,
                                      ForwardContext ctx);

/// Classification inner problem: adapts theta on `support` with w frozen.
/// Meta-dropout registered on the state fires when `stage` is meta-training.
/// steps == 0 returns the current theta; an empty support with steps > 0 is a
/// ContractError.
template <class Real>
ParamStore<Real> inner_adapt(const LabeledBatch<Real>& support, const KnowledgeState<Real>& state,
                             std::size_t steps, Real lr, Stage stage, Rng* rng,
                             double* last_loss = nullptr);

/// Validates and registers a meta-dropout spec on the state. The spec must be
/// meta-training staged and placed only on activations produced by w.
template <class Real>
void apply_meta_dropout(KnowledgeState<Real>& state, const DropoutSpec& spec);

/// One training task: adaptation data and evaluation data with local labels.
template <class Real>
struct TaskBatch {
  LabeledBatch<Real> support;  // may be empty when the trainer runs no inner steps
  LabeledBatch<Real> query;
};

template <class Real>
class TaskDistribution {
 public:
  virtual ~TaskDistribution() = default;
  virtual TaskBatch<Real> next(Rng& rng) = 0;
  /// Class count of every task (the head width).
  virtual std::size_t ways() const = 0;
};

/// C-way K-shot episodes from a class view.
template <class Real>
class EpisodeSampler : public TaskDistribution<Real> {
 public:
  EpisodeSampler(const Dataset& view, EpisodeSpec spec);
  TaskBatch<Real> next(Rng& rng) override;
  std::size_t ways() const override { return spec_.ways; }

 private:
  const Dataset& view_;
  EpisodeSpec spec_;
};

/// A single task whose query set is the whole dataset (labels unchanged) and
/// whose support set is empty.
template <class Real>
class FullSetTask : public TaskDistribution<Real> {
 public:
  explicit FullSetTask(const Dataset& ds);
  TaskBatch<Real> next(Rng& rng) override;
  std::size_t ways() const override { return n_classes_; }

 private:
  LabeledBatch<Real> all_;
  std::size_t n_classes_;
};

/// Episodic meta-training. Per task: theta* = inner_adapt on the support set,
/// then the query loss at (w, theta*) under fresh meta-dropout masks; its
/// first-order gradient moves w and the head prototype with meta_lr.
template <class Real>
KnowledgeState<Real> meta_train_episodic(TaskDistribution<Real>& dist, KnowledgeState<Real> state,
                                         const TrainConfig& cfg);

/// Pretraining regime: mini-batch SGD of all parameters on the base classes,
/// meta-dropout active in every training forward.
template <class Real>
KnowledgeState<Real> meta_train_pretrain(const Dataset& base, KnowledgeState<Real> state,
                                         const TrainConfig& cfg);

/// Meta-testing: replaces the head by a fresh `ways`-class head and fine-tunes
/// on the support set (task parameters only when freeze_meta). Meta-dropout
/// never fires here; the optional task dropout does.
template <class Real>
KnowledgeState<Real> meta_test(const KnowledgeState<Real>& state,
                               const LabeledBatch<Real>& support, std::size_t ways,
                               const MetaTestConfig& cfg, std::uint64_t seed);

/// Argmax class per row of the eval-mode logits (lowest index on ties).
template <class Real>
std::vector<int> predict(const Network<Real>& net, const Tensor<Real>& images);

double accuracy(std::span<const int> predicted, std::span<const int> labels);

/// Linear-quadratic learner used to check the optimization machinery against
/// closed forms. Parameters: "w" [d_feat, d_in] (meta-knowledge) and "theta"
/// [d_feat, 1] (task-knowledge); features are X w^T.
namespace ridge {

inline constexpr const char* kW = "w";
inline constexpr const char* kTheta = "theta";

/// 0.5 |X w^T theta - y|^2 + 0.5 lambda |theta|^2
LossBuilder<double> task_loss(const Tensor<double>& x, const Tensor<double>& y, double lambda);
/// 0.5 |X w^T theta - y|^2
LossBuilder<double> query_loss(const Tensor<double>& x, const Tensor<double>& y);

}  // namespace ridge

}  // namespace fsml
