#include "fsml/meta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace fsml {

std::string_view regime_name(Regime r) noexcept {
  return r == Regime::Episodic ? "episodic" : "pretrain_finetune";
}

Regime parse_regime(std::string_view name) {
  if (name == "episodic") return Regime::Episodic;
  if (name == "pretrain_finetune") return Regime::PretrainFinetune;
  throw ConfigError("unknown regime '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (M < 1 || N < 1) throw ConfigError("train: M and N must be at least 1");
  if (!(inner_lr > 0.0) || !(meta_lr > 0.0)) throw ConfigError("train: learning rates must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (meta_dropout) {
    meta_dropout->validate();
    if (meta_dropout->stage != SpecStage::MetaTraining) {
      throw ConfigError("meta-dropout must be staged meta_training");
    }
  }
}

void MetaTestConfig::validate() const {
  if (Q < 1) throw ConfigError("meta_test: Q must be at least 1");
  if (!(finetune_lr > 0.0)) throw ConfigError("meta_test: finetune_lr must be positive");
  if (task_dropout) {
    task_dropout->validate();
    if (task_dropout->stage == SpecStage::MetaTraining) {
      throw ConfigError("task dropout must be staged meta_testing or both");
    }
  }
}

template <class Real>
ParamStore<Real> KnowledgeState<Real>::meta_snapshot() const {
  ParamStore<Real> out;
  for (const auto& id : partition.meta_ids) out.emplace(id, net.params().at(id));
  return out;
}

template <class Real>
ParamStore<Real> KnowledgeState<Real>::task_snapshot() const {
  ParamStore<Real> out;
  for (const auto& id : partition.task_ids) out.emplace(id, net.params().at(id));
  return out;
}

template <class Real>
KnowledgeState<Real> make_state(Network<Real> net, const std::set<LayerTag>& meta_tags) {
  KnowledgeState<Real> s;
  s.partition = partition_params(net, meta_tags);
  s.net = std::move(net);
  return s;
}

namespace {

template <class Real>
ParamVars bind_params(Tape<Real>& tape, const ParamStore<Real>& params,
                      const std::set<std::string>& trainable) {
  ParamVars vars;
  for (const auto& [id, t] : params) {
    vars.emplace(id, trainable.count(id) ? tape.parameter(id, t) : tape.constant(t));
  }
  return vars;
}

template <class Real>
std::set<std::string> all_ids(const ParamStore<Real>& params) {
  std::set<std::string> ids;
  for (const auto& [id, _] : params) ids.insert(id);
  return ids;
}

// Plain SGD with optional heavy-ball momentum: v = mu v + g; p -= lr v.
template <class Real>
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(static_cast<Real>(lr)), mu_(static_cast<Real>(momentum)) {}

  void step(ParamStore<Real>& params, const Gradients<Real>& grads) {
    for (const auto& [id, g] : grads) {
      Tensor<Real>& p = params.at(id);
      if (mu_ == Real(0)) {
        for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr_ * g[i];
        continue;
      }
      auto [it, fresh] = velocity_.try_emplace(id, g.shape());
      Tensor<Real>& v = it->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        v[i] = mu_ * v[i] + g[i];
        p[i] -= lr_ * v[i];
      }
    }
  }

 private:
  Real lr_;
  Real mu_;
  std::map<std::string, Tensor<Real>> velocity_;
};

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

template <class Real>
ParamStore<Real> inner_adapt(const ParamStore<Real>& params, const std::set<std::string>& task_ids,
                             const LossBuilder<Real>& task_loss, std::size_t steps, Real lr,
                             double* last_loss) {
  ParamStore<Real> current = params;
  for (std::size_t s = 0; s < steps; ++s) {
    Tape<Real> tape;
    const ParamVars vars = bind_params(tape, current, task_ids);
    const Var loss = task_loss(tape, vars);
    if (last_loss) *last_loss = static_cast<double>(tape.value(loss).item());
    const Gradients<Real> grads = tape.backward(loss);
    for (const auto& id : task_ids) {
      Tensor<Real>& p = current.at(id);
      const Tensor<Real>& g = grads.at(id);
      for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * g[i];
    }
  }
  ParamStore<Real> out;
  for (const auto& id : task_ids) out.emplace(id, std::move(current.at(id)));
  return out;
}

template <class Real>
Gradients<Real> first_order_meta_gradient(const ParamStore<Real>& params,
                                          const std::set<std::string>& wrt,
                                          const LossBuilder<Real>& meta_loss, double* loss_value) {
  Tape<Real> tape;
  const ParamVars vars = bind_params(tape, params, wrt);
  const Var loss = meta_loss(tape, vars);
  if (loss_value) *loss_value = static_cast<double>(tape.value(loss).item());
  return tape.backward(loss);
}

template <class Real>
LossBuilder<Real> classification_loss(const Network<Real>& net, const LabeledBatch<Real>& batch,
                                      ForwardContext ctx) {
  return [&net, &batch, ctx](Tape<Real>& tape, const ParamVars& vars) {
    const Var logits = net.forward(tape, vars, batch.images, ctx);
    return softmax_cross_entropy(tape, logits, std::span<const int>(batch.labels));
  };
}

template <class Real>
ParamStore<Real> inner_adapt(const LabeledBatch<Real>& support, const KnowledgeState<Real>& state,
                             std::size_t steps, Real lr, Stage stage, Rng* rng,
                             double* last_loss) {
  if (steps == 0) return state.task_snapshot();
  if (support.size() == 0) throw ContractError("inner_adapt: empty support set");
  const ForwardContext ctx{Mode::Train, stage, state.meta_dropout, rng};
  return inner_adapt(state.net.params(), state.partition.task_ids,
                     classification_loss(state.net, support, ctx), steps, lr, last_loss);
}

template <class Real>
void apply_meta_dropout(KnowledgeState<Real>& state, const DropoutSpec& spec) {
  if (spec.stage != SpecStage::MetaTraining) {
    throw ConfigError("meta-dropout must be staged meta_training");
  }
  state.net.validate_dropout(spec);
  const std::set<LayerTag> allowed = state.partition.meta_activation_tags();
  for (LayerTag tag : spec.placements) {
    if (!allowed.count(tag)) {
      throw ConfigError("meta-dropout placed on '" + std::string(tag_name(tag)) +
                        "', which is not produced by meta-knowledge");
    }
  }
  state.meta_dropout.push_back(spec);
}

// ---------------------------------------------------------------- task sources

template <class Real>
EpisodeSampler<Real>::EpisodeSampler(const Dataset& view, EpisodeSpec spec)
    : view_(view), spec_(spec) {
  spec_.validate();
}

template <class Real>
TaskBatch<Real> EpisodeSampler<Real>::next(Rng& rng) {
  const Episode ep = sample_episode(view_, spec_, rng);
  return TaskBatch<Real>{gather_batch<Real>(view_, ep.support, ep.support_labels),
                         gather_batch<Real>(view_, ep.query, ep.query_labels)};
}

template <class Real>
FullSetTask<Real>::FullSetTask(const Dataset& ds) : n_classes_(ds.n_classes()) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  all_ = gather_batch<Real>(ds, idx);
}

template <class Real>
TaskBatch<Real> FullSetTask<Real>::next(Rng&) {
  return TaskBatch<Real>{{}, all_};
}

// ---------------------------------------------------------------- trainers

template <class Real>
KnowledgeState<Real> meta_train_episodic(TaskDistribution<Real>& dist, KnowledgeState<Real> state,
                                         const TrainConfig& cfg) {
  cfg.validate();
  if (dist.ways() != state.net.spec().n_classes) {
    throw ConfigError("episodes have " + std::to_string(dist.ways()) + " classes but the head has " +
                      std::to_string(state.net.spec().n_classes));
  }
  if (cfg.meta_dropout) apply_meta_dropout(state, *cfg.meta_dropout);

  Rng task_rng(derive_seed(cfg.seed, "episodic/tasks"));
  Rng drop_rng(derive_seed(cfg.seed, "dropout"));
  Sgd<Real> opt(cfg.meta_lr, cfg.momentum);
  const std::set<std::string> ids = all_ids(state.net.params());
  std::uint64_t episode = 0;

  for (std::size_t epoch = 0; epoch < cfg.meta_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double meta_sum = 0.0, task_sum = 0.0;
    for (std::size_t m = 0; m < cfg.M; ++m, ++episode) {
      const TaskBatch<Real> task = dist.next(task_rng);
      if (cfg.head_init == HeadInit::Redraw) {
        for (auto& [id, t] : state.net.init_head(dist.ways(),
                                                 derive_seed(cfg.seed, "episodic/head", episode))) {
          state.net.params().at(id) = std::move(t);
        }
      }
      double task_loss = 0.0;
      const ParamStore<Real> adapted =
          inner_adapt(task.support, state, cfg.inner_steps, static_cast<Real>(cfg.inner_lr),
                      Stage::MetaTraining, &drop_rng, &task_loss);
      task_sum += task_loss;

      ParamStore<Real> at_adapted = state.net.params();
      for (const auto& [id, t] : adapted) at_adapted.at(id) = t;
      const ForwardContext ctx{Mode::Train, Stage::MetaTraining, state.meta_dropout, &drop_rng};
      double meta_loss = 0.0;
      const Gradients<Real> grads = first_order_meta_gradient(
          at_adapted, ids, classification_loss(state.net, task.query, ctx), &meta_loss);
      meta_sum += meta_loss;
      opt.step(state.net.params(), grads);
    }
    EpochLog rec;
    rec.epoch = epoch;
    rec.meta_loss = meta_sum / static_cast<double>(cfg.M);
    if (cfg.inner_steps > 0) rec.task_loss = task_sum / static_cast<double>(cfg.M);
    rec.wall_ms = elapsed_ms(t0);
    state.log.push_back(rec);
  }
  return state;
}

template <class Real>
KnowledgeState<Real> meta_train_pretrain(const Dataset& base, KnowledgeState<Real> state,
                                         const TrainConfig& cfg) {
  cfg.validate();
  if (base.size() == 0) throw ContractError("pretraining needs a non-empty dataset");
  if (cfg.batch_size > base.size()) {
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                      std::to_string(base.size()));
  }
  if (base.n_classes() != state.net.spec().n_classes) {
    throw ConfigError("base split has " + std::to_string(base.n_classes()) +
                      " classes but the head has " + std::to_string(state.net.spec().n_classes));
  }
  if (cfg.meta_dropout) apply_meta_dropout(state, *cfg.meta_dropout);

  Rng shuffle_rng(derive_seed(cfg.seed, "pretrain/shuffle"));
  Rng drop_rng(derive_seed(cfg.seed, "dropout"));
  Sgd<Real> opt(cfg.meta_lr, cfg.momentum);
  const std::set<std::string> ids = all_ids(state.net.params());

  for (std::size_t epoch = 0; epoch < cfg.meta_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = shuffle_rng.permutation(base.size());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const LabeledBatch<Real> batch = gather_batch<Real>(
          base, std::span<const std::size_t>(order.data() + start, end - start));
      const ForwardContext ctx{Mode::Train, Stage::MetaTraining, state.meta_dropout, &drop_rng};
      double loss = 0.0;
      const Gradients<Real> grads = first_order_meta_gradient(
          state.net.params(), ids, classification_loss(state.net, batch, ctx), &loss);
      opt.step(state.net.params(), grads);
      loss_sum += loss;
      ++batches;
    }
    EpochLog rec;
    rec.epoch = epoch;
    rec.meta_loss = loss_sum / static_cast<double>(batches);
    rec.task_loss = rec.meta_loss;
    rec.wall_ms = elapsed_ms(t0);
    state.log.push_back(rec);
  }
  return state;
}

template <class Real>
KnowledgeState<Real> meta_test(const KnowledgeState<Real>& state,
                               const LabeledBatch<Real>& support, std::size_t ways,
                               const MetaTestConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (ways < 1) throw ContractError("meta_test: ways must be positive");
  std::vector<bool> present(ways, false);
  for (int l : support.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= ways) {
      throw ContractError("meta_test: support label " + std::to_string(l) + " outside [0, " +
                          std::to_string(ways) + ")");
    }
    present[static_cast<std::size_t>(l)] = true;
  }
  for (std::size_t c = 0; c < ways; ++c) {
    if (!present[c]) throw ContractError("meta_test: support has no sample of class " + std::to_string(c));
  }

  KnowledgeState<Real> adapted = state;
  adapted.net.reset_head(ways, derive_seed(seed, "meta-test/head"));
  adapted.partition = partition_params(adapted.net, state.partition.meta_tags);

  std::vector<DropoutSpec> specs = state.meta_dropout;
  if (cfg.task_dropout) {
    adapted.net.validate_dropout(*cfg.task_dropout);
    specs.push_back(*cfg.task_dropout);
  }
  const std::set<std::string> trainable =
      cfg.freeze_meta ? adapted.partition.task_ids : all_ids(adapted.net.params());
  Rng drop_rng(derive_seed(seed, "meta-test/dropout"));
  const ForwardContext ctx{Mode::Train, Stage::MetaTesting, specs, &drop_rng};
  const LossBuilder<Real> loss = classification_loss(adapted.net, support, ctx);
  const auto lr = static_cast<Real>(cfg.finetune_lr);
  for (std::size_t s = 0; s < cfg.finetune_steps; ++s) {
    Tape<Real> tape;
    const ParamVars vars = bind_params(tape, adapted.net.params(), trainable);
    const Gradients<Real> grads = tape.backward(loss(tape, vars));
    for (const auto& id : trainable) {
      Tensor<Real>& p = adapted.net.params().at(id);
      const Tensor<Real>& g = grads.at(id);
      for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * g[i];
    }
  }
  return adapted;
}

template <class Real>
std::vector<int> predict(const Network<Real>& net, const Tensor<Real>& images) {
  Tape<Real> tape;
  const ParamVars vars = net.bind(tape, {});
  const Var logits = net.forward(tape, vars, images, ForwardContext{});
  const Tensor<Real>& l = tape.value(logits);
  const std::size_t B = l.dim(0), C = l.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (l[b * C + c] > l[b * C + best]) best = c;
    out[b] = static_cast<int>(best);
  }
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size() || labels.empty()) {
    throw ContractError("accuracy: prediction and label counts differ or are zero");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------- ridge learner

namespace ridge {

namespace {

Var residual(Tape<double>& t, const ParamVars& vars, const Tensor<double>& x,
             const Tensor<double>& y) {
  const Var phi = matmul(t, t.constant(x), transpose(t, vars.at(kW)));
  return sub(t, matmul(t, phi, vars.at(kTheta)), t.constant(y));
}

}  // namespace

LossBuilder<double> task_loss(const Tensor<double>& x, const Tensor<double>& y, double lambda) {
  return [x, y, lambda](Tape<double>& t, const ParamVars& vars) {
    const Var fit = scale(t, sum(t, square(t, residual(t, vars, x, y))), 0.5);
    const Var reg = scale(t, sum(t, square(t, vars.at(kTheta))), 0.5 * lambda);
    return add(t, fit, reg);
  };
}

LossBuilder<double> query_loss(const Tensor<double>& x, const Tensor<double>& y) {
  return [x, y](Tape<double>& t, const ParamVars& vars) {
    return scale(t, sum(t, square(t, residual(t, vars, x, y))), 0.5);
  };
}

}  // namespace ridge

#define FSML_INSTANTIATE_META(R)                                                              \
  template struct KnowledgeState<R>;                                                          \
  template KnowledgeState<R> make_state<R>(Network<R>, const std::set<LayerTag>&);            \
  template ParamStore<R> inner_adapt<R>(const ParamStore<R>&, const std::set<std::string>&,   \
                                        const LossBuilder<R>&, std::size_t, R, double*);      \
  template Gradients<R> first_order_meta_gradient<R>(                                         \
      const ParamStore<R>&, const std::set<std::string>&, const LossBuilder<R>&, double*);    \
  template LossBuilder<R> classification_loss<R>(const Network<R>&, const LabeledBatch<R>&,   \
                                                 ForwardContext);                             \
  template ParamStore<R> inner_adapt<R>(const LabeledBatch<R>&, const KnowledgeState<R>&,     \
                                        std::size_t, R, Stage, Rng*, double*);                \
  template void apply_meta_dropout<R>(KnowledgeState<R>&, const DropoutSpec&);                \
  template class EpisodeSampler<R>;                                                           \
  template class FullSetTask<R>;                                                              \
  template KnowledgeState<R> meta_train_episodic<R>(TaskDistribution<R>&, KnowledgeState<R>,  \
                                                    const TrainConfig&);                      \
  template KnowledgeState<R> meta_train_pretrain<R>(const Dataset&, KnowledgeState<R>,        \
                                                    const TrainConfig&);                      \
  template KnowledgeState<R> meta_test<R>(const KnowledgeState<R>&, const LabeledBatch<R>&,   \
                                          std::size_t, const MetaTestConfig&, std::uint64_t); \
  template std::vector<int> predict<R>(const Network<R>&, const Tensor<R>&);

FSML_INSTANTIATE_META(float)
FSML_INSTANTIATE_META(double)

}  // namespace fsml
