#include <doctest.h>

#include <cmath>

#include "fsml/meta.hpp"

using namespace fsml;

namespace {

const std::set<LayerTag> kBackbone{LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv3, LayerTag::Conv4};

Dataset toy_data(std::size_t classes = 6, std::size_t per_class = 6, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.n_classes = classes;
  s.samples_per_class = per_class;
  s.image_extent = 16;
  s.cluster_std = 0.15;
  s.seed = seed;
  return gen_synthetic(s);
}

template <class Real>
KnowledgeState<Real> toy_state(std::size_t classes, std::uint64_t seed = 1,
                               std::set<LayerTag> meta = kBackbone) {
  NetworkSpec spec;
  spec.widths = {4, 4, 4, 4};
  spec.input_shape = {1, 16, 16};
  spec.n_classes = classes;
  spec.head = HeadKind::Linear;
  return make_state(Network<float>::build_conv4(spec, seed).cast<Real>(), meta);
}

template <class Real>
bool same_params(const ParamStore<Real>& a, const ParamStore<Real>& b, const std::set<std::string>& ids) {
  for (const auto& id : ids)
    if (!bitwise_equal(a.at(id), b.at(id))) return false;
  return true;
}

template <class Real>
LabeledBatch<Real> whole(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return gather_batch<Real>(ds, idx);
}

}  // namespace

TEST_CASE("inner_adapt moves only task parameters") {
  const Dataset ds = toy_data();
  const auto state = toy_state<float>(6);
  const auto support = whole<float>(ds);
  Rng rng(0);

  const auto same = inner_adapt(support, state, 0, 0.1f, Stage::MetaTraining, &rng);
  CHECK(same_params(same, state.net.params(), state.partition.task_ids));

  double loss = 0.0;
  const auto theta = inner_adapt(support, state, 3, 0.1f, Stage::MetaTraining, &rng, &loss);
  CHECK(theta.size() == 2);
  CHECK(theta.count("head.weight") == 1);
  CHECK_FALSE(bitwise_equal(theta.at("head.weight"), state.net.params().at("head.weight")));
  CHECK(std::isfinite(loss));

  CHECK_THROWS_AS(inner_adapt(LabeledBatch<float>{}, state, 1, 0.1f, Stage::MetaTraining, &rng), ContractError);
}

TEST_CASE("first-order meta-gradient holds the adapted head constant") {
  const Dataset ds = toy_data();
  auto state = toy_state<double>(6);
  const auto batch = whole<double>(ds);
  const std::set<std::string> w = state.partition.meta_ids;
  const auto loss = classification_loss(state.net, batch, ForwardContext{});
  const auto g = first_order_meta_gradient(state.net.params(), w, loss);
  for (const auto& id : state.partition.task_ids) {
    CHECK(g.count(id) == 0);
  }
  for (const auto& id : w) {
    double norm = 0.0;
    for (double v : g.at(id).data()) norm += v * v;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("meta-dropout registration rules") {
  auto state = toy_state<float>(6, 1, {LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv3});
  DropoutSpec s{DropoutKind::Standard, 0.9, 1, {LayerTag::Conv2}, SpecStage::MetaTesting};
  CHECK_THROWS_AS(apply_meta_dropout(state, s), ConfigError);
  s.stage = SpecStage::MetaTraining;
  s.placements = {LayerTag::Conv4};  // produced by task-knowledge here
  CHECK_THROWS_AS(apply_meta_dropout(state, s), ConfigError);
  s.placements = {LayerTag::Flatten};
  CHECK_THROWS_AS(apply_meta_dropout(state, s), ConfigError);
  s.placements = {LayerTag::Conv3};
  CHECK_NOTHROW(apply_meta_dropout(state, s));
  CHECK(state.meta_dropout.size() == 1);
}

TEST_CASE("meta_test adapts a fresh head and freezes w") {
  const Dataset ds = toy_data(8, 4);
  const auto state = toy_state<float>(8);
  Rng rng(4);
  const Episode ep = sample_episode(ds, {5, 1, 2}, rng);
  const auto support = gather_batch<float>(ds, ep.support, ep.support_labels);
  CHECK(support.size() == 5);

  MetaTestConfig cfg;
  cfg.finetune_steps = 10;
  const auto adapted = meta_test(state, support, 5, cfg, 7);
  CHECK(adapted.net.params().at("head.weight").shape() == Shape{5, 4});
  CHECK(same_params(adapted.net.params(), state.net.params(), state.partition.meta_ids));
  CHECK(bitwise_equal(meta_test(state, support, 5, cfg, 7).net.params().at("head.weight"),
                      adapted.net.params().at("head.weight")));

  cfg.freeze_meta = false;
  const auto full = meta_test(state, support, 5, cfg, 7);
  CHECK_FALSE(same_params(full.net.params(), state.net.params(), state.partition.meta_ids));

  auto partial = support;
  partial.labels[0] = 1;
  CHECK_THROWS_AS(meta_test(state, partial, 5, cfg, 7), ContractError);
}

TEST_CASE("registered meta-dropout never fires at meta-test") {
  const Dataset ds = toy_data(8, 4);
  const auto plain = toy_state<float>(8);
  auto dropped = plain;
  apply_meta_dropout(dropped, DropoutSpec{DropoutKind::DropBlock, 0.5, 3,
                                          {LayerTag::Conv1, LayerTag::Conv2}, SpecStage::MetaTraining});
  Rng rng(2);
  const Episode ep = sample_episode(ds, {5, 2, 2}, rng);
  const auto support = gather_batch<float>(ds, ep.support, ep.support_labels);
  MetaTestConfig cfg;
  cfg.finetune_steps = 5;
  cfg.freeze_meta = false;
  const auto a = meta_test(plain, support, 5, cfg, 3);
  const auto b = meta_test(dropped, support, 5, cfg, 3);
  for (const auto& [id, t] : a.net.params()) CHECK(bitwise_equal(t, b.net.params().at(id)));
}

TEST_CASE("pretraining is deterministic and keep_prob 1 meta-dropout is a no-op") {
  const Dataset ds = toy_data();
  TrainConfig cfg;
  cfg.meta_epochs = 2;
  cfg.batch_size = 8;
  cfg.meta_lr = 0.05;
  cfg.momentum = 0.9;
  cfg.seed = 5;
  const auto a = meta_train_pretrain(ds, toy_state<float>(6), cfg);
  const auto b = meta_train_pretrain(ds, toy_state<float>(6), cfg);
  cfg.meta_dropout = DropoutSpec{DropoutKind::DropBlock, 1.0, 3, {LayerTag::Conv2, LayerTag::Conv3},
                                 SpecStage::MetaTraining};
  const auto c = meta_train_pretrain(ds, toy_state<float>(6), cfg);
  cfg.meta_dropout->keep_prob = 0.8;
  const auto d = meta_train_pretrain(ds, toy_state<float>(6), cfg);
  for (const auto& [id, t] : a.net.params()) {
    CHECK(bitwise_equal(t, b.net.params().at(id)));
    CHECK(bitwise_equal(t, c.net.params().at(id)));
  }
  CHECK_FALSE(bitwise_equal(a.net.params().at("conv1.weight"), d.net.params().at("conv1.weight")));
  REQUIRE(a.log.size() == 2);
  CHECK(a.log[0].task_loss.has_value());
}

TEST_CASE("trainer configuration errors") {
  const Dataset ds = toy_data();
  TrainConfig cfg;
  cfg.batch_size = 1000;
  CHECK_THROWS_AS(meta_train_pretrain(ds, toy_state<float>(6), cfg), ConfigError);
  cfg.batch_size = 4;
  CHECK_THROWS_AS(meta_train_pretrain(ds, toy_state<float>(5), cfg), ConfigError);
  EpisodeSampler<float> sampler(ds, {3, 1, 2});
  CHECK_THROWS_AS(meta_train_episodic(sampler, toy_state<float>(6), cfg), ConfigError);
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("episodic training lowers the query loss") {
  const Dataset ds = toy_data(8, 6);
  EpisodeSampler<float> sampler(ds, {4, 2, 3});
  TrainConfig cfg;
  cfg.M = 10;
  cfg.meta_epochs = 8;
  cfg.inner_steps = 3;
  cfg.inner_lr = 0.2;
  cfg.meta_lr = 0.05;
  cfg.momentum = 0.9;
  cfg.seed = 1;
  const auto s = meta_train_episodic(sampler, toy_state<float>(4), cfg);
  REQUIRE(s.log.size() == 8);
  CHECK(s.log.back().meta_loss < s.log.front().meta_loss);
  CHECK(s.log.front().task_loss.has_value());
}

TEST_CASE("episodic training with one full-set task and no inner steps reduces to pretraining") {
  const Dataset ds = toy_data(5, 4, 3);
  TrainConfig cfg;
  cfg.M = 1;
  cfg.inner_steps = 0;
  cfg.meta_epochs = 5;
  cfg.meta_lr = 0.1;
  cfg.batch_size = ds.size();
  cfg.seed = 9;
  FullSetTask<double> task(ds);
  const auto episodic = meta_train_episodic(task, toy_state<double>(5), cfg);
  const auto pretrain = meta_train_pretrain(ds, toy_state<double>(5), cfg);
  REQUIRE(episodic.log.size() == 5);
  REQUIRE(pretrain.log.size() == 5);
  for (std::size_t e = 0; e < 5; ++e) {
    CHECK(std::abs(episodic.log[e].meta_loss - pretrain.log[e].meta_loss) < 1e-6);
  }
  CHECK(pretrain.log[4].meta_loss < pretrain.log[0].meta_loss);
}

TEST_CASE("prediction and accuracy") {
  const Dataset ds = toy_data();
  const auto state = toy_state<float>(6);
  const auto batch = whole<float>(ds);
  const auto pred = predict(state.net, batch.images);
  CHECK(pred.size() == ds.size());
  for (int p : pred) CHECK((p >= 0 && p < 6));
  CHECK(accuracy(std::vector<int>{1, 2, 3, 4}, std::vector<int>{1, 2, 0, 4}) == 0.75);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), ContractError);
}
