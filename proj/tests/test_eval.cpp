#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "fsml/eval.hpp"

using namespace fsml;

namespace {

struct Fixture {
  Dataset novel;
  KnowledgeState<float> state;
};

Fixture fixture() {
  SyntheticSpec s;
  s.n_classes = 10;
  s.samples_per_class = 8;
  s.image_extent = 16;
  s.cluster_std = 0.2;
  s.seed = 2;
  NetworkSpec spec;
  spec.widths = {4, 4, 4, 4};
  spec.input_shape = {1, 16, 16};
  spec.n_classes = 5;
  return Fixture{gen_synthetic(s),
                 make_state(Network<float>::build_conv4(spec, 3),
                            {LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv3, LayerTag::Conv4})};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("ci95 reference values") {
  const std::vector<double> flat(10, 0.5);
  CHECK(ci95(flat).mean == 0.5);
  CHECK(ci95(flat).halfwidth == 0.0);
  CHECK(ci95(std::vector<double>{0.7}).halfwidth == 0.0);
  CHECK_THROWS_AS(ci95(std::vector<double>{}), ContractError);

  const auto two = ci95(std::vector<double>{0.0, 1.0});
  CHECK(two.mean == 0.5);
  CHECK(two.halfwidth == doctest::Approx(0.98).epsilon(1e-12));

  // 600 values with sample standard deviation exactly 1
  std::vector<double> v;
  const double a = std::sqrt(599.0 / 600.0);
  for (int i = 0; i < 300; ++i) {
    v.push_back(a);
    v.push_back(-a);
  }
  CHECK(std::abs(ci95(v).halfwidth - 0.08001666493091715) < 1e-12);
}

TEST_CASE("ci95 ignores input order") {
  Rng rng(1);
  std::vector<double> v(600);
  for (double& x : v) x = rng.uniform();
  const auto base = ci95(v);
  for (int k = 0; k < 5; ++k) {
    const auto perm = rng.permutation(v.size());
    std::vector<double> w;
    for (std::size_t i : perm) w.push_back(v[i]);
    const auto r = ci95(w);
    CHECK(std::memcmp(&r, &base, sizeof r) == 0);
  }
}

TEST_CASE("percent formatting") {
  CHECK(format_percent(0.62713, 0.0087) == "62.71 \xC2\xB1 0.87");
  CHECK(format_percent(0.5, 0.0) == "50.00 \xC2\xB1 0.00");
  CHECK(kDefaultEvalEpisodes == 600);
}

TEST_CASE("untrained model with no fine-tuning sits at chance") {
  const Fixture f = fixture();
  MetaTestConfig cfg;
  cfg.finetune_steps = 0;
  const EvalReport r = evaluate_fewshot(f.state, f.novel, {5, 1, 3}, cfg, kDefaultEvalEpisodes, 11);
  CHECK(r.n_episodes == 600);
  CHECK(r.per_episode_acc.size() == 600);
  CHECK(std::abs(r.mean_acc - 0.2) <= 3.0 * r.ci95_halfwidth);
  double sum = 0.0;
  for (double x : r.per_episode_acc) sum += x;
  CHECK(r.mean_acc == doctest::Approx(sum / 600.0).epsilon(1e-14));

  // halves of one run give comparable intervals
  const std::vector<double> first(r.per_episode_acc.begin(), r.per_episode_acc.begin() + 300);
  const std::vector<double> second(r.per_episode_acc.begin() + 300, r.per_episode_acc.end());
  const double h1 = ci95(first).halfwidth, h2 = ci95(second).halfwidth;
  CHECK(std::abs(h1 - h2) <= 0.25 * std::max(h1, h2));
}

TEST_CASE("reports are reproducible across runs and job counts") {
  const Fixture f = fixture();
  MetaTestConfig cfg;
  cfg.finetune_steps = 15;
  cfg.task_dropout = DropoutSpec{DropoutKind::Standard, 0.8, 1, {LayerTag::Flatten}, SpecStage::MetaTesting};
  EvalOptions one;
  one.config_hash = "abc";
  EvalOptions four = one;
  four.jobs = 4;
  const auto a = evaluate_fewshot(f.state, f.novel, {5, 1, 3}, cfg, 40, 5, one);
  const auto b = evaluate_fewshot(f.state, f.novel, {5, 1, 3}, cfg, 40, 5, one);
  const auto c = evaluate_fewshot(f.state, f.novel, {5, 1, 3}, cfg, 40, 5, four);
  CHECK(report_json(a) == report_json(b));
  CHECK(report_json(a) == report_json(c));
  const auto j = nlohmann::json::parse(report_json(a));
  CHECK(j.at("n_episodes") == 40);
  CHECK(j.at("config_hash") == "abc");
  CHECK(j.at("per_episode_acc").size() == 40);
  CHECK_FALSE(nlohmann::json::parse(report_json(a, false)).contains("per_episode_acc"));
}

TEST_CASE("cached features give the same report as full adaptation") {
  const Fixture f = fixture();
  MetaTestConfig cfg;
  cfg.finetune_steps = 20;
  cfg.task_dropout = DropoutSpec{DropoutKind::Standard, 0.7, 1, {LayerTag::Flatten}, SpecStage::MetaTesting};
  REQUIRE(feature_cache_applies(f.state, cfg));
  EvalOptions cached, full;
  full.feature_cache = false;
  const auto a = evaluate_fewshot(f.state, f.novel, {5, 2, 3}, cfg, 25, 8, cached);
  const auto b = evaluate_fewshot(f.state, f.novel, {5, 2, 3}, cfg, 25, 8, full);
  CHECK(report_json(a) == report_json(b));

  MetaTestConfig unfrozen = cfg;
  unfrozen.freeze_meta = false;
  CHECK_FALSE(feature_cache_applies(f.state, unfrozen));
  MetaTestConfig conv_drop = cfg;
  conv_drop.task_dropout->placements = {LayerTag::Conv4};
  CHECK_FALSE(feature_cache_applies(f.state, conv_drop));
}

TEST_CASE("episode failures carry the episode index") {
  const Fixture f = fixture();
  MetaTestConfig cfg;
  try {
    evaluate_fewshot(f.state, f.novel, {5, 4, 6}, cfg, 3, 0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Sampling);
    CHECK(std::string(e.what()).find("episode 0") != std::string::npos);
  }
}

TEST_CASE("placement labels") {
  CHECK(placement_label({LayerTag::Conv4}) == "on group 4");
  CHECK(placement_label({LayerTag::Conv3, LayerTag::Conv4}) == "on group 3&4");
  CHECK(placement_label({LayerTag::Flatten}) == "on last flatten layer");
  CHECK(parse_arm("M&D") == Arm::MD);
  CHECK_THROWS_AS(parse_arm("X"), ConfigError);
}

TEST_CASE("ablation grid structure, aggregation and failure isolation") {
  std::vector<AblationCell> cells;
  for (Arm a : {Arm::None, Arm::M, Arm::D, Arm::MD})
    cells.push_back(AblationCell{Regime::PretrainFinetune, a, DropoutKind::DropBlock, {LayerTag::Conv4}, 16});
  auto runner = [](const AblationCell& c, std::uint64_t seed) {
    if (c.arm == Arm::D && seed == 1) throw SamplingError("boom");
    EvalReport r;
    r.n_episodes = 1;
    r.mean_acc = 0.5 + 0.1 * static_cast<double>(c.arm) + 0.01 * static_cast<double>(seed);
    r.per_episode_acc = {r.mean_acc};
    return r;
  };

  const auto one = run_ablation(cells, {0}, runner);
  CHECK(one.size() == 4);
  const std::string csv1 = ablation_csv(one);
  CHECK(count_lines(csv1) == 1 + 4 * 2);
  CHECK(csv1.find("\"on group 4\"") == std::string::npos);
  CHECK(csv1.find("on group 4") != std::string::npos);
  CHECK(csv1.find("M&D") != std::string::npos);

  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(s);
  const auto many = run_ablation(cells, seeds, runner, 3);
  CHECK(ablation_csv(many) == ablation_csv(run_ablation(cells, seeds, runner, 1)));
  REQUIRE(many[0].aggregate.has_value());
  CHECK(many[0].aggregate->mean == doctest::Approx(0.5 + 0.045));
  CHECK_FALSE(many[2].seeds[1].report.has_value());
  CHECK(many[2].seeds[1].error == "boom");
  CHECK(many[2].aggregate.has_value());
  CHECK(ablation_csv(many).find("error: boom") != std::string::npos);
}
