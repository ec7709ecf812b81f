#include "fsml/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fsml {

MeanCi ci95(std::span<const double> values) {
  if (values.empty()) throw ContractError("ci95: empty list");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double sum = 0.0;
  for (double x : v) sum += x;
  MeanCi out;
  out.mean = sum / n;
  if (v.size() == 1) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.halfwidth = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return out;
}

std::string format_percent(double mean, double halfwidth) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f \xC2\xB1 %.2f", 100.0 * mean, 100.0 * halfwidth);
  return buf;
}

namespace {

bool only_flatten_masks(const std::vector<DropoutSpec>& specs) {
  for (const DropoutSpec& s : specs) {
    if (!s.fires_in(Stage::MetaTesting) || s.keep_prob >= 1.0) continue;
    for (LayerTag t : s.placements)
      if (t != LayerTag::Flatten) return false;
  }
  return true;
}

template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, std::span<const std::size_t> rows) {
  const std::size_t d = table.dim(1);
  Tensor<Real> out(Shape{rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(table.data().begin() + rows[r] * d, d, out.data().begin() + r * d);
  }
  return out;
}

template <class Real>
std::vector<int> argmax_rows(const Tensor<Real>& l) {
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

// Calls fn(i) for i in [0, n) on `jobs` threads. The first exception (lowest
// index) is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

template <class Real>
bool feature_cache_applies(const KnowledgeState<Real>& state, const MetaTestConfig& cfg) {
  if (!cfg.freeze_meta) return false;
  const auto head = state.net.layer_param_ids(LayerTag::Head);
  if (state.partition.task_ids != std::set<std::string>(head.begin(), head.end())) return false;
  std::vector<DropoutSpec> specs = state.meta_dropout;
  if (cfg.task_dropout) specs.push_back(*cfg.task_dropout);
  return only_flatten_masks(specs);
}

template <class Real>
Tensor<Real> backbone_features(const Network<Real>& net, const Tensor<Real>& images) {
  constexpr std::size_t kChunk = 128;
  const std::size_t n = images.dim(0);
  const std::size_t per = images.numel() / n;
  const std::size_t d = net.feature_width();
  Tensor<Real> out(Shape{n, d});
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    Shape s = images.shape();
    s[0] = m;
    Tensor<Real> chunk(s);
    std::copy_n(images.data().begin() + start * per, m * per, chunk.data().begin());
    Tape<Real> tape;
    const ParamVars vars = net.bind(tape, {});
    const Var f = net.features(tape, vars, tape.constant(chunk), ForwardContext{});
    std::copy_n(tape.value(f).data().begin(), m * d, out.data().begin() + start * d);
  }
  return out;
}

// Mirrors meta_test step for step, with the backbone replaced by its cached
// output; only the head and flatten masks remain on the tape.
template <class Real>
std::vector<int> adapt_and_predict_cached(const KnowledgeState<Real>& state,
                                          const Tensor<Real>& support_features,
                                          std::span<const int> support_labels,
                                          const Tensor<Real>& query_features, std::size_t ways,
                                          const MetaTestConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<bool> present(ways, false);
  for (int l : support_labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= ways) throw ContractError("support label out of range");
    present[static_cast<std::size_t>(l)] = true;
  }
  if (std::find(present.begin(), present.end(), false) != present.end()) {
    throw ContractError("meta_test: support lacks a class");
  }
  Network<Real> net = state.net;
  net.reset_head(ways, derive_seed(seed, "meta-test/head"));
  std::vector<DropoutSpec> specs = state.meta_dropout;
  if (cfg.task_dropout) {
    net.validate_dropout(*cfg.task_dropout);
    specs.push_back(*cfg.task_dropout);
  }
  const auto head_ids = net.layer_param_ids(LayerTag::Head);
  ParamStore<Real> head;
  for (const auto& id : head_ids) head.emplace(id, net.params().at(id));

  Rng drop_rng(derive_seed(seed, "meta-test/dropout"));
  const ForwardContext ctx{Mode::Train, Stage::MetaTesting, specs, &drop_rng};
  const auto lr = static_cast<Real>(cfg.finetune_lr);
  for (std::size_t s = 0; s < cfg.finetune_steps; ++s) {
    Tape<Real> tape;
    ParamVars vars;
    for (const auto& [id, t] : head) vars.emplace(id, tape.parameter(id, t));
    Var f = net.apply_masks(tape, tape.constant(support_features), LayerTag::Flatten, ctx);
    const Var loss = softmax_cross_entropy(tape, net.head_logits(tape, vars, f), support_labels);
    const Gradients<Real> grads = tape.backward(loss);
    for (auto& [id, p] : head) {
      const Tensor<Real>& g = grads.at(id);
      for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * g[i];
    }
  }
  Tape<Real> tape;
  ParamVars vars;
  for (const auto& [id, t] : head) vars.emplace(id, tape.constant(t));
  const Var logits = net.head_logits(tape, vars, tape.constant(query_features));
  return argmax_rows(tape.value(logits));
}

template <class Real>
EvalReport evaluate_fewshot(const KnowledgeState<Real>& state, const Dataset& novel,
                            const EpisodeSpec& espec, const MetaTestConfig& mcfg,
                            std::size_t n_episodes, std::uint64_t seed, const EvalOptions& opts) {
  espec.validate();
  mcfg.validate();
  if (n_episodes == 0) throw ContractError("evaluate_fewshot: n_episodes must be positive");

  const bool cached = opts.feature_cache && feature_cache_applies(state, mcfg);
  Tensor<Real> table;
  if (cached) {
    std::vector<std::size_t> all(novel.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    table = backbone_features(state.net, gather_batch<Real>(novel, all).images);
  }

  EvalReport report;
  report.n_episodes = n_episodes;
  report.seed = seed;
  report.config_hash = opts.config_hash;
  report.per_episode_acc.assign(n_episodes, 0.0);

  parallel_for(n_episodes, opts.jobs, [&](std::size_t i) {
    try {
      Rng rng(derive_seed(seed, "eval-episode", i));
      const Episode ep = sample_episode(novel, espec, rng);
      const std::uint64_t adapt_seed = derive_seed(seed, "eval-adapt", i);
      std::vector<int> pred;
      if (cached) {
        pred = adapt_and_predict_cached(state, gather_rows(table, std::span(ep.support)),
                                        ep.support_labels, gather_rows(table, std::span(ep.query)),
                                        espec.ways, mcfg, adapt_seed);
      } else {
        const auto support = gather_batch<Real>(novel, ep.support, ep.support_labels);
        const auto query = gather_batch<Real>(novel, ep.query, ep.query_labels);
        const auto adapted = meta_test(state, support, espec.ways, mcfg, adapt_seed);
        pred = predict(adapted.net, query.images);
      }
      report.per_episode_acc[i] = accuracy(pred, ep.query_labels);
    } catch (const Error& e) {
      throw Error(e.code(), "episode " + std::to_string(i) + ": " + e.what());
    }
  });

  const MeanCi m = ci95(report.per_episode_acc);
  report.mean_acc = m.mean;
  report.ci95_halfwidth = m.halfwidth;
  return report;
}

std::string report_json(const EvalReport& r, bool per_episode) {
  nlohmann::ordered_json j;
  j["n_episodes"] = r.n_episodes;
  j["mean_acc"] = r.mean_acc;
  j["ci95"] = r.ci95_halfwidth;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  if (per_episode) j["per_episode_acc"] = r.per_episode_acc;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- ablation

std::string_view arm_name(Arm arm) noexcept {
  switch (arm) {
    case Arm::None: return "none";
    case Arm::M: return "M";
    case Arm::D: return "D";
    case Arm::MD: return "M&D";
  }
  return "?";
}

Arm parse_arm(std::string_view name) {
  for (Arm a : {Arm::None, Arm::M, Arm::D, Arm::MD})
    if (arm_name(a) == name) return a;
  throw ConfigError("unknown ablation arm '" + std::string(name) + "' (expected none, M, D, M&D)");
}

std::string placement_label(const std::set<LayerTag>& placement) {
  std::string groups;
  for (LayerTag t : {LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv3, LayerTag::Conv4}) {
    if (!placement.count(t)) continue;
    if (!groups.empty()) groups += "&";
    groups += tag_name(t).substr(4);
  }
  std::string out;
  if (!groups.empty()) out = "on group " + groups;
  if (placement.count(LayerTag::Flatten)) out += out.empty() ? "on last flatten layer" : " & last flatten layer";
  if (placement.count(LayerTag::Head)) out += out.empty() ? "on head" : " & head";
  return out.empty() ? "none" : out;
}

std::vector<CellResult> run_ablation(const std::vector<AblationCell>& cells,
                                     const std::vector<std::uint64_t>& seeds,
                                     const CellRunner& runner, std::size_t jobs) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<CellResult> results(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    results[c].cell = cells[c];
    results[c].seeds.resize(seeds.size());
  }
  parallel_for(cells.size() * seeds.size(), jobs, [&](std::size_t k) {
    const std::size_t c = k / seeds.size(), s = k % seeds.size();
    SeedOutcome& out = results[c].seeds[s];
    out.seed = seeds[s];
    try {
      out.report = runner(cells[c], seeds[s]);
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  });
  for (CellResult& r : results) {
    std::vector<double> means;
    for (const SeedOutcome& o : r.seeds)
      if (o.report) means.push_back(o.report->mean_acc);
    if (!means.empty()) r.aggregate = ci95(means);
  }
  return results;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string ablation_csv(const std::vector<CellResult>& results) {
  std::ostringstream os;
  os << "regime,arm,kind,placement,batch_size,seed,mean_acc,ci95,status,config_hash\n";
  for (const CellResult& r : results) {
    const std::string prefix = std::string(regime_name(r.cell.regime)) + "," +
                               csv_field(std::string(arm_name(r.cell.arm))) + "," +
                               std::string(kind_name(r.cell.kind)) + "," +
                               csv_field(placement_label(r.cell.placement)) + "," +
                               std::to_string(r.cell.batch_size) + ",";
    // every seed of a cell shares one configuration
    std::string hash;
    for (const SeedOutcome& o : r.seeds)
      if (o.report && !o.report->config_hash.empty()) {
        hash = o.report->config_hash;
        break;
      }
    for (const SeedOutcome& o : r.seeds) {
      os << prefix << o.seed << ",";
      if (o.report) {
        os << fixed6(o.report->mean_acc) << "," << fixed6(o.report->ci95_halfwidth) << ",ok";
      } else {
        os << ",," << csv_field("error: " + o.error);
      }
      os << "," << hash << "\n";
    }
    os << prefix << "mean,";
    if (r.aggregate) {
      os << fixed6(r.aggregate->mean) << "," << fixed6(r.aggregate->halfwidth) << ",ok";
    } else {
      os << ",,error: all seeds failed";
    }
    os << "," << hash << "\n";
  }
  return os.str();
}

#define FSML_INSTANTIATE_EVAL(R)                                                              \
  template bool feature_cache_applies<R>(const KnowledgeState<R>&, const MetaTestConfig&);    \
  template std::vector<int> adapt_and_predict_cached<R>(                                      \
      const KnowledgeState<R>&, const Tensor<R>&, std::span<const int>, const Tensor<R>&,     \
      std::size_t, const MetaTestConfig&, std::uint64_t);                                     \
  template Tensor<R> backbone_features<R>(const Network<R>&, const Tensor<R>&);               \
  template EvalReport evaluate_fewshot<R>(const KnowledgeState<R>&, const Dataset&,           \
                                          const EpisodeSpec&, const MetaTestConfig&,          \
                                          std::size_t, std::uint64_t, const EvalOptions&);

FSML_INSTANTIATE_EVAL(float)
FSML_INSTANTIATE_EVAL(double)

}  // namespace fsml
