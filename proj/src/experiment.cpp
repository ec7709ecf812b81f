#include "fsml/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "binio.hpp"

namespace fsml {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("FSML_LOG");
  if (!env) return LogLevel::Info;
  const std::string v(env);
  if (v == "error") return LogLevel::Error;
  if (v == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

void log(LogLevel level, const std::string& msg) {
  static const LogLevel threshold = log_level();
  if (level > threshold) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::fprintf(stderr, "[fsml] %s\n", msg.c_str());
}

std::uint64_t pick_seed(const ExperimentConfig& cfg, const CommandOptions& opt) {
  return opt.seed ? *opt.seed : cfg.seeds.front();
}

fs::path checkpoint_path(const CommandOptions& opt) {
  return opt.checkpoint ? fs::path(*opt.checkpoint) : fs::path(opt.out) / "checkpoint.fsml";
}

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p.replace_extension(".meta.json");
  return p;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

// Removes every registered file unless commit() was called.
class OutputGuard {
 public:
  void add(fs::path p) { paths_.push_back(std::move(p)); }
  void commit() { paths_.clear(); }
  ~OutputGuard() {
    for (const auto& p : paths_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

 private:
  std::vector<fs::path> paths_;
};

std::string fmt_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

Assets load_assets(const ExperimentConfig& cfg) {
  Assets a;
  if (cfg.dataset.path) {
    a.full = load_dataset(*cfg.dataset.path);
  } else if (cfg.dataset.synthetic) {
    a.full = gen_synthetic(*cfg.dataset.synthetic);
  } else {
    throw ConfigError("config names no dataset");
  }
  a.views = split_classes(a.full, cfg.split.resolve(a.full.n_classes()));
  return a;
}

NetworkSpec network_spec(const ExperimentConfig& cfg, const Assets& assets) {
  NetworkSpec s;
  s.widths = cfg.widths;
  s.input_shape = assets.full.image_shape;
  s.n_classes = cfg.regime == Regime::PretrainFinetune ? assets.views.base.n_classes()
                                                       : cfg.train_episode.ways;
  s.head = cfg.head;
  s.cosine_scale = cfg.cosine_scale;
  return s;
}

KnowledgeState<float> train_model(const ExperimentConfig& cfg, const Assets& assets,
                                  std::uint64_t seed) {
  auto state = make_state(Network<float>::build_conv4(network_spec(cfg, assets),
                                                      derive_seed(seed, "network")),
                          cfg.meta_tags);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  if (cfg.meta_test.task_dropout) state.net.validate_dropout(*cfg.meta_test.task_dropout);
  if (cfg.regime == Regime::PretrainFinetune) {
    state = meta_train_pretrain(assets.views.base, std::move(state), tc);
  } else {
    EpisodeSampler<float> sampler(assets.views.base, cfg.train_episode);
    state = meta_train_episodic(sampler, std::move(state), tc);
  }
  for (const EpochLog& e : state.log) {
    log(LogLevel::Debug, "epoch " + std::to_string(e.epoch) + " meta_loss " + fmt_loss(e.meta_loss));
  }
  return state;
}

std::string cmd_train(const ExperimentConfig& cfg, const CommandOptions& opt) {
  const std::uint64_t seed = pick_seed(cfg, opt);
  const Assets assets = load_assets(cfg);
  log(LogLevel::Info, "training " + std::string(regime_name(cfg.regime)) + " with seed " +
                          std::to_string(seed));
  const KnowledgeState<float> state = train_model(cfg, assets, seed);

  const fs::path ckpt = checkpoint_path(opt);
  const fs::path dir = fs::path(opt.out);
  ensure_dir(dir);
  if (ckpt.has_parent_path()) ensure_dir(ckpt.parent_path());
  OutputGuard guard;

  const std::string hash = config_hash(cfg);
  std::string log_text;
  for (const EpochLog& e : state.log) {
    ojson j;
    j["config_hash"] = hash;
    j["epoch"] = e.epoch;
    j["meta_loss"] = e.meta_loss;
    j["task_loss"] = e.task_loss ? ojson(*e.task_loss) : ojson(nullptr);
    j["wall_ms"] = e.wall_ms;
    log_text += j.dump() + "\n";
  }
  ojson meta;
  meta["config_hash"] = hash;
  meta["arch_hash"] = arch_hash(state.net.spec(), cfg.meta_tags);
  meta["seed"] = seed;
  meta["regime"] = regime_name(cfg.regime);

  guard.add(ckpt);
  write_checkpoint(ckpt.string(), state.net.params());
  guard.add(sidecar_path(ckpt));
  binio::write_text_atomic(sidecar_path(ckpt).string(), meta.dump(2) + "\n");
  guard.add(dir / "train_log.jsonl");
  binio::write_text_atomic((dir / "train_log.jsonl").string(), log_text);
  guard.commit();

  std::ostringstream os;
  os << "final meta_loss " << (state.log.empty() ? std::string("n/a") : fmt_loss(state.log.back().meta_loss))
     << "\ncheckpoint " << ckpt.string() << "\n";
  return os.str();
}

std::string cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opt) {
  const std::uint64_t seed = pick_seed(cfg, opt);
  const Assets assets = load_assets(cfg);
  const NetworkSpec spec = network_spec(cfg, assets);
  const fs::path ckpt = checkpoint_path(opt);

  const fs::path side = sidecar_path(ckpt);
  const std::string want = arch_hash(spec, cfg.meta_tags);
  if (!opt.force) {
    if (!fs::exists(side)) {
      throw LoadError("no architecture record '" + side.string() + "' next to the checkpoint (use --force)");
    }
    const auto bytes = binio::read_file(side.string());
    std::string have;
    try {
      have = nlohmann::json::parse(bytes.begin(), bytes.end()).at("arch_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(side.string() + ": " + e.what(), 0);
    }
    if (have != want) {
      throw LoadError("checkpoint architecture hash " + have + " does not match the config (" + want +
                      "); use --force to override");
    }
  }

  Network<float> net = Network<float>::build_conv4(spec, 0);
  load_params(net, read_checkpoint(ckpt.string()));
  const KnowledgeState<float> state = make_state(std::move(net), cfg.meta_tags);

  EvalOptions eo;
  eo.jobs = opt.jobs;
  eo.config_hash = config_hash(cfg);
  const EvalReport report = evaluate_fewshot(state, assets.views.novel, cfg.episode, cfg.meta_test,
                                             cfg.n_eval_episodes, seed, eo);
  ensure_dir(opt.out);
  binio::write_text_atomic((fs::path(opt.out) / "report.json").string(), report_json(report));
  return format_percent(report.mean_acc, report.ci95_halfwidth) + "\n";
}

namespace {

ExperimentConfig cell_config(const ExperimentConfig& base, const AblationConfig& ab,
                             const AblationCell& cell) {
  ExperimentConfig c = base;
  c.ablation.reset();
  c.regime = cell.regime;
  c.train.batch_size = cell.batch_size;
  c.train.meta_dropout.reset();
  c.meta_test.task_dropout.reset();
  if (cell.arm == Arm::M || cell.arm == Arm::MD) {
    DropoutSpec d = ab.meta_dropout;
    d.kind = cell.kind;
    d.placements = cell.placement;
    d.stage = SpecStage::MetaTraining;
    c.train.meta_dropout = d;
  }
  if (cell.arm == Arm::D || cell.arm == Arm::MD) c.meta_test.task_dropout = ab.task_dropout;
  return c;
}

// Fields that influence training only; cells equal here share one trained model.
std::string training_key(const ExperimentConfig& c, std::uint64_t seed) {
  ExperimentConfig k = c;
  k.meta_test = MetaTestConfig{};
  k.episode = EpisodeSpec{};
  k.n_eval_episodes = 1;
  k.seeds = {seed};
  return config_json(k);
}

}  // namespace

std::string cmd_ablate(const ExperimentConfig& cfg, const CommandOptions& opt) {
  if (!cfg.ablation) throw ConfigError("config has no 'ablation' section");
  const AblationConfig& ab = *cfg.ablation;
  const std::vector<std::uint64_t> seeds = opt.seed ? std::vector<std::uint64_t>{*opt.seed} : cfg.seeds;
  const Assets assets = load_assets(cfg);
  const std::vector<AblationCell> cells = ab.cells();
  log(LogLevel::Info, "ablation: " + std::to_string(cells.size()) + " cells x " +
                          std::to_string(seeds.size()) + " seeds");

  using Trained = std::shared_ptr<const KnowledgeState<float>>;
  std::mutex mu;
  std::map<std::string, std::shared_future<Trained>> trained;

  const CellRunner runner = [&](const AblationCell& cell, std::uint64_t seed) {
    const ExperimentConfig c = cell_config(cfg, ab, cell);
    const std::string key = training_key(c, seed);
    std::shared_future<Trained> fut;
    std::promise<Trained> mine;
    bool owner = false;
    {
      std::lock_guard lock(mu);
      auto it = trained.find(key);
      if (it == trained.end()) {
        fut = mine.get_future().share();
        trained.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        mine.set_value(std::make_shared<const KnowledgeState<float>>(train_model(c, assets, seed)));
      } catch (...) {
        mine.set_exception(std::current_exception());
      }
    }
    const Trained state = fut.get();
    EvalOptions eo;
    eo.config_hash = config_hash(c);
    EvalReport r = evaluate_fewshot(*state, assets.views.novel, c.episode, c.meta_test,
                                    c.n_eval_episodes, seed, eo);
    log(LogLevel::Info, std::string(regime_name(cell.regime)) + " " + std::string(arm_name(cell.arm)) +
                            " " + placement_label(cell.placement) + " seed " + std::to_string(seed) +
                            ": " + format_percent(r.mean_acc, r.ci95_halfwidth));
    return r;
  };

  const std::vector<CellResult> results = run_ablation(cells, seeds, runner, opt.jobs);
  const std::string csv = ablation_csv(results);
  ensure_dir(opt.out);
  binio::write_text_atomic((fs::path(opt.out) / "ablation.csv").string(), csv);

  std::ostringstream os;
  for (const CellResult& r : results) {
    os << regime_name(r.cell.regime) << "  " << arm_name(r.cell.arm) << "  "
       << kind_name(r.cell.kind) << "  " << placement_label(r.cell.placement) << "  bs "
       << r.cell.batch_size << ":  "
       << (r.aggregate ? format_percent(r.aggregate->mean, r.aggregate->halfwidth) : "failed") << "\n";
  }
  return os.str();
}

std::string cmd_gen_data(const ExperimentConfig& cfg, const CommandOptions& opt) {
  if (!cfg.dataset.synthetic) throw ConfigError("gen-data needs a 'dataset.synthetic' spec");
  SyntheticSpec spec = *cfg.dataset.synthetic;
  if (opt.seed) spec.seed = *opt.seed;
  const Dataset ds = gen_synthetic(spec);
  fs::path out(opt.out);
  if (out.extension() != ".fsds") out /= "dataset.fsds";
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  save_dataset(out.string(), ds);
  return "wrote " + out.string() + ": " + std::to_string(ds.n_classes()) + " classes, " +
         std::to_string(ds.size()) + " samples\n";
}

oracle::GateReport cmd_oracle_check(const oracle::Faults& faults) { return oracle::run_gates(faults); }

}  // namespace fsml
