#include "fsml/config.hpp"

#include <cstdio>

#include <json.hpp>

#include "binio.hpp"

namespace fsml {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// A JSON object whose keys must all be consumed; finish() rejects leftovers.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  Section sub(const std::string& key) { return Section(at(key), where(key)); }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError("config " + (key.empty() ? (path_.empty() ? "root" : path_) : where(key)) +
                      ": " + msg);
  }

  std::size_t size(const std::string& key, std::size_t def) {
    if (!has(key)) return def;
    return as_size(at(key), key);
  }

  std::size_t as_size(const json& v, const std::string& key) const {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) fail(key, "expected a non-negative integer");
    return v.get<std::size_t>();
  }

  std::uint64_t u64(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    const json& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      fail(key, "expected an unsigned integer");
    }
    return v.get<std::uint64_t>();
  }

  double real(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = at(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }

  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  std::string str(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  std::vector<std::string> strings(const std::string& key) {
    const json& v = at(key);
    if (!v.is_array()) fail(key, "expected an array of strings");
    std::vector<std::string> out;
    for (const json& e : v) {
      if (!e.is_string()) fail(key, "expected an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  // Wraps a parse helper so its ConfigError names this key.
  template <class Fn>
  auto parsed(const std::string& key, Fn fn) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      fail(key, e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(it.key(), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::set<LayerTag> tags_of(Section& s, const std::string& key) {
  const auto names = s.strings(key);
  return s.parsed(key, [&] { return parse_tags(names); });
}

DropoutSpec parse_dropout(Section s, SpecStage default_stage) {
  DropoutSpec d;
  d.kind = s.parsed("kind", [&] { return parse_kind(s.str("kind", "standard")); });
  d.keep_prob = s.real("keep_prob", 1.0);
  d.block_size = s.size("block_size", d.kind == DropoutKind::DropBlock ? 7 : 1);
  if (s.has("placements")) d.placements = tags_of(s, "placements");
  d.stage = s.parsed("stage", [&] {
    return s.has("stage") ? parse_spec_stage(s.str("stage", "")) : default_stage;
  });
  s.finish();
  s.parsed("", [&] { d.validate(); return 0; });
  if (d.placements.empty()) s.fail("placements", "at least one placement is required");
  return d;
}

SyntheticSpec parse_synthetic(Section s) {
  SyntheticSpec sp;
  sp.n_classes = s.size("n_classes", sp.n_classes);
  sp.samples_per_class = s.size("samples_per_class", sp.samples_per_class);
  sp.channels = s.size("channels", sp.channels);
  sp.image_extent = s.size("image_extent", sp.image_extent);
  sp.cluster_std = s.real("cluster_std", sp.cluster_std);
  sp.class_separation = s.real("class_separation", sp.class_separation);
  sp.seed = s.u64("seed", sp.seed);
  sp.template_grid = s.size("template_grid", sp.template_grid);
  s.finish();
  s.parsed("", [&] { sp.validate(); return 0; });
  return sp;
}

std::vector<std::uint32_t> class_list(Section& s, const std::string& key) {
  const json& v = s.at(key);
  if (!v.is_array()) s.fail(key, "expected an array of class ids");
  std::vector<std::uint32_t> out;
  for (const json& e : v) out.push_back(static_cast<std::uint32_t>(s.as_size(e, key)));
  return out;
}

EpisodeSpec parse_episode(Section s, bool with_queries) {
  EpisodeSpec e;
  e.ways = s.size("ways", e.ways);
  e.shots = s.size("shots", e.shots);
  if (with_queries) e.queries = s.size("queries", e.queries);
  s.finish();
  s.parsed("", [&] { e.validate(); return 0; });
  return e;
}

ojson dropout_json(const DropoutSpec& d) {
  ojson j;
  j["kind"] = kind_name(d.kind);
  j["keep_prob"] = d.keep_prob;
  j["block_size"] = d.block_size;
  std::vector<std::string> p;
  for (LayerTag t : d.placements) p.emplace_back(tag_name(t));
  j["placements"] = p;
  j["stage"] = spec_stage_name(d.stage);
  return j;
}

ojson tags_json(const std::set<LayerTag>& tags) {
  std::vector<std::string> p;
  for (LayerTag t : tags) p.emplace_back(tag_name(t));
  return p;
}

}  // namespace

SplitSpec SplitConfig::resolve(std::size_t n_classes) const {
  SplitSpec s = counts ? SplitSpec::contiguous((*counts)[0], (*counts)[1], (*counts)[2])
                       : *explicit_classes;
  for (const auto* set : {&s.base_classes, &s.val_classes, &s.novel_classes})
    for (std::uint32_t c : *set)
      if (c >= n_classes) {
        throw ConfigError("split references class " + std::to_string(c) + " but the dataset has " +
                          std::to_string(n_classes));
      }
  return s;
}

std::vector<AblationCell> AblationConfig::cells() const {
  std::vector<AblationCell> out;
  for (Regime r : regimes)
    for (std::size_t b : batch_sizes)
      for (DropoutKind k : kinds)
        for (const auto& p : placements)
          for (Arm a : arms) out.push_back(AblationCell{r, a, k, p, b});
  return out;
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Section root(doc, "");
  cfg.regime = root.parsed("regime", [&] { return parse_regime(root.str("regime", "pretrain_finetune")); });

  if (!root.has("dataset")) root.fail("dataset", "missing");
  {
    Section ds = root.sub("dataset");
    if (ds.has("path") == ds.has("synthetic")) ds.fail("", "give exactly one of 'path' or 'synthetic'");
    if (ds.has("path")) cfg.dataset.path = ds.str("path", "");
    if (ds.has("synthetic")) cfg.dataset.synthetic = parse_synthetic(ds.sub("synthetic"));
    ds.finish();
  }

  if (root.has("split")) {
    Section sp = root.sub("split");
    const bool lists = sp.has("base_classes") || sp.has("val_classes") || sp.has("novel_classes");
    if (lists) {
      SplitSpec s;
      s.base_classes = class_list(sp, "base_classes");
      if (sp.has("val_classes")) s.val_classes = class_list(sp, "val_classes");
      s.novel_classes = class_list(sp, "novel_classes");
      cfg.split.explicit_classes = s;
    } else {
      cfg.split.counts = std::array<std::size_t, 3>{sp.size("base", 64), sp.size("val", 16),
                                                     sp.size("novel", 20)};
    }
    sp.finish();
  } else {
    cfg.split.counts = std::array<std::size_t, 3>{64, 16, 20};
  }

  if (root.has("network")) {
    Section n = root.sub("network");
    if (n.has("widths")) {
      const json& w = n.at("widths");
      if (!w.is_array() || w.size() != 4) n.fail("widths", "expected four channel counts");
      for (std::size_t i = 0; i < 4; ++i) {
        cfg.widths[i] = n.as_size(w[i], "widths");
        if (cfg.widths[i] == 0) n.fail("widths", "channel counts must be positive");
      }
    }
    const std::string head = n.str("head", "cosine");
    if (head == "cosine") cfg.head = HeadKind::Cosine;
    else if (head == "linear") cfg.head = HeadKind::Linear;
    else n.fail("head", "expected 'linear' or 'cosine'");
    cfg.cosine_scale = n.real("cosine_scale", 10.0);
    if (!(cfg.cosine_scale > 0.0)) n.fail("cosine_scale", "must be positive");
    n.finish();
  }

  if (root.has("partition")) {
    Section p = root.sub("partition");
    if (p.has("meta_tags")) {
      cfg.meta_tags = tags_of(p, "meta_tags");
      if (cfg.meta_tags.count(LayerTag::Head)) {
        p.fail("meta_tags", "the head is always task-knowledge and cannot be a meta tag");
      }
    }
    p.finish();
  }

  if (root.has("train")) {
    Section t = root.sub("train");
    TrainConfig& c = cfg.train;
    c.M = t.size("M", c.M);
    c.N = t.size("N", c.N);
    c.inner_steps = t.size("inner_steps", c.inner_steps);
    c.inner_lr = t.real("inner_lr", c.inner_lr);
    c.meta_lr = t.real("meta_lr", c.meta_lr);
    c.momentum = t.real("momentum", c.momentum);
    c.meta_epochs = t.size("meta_epochs", c.meta_epochs);
    c.batch_size = t.size("batch_size", c.batch_size);
    const std::string hi = t.str("head_init", "persistent");
    if (hi == "persistent") c.head_init = HeadInit::Persistent;
    else if (hi == "redraw") c.head_init = HeadInit::Redraw;
    else t.fail("head_init", "expected 'persistent' or 'redraw'");
    if (t.has("meta_dropout") && !t.at("meta_dropout").is_null()) {
      c.meta_dropout = parse_dropout(t.sub("meta_dropout"), SpecStage::MetaTraining);
    }
    t.finish();
    t.parsed("", [&] { c.validate(); return 0; });
  }

  if (root.has("train_episode")) cfg.train_episode = parse_episode(root.sub("train_episode"), false);
  cfg.train_episode.queries = cfg.train.N;

  if (root.has("meta_test")) {
    Section m = root.sub("meta_test");
    MetaTestConfig& c = cfg.meta_test;
    c.Q = m.size("Q", c.Q);
    c.freeze_meta = m.boolean("freeze_meta", c.freeze_meta);
    c.finetune_steps = m.size("finetune_steps", c.finetune_steps);
    c.finetune_lr = m.real("finetune_lr", c.finetune_lr);
    if (m.has("task_dropout") && !m.at("task_dropout").is_null()) {
      c.task_dropout = parse_dropout(m.sub("task_dropout"), SpecStage::MetaTesting);
    }
    m.finish();
    m.parsed("", [&] { c.validate(); return 0; });
  }

  if (root.has("episode")) cfg.episode = parse_episode(root.sub("episode"), true);
  cfg.n_eval_episodes = root.size("n_eval_episodes", cfg.n_eval_episodes);
  if (cfg.n_eval_episodes == 0) root.fail("n_eval_episodes", "must be positive");

  if (root.has("seeds")) {
    const json& s = root.at("seeds");
    if (!s.is_array() || s.empty()) root.fail("seeds", "expected a non-empty array");
    cfg.seeds.clear();
    for (const json& e : s) cfg.seeds.push_back(root.as_size(e, "seeds"));
  }

  if (root.has("ablation")) {
    Section a = root.sub("ablation");
    AblationConfig ab;
    if (a.has("arms")) {
      ab.arms.clear();
      for (const auto& n : a.strings("arms")) ab.arms.push_back(a.parsed("arms", [&] { return parse_arm(n); }));
    }
    if (a.has("placements")) {
      const json& p = a.at("placements");
      if (!p.is_array() || p.empty()) a.fail("placements", "expected a non-empty array of tag lists");
      for (const json& e : p) {
        if (!e.is_array()) a.fail("placements", "each placement is an array of tags");
        std::vector<std::string> names;
        for (const json& n : e) {
          if (!n.is_string()) a.fail("placements", "tags must be strings");
          names.push_back(n.get<std::string>());
        }
        ab.placements.push_back(a.parsed("placements", [&] { return parse_tags(names); }));
      }
    } else {
      ab.placements = {{LayerTag::Conv3, LayerTag::Conv4}};
    }
    if (a.has("kinds")) {
      for (const auto& n : a.strings("kinds")) ab.kinds.push_back(a.parsed("kinds", [&] { return parse_kind(n); }));
    } else {
      ab.kinds = {DropoutKind::DropBlock};
    }
    if (a.has("batch_sizes")) {
      const json& b = a.at("batch_sizes");
      if (!b.is_array() || b.empty()) a.fail("batch_sizes", "expected a non-empty array");
      for (const json& e : b) ab.batch_sizes.push_back(a.as_size(e, "batch_sizes"));
    } else {
      ab.batch_sizes = {cfg.train.batch_size};
    }
    if (a.has("regimes")) {
      for (const auto& n : a.strings("regimes")) ab.regimes.push_back(a.parsed("regimes", [&] { return parse_regime(n); }));
    } else {
      ab.regimes = {cfg.regime};
    }
    if (a.has("meta_dropout")) {
      ab.meta_dropout = parse_dropout(a.sub("meta_dropout"), SpecStage::MetaTraining);
    } else {
      ab.meta_dropout = DropoutSpec{DropoutKind::DropBlock, 0.9, 3, {LayerTag::Conv3, LayerTag::Conv4},
                                    SpecStage::MetaTraining};
    }
    if (a.has("task_dropout")) {
      ab.task_dropout = parse_dropout(a.sub("task_dropout"), SpecStage::MetaTesting);
    } else {
      ab.task_dropout = DropoutSpec{DropoutKind::Standard, 0.9, 1, {LayerTag::Flatten}, SpecStage::MetaTesting};
    }
    if (ab.arms.empty() || ab.kinds.empty() || ab.regimes.empty()) a.fail("", "every axis needs at least one value");
    a.finish();
    cfg.ablation = ab;
  }
  root.finish();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  const auto bytes = binio::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

std::string config_json(const ExperimentConfig& cfg) {
  ojson j;
  j["regime"] = regime_name(cfg.regime);
  ojson ds;
  if (cfg.dataset.path) ds["path"] = *cfg.dataset.path;
  if (cfg.dataset.synthetic) {
    const SyntheticSpec& s = *cfg.dataset.synthetic;
    ds["synthetic"] = {{"n_classes", s.n_classes},         {"samples_per_class", s.samples_per_class},
                       {"channels", s.channels},           {"image_extent", s.image_extent},
                       {"cluster_std", s.cluster_std},     {"class_separation", s.class_separation},
                       {"seed", s.seed},                   {"template_grid", s.template_grid}};
  }
  j["dataset"] = ds;
  if (cfg.split.counts) {
    j["split"] = {{"base", (*cfg.split.counts)[0]}, {"val", (*cfg.split.counts)[1]}, {"novel", (*cfg.split.counts)[2]}};
  } else {
    const SplitSpec& s = *cfg.split.explicit_classes;
    j["split"] = {{"base_classes", s.base_classes}, {"val_classes", s.val_classes}, {"novel_classes", s.novel_classes}};
  }
  j["network"] = {{"widths", cfg.widths},
                  {"head", cfg.head == HeadKind::Cosine ? "cosine" : "linear"},
                  {"cosine_scale", cfg.cosine_scale}};
  j["partition"] = {{"meta_tags", tags_json(cfg.meta_tags)}};
  const TrainConfig& t = cfg.train;
  ojson tj = {{"M", t.M}, {"N", t.N}, {"inner_steps", t.inner_steps}, {"inner_lr", t.inner_lr},
              {"meta_lr", t.meta_lr}, {"momentum", t.momentum}, {"meta_epochs", t.meta_epochs},
              {"batch_size", t.batch_size},
              {"head_init", t.head_init == HeadInit::Persistent ? "persistent" : "redraw"}};
  tj["meta_dropout"] = t.meta_dropout ? dropout_json(*t.meta_dropout) : ojson(nullptr);
  j["train"] = tj;
  j["train_episode"] = {{"ways", cfg.train_episode.ways}, {"shots", cfg.train_episode.shots}};
  const MetaTestConfig& m = cfg.meta_test;
  ojson mj = {{"Q", m.Q}, {"freeze_meta", m.freeze_meta}, {"finetune_steps", m.finetune_steps},
              {"finetune_lr", m.finetune_lr}};
  mj["task_dropout"] = m.task_dropout ? dropout_json(*m.task_dropout) : ojson(nullptr);
  j["meta_test"] = mj;
  j["episode"] = {{"ways", cfg.episode.ways}, {"shots", cfg.episode.shots}, {"queries", cfg.episode.queries}};
  j["n_eval_episodes"] = cfg.n_eval_episodes;
  j["seeds"] = cfg.seeds;
  if (cfg.ablation) {
    const AblationConfig& a = *cfg.ablation;
    ojson aj;
    std::vector<std::string> arms, kinds, regimes;
    for (Arm x : a.arms) arms.emplace_back(arm_name(x));
    for (DropoutKind x : a.kinds) kinds.emplace_back(kind_name(x));
    for (Regime x : a.regimes) regimes.emplace_back(regime_name(x));
    ojson placements = ojson::array();
    for (const auto& p : a.placements) placements.push_back(tags_json(p));
    aj["arms"] = arms;
    aj["placements"] = placements;
    aj["kinds"] = kinds;
    aj["batch_sizes"] = a.batch_sizes;
    aj["regimes"] = regimes;
    aj["meta_dropout"] = dropout_json(a.meta_dropout);
    aj["task_dropout"] = dropout_json(a.task_dropout);
    j["ablation"] = aj;
  }
  return j.dump();
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return to_hex(fnv1a64(config_json(cfg))); }

std::string arch_hash(const NetworkSpec& spec, const std::set<LayerTag>& meta_tags) {
  ojson j;
  j["widths"] = spec.widths;
  j["input_shape"] = spec.input_shape;
  j["n_classes"] = spec.n_classes;
  j["head"] = spec.head == HeadKind::Cosine ? "cosine" : "linear";
  j["cosine_scale"] = spec.cosine_scale;
  j["meta_tags"] = tags_json(meta_tags);
  return to_hex(fnv1a64(j.dump()));
}

}  // namespace fsml
