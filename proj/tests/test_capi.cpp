// Exercises the shared library through its C interface only.
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>

#include "fsml/fsml.h"

namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "regime": "pretrain_finetune",
  "dataset": {"synthetic": {"n_classes": 12, "samples_per_class": 6, "image_extent": 16, "cluster_std": 0.2, "seed": 1}},
  "split": {"base": 6, "val": 2, "novel": 4},
  "network": {"widths": [4, 4, 4, 4]},
  "train": {"meta_epochs": 2, "batch_size": 12, "meta_lr": 0.05, "momentum": 0.9},
  "meta_test": {"finetune_steps": 5},
  "episode": {"ways": 3, "shots": 1, "queries": 3},
  "n_eval_episodes": 20
})";

struct ExpDeleter {
  void operator()(fsml_experiment* e) const { fsml_experiment_destroy(e); }
};
using ExpPtr = std::unique_ptr<fsml_experiment, ExpDeleter>;

ExpPtr experiment(const std::string& json = kTinyConfig) {
  fsml_experiment* e = nullptr;
  REQUIRE(fsml_experiment_from_json(json.c_str(), &e) == FSML_OK);
  return ExpPtr(e);
}

std::string take(char* s) {
  std::string out = s ? s : "";
  fsml_free_string(s);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& leaf = "") const { return (leaf.empty() ? path : path / leaf).string(); }
};

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(fsml_version()).size() > 0);
  CHECK(std::string(fsml_status_name(FSML_OK)) == "ok");
  CHECK(std::string(fsml_status_name(FSML_ERR_CONFIG)) == "configuration");
  CHECK(std::string(fsml_status_name(FSML_ERR_INVALID_ARGUMENT)) == "invalid_argument");
}

TEST_CASE("invalid arguments and configurations are reported") {
  fsml_experiment* e = nullptr;
  CHECK(fsml_experiment_from_json(nullptr, &e) == FSML_ERR_INVALID_ARGUMENT);
  CHECK(std::string(fsml_last_error()).find("null") != std::string::npos);
  CHECK(fsml_train(nullptr, nullptr) == FSML_ERR_INVALID_ARGUMENT);

  CHECK(fsml_experiment_from_json("{\"dataset\": {\"path\": \"x\"}, \"bogus\": 1}", &e) == FSML_ERR_CONFIG);
  CHECK(e == nullptr);
  CHECK(std::string(fsml_last_error()).find("bogus") != std::string::npos);

  CHECK(fsml_experiment_from_json(
            R"({"dataset": {"path": "x"}, "partition": {"meta_tags": ["conv1", "head"]}})", &e) == FSML_ERR_CONFIG);
  CHECK(fsml_experiment_from_json("not json", &e) == FSML_ERR_CONFIG);
  CHECK(fsml_experiment_from_file("/nonexistent/config.json", &e) == FSML_ERR_IO);

  auto exp = experiment();
  CHECK(fsml_experiment_set_jobs(exp.get(), 0) == FSML_ERR_INVALID_ARGUMENT);
  CHECK(fsml_experiment_set_out(exp.get(), "") == FSML_ERR_INVALID_ARGUMENT);
}

TEST_CASE("config hash is stable and seed independent") {
  auto a = experiment();
  auto b = experiment();
  char* ha = nullptr;
  char* hb = nullptr;
  REQUIRE(fsml_experiment_config_hash(a.get(), &ha) == FSML_OK);
  fsml_experiment_set_seed(b.get(), 99);
  REQUIRE(fsml_experiment_config_hash(b.get(), &hb) == FSML_OK);
  const std::string sa = take(ha), sb = take(hb);
  CHECK(sa.size() == 16);
  CHECK(sa == sb);
}

TEST_CASE("generated dataset can be read back") {
  TempDir dir("fsml_capi_gen");
  auto exp = experiment();
  fsml_experiment_set_out(exp.get(), dir.str().c_str());
  char* summary = nullptr;
  REQUIRE(fsml_gen_data(exp.get(), &summary) == FSML_OK);
  CHECK(take(summary).find("dataset.fsds") != std::string::npos);

  fsml_dataset* ds = nullptr;
  REQUIRE(fsml_dataset_load(dir.str("dataset.fsds").c_str(), &ds) == FSML_OK);
  CHECK(fsml_dataset_size(ds) == 72);
  CHECK(fsml_dataset_classes(ds) == 12);
  size_t shape[3] = {0, 0, 0};
  REQUIRE(fsml_dataset_image_shape(ds, shape) == FSML_OK);
  CHECK(shape[0] == 1);
  CHECK(shape[1] == 16);
  CHECK(shape[2] == 16);
  uint32_t label = 99;
  CHECK(fsml_dataset_label(ds, 0, &label) == FSML_OK);
  CHECK(label < 12);
  CHECK(fsml_dataset_label(ds, 72, &label) == FSML_ERR_INDEX);
  fsml_dataset_destroy(ds);

  CHECK(fsml_dataset_load(dir.str("missing.fsds").c_str(), &ds) == FSML_ERR_IO);
}

TEST_CASE("train and eval are reproducible for a fixed seed") {
  TempDir a("fsml_capi_a"), b("fsml_capi_b");
  for (const TempDir* d : {&a, &b}) {
    auto exp = experiment();
    fsml_experiment_set_seed(exp.get(), 7);
    fsml_experiment_set_out(exp.get(), d->str().c_str());
    char* summary = nullptr;
    REQUIRE(fsml_train(exp.get(), &summary) == FSML_OK);
    CHECK(take(summary).find("final meta_loss") != std::string::npos);
    REQUIRE(fsml_eval(exp.get(), &summary) == FSML_OK);
    CHECK(take(summary).find("\xC2\xB1") != std::string::npos);
  }
  CHECK(slurp(a.path / "checkpoint.fsml") == slurp(b.path / "checkpoint.fsml"));
  CHECK(slurp(a.path / "report.json") == slurp(b.path / "report.json"));
  CHECK(fs::exists(a.path / "checkpoint.meta.json"));
  CHECK(fs::exists(a.path / "train_log.jsonl"));

  // a checkpoint for a different architecture is refused unless forced
  std::string wider = kTinyConfig;
  wider.replace(wider.find("[4, 4, 4, 4]"), 12, "[4, 4, 4, 6]");
  auto other = experiment(wider);
  fsml_experiment_set_out(other.get(), a.str().c_str());
  CHECK(fsml_eval(other.get(), nullptr) == FSML_ERR_LOAD);
  CHECK(std::string(fsml_last_error()).find("--force") != std::string::npos);
  fsml_experiment_set_force(other.get(), 1);
  CHECK(fsml_eval(other.get(), nullptr) == FSML_ERR_LOAD);  // shapes still differ
}

TEST_CASE("oracle check passes and catches an injected fault") {
  char* report = nullptr;
  CHECK(fsml_oracle_check(0, &report) == FSML_OK);
  CHECK(take(report).find("fd_meta_gradient") != std::string::npos);
  CHECK(fsml_oracle_check(FSML_FAULT_FLIP_META_GRADIENT, &report) == FSML_ERR_GATE);
  CHECK(take(report).find("FAIL") != std::string::npos);
}
