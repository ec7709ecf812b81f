#include "fsml/fsml.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "fsml/experiment.hpp"

struct fsml_experiment {
  fsml::ExperimentConfig config;
  fsml::CommandOptions options;
};

struct fsml_dataset {
  fsml::Dataset data;
};

namespace {

thread_local std::string g_last_error;

fsml_status fail(fsml_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Runs fn, translating exceptions into status codes.
template <class Fn>
fsml_status guarded(Fn fn) {
  try {
    g_last_error.clear();
    return fn();
  } catch (const fsml::Error& e) {
    return fail(static_cast<fsml_status>(static_cast<int>(e.code())), e.what());
  } catch (const std::bad_alloc&) {
    return fail(FSML_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(FSML_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(FSML_ERR_INTERNAL, "unknown error");
  }
}

template <class Cmd>
fsml_status run_command(fsml_experiment* exp, char** summary, Cmd cmd) {
  if (!exp) return fail(FSML_ERR_INVALID_ARGUMENT, "null experiment handle");
  return guarded([&] {
    const std::string text = cmd(exp->config, exp->options);
    if (summary) *summary = dup_string(text);
    return FSML_OK;
  });
}

}  // namespace

extern "C" {

const char* fsml_version(void) { return "1.0.0"; }

const char* fsml_status_name(fsml_status status) {
  switch (status) {
    case FSML_OK: return "ok";
    case FSML_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case FSML_ERR_INTERNAL: return "internal";
    default: break;
  }
  if (status >= FSML_ERR_DIMENSION && status <= FSML_ERR_GATE) {
    return fsml::error_code_name(static_cast<fsml::ErrorCode>(status));
  }
  return "unknown";
}

const char* fsml_last_error(void) { return g_last_error.c_str(); }

void fsml_free_string(char* s) { std::free(s); }

fsml_status fsml_experiment_from_file(const char* config_path, fsml_experiment** out) {
  if (!config_path || !out) return fail(FSML_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    *out = new fsml_experiment{fsml::load_config(config_path), {}};
    return FSML_OK;
  });
}

fsml_status fsml_experiment_from_json(const char* config_json, fsml_experiment** out) {
  if (!config_json || !out) return fail(FSML_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    *out = new fsml_experiment{fsml::parse_config(config_json), {}};
    return FSML_OK;
  });
}

void fsml_experiment_destroy(fsml_experiment* exp) { delete exp; }

fsml_status fsml_experiment_set_seed(fsml_experiment* exp, uint64_t seed) {
  if (!exp) return fail(FSML_ERR_INVALID_ARGUMENT, "null experiment handle");
  exp->options.seed = seed;
  return FSML_OK;
}

fsml_status fsml_experiment_set_out(fsml_experiment* exp, const char* dir) {
  if (!exp || !dir || !*dir) return fail(FSML_ERR_INVALID_ARGUMENT, "null handle or empty output directory");
  exp->options.out = dir;
  return FSML_OK;
}

fsml_status fsml_experiment_set_jobs(fsml_experiment* exp, size_t jobs) {
  if (!exp || jobs == 0) return fail(FSML_ERR_INVALID_ARGUMENT, "null handle or zero jobs");
  exp->options.jobs = jobs;
  return FSML_OK;
}

fsml_status fsml_experiment_set_force(fsml_experiment* exp, int force) {
  if (!exp) return fail(FSML_ERR_INVALID_ARGUMENT, "null experiment handle");
  exp->options.force = force != 0;
  return FSML_OK;
}

fsml_status fsml_experiment_set_checkpoint(fsml_experiment* exp, const char* path) {
  if (!exp) return fail(FSML_ERR_INVALID_ARGUMENT, "null experiment handle");
  if (path && *path) exp->options.checkpoint = path;
  else exp->options.checkpoint.reset();
  return FSML_OK;
}

fsml_status fsml_experiment_config_hash(const fsml_experiment* exp, char** out) {
  if (!exp || !out) return fail(FSML_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    *out = dup_string(fsml::config_hash(exp->config));
    return FSML_OK;
  });
}

fsml_status fsml_train(fsml_experiment* exp, char** summary) {
  return run_command(exp, summary, fsml::cmd_train);
}

fsml_status fsml_eval(fsml_experiment* exp, char** summary) {
  return run_command(exp, summary, fsml::cmd_eval);
}

fsml_status fsml_ablate(fsml_experiment* exp, char** summary) {
  return run_command(exp, summary, fsml::cmd_ablate);
}

fsml_status fsml_gen_data(fsml_experiment* exp, char** summary) {
  return run_command(exp, summary, fsml::cmd_gen_data);
}

fsml_status fsml_oracle_check(unsigned faults, char** report) {
  return guarded([&] {
    fsml::oracle::Faults f;
    f.flip_meta_gradient_sign = (faults & FSML_FAULT_FLIP_META_GRADIENT) != 0;
    const auto r = fsml::cmd_oracle_check(f);
    if (report) *report = dup_string(r.text());
    if (r.passed()) return FSML_OK;
    return fail(FSML_ERR_GATE, "one or more oracle gates failed");
  });
}

fsml_status fsml_dataset_load(const char* path, fsml_dataset** out) {
  if (!path || !out) return fail(FSML_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    *out = new fsml_dataset{fsml::load_dataset(path)};
    return FSML_OK;
  });
}

void fsml_dataset_destroy(fsml_dataset* ds) { delete ds; }

size_t fsml_dataset_size(const fsml_dataset* ds) { return ds ? ds->data.size() : 0; }

size_t fsml_dataset_classes(const fsml_dataset* ds) { return ds ? ds->data.n_classes() : 0; }

fsml_status fsml_dataset_image_shape(const fsml_dataset* ds, size_t shape[3]) {
  if (!ds || !shape) return fail(FSML_ERR_INVALID_ARGUMENT, "null argument");
  for (int i = 0; i < 3; ++i) shape[i] = ds->data.image_shape.at(i);
  return FSML_OK;
}

fsml_status fsml_dataset_label(const fsml_dataset* ds, size_t index, uint32_t* label) {
  if (!ds || !label) return fail(FSML_ERR_INVALID_ARGUMENT, "null argument");
  if (index >= ds->data.size()) {
    return fail(FSML_ERR_INDEX, "sample index " + std::to_string(index) + " out of range");
  }
  *label = ds->data.labels[index];
  return FSML_OK;
}

}  // extern "C"
