#include "mango/mango.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <set>
#include <string>

#include "mango/error.hpp"
#include "mango/experiment.hpp"
#include "mango/ica.hpp"
#include "mango/verify.hpp"

struct mango_dataset {
  mango::Dataset data;
};

struct mango_run {
  mango::LoadedRun run;
};

namespace {

using nlohmann::json;

thread_local std::string last_error;

mango_status status_of(mango::ErrorKind k) {
  switch (k) {
    case mango::ErrorKind::kDimension: return MANGO_ERR_DIMENSION;
    case mango::ErrorKind::kContract: return MANGO_ERR_CONTRACT;
    case mango::ErrorKind::kPartition: return MANGO_ERR_PARTITION;
    case mango::ErrorKind::kLayout: return MANGO_ERR_LAYOUT;
    case mango::ErrorKind::kSingularity: return MANGO_ERR_SINGULARITY;
    case mango::ErrorKind::kNumeric: return MANGO_ERR_NUMERIC;
    case mango::ErrorKind::kFormat: return MANGO_ERR_FORMAT;
    case mango::ErrorKind::kConfig: return MANGO_ERR_CONFIG;
    case mango::ErrorKind::kInput: return MANGO_ERR_INPUT;
    case mango::ErrorKind::kOracle: return MANGO_ERR_ORACLE;
    case mango::ErrorKind::kIo: return MANGO_ERR_IO;
  }
  return MANGO_ERR_INTERNAL;
}

// Runs body, translating exceptions into a status and last_error.
template <class F>
mango_status guarded(F&& body) {
  last_error.clear();
  try {
    body();
    return MANGO_OK;
  } catch (const mango::Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown failure";
  }
  return MANGO_ERR_INTERNAL;
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_json(const char* text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw mango::ConfigError(what + ": invalid JSON: " + e.what());
  }
}

mango::DatasetSpec spec_from(const json& j) {
  if (!j.is_object()) throw mango::ConfigError("dataset spec: expected an object");
  static const std::set<std::string> keys{"name",  "seed",    "size",     "d_model", "n_tokens_per_modality",
                                          "noise", "raw_dim", "raw_noise"};
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw mango::ConfigError("dataset spec." + k + ": unknown key");
  mango::DatasetSpec s;
  json full = s.to_json();
  full.merge_patch(j);
  try {
    s = mango::DatasetSpec::from_json(full);
  } catch (const mango::FormatError& e) {
    throw mango::ConfigError(e.what());
  }
  return s;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw mango::IoError("cannot write " + p.string());
  f << text;
  if (!f) throw mango::IoError("write failed for " + p.string());
}

json evaluation_json(const mango::Evaluation& e) {
  json j = {{"nll_per_dim", e.nll_per_dim},
            {"task_loss", e.task_loss},
            {"total_loss", e.total_loss},
            {"roundtrip_err", e.roundtrip_err}};
  if (e.accuracy) j["accuracy"] = *e.accuracy;
  return j;
}

}  // namespace

extern "C" {

const char* mango_version(void) { return "0.1.0"; }

const char* mango_status_name(mango_status status) {
  switch (status) {
    case MANGO_OK: return "ok";
    case MANGO_ERR_DIMENSION: return "dimension";
    case MANGO_ERR_CONTRACT: return "contract";
    case MANGO_ERR_PARTITION: return "partition";
    case MANGO_ERR_LAYOUT: return "layout";
    case MANGO_ERR_SINGULARITY: return "singularity";
    case MANGO_ERR_NUMERIC: return "numeric";
    case MANGO_ERR_FORMAT: return "format";
    case MANGO_ERR_CONFIG: return "config";
    case MANGO_ERR_INPUT: return "input";
    case MANGO_ERR_ORACLE: return "oracle";
    case MANGO_ERR_IO: return "io";
    case MANGO_ERR_ARGUMENT: return "argument";
    case MANGO_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* mango_last_error(void) { return last_error.c_str(); }

void mango_string_free(char* s) { std::free(s); }

mango_status mango_config_validate(const char* config_json, char** normalized_json) {
  if (!config_json) {
    last_error = "config_json must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const auto config = mango::ExperimentConfig::from_json(parse_json(config_json, "config"));
    if (normalized_json) *normalized_json = dup(config.to_json().dump(2));
  });
}

mango_status mango_verify(const char* options_json, mango_line_fn on_audit, void* user, char** report_json,
                          int* passed) {
  if (!report_json || !passed) {
    last_error = "report_json and passed must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    mango::VerifyOptions o;
    if (options_json) {
      const json j = parse_json(options_json, "verify options");
      for (const auto& [k, v] : j.items())
        if (k != "seeds" && k != "base_seed" && k != "inject_fault")
          throw mango::ConfigError("verify options." + k + ": unknown key");
      o.seeds = j.value("seeds", o.seeds);
      o.base_seed = j.value("base_seed", o.base_seed);
      o.inject_fault = j.value("inject_fault", false);
      if (o.seeds == 0) throw mango::ConfigError("verify options.seeds: must be positive");
    }
    mango::AuditSink sink;
    if (on_audit) sink = [&](const mango::AuditReport& r) { on_audit(r.to_json().dump().c_str(), user); };
    const mango::VerifyReport report = mango::run_verify(o, sink);
    *report_json = dup(report.to_json().dump(2));
    *passed = report.passed() ? 1 : 0;
  });
}

mango_status mango_dataset_generate(const char* spec_json, mango_dataset** out) {
  if (!spec_json || !out) {
    last_error = "spec_json and out must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    auto d = std::make_unique<mango_dataset>();
    d->data = mango::generate(spec_from(parse_json(spec_json, "dataset spec")));
    *out = d.release();
  });
}

mango_status mango_dataset_load(const char* path, mango_dataset** out) {
  if (!path || !out) {
    last_error = "path and out must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    auto d = std::make_unique<mango_dataset>();
    d->data = mango::load_dataset(path);
    *out = d.release();
  });
}

mango_status mango_dataset_save(const mango_dataset* data, const char* path, char hash_out[17]) {
  if (!data || !path) {
    last_error = "data and path must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const std::string bytes = mango::encode_container(mango::dataset_container(data->data));
    mango::write_file(path, bytes);
    if (hash_out) std::snprintf(hash_out, 17, "%s", mango::content_hash(bytes).c_str());
  });
}

mango_status mango_dataset_shape(const mango_dataset* data, size_t* rows, size_t* tokens, size_t* width) {
  if (!data) {
    last_error = "data must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    if (rows) *rows = data->data.tokens.dim(0);
    if (tokens) *tokens = data->data.tokens.dim(1);
    if (width) *width = data->data.tokens.dim(2);
  });
}

mango_status mango_dataset_copy_tokens(const mango_dataset* data, double* out, size_t capacity) {
  if (!data || !out) {
    last_error = "data and out must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const auto& t = data->data.tokens;
    if (capacity < t.numel()) {
      throw mango::InputError("buffer holds " + std::to_string(capacity) + " values, dataset has " +
                              std::to_string(t.numel()));
    }
    std::copy(t.data().begin(), t.data().end(), out);
  });
}

void mango_dataset_free(mango_dataset* data) { delete data; }

mango_status mango_train(const char* config_json, const char* out_dir, mango_line_fn on_metrics, void* user,
                         char** summary_json) {
  if (!config_json || !out_dir) {
    last_error = "config_json and out_dir must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const mango::ExperimentConfig config = mango::ExperimentConfig::from_json(parse_json(config_json, "config"));
    const std::filesystem::path dir(out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw mango::IoError("cannot create " + dir.string() + ": " + ec.message());
    write_text(dir / "config.json", config.to_json().dump(2) + "\n");

    std::ofstream metrics(dir / "metrics.jsonl");
    if (!metrics) throw mango::IoError("cannot write " + (dir / "metrics.jsonl").string());
    auto sink = [&](const mango::Metrics& m) {
      const std::string line = m.to_json().dump();
      metrics << line << "\n" << std::flush;
      if (on_metrics) on_metrics(line.c_str(), user);
    };
    mango::ExperimentRun run = mango::run_experiment(config, sink);
    const mango::Metrics final_metrics = run.result.history.back();
    mango::save_run_checkpoint(run, (dir / "final.mngo").string());
    mango::save_dataset(run.raw_validation, (dir / "validation.mngo").string());
    mango::restore_parameters(*run.model, run.head_ptr(), run.result.best_parameters);
    mango::save_run_checkpoint(run, (dir / "best.mngo").string());
    mango::Metrics best_metrics;
    for (const auto& m : run.result.history)
      if (m.step == run.result.best_step) best_metrics = m;

    if (summary_json) {
      const json summary = {{"final", final_metrics.to_json()},
                            {"best", best_metrics.to_json()},
                            {"best_step", run.result.best_step},
                            {"parameters", run.model->parameter_count()},
                            {"seconds", run.seconds},
                            {"out_dir", dir.string()}};
      *summary_json = dup(summary.dump(2));
    }
  });
}

mango_status mango_run_load(const char* checkpoint_path, mango_run** out) {
  if (!checkpoint_path || !out) {
    last_error = "checkpoint_path and out must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    auto r = std::make_unique<mango_run>();
    r->run = mango::load_run_checkpoint(checkpoint_path);
    *out = r.release();
  });
}

void mango_run_free(mango_run* run) { delete run; }

mango_status mango_run_shape(const mango_run* run, size_t* tokens, size_t* width) {
  if (!run) {
    last_error = "run must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    if (tokens) *tokens = run->run.model->n();
    if (width) *width = run->run.model->d();
  });
}

mango_status mango_run_evaluate(mango_run* run, const mango_dataset* data, char** metrics_json) {
  if (!run || !data || !metrics_json) {
    last_error = "run, data and metrics_json must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] { *metrics_json = dup(evaluation_json(mango::evaluate_run(run->run, data->data)).dump()); });
}

mango_status mango_run_forward(mango_run* run, const double* x, size_t batch, double* z, double* log_det) {
  if (!run || !x || !z) {
    last_error = "run, x and z must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    auto& model = *run->run.model;
    mango::Tensor in({batch, model.n(), model.d()});
    std::copy(x, x + in.numel(), in.data().begin());
    const auto res = model.forward(in);
    std::copy(res.z.data().begin(), res.z.data().end(), z);
    if (log_det) std::copy(res.log_det.data().begin(), res.log_det.data().end(), log_det);
  });
}

mango_status mango_run_inverse(mango_run* run, const double* z, size_t batch, double* x) {
  if (!run || !z || !x) {
    last_error = "run, z and x must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    auto& model = *run->run.model;
    mango::Tensor in({batch, model.n(), model.d()});
    std::copy(z, z + in.numel(), in.data().begin());
    const mango::Tensor out = model.inverse(in);
    std::copy(out.data().begin(), out.data().end(), x);
  });
}

mango_status mango_run_sample(mango_run* run, size_t count, uint64_t seed, const char* out_path, char** info_json) {
  if (!run || !out_path) {
    last_error = "run and out_path must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const mango::SampleSet s = mango::sample_run(run->run, count, seed);
    const std::string bytes = mango::encode_container(mango::samples_container(run->run, s, count, seed));
    mango::write_file(out_path, bytes);
    if (info_json) {
      const mango::Tensor& t = s.decoded ? *s.decoded : s.latent;
      *info_json = dup(json{{"count", count},
                            {"seed", seed},
                            {"shape", t.shape()},
                            {"space", s.decoded ? "decoded" : "flow"},
                            {"hash", mango::content_hash(bytes)},
                            {"path", out_path}}
                           .dump());
    }
  });
}

mango_status mango_run_export_attention(mango_run* run, const mango_dataset* data, size_t layer, size_t batch,
                                        const char* csv_path, const char* sidecar_path) {
  if (!run || !data || !csv_path || !sidecar_path) {
    last_error = "run, data, csv_path and sidecar_path must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const mango::Dataset prepared = run->run.prepare(data->data);
    if (prepared.size() == 0) throw mango::InputError("dataset is empty");
    const std::size_t rows = std::min(std::max<std::size_t>(batch, 1), prepared.size());
    const mango::AttentionExport e =
        mango::export_attention(*run->run.model, prepared.slice(0, rows).tokens, layer);
    write_text(csv_path, mango::attention_to_csv(e.attention));
    write_text(sidecar_path, e.sidecar.dump(2) + "\n");
  });
}

mango_status mango_compare(const char* config_json, size_t threads, mango_line_fn on_row, void* user, char** csv,
                           char** summary_json) {
  if (!config_json || !csv) {
    last_error = "config_json and csv must not be null";
    return MANGO_ERR_ARGUMENT;
  }
  return guarded([&] {
    const mango::ExperimentConfig config = mango::ExperimentConfig::from_json(parse_json(config_json, "config"));
    std::function<void(const mango::CompareRow&)> progress;
    if (on_row) {
      progress = [&](const mango::CompareRow& r) {
        json j = {{"variant", r.variant}, {"seed", r.seed},         {"nll_per_dim", r.nll_per_dim},
                  {"task_loss", r.task_loss}, {"wallclock_s", r.wallclock_s}, {"parameters", r.parameters}};
        if (r.accuracy) j["accuracy"] = *r.accuracy;
        on_row(j.dump().c_str(), user);
      };
    }
    const mango::CompareResult result =
        mango::run_compare(config, threads ? threads : mango::worker_threads(), progress);
    *csv = dup(result.csv());
    if (summary_json) *summary_json = dup(result.to_json().dump(2));
  });
}

}  // extern "C"
