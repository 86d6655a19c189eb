// Command-line front end over the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mango/mango.h"

namespace {

using nlohmann::json;

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

// Owns a string returned by the library.
struct Owned {
  char* s = nullptr;
  ~Owned() { mango_string_free(s); }
  std::string str() const { return s ? s : ""; }
};

int exit_for(mango_status st) {
  switch (st) {
    case MANGO_OK: return kOk;
    case MANGO_ERR_CONFIG:
    case MANGO_ERR_INPUT:
    case MANGO_ERR_FORMAT:
    case MANGO_ERR_IO:
    case MANGO_ERR_DIMENSION:
    case MANGO_ERR_LAYOUT:
    case MANGO_ERR_ARGUMENT: return kUsage;
    default: return kFailed;
  }
}

int fail(mango_status st) {
  std::cerr << "error (" << mango_status_name(st) << "): " << mango_last_error() << "\n";
  return exit_for(st);
}

bool read_text(const std::string& path, std::string& out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    std::cerr << "error (io): cannot read " << path << "\n";
    return false;
  }
  std::ostringstream s;
  s << f.rdbuf();
  out = s.str();
  return true;
}

bool write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) {
    std::cerr << "error (io): cannot write " << path << "\n";
    return false;
  }
  return true;
}

void print_line(const char* line, void*) { std::cout << line << "\n" << std::flush; }
void print_err_line(const char* line, void*) { std::cerr << line << "\n"; }

struct Dataset {
  mango_dataset* h = nullptr;
  ~Dataset() { mango_dataset_free(h); }
};

struct Run {
  mango_run* h = nullptr;
  ~Run() { mango_run_free(h); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal invertible cross-attention flows"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mango_version()));

  // verify
  auto* verify = app.add_subcommand("verify", "Run the invertibility and log-det audit suite");
  std::string verify_config, verify_out;
  std::size_t verify_seeds = 20;
  bool inject_fault = false, verbose = false;
  verify->add_option("--config", verify_config, "Experiment config; its seed offsets the audit seeds");
  verify->add_option("--seeds", verify_seeds, "Seeds per (layer, size) cell")->check(CLI::PositiveNumber);
  verify->add_flag("--inject-fault", inject_fault, "Double every analytic log-det (negative control)");
  verify->add_option("--out", verify_out, "Write the JSON report here instead of stdout");
  verify->add_flag("--verbose", verbose, "Print every audit to stderr");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset container");
  json spec = json::object();
  std::string gen_name, gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_size = 1000, gen_d = 4, gen_tokens = 4, gen_raw = 0;
  double gen_noise = 0.1, gen_raw_noise = 0.0;
  gen->add_option("--name", gen_name, "correlated-gaussians | two-moons-pair | toy-translation")->required();
  gen->add_option("--seed", gen_seed)->required();
  gen->add_option("--size", gen_size)->required();
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--d-model", gen_d);
  gen->add_option("--tokens", gen_tokens, "Tokens per modality");
  gen->add_option("--noise", gen_noise);
  gen->add_option("--raw-dim", gen_raw, "Lift tokens to this many features");
  gen->add_option("--raw-noise", gen_raw_noise);

  // train
  auto* train = app.add_subcommand("train", "Train from an experiment config");
  std::string train_config, train_out = "run";
  train->add_option("--config", train_config)->required();
  train->add_option("--out", train_out, "Output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();

  // sample
  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
  std::string sample_ckpt, sample_out = "samples.mngo";
  std::size_t sample_count = 0;
  std::uint64_t sample_seed = 0;
  sample->add_option("--ckpt", sample_ckpt)->required();
  sample->add_option("--count", sample_count)->required();
  sample->add_option("--seed", sample_seed)->required();
  sample->add_option("--out", sample_out);

  // compare
  auto* compare = app.add_subcommand("compare", "Run a model grid over seeds and summarize as CSV");
  std::string compare_config, compare_out;
  std::size_t compare_threads = 0;
  compare->add_option("--config", compare_config)->required();
  compare->add_option("--out", compare_out, "CSV path; stdout when omitted");
  compare->add_option("--threads", compare_threads, "Worker cap; default MANGO_THREADS or all cores");

  // export-attention
  auto* attn = app.add_subcommand("export-attention", "Write one ICA layer's attention map as CSV");
  std::string attn_ckpt, attn_data, attn_out, attn_sidecar;
  std::size_t attn_layer = 0, attn_batch = 64;
  attn->add_option("--ckpt", attn_ckpt)->required();
  attn->add_option("--data", attn_data)->required();
  attn->add_option("--layer", attn_layer)->required();
  attn->add_option("--out", attn_out)->required();
  attn->add_option("--sidecar", attn_sidecar, "Boundary JSON; default <out>.json");
  attn->add_option("--batch", attn_batch, "Rows averaged into the map");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (*verify) {
    json options = {{"seeds", verify_seeds}, {"inject_fault", inject_fault}};
    if (!verify_config.empty()) {
      std::string text;
      if (!read_text(verify_config, text)) return kUsage;
      Owned normalized;
      if (mango_status st = mango_config_validate(text.c_str(), &normalized.s)) return fail(st);
      options["base_seed"] = json::parse(normalized.str())["seed"];
    }
    Owned report;
    int passed = 0;
    const mango_status st =
        mango_verify(options.dump().c_str(), verbose ? print_err_line : nullptr, nullptr, &report.s, &passed);
    if (st) return fail(st);
    if (verify_out.empty()) {
      std::cout << report.str() << "\n";
    } else if (!write_text(verify_out, report.str() + "\n")) {
      return kUsage;
    }
    const json r = json::parse(report.str());
    std::cerr << "verify: " << r["audit_count"] << " audits, " << r["failures"] << " failed, exponent verdict "
              << r["exponent"]["verdict"] << "\n";
    return passed ? kOk : kFailed;
  }

  if (*gen) {
    spec = {{"name", gen_name},          {"seed", gen_seed},   {"size", gen_size},     {"d_model", gen_d},
            {"n_tokens_per_modality", gen_tokens}, {"noise", gen_noise}, {"raw_dim", gen_raw},
            {"raw_noise", gen_raw_noise}};
    Dataset data;
    if (mango_status st = mango_dataset_generate(spec.dump().c_str(), &data.h)) return fail(st);
    char hash[17] = {0};
    if (mango_status st = mango_dataset_save(data.h, gen_out.c_str(), hash)) return fail(st);
    std::cout << hash << "  " << gen_out << "\n";
    return kOk;
  }

  if (*train) {
    std::string text;
    if (!read_text(train_config, text)) return kUsage;
    Owned summary;
    if (mango_status st = mango_train(text.c_str(), train_out.c_str(), print_line, nullptr, &summary.s)) return fail(st);
    std::cerr << summary.str() << "\n";
    return kOk;
  }

  if (*eval) {
    Run run;
    Dataset data;
    if (mango_status st = mango_run_load(eval_ckpt.c_str(), &run.h)) return fail(st);
    if (mango_status st = mango_dataset_load(eval_data.c_str(), &data.h)) return fail(st);
    Owned metrics;
    if (mango_status st = mango_run_evaluate(run.h, data.h, &metrics.s)) return fail(st);
    std::cout << metrics.str() << "\n";
    return kOk;
  }

  if (*sample) {
    Run run;
    if (mango_status st = mango_run_load(sample_ckpt.c_str(), &run.h)) return fail(st);
    Owned info;
    if (mango_status st = mango_run_sample(run.h, sample_count, sample_seed, sample_out.c_str(), &info.s))
      return fail(st);
    std::cout << info.str() << "\n";
    return kOk;
  }

  if (*compare) {
    std::string text;
    if (!read_text(compare_config, text)) return kUsage;
    Owned csv, summary;
    if (mango_status st = mango_compare(text.c_str(), compare_threads, print_err_line, nullptr, &csv.s, &summary.s))
      return fail(st);
    if (compare_out.empty()) {
      std::cout << csv.str();
    } else if (!write_text(compare_out, csv.str())) {
      return kUsage;
    }
    std::cerr << summary.str() << "\n";
    return kOk;
  }

  if (*attn) {
    Run run;
    Dataset data;
    if (mango_status st = mango_run_load(attn_ckpt.c_str(), &run.h)) return fail(st);
    if (mango_status st = mango_dataset_load(attn_data.c_str(), &data.h)) return fail(st);
    const std::string sidecar = attn_sidecar.empty() ? attn_out + ".json" : attn_sidecar;
    if (mango_status st =
            mango_run_export_attention(run.h, data.h, attn_layer, attn_batch, attn_out.c_str(), sidecar.c_str()))
      return fail(st);
    std::cout << attn_out << "\n" << sidecar << "\n";
    return kOk;
  }
  return kUsage;
}
