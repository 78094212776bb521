// SPDX-License-Identifier: Apache-2.0
//
// ndlab command-line front end. Flags map one-to-one onto configuration keys
// of the library; an optional --config file is applied first so that flags
// given on the command line take precedence.
//
// Exit codes: 0 success, 1 usage error, 2 data or validation failure.

#include <CLI11.hpp>

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "ndlab/ndlab.h"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct Key {
  const char* name;
  const char* help;
  bool is_flag = false;
};

const std::vector<Key> kSimulateKeys = {
    {"vocab", "vocabulary size V"},
    {"hidden", "hidden dimension D"},
    {"runs", "runs per prompt N"},
    {"steps", "generation steps per prompt"},
    {"prompts", "independent prompts"},
    {"top-k", "entries recorded per step"},
    {"fmt", "working precision: bf16, fp16, fp32 or exact"},
    {"batch", "batch-size label B; sets the order entropy"},
    {"temperature", "softmax temperature T"},
    {"seed", "master seed"},
    {"mode", "mechanistic or phenomenological"},
    {"sim-noise", "logit noise scale for phenomenological mode"},
    {"scale", "weight scale of the synthetic model"},
    {"order", "reduction shape: tree or linear"},
    {"fused", "use fused multiply-add in dot products", true},
    {"stop-at-divergence", "end each prompt at its first divergent step", true},
    {"output", "trace file to write"},
    {"format", "trace format: jsonl or csv (default from the file extension)"},
    {"workers", "worker threads, 0 = all cores"},
};

const std::vector<Key> kAnalyzeKeys = {
    {"input", "trace file"},
    {"out-dir", "directory for the CSV tables"},
    {"bin-width", "probability bin width"},
    {"low", "upper edge of the low regime"},
    {"high", "lower edge of the high regime"},
    {"regime-preset", "wide (0.1/0.9) or narrow (0.2/0.8)"},
    {"include-imputed", "include tokens missing from some runs", true},
    {"format", "trace format: jsonl or csv"},
    {"strict", "reject the whole file on the first malformed line", true},
};

const std::vector<Key> kEstimateKeys = {
    {"input", "trace file holding the run to score"},
    {"output", "prediction CSV to write"},
    {"run-id", "run to score (default: first run of each prompt)"},
    {"noise-scale", "per-logit noise scale s"},
    {"calibrate", "ensemble trace file with logits to calibrate s from"},
    {"runs", "ensemble size N used for range predictions"},
    {"low", "upper edge of the low regime"},
    {"high", "lower edge of the high regime"},
    {"regime-preset", "wide (0.1/0.9) or narrow (0.2/0.8)"},
    {"format", "trace format: jsonl or csv"},
    {"strict", "reject the whole file on the first malformed line", true},
};

const std::vector<Key> kValidateKeys = {
    {"predictions", "prediction CSV from estimate"},
    {"input", "ensemble trace file"},
    {"output", "report CSV to write"},
    {"budget", "maximum mid-regime median relative sigma error"},
    {"low", "upper edge of the low regime"},
    {"high", "lower edge of the high regime"},
    {"regime-preset", "wide (0.1/0.9) or narrow (0.2/0.8)"},
    {"include-imputed", "include tokens missing from some runs", true},
    {"format", "trace format: jsonl or csv"},
    {"strict", "reject the whole file on the first malformed line", true},
};

using Command = ndl_status (*)(const ndl_config*, ndl_report**);

struct Subcommand {
  CLI::App* app = nullptr;
  const std::vector<Key>* keys = nullptr;
  Command run = nullptr;
  std::string config_file{};
  std::map<std::string, std::string> values{};
  std::map<std::string, bool> flags{};
};

void declare(Subcommand& sub) {
  sub.app->add_option("--config", sub.config_file, "key = value file; flags override it");
  for (const Key& k : *sub.keys) {
    const std::string flag = std::string("--") + k.name;
    if (k.is_flag) {
      sub.app->add_flag(flag, sub.flags[k.name], k.help);
    } else {
      sub.app->add_option(flag, sub.values[k.name], k.help);
    }
  }
}

int exit_code(ndl_status s) { return s == NDL_INVALID_ARGUMENT ? kExitUsage : kExitData; }

int execute(Subcommand& sub) {
  ndl_config* cfg = nullptr;
  if (ndl_config_create(&cfg) != NDL_OK) {
    std::fprintf(stderr, "error: %s\n", ndl_last_error());
    return kExitData;
  }
  auto fail = [&](ndl_status s) {
    std::fprintf(stderr, "error: %s\n", ndl_last_error());
    ndl_config_destroy(cfg);
    return exit_code(s);
  };

  if (!sub.config_file.empty()) {
    const ndl_status s = ndl_config_load_file(cfg, sub.config_file.c_str());
    if (s != NDL_OK) return fail(s == NDL_IO_ERROR ? NDL_INVALID_ARGUMENT : s);
  }
  for (const Key& k : *sub.keys) {
    const CLI::Option* opt = sub.app->get_option(std::string("--") + k.name);
    if (opt->count() == 0) continue;
    const std::string value = k.is_flag ? (sub.flags[k.name] ? "true" : "false") : sub.values[k.name];
    const ndl_status s = ndl_config_set(cfg, k.name, value.c_str());
    if (s != NDL_OK) return fail(s);
  }

  ndl_report* report = nullptr;
  const ndl_status s = sub.run(cfg, &report);
  if (report != nullptr) {
    for (size_t i = 0; i < ndl_report_warning_count(report); ++i) {
      std::fprintf(stderr, "warning: %s\n", ndl_report_warning(report, i));
    }
    std::printf("%s\n", ndl_report_summary(report));
    ndl_report_destroy(report);
  }
  if (s != NDL_OK) {
    if (s == NDL_BUDGET_EXCEEDED) {
      ndl_config_destroy(cfg);
      return kExitData;
    }
    return fail(s);
  }
  ndl_config_destroy(cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ndlab: nondeterminism analysis for token probabilities"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ndl_version()));

  Subcommand subs[] = {
      {app.add_subcommand("simulate", "generate a multi-run trace ensemble"), &kSimulateKeys, &ndl_simulate},
      {app.add_subcommand("analyze", "measure variation across runs"), &kAnalyzeKeys, &ndl_analyze},
      {app.add_subcommand("estimate", "predict variation from a single run"), &kEstimateKeys, &ndl_estimate},
      {app.add_subcommand("validate", "compare predictions with an ensemble"), &kValidateKeys, &ndl_validate},
  };
  for (Subcommand& sub : subs) declare(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  for (Subcommand& sub : subs) {
    if (sub.app->parsed()) return execute(sub);
  }
  return kExitUsage;
}
