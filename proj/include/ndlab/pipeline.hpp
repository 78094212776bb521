// SPDX-License-Identifier: Apache-2.0
//
// Reproducible command pipelines behind the CLI: simulate, analyze, estimate
// and validate. Each command reads its parameters from a RunConfig, writes
// plot-ready files whose first row echoes the effective configuration, and
// returns a short human-readable summary.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ndlab/estimator.hpp"
#include "ndlab/simulator.hpp"
#include "ndlab/softmax.hpp"

namespace ndlab {

const char* version();

struct RunConfig {
  // simulation
  std::size_t vocab = 1000;
  std::size_t hidden = 4096;
  std::size_t runs = 50;
  std::size_t steps = 100;
  std::size_t prompts = 1;
  std::size_t top_k = 10;
  std::string fmt = "bf16";
  std::int64_t batch = 4;
  double temperature = 1.0;
  std::uint64_t seed = 42;
  std::string mode = "mechanistic";
  double sim_noise = 0.05;
  double scale = kDefaultWeightScale;
  std::string order = "tree";
  bool fused = false;
  bool stop_at_divergence = false;

  // analysis
  RegimeThresholds thresholds;
  double bin_width = 0.05;
  bool include_imputed = false;

  // estimation / validation
  std::optional<double> noise_scale;
  std::string run_id;
  double budget = 0.30;

  // io
  std::string input;
  std::string output;
  std::string out_dir;
  std::string predictions;
  std::string calibrate;
  std::string format = "jsonl";
  bool format_explicit = false;
  bool strict = false;

  std::size_t workers = 0;

  /// Sets one parameter by its flag name (e.g. "bin-width", "fmt"). Throws
  /// an invalid_argument Error for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Reads "key = value" lines; '#' starts a comment.
  void load_file(const std::string& path);
  void load(std::istream& in, const std::string& origin = "<config>");

  /// Header row for output files: tool version, command and every semantic
  /// parameter of that command. Output paths and the worker count are left
  /// out so identical computations produce identical bytes.
  std::string echo(const std::string& command) const;
};

struct CommandResult {
  std::string summary;
  std::vector<std::string> warnings;
};

CommandResult cmd_simulate(const RunConfig& config);
CommandResult cmd_analyze(const RunConfig& config);
CommandResult cmd_estimate(const RunConfig& config);
/// Throws a budget_exceeded Error (after writing the report) when the
/// mid-regime median relative sigma error exceeds `budget`.
CommandResult cmd_validate(const RunConfig& config);

/// Prediction table written by cmd_estimate and read by cmd_validate.
void write_predictions(std::ostream& out, const std::vector<TokenPrediction>& predictions,
                       const RegimeThresholds& thresholds, const std::string& header);
std::vector<TokenPrediction> read_predictions(std::istream& in);

}  // namespace ndlab
