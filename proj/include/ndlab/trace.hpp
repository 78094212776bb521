// SPDX-License-Identifier: Apache-2.0
//
// Multi-run generation traces: data model, canonical JSONL / CSV
// serialization, and alignment of runs up to their first divergence.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ndlab/metrics.hpp"

namespace ndlab {

struct TopkEntry {
  std::int64_t token_id = 0;
  double prob = 0.0;
  std::optional<double> logit;

  bool operator==(const TopkEntry&) const = default;
};

struct StepRecord {
  std::size_t step_index = 0;
  std::int64_t selected_token_id = 0;  // greedy choice, equals topk[0].token_id
  std::vector<TopkEntry> topk;         // descending probability

  bool operator==(const StepRecord&) const = default;
};

struct TraceMeta {
  std::string model;
  std::string gpu;
  std::int64_t batch_size = 1;
  std::string precision;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  bool operator==(const TraceMeta&) const = default;
};

struct TokenTrace {
  std::string prompt_id;
  std::string run_id;
  TraceMeta meta;
  std::vector<StepRecord> steps;

  bool operator==(const TokenTrace&) const = default;
};

/// Empty string when the trace satisfies every invariant, else the first
/// violation found.
std::string check_trace(const TokenTrace& trace);

enum class TraceFormat { jsonl, csv };

TraceFormat parse_trace_format(const std::string& text);

struct ParseIssue {
  std::size_t line = 0;  // 1-based physical line
  std::string message;
};

struct ParseResult {
  std::vector<TokenTrace> traces;
  std::vector<ParseIssue> errors;
};

/// Reads traces. Lines starting with '#' are comments (the CSV format keeps
/// per-run metadata in "#meta," comment rows). Invalid records are dropped and
/// listed in `errors`; with `strict` any error throws instead.
ParseResult parse_traces(std::istream& in, TraceFormat format, bool strict = false);
ParseResult parse_traces(const std::string& text, TraceFormat format, bool strict = false);

/// Canonical serialization: fixed field order and 17 significant digits, so
/// equal traces give equal bytes. `header`, when non-empty, is written first
/// as a '#' comment row.
void write_traces(std::ostream& out, std::span<const TokenTrace> traces, TraceFormat format,
                  const std::string& header = {});
std::string write_traces(std::span<const TokenTrace> traces, TraceFormat format,
                         const std::string& header = {});

/// "%.17g" rendering shared by every writer.
std::string format_real(double x);

struct AlignedEnsembleSet {
  std::string prompt_id;
  std::size_t common_prefix_len = 0;
  std::size_t n_runs = 0;
  std::vector<RunEnsemble> ensembles;  // one per step < common_prefix_len
  std::vector<std::string> warnings;
};

/// Truncates the runs of one prompt at the first step where two runs selected
/// different tokens. Token columns are the union of the runs' top-k ids, in
/// ascending id order; ids missing from a run are imputed as probability 0 and
/// flagged. Rows are ordered by run_id.
AlignedEnsembleSet align_to_divergence(std::span<const TokenTrace> traces);

/// Groups traces by prompt_id (ascending) and aligns each group.
std::vector<AlignedEnsembleSet> align_by_prompt(std::span<const TokenTrace> traces);

}  // namespace ndlab
