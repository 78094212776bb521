// SPDX-License-Identifier: Apache-2.0

#include "ndlab/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ndlab/error.hpp"

namespace ndlab {

namespace {

using nlohmann::json;

constexpr const char* kCsvHeader = "prompt_id,run_id,step,rank,token_id,prob,logit,selected";

std::string describe(const ParseIssue& e) {
  return "line " + std::to_string(e.line) + ": " + e.message;
}

[[noreturn]] void throw_parse(const std::vector<ParseIssue>& errors) {
  std::string msg = std::to_string(errors.size()) + " invalid trace record(s)";
  for (const auto& e : errors) msg += "\n  " + describe(e);
  fail(ErrorKind::parse, msg);
}

bool is_comment_or_blank(const std::string& line) {
  const auto pos = line.find_first_not_of(" \t\r");
  return pos == std::string::npos || line[pos] == '#';
}

// ---- JSONL ---------------------------------------------------------------

const json& field(const json& obj, const char* key) {
  if (!obj.is_object()) throw std::runtime_error("expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw std::runtime_error(std::string("missing field '") + key + "'");
  return *it;
}

std::string get_string(const json& obj, const char* key) {
  const json& v = field(obj, key);
  if (!v.is_string()) throw std::runtime_error(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

double get_number(const json& obj, const char* key) {
  const json& v = field(obj, key);
  if (!v.is_number()) throw std::runtime_error(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

template <class Int>
Int get_integer(const json& obj, const char* key) {
  const json& v = field(obj, key);
  if (!v.is_number_integer()) throw std::runtime_error(std::string("field '") + key + "' must be an integer");
  if constexpr (std::is_unsigned_v<Int>) {
    if (v.is_number_unsigned()) return v.get<Int>();
    if (v.get<std::int64_t>() < 0) throw std::runtime_error(std::string("field '") + key + "' must be non-negative");
  }
  return v.get<Int>();
}

TokenTrace trace_from_json(const json& j) {
  TokenTrace t;
  t.prompt_id = get_string(j, "prompt_id");
  t.run_id = get_string(j, "run_id");
  const json& meta = field(j, "meta");
  t.meta.model = get_string(meta, "model");
  t.meta.gpu = get_string(meta, "gpu");
  t.meta.batch_size = get_integer<std::int64_t>(meta, "batch_size");
  t.meta.precision = get_string(meta, "precision");
  t.meta.temperature = get_number(meta, "temperature");
  t.meta.seed = get_integer<std::uint64_t>(meta, "seed");
  const json& steps = field(j, "steps");
  if (!steps.is_array()) throw std::runtime_error("field 'steps' must be an array");
  for (const json& s : steps) {
    StepRecord rec;
    rec.step_index = get_integer<std::size_t>(s, "i");
    rec.selected_token_id = get_integer<std::int64_t>(s, "sel");
    const json& topk = field(s, "topk");
    if (!topk.is_array()) throw std::runtime_error("field 'topk' must be an array");
    for (const json& e : topk) {
      TopkEntry entry;
      entry.token_id = get_integer<std::int64_t>(e, "t");
      entry.prob = get_number(e, "p");
      const auto z = e.find("z");
      if (z != e.end() && !z->is_null()) {
        if (!z->is_number()) throw std::runtime_error("field 'z' must be a number or null");
        entry.logit = z->get<double>();
      }
      rec.topk.push_back(entry);
    }
    t.steps.push_back(std::move(rec));
  }
  return t;
}

void write_json_trace(std::ostream& out, const TokenTrace& t) {
  out << "{\"prompt_id\":" << json(t.prompt_id).dump() << ",\"run_id\":" << json(t.run_id).dump()
      << ",\"meta\":{\"model\":" << json(t.meta.model).dump() << ",\"gpu\":" << json(t.meta.gpu).dump()
      << ",\"batch_size\":" << t.meta.batch_size << ",\"precision\":" << json(t.meta.precision).dump()
      << ",\"temperature\":" << format_real(t.meta.temperature) << ",\"seed\":" << t.meta.seed
      << "},\"steps\":[";
  for (std::size_t s = 0; s < t.steps.size(); ++s) {
    const StepRecord& rec = t.steps[s];
    if (s) out << ',';
    out << "{\"i\":" << rec.step_index << ",\"sel\":" << rec.selected_token_id << ",\"topk\":[";
    for (std::size_t k = 0; k < rec.topk.size(); ++k) {
      const TopkEntry& e = rec.topk[k];
      if (k) out << ',';
      out << "{\"t\":" << e.token_id << ",\"p\":" << format_real(e.prob) << ",\"z\":";
      if (e.logit && std::isfinite(*e.logit)) {
        out << format_real(*e.logit);
      } else {
        out << "null";
      }
      out << '}';
    }
    out << "]}";
  }
  out << "]}\n";
}

ParseResult parse_jsonl(std::istream& in) {
  ParseResult res;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_comment_or_blank(line)) continue;
    try {
      TokenTrace t = trace_from_json(json::parse(line));
      if (auto problem = check_trace(t); !problem.empty()) {
        res.errors.push_back({lineno, problem});
        continue;
      }
      res.traces.push_back(std::move(t));
    } catch (const json::exception& e) {
      res.errors.push_back({lineno, std::string("malformed JSON: ") + e.what()});
    } catch (const std::runtime_error& e) {
      res.errors.push_back({lineno, e.what()});
    }
  }
  return res;
}

// ---- CSV -------------------------------------------------------------------

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

template <class T>
T parse_num(const std::string& s, const char* what) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw std::runtime_error(std::string("cannot parse ") + what + " '" + s + "'");
  }
  return v;
}

void check_csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") != std::string::npos) {
    fail(ErrorKind::invalid_argument, "CSV trace field contains a separator: '" + s + "'");
  }
}

struct CsvRow {
  std::size_t line;
  std::size_t rank;
  TopkEntry entry;
  bool selected;
};

struct CsvTrace {
  TokenTrace trace;
  std::size_t first_line = 0;
  std::map<std::size_t, std::vector<CsvRow>> steps;
  std::vector<ParseIssue> errors;
};

ParseResult parse_csv(std::istream& in) {
  ParseResult res;
  std::vector<CsvTrace> pending;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  auto slot = [&](const std::string& prompt, const std::string& run, std::size_t line) -> CsvTrace& {
    const auto [it, inserted] = index.try_emplace({prompt, run}, pending.size());
    if (inserted) {
      pending.emplace_back();
      pending.back().trace.prompt_id = prompt;
      pending.back().trace.run_id = run;
      pending.back().first_line = line;
    }
    return pending[it->second];
  };

  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("#meta,", 0) == 0) {
      const auto f = split_csv(line);
      if (f.size() != 9) {
        res.errors.push_back({lineno, "meta row needs 8 fields"});
        continue;
      }
      CsvTrace& t = slot(f[1], f[2], lineno);
      try {
        t.trace.meta.model = f[3];
        t.trace.meta.gpu = f[4];
        t.trace.meta.batch_size = parse_num<std::int64_t>(f[5], "batch_size");
        t.trace.meta.precision = f[6];
        t.trace.meta.temperature = parse_num<double>(f[7], "temperature");
        t.trace.meta.seed = parse_num<std::uint64_t>(f[8], "seed");
      } catch (const std::runtime_error& e) {
        t.errors.push_back({lineno, e.what()});
      }
      continue;
    }
    if (is_comment_or_blank(line)) continue;
    if (!header_seen) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line != kCsvHeader) {
        res.errors.push_back({lineno, std::string("expected CSV header '") + kCsvHeader + "'"});
        break;
      }
      header_seen = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 8) {
      res.errors.push_back({lineno, "expected 8 fields, found " + std::to_string(f.size())});
      continue;
    }
    CsvTrace& t = slot(f[0], f[1], lineno);
    try {
      CsvRow row;
      row.line = lineno;
      const auto step = parse_num<std::size_t>(f[2], "step");
      row.rank = parse_num<std::size_t>(f[3], "rank");
      row.entry.token_id = parse_num<std::int64_t>(f[4], "token_id");
      row.entry.prob = parse_num<double>(f[5], "prob");
      if (!f[6].empty()) row.entry.logit = parse_num<double>(f[6], "logit");
      const auto sel = parse_num<int>(f[7], "selected");
      if (sel != 0 && sel != 1) throw std::runtime_error("selected must be 0 or 1");
      row.selected = sel == 1;
      if (!(row.entry.prob >= 0.0 && row.entry.prob <= 1.0)) {
        throw std::runtime_error("probability out of range");
      }
      t.steps[step].push_back(row);
    } catch (const std::runtime_error& e) {
      t.errors.push_back({lineno, e.what()});
    }
  }

  for (CsvTrace& t : pending) {
    std::size_t expect = 0;
    for (auto& [step, rows] : t.steps) {
      const std::size_t line0 = rows.front().line;
      if (step != expect) {
        t.errors.push_back({line0, "non-contiguous step index " + std::to_string(step) +
                                       " (expected " + std::to_string(expect) + ")"});
        break;
      }
      ++expect;
      std::sort(rows.begin(), rows.end(), [](const CsvRow& a, const CsvRow& b) { return a.rank < b.rank; });
      StepRecord rec;
      rec.step_index = step;
      std::size_t n_selected = 0;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k].rank != k) {
          t.errors.push_back({rows[k].line, "non-contiguous rank within step " + std::to_string(step)});
          break;
        }
        if (rows[k].selected) {
          ++n_selected;
          rec.selected_token_id = rows[k].entry.token_id;
        }
        rec.topk.push_back(rows[k].entry);
      }
      if (n_selected != 1) {
        t.errors.push_back({line0, "step " + std::to_string(step) + " must mark exactly one selected token"});
      }
      t.trace.steps.push_back(std::move(rec));
    }
    if (t.errors.empty()) {
      if (auto problem = check_trace(t.trace); !problem.empty()) {
        t.errors.push_back({t.first_line, problem});
      }
    }
    if (t.errors.empty()) {
      res.traces.push_back(std::move(t.trace));
    } else {
      res.errors.insert(res.errors.end(), t.errors.begin(), t.errors.end());
    }
  }
  std::sort(res.errors.begin(), res.errors.end(),
            [](const ParseIssue& a, const ParseIssue& b) { return a.line < b.line; });
  return res;
}

void write_csv(std::ostream& out, std::span<const TokenTrace> traces) {
  out << kCsvHeader << '\n';
  for (const TokenTrace& t : traces) {
    for (const auto* s : {&t.prompt_id, &t.run_id, &t.meta.model, &t.meta.gpu, &t.meta.precision}) {
      check_csv_field(*s);
    }
    out << "#meta," << t.prompt_id << ',' << t.run_id << ',' << t.meta.model << ',' << t.meta.gpu << ','
        << t.meta.batch_size << ',' << t.meta.precision << ',' << format_real(t.meta.temperature) << ','
        << t.meta.seed << '\n';
    for (const StepRecord& rec : t.steps) {
      for (std::size_t k = 0; k < rec.topk.size(); ++k) {
        const TopkEntry& e = rec.topk[k];
        out << t.prompt_id << ',' << t.run_id << ',' << rec.step_index << ',' << k << ',' << e.token_id << ','
            << format_real(e.prob) << ',';
        if (e.logit && std::isfinite(*e.logit)) out << format_real(*e.logit);
        out << ',' << (k == 0 ? 1 : 0) << '\n';
      }
    }
  }
}

}  // namespace

std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string check_trace(const TokenTrace& t) {
  if (!(t.meta.temperature > 0.0) || !std::isfinite(t.meta.temperature)) return "temperature must be positive";
  if (t.meta.batch_size < 1) return "batch_size must be at least 1";
  for (std::size_t s = 0; s < t.steps.size(); ++s) {
    const StepRecord& rec = t.steps[s];
    const std::string where = "step " + std::to_string(s) + ": ";
    if (rec.step_index != s) return where + "non-contiguous step index " + std::to_string(rec.step_index);
    if (rec.topk.empty()) return where + "empty top-k list";
    double total = 0.0;
    std::set<std::int64_t> ids;
    for (std::size_t k = 0; k < rec.topk.size(); ++k) {
      const TopkEntry& e = rec.topk[k];
      if (!(e.prob >= 0.0 && e.prob <= 1.0)) return where + "probability out of range";
      if (e.logit && !std::isfinite(*e.logit)) return where + "logit must be finite";
      if (k > 0 && e.prob > rec.topk[k - 1].prob) return where + "top-k not sorted by descending probability";
      if (!ids.insert(e.token_id).second) return where + "duplicate token id " + std::to_string(e.token_id);
      total += e.prob;
    }
    if (total > 1.0 + 1e-6) return where + "top-k probabilities sum above 1";
    if (rec.selected_token_id != rec.topk.front().token_id) {
      return where + "selected token is not the top-ranked token";
    }
  }
  return {};
}

TraceFormat parse_trace_format(const std::string& text) {
  if (text == "jsonl") return TraceFormat::jsonl;
  if (text == "csv") return TraceFormat::csv;
  fail(ErrorKind::invalid_argument, "unknown trace format '" + text + "' (expected jsonl or csv)");
}

ParseResult parse_traces(std::istream& in, TraceFormat format, bool strict) {
  ParseResult res = format == TraceFormat::jsonl ? parse_jsonl(in) : parse_csv(in);
  if (strict && !res.errors.empty()) throw_parse(res.errors);
  return res;
}

ParseResult parse_traces(const std::string& text, TraceFormat format, bool strict) {
  std::istringstream in(text);
  return parse_traces(in, format, strict);
}

void write_traces(std::ostream& out, std::span<const TokenTrace> traces, TraceFormat format,
                  const std::string& header) {
  if (!header.empty()) out << "# " << header << '\n';
  if (format == TraceFormat::csv) {
    write_csv(out, traces);
    return;
  }
  for (const TokenTrace& t : traces) write_json_trace(out, t);
}

std::string write_traces(std::span<const TokenTrace> traces, TraceFormat format, const std::string& header) {
  std::ostringstream out;
  write_traces(out, traces, format, header);
  return out.str();
}

AlignedEnsembleSet align_to_divergence(std::span<const TokenTrace> traces) {
  require(traces.size() >= 2, "alignment needs at least two traces");
  for (const TokenTrace& t : traces) {
    require(t.prompt_id == traces.front().prompt_id, "alignment traces belong to different prompts");
  }
  std::vector<const TokenTrace*> runs;
  for (const TokenTrace& t : traces) runs.push_back(&t);
  std::sort(runs.begin(), runs.end(), [](const TokenTrace* a, const TokenTrace* b) { return a->run_id < b->run_id; });

  AlignedEnsembleSet out;
  out.prompt_id = traces.front().prompt_id;
  out.n_runs = runs.size();

  std::size_t len = runs.front()->steps.size();
  for (const TokenTrace* t : runs) len = std::min(len, t->steps.size());
  std::size_t prefix = 0;
  while (prefix < len) {
    const std::int64_t sel = runs.front()->steps[prefix].selected_token_id;
    const bool agree = std::all_of(runs.begin(), runs.end(), [&](const TokenTrace* t) {
      return t->steps[prefix].selected_token_id == sel;
    });
    if (!agree) break;
    ++prefix;
  }
  out.common_prefix_len = prefix;
  if (prefix == 0) {
    out.warnings.push_back("prompt '" + out.prompt_id + "': runs diverge at step 0, no aligned steps");
  }

  for (std::size_t s = 0; s < prefix; ++s) {
    const std::size_t width = runs.front()->steps[s].topk.size();
    std::set<std::int64_t> ids;
    bool all_logits = true;
    for (const TokenTrace* t : runs) {
      const StepRecord& rec = t->steps[s];
      require(rec.topk.size() == width, "mismatched top-k widths at step " + std::to_string(s) +
                                            " of prompt '" + out.prompt_id + "'");
      for (const TopkEntry& e : rec.topk) {
        ids.insert(e.token_id);
        all_logits = all_logits && e.logit.has_value();
      }
    }

    RunEnsemble e;
    e.prompt_id = out.prompt_id;
    e.step_index = s;
    e.n_runs = runs.size();
    e.token_ids.assign(ids.begin(), ids.end());
    const std::size_t cols = e.token_ids.size();
    e.probs.assign(e.n_runs * cols, 0.0);
    e.imputed.assign(cols, false);
    if (all_logits) e.logits.assign(e.n_runs * cols, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t r = 0; r < runs.size(); ++r) {
      std::vector<bool> present(cols, false);
      for (const TopkEntry& entry : runs[r]->steps[s].topk) {
        const auto c = static_cast<std::size_t>(
            std::lower_bound(e.token_ids.begin(), e.token_ids.end(), entry.token_id) - e.token_ids.begin());
        present[c] = true;
        e.probs[r * cols + c] = entry.prob;
        if (all_logits) e.logits[r * cols + c] = *entry.logit;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        if (!present[c]) e.imputed[c] = true;
      }
    }
    out.ensembles.push_back(std::move(e));
  }
  return out;
}

std::vector<AlignedEnsembleSet> align_by_prompt(std::span<const TokenTrace> traces) {
  std::map<std::string, std::vector<TokenTrace>> groups;
  for (const TokenTrace& t : traces) groups[t.prompt_id].push_back(t);
  std::vector<AlignedEnsembleSet> out;
  for (auto& [prompt, group] : groups) out.push_back(align_to_divergence(group));
  return out;
}

}  // namespace ndlab
