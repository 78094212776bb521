// SPDX-License-Identifier: Apache-2.0

#include "ndlab/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "ndlab/error.hpp"
#include "ndlab/metrics.hpp"
#include "ndlab/simulator.hpp"
#include "ndlab/trace.hpp"

namespace ndlab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kPredictionHeader = "prompt_id,step,token_id,prob,regime,pred_sigma,pred_range";

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) {
    fail(ErrorKind::invalid_argument, "invalid value '" + text + "' for " + key);
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
  if (text == "0" || text == "false" || text == "no" || text == "off") return false;
  fail(ErrorKind::invalid_argument, "invalid boolean '" + text + "' for " + key);
}

std::size_t parse_count(const std::string& key, const std::string& text, std::size_t min) {
  const auto v = parse_value<std::size_t>(key, text);
  if (v < min) fail(ErrorKind::invalid_argument, key + " must be at least " + std::to_string(min));
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  const auto v = parse_value<double>(key, text);
  if (!std::isfinite(v)) fail(ErrorKind::invalid_argument, key + " must be finite");
  return v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest round-trip form, for parameters echoed in headers and summaries.
std::string short_real(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string opt_real(double x) { return std::isfinite(x) ? format_real(x) : std::string(); }

const char* bool_text(bool b) { return b ? "true" : "false"; }

// Writes through a sibling temporary so a failed command never leaves a
// truncated file behind.
template <class Fn>
void write_atomically(const fs::path& path, Fn&& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) fail(ErrorKind::io, "cannot open '" + tmp.string() + "' for writing");
      body(out);
      out.flush();
      if (!out) fail(ErrorKind::io, "failed writing '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

TraceFormat input_format(const RunConfig& cfg, const std::string& path) {
  if (!cfg.format_explicit && fs::path(path).extension() == ".csv") return TraceFormat::csv;
  return parse_trace_format(cfg.format);
}

std::vector<TokenTrace> read_trace_file(const RunConfig& cfg, const std::string& path,
                                        std::vector<std::string>& warnings) {
  if (path.empty()) fail(ErrorKind::invalid_argument, "no input trace file given");
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path + "'");
  ParseResult res = parse_traces(in, input_format(cfg, path), cfg.strict);
  for (const ParseIssue& e : res.errors) {
    warnings.push_back(path + ":" + std::to_string(e.line) + ": " + e.message);
  }
  return std::move(res.traces);
}

std::vector<AlignedEnsembleSet> align_groups(const std::vector<TokenTrace>& traces,
                                             std::vector<std::string>& warnings) {
  std::map<std::string, std::vector<TokenTrace>> groups;
  for (const TokenTrace& t : traces) groups[t.prompt_id].push_back(t);
  std::vector<AlignedEnsembleSet> out;
  for (auto& [prompt, group] : groups) {
    if (group.size() < 2) {
      warnings.push_back("prompt '" + prompt + "' has a single run; skipped");
      continue;
    }
    try {
      out.push_back(align_to_divergence(group));
    } catch (const Error& e) {
      fail(ErrorKind::validation, e.what());
    }
    for (const std::string& w : out.back().warnings) warnings.push_back(w);
  }
  return out;
}

std::vector<VariationStats> collect_stats(const std::vector<AlignedEnsembleSet>& sets, bool include_imputed) {
  std::vector<VariationStats> stats;
  for (const AlignedEnsembleSet& s : sets) {
    for (const RunEnsemble& e : s.ensembles) stats.push_back(ensemble_stats(e, include_imputed));
  }
  return stats;
}

void write_histogram(std::ostream& out, const std::string& header, const Histogram& h) {
  out << "# " << header << '\n' << "bin_lo,bin_hi,count,fraction\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    out << format_real(h.edges[b]) << ',' << format_real(h.edges[b + 1]) << ',' << h.counts[b] << ','
        << opt_real(h.fractions[b]) << '\n';
  }
}

void write_profile(std::ostream& out, const std::string& header, const BinnedProfile& p) {
  out << "# " << header << '\n' << "bin_lo,bin_hi,count,mean_range,mean_sigma\n";
  for (std::size_t b = 0; b < p.bins(); ++b) {
    out << format_real(p.bin_edges[b]) << ',' << format_real(p.bin_edges[b + 1]) << ',' << p.count[b] << ','
        << opt_real(p.mean_range[b]) << ',' << opt_real(p.mean_sigma[b]) << '\n';
  }
}

const std::vector<double>& variation_edges() {
  static const std::vector<double> edges{0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  return edges;
}

std::string summary_line(const std::string& name, const ErrorSummary& s) {
  std::ostringstream os;
  os << name << ": n=" << s.count;
  if (s.count > 0) os << " median=" << short_real(s.median) << " p90=" << short_real(s.p90);
  return os.str();
}

}  // namespace

const char* version() { return NDLAB_VERSION_STRING; }

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "vocab") vocab = parse_count(key, value, 2);
  else if (key == "hidden") hidden = parse_count(key, value, 2);
  else if (key == "runs") runs = parse_count(key, value, 2);
  else if (key == "steps") steps = parse_count(key, value, 0);
  else if (key == "prompts") prompts = parse_count(key, value, 1);
  else if (key == "top-k") top_k = parse_count(key, value, 1);
  else if (key == "fmt") fmt = std::string(fp::to_string(fp::parse_format(value).name));
  else if (key == "batch") batch = static_cast<std::int64_t>(parse_count(key, value, 1));
  else if (key == "temperature") {
    temperature = parse_real(key, value);
    require(temperature > 0.0, "temperature must be positive");
  } else if (key == "seed") seed = parse_value<std::uint64_t>(key, value);
  else if (key == "mode") mode = std::string(to_string(parse_simulation_mode(value)));
  else if (key == "sim-noise") {
    sim_noise = parse_real(key, value);
    require(sim_noise >= 0.0, "sim-noise must be non-negative");
  } else if (key == "scale") {
    scale = parse_real(key, value);
    require(scale >= 0.0, "scale must be non-negative");
  } else if (key == "order") {
    require(value == "tree" || value == "linear", "order must be 'tree' or 'linear'");
    order = value;
  } else if (key == "fused") fused = parse_bool(key, value);
  else if (key == "stop-at-divergence") stop_at_divergence = parse_bool(key, value);
  else if (key == "low") thresholds.low = parse_real(key, value);
  else if (key == "high") thresholds.high = parse_real(key, value);
  else if (key == "regime-preset") {
    require(value == "wide" || value == "narrow", "regime-preset must be 'wide' or 'narrow'");
    thresholds = value == "wide" ? RegimeThresholds::wide() : RegimeThresholds::narrow();
  } else if (key == "bin-width") {
    bin_width = parse_real(key, value);
    require(bin_width > 0.0 && bin_width <= 1.0, "bin-width must lie in (0, 1]");
  } else if (key == "include-imputed") include_imputed = parse_bool(key, value);
  else if (key == "noise-scale") {
    const double s = parse_real(key, value);
    require(s >= 0.0, "noise-scale must be non-negative");
    noise_scale = s;
  } else if (key == "run-id") run_id = value;
  else if (key == "budget") {
    budget = parse_real(key, value);
    require(budget >= 0.0, "budget must be non-negative");
  } else if (key == "input") input = value;
  else if (key == "output") output = value;
  else if (key == "out-dir") out_dir = value;
  else if (key == "predictions") predictions = value;
  else if (key == "calibrate") calibrate = value;
  else if (key == "format") {
    parse_trace_format(value);
    format = value;
    format_explicit = true;
  } else if (key == "strict") strict = parse_bool(key, value);
  else if (key == "workers") workers = parse_count(key, value, 0);
  else fail(ErrorKind::invalid_argument, "unknown configuration key '" + key + "'");

  require(thresholds.low >= 0.0 && thresholds.low <= thresholds.high && thresholds.high <= 1.0,
          "regime thresholds must satisfy 0 <= low <= high <= 1");
}

void RunConfig::load(std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::invalid_argument, origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      fail(e.kind(), origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config file '" + path + "'");
  load(in, path);
}

std::string RunConfig::echo(const std::string& command) const {
  std::ostringstream os;
  os << "ndlab " << version() << ' ' << command;
  auto kv = [&](const char* k, const auto& v) { os << ' ' << k << '=' << v; };
  auto kr = [&](const char* k, double v) { os << ' ' << k << '=' << short_real(v); };
  if (command == "simulate") {
    kv("vocab", vocab);
    kv("hidden", hidden);
    kv("runs", runs);
    kv("steps", steps);
    kv("prompts", prompts);
    kv("top-k", top_k);
    kv("fmt", fmt);
    kv("batch", batch);
    kr("temperature", temperature);
    kv("seed", seed);
    kv("mode", mode);
    kr("sim-noise", sim_noise);
    kr("scale", scale);
    kv("order", order);
    kv("fused", bool_text(fused));
    kv("stop-at-divergence", bool_text(stop_at_divergence));
    kv("entropy", "k_B=B");
  } else if (command == "analyze") {
    kr("bin-width", bin_width);
    kr("low", thresholds.low);
    kr("high", thresholds.high);
    kv("include-imputed", bool_text(include_imputed));
    kv("strict", bool_text(strict));
  } else if (command == "estimate") {
    kv("run-id", run_id.empty() ? std::string("first") : run_id);
    kv("runs", runs);
    kr("low", thresholds.low);
    kr("high", thresholds.high);
    kv("strict", bool_text(strict));
  } else if (command == "validate") {
    kr("budget", budget);
    kr("low", thresholds.low);
    kr("high", thresholds.high);
    kv("include-imputed", bool_text(include_imputed));
    kv("strict", bool_text(strict));
  }
  return os.str();
}

CommandResult cmd_simulate(const RunConfig& cfg) {
  require(!cfg.output.empty(), "simulate needs an output path");
  require(cfg.steps >= 1, "steps must be at least 1");
  const TraceFormat format = input_format(cfg, cfg.output);

  const SyntheticModel model = gen_model(cfg.vocab, cfg.hidden, cfg.seed, cfg.scale);
  SimulationConfig sc;
  sc.steps = cfg.steps;
  sc.n_runs = cfg.runs;
  sc.prompts = cfg.prompts;
  sc.top_k = std::min(cfg.top_k, cfg.vocab);
  sc.fmt = fp::parse_format(cfg.fmt);
  sc.entropy = OrderEntropy::from_batch_size(cfg.batch);
  sc.temperature = cfg.temperature;
  sc.mode = parse_simulation_mode(cfg.mode);
  sc.noise_scale = cfg.sim_noise;
  sc.policy = cfg.order == "tree" ? fp::OrderPolicy::pairwise_tree : fp::OrderPolicy::random_permutation;
  sc.fused = cfg.fused;
  sc.keep_ensembles = false;
  sc.stop_at_divergence = cfg.stop_at_divergence;
  sc.workers = cfg.workers;
  const SimulationResult res = simulate_ensemble(model, sc);

  write_atomically(cfg.output, [&](std::ostream& out) {
    write_traces(out, res.traces, format, cfg.echo("simulate"));
  });

  CommandResult out;
  std::ostringstream os;
  os << "wrote " << res.traces.size() << " traces (" << cfg.prompts << " prompt(s) x " << cfg.runs
     << " runs, up to " << cfg.steps << " steps) to " << cfg.output;
  out.summary = os.str();
  if (res.overflow_count > 0) {
    out.warnings.push_back(std::to_string(res.overflow_count) + " logit(s) saturated to infinity");
  }
  return out;
}

CommandResult cmd_analyze(const RunConfig& cfg) {
  require(!cfg.out_dir.empty(), "analyze needs an output directory");
  CommandResult out;
  const std::vector<TokenTrace> traces = read_trace_file(cfg, cfg.input, out.warnings);
  const std::vector<AlignedEnsembleSet> sets = align_groups(traces, out.warnings);
  const std::vector<VariationStats> stats = collect_stats(sets, cfg.include_imputed);
  const std::string header = cfg.echo("analyze");
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);

  std::vector<double> ranges;
  std::vector<double> sigmas;
  std::vector<double> means;
  bool any_logits = false;
  write_atomically(dir / "stats.csv", [&](std::ostream& os) {
    os << "# " << header << '\n'
       << "prompt_id,step,token_id,mean_prob,sigma,range,logit_sigma,logit_range,regime\n";
    for (const VariationStats& s : stats) {
      any_logits = any_logits || s.has_logits();
      for (std::size_t k = 0; k < s.size(); ++k) {
        os << s.prompt_id << ',' << s.step_index << ',' << s.token_ids[k] << ',' << format_real(s.mean_prob[k])
           << ',' << format_real(s.sigma[k]) << ',' << format_real(s.range[k]) << ','
           << (s.has_logits() ? opt_real(s.logit_sigma[k]) : "") << ','
           << (s.has_logits() ? opt_real(s.logit_range[k]) : "") << ','
           << to_string(sensitivity_regime(s.mean_prob[k], cfg.thresholds)) << '\n';
        ranges.push_back(s.range[k]);
        sigmas.push_back(s.sigma[k]);
        means.push_back(s.mean_prob[k]);
      }
    }
  });

  write_atomically(dir / "hist_range.csv", [&](std::ostream& os) {
    write_histogram(os, header + " table=hist_range", distribution_histogram(ranges, variation_edges()));
  });
  write_atomically(dir / "hist_sigma.csv", [&](std::ostream& os) {
    write_histogram(os, header + " table=hist_sigma", distribution_histogram(sigmas, variation_edges()));
  });
  write_atomically(dir / "hist_prob.csv", [&](std::ostream& os) {
    write_histogram(os, header + " table=hist_prob", distribution_histogram(means, probability_edges(0.1)));
  });
  write_atomically(dir / "profile_prob.csv", [&](std::ostream& os) {
    write_profile(os, header + " table=profile_prob", bin_by_probability(stats, cfg.bin_width));
  });
  if (any_logits) {
    write_atomically(dir / "profile_logit.csv", [&](std::ostream& os) {
      write_profile(os, header + " table=profile_logit",
                    bin_by_probability(stats, cfg.bin_width, Quantity::logit));
    });
  }

  std::ostringstream os;
  std::size_t observations = 0;
  for (const VariationStats& s : stats) observations += s.size();
  for (const AlignedEnsembleSet& s : sets) {
    os << "prompt " << s.prompt_id << ": common_prefix_len " << s.common_prefix_len << " (" << s.n_runs
       << " runs)\n";
  }
  os << observations << " token observations written to " << cfg.out_dir;
  if (observations == 0) out.warnings.push_back("no aligned steps; tables are empty");
  out.summary = os.str();
  return out;
}

CommandResult cmd_estimate(const RunConfig& cfg) {
  require(!cfg.output.empty(), "estimate needs an output path");
  CommandResult out;
  const std::vector<TokenTrace> traces = read_trace_file(cfg, cfg.input, out.warnings);

  NoiseScale noise;
  if (cfg.noise_scale) {
    noise = NoiseScale::supplied(*cfg.noise_scale);
  } else if (!cfg.calibrate.empty()) {
    const std::vector<TokenTrace> cal = read_trace_file(cfg, cfg.calibrate, out.warnings);
    std::vector<RunEnsemble> ensembles;
    for (AlignedEnsembleSet& s : align_groups(cal, out.warnings)) {
      for (RunEnsemble& e : s.ensembles) ensembles.push_back(std::move(e));
    }
    noise = calibrate_noise(ensembles);
  } else {
    fail(ErrorKind::invalid_argument,
         "no noise scale: pass --noise-scale <s> or --calibrate <ensemble traces with logits>");
  }

  std::map<std::string, const TokenTrace*> chosen;
  for (const TokenTrace& t : traces) {
    if (!cfg.run_id.empty() && t.run_id != cfg.run_id) continue;
    auto [it, inserted] = chosen.try_emplace(t.prompt_id, &t);
    if (!inserted && t.run_id < it->second->run_id) it->second = &t;
  }
  if (chosen.empty()) {
    fail(ErrorKind::validation, cfg.run_id.empty() ? std::string("input holds no traces")
                                                   : "run '" + cfg.run_id + "' not found in the input");
  }

  std::vector<TokenPrediction> preds;
  for (const auto& [prompt, trace] : chosen) {
    for (const StepRecord& rec : trace->steps) {
      ProbabilityVector pv;
      pv.temperature = trace->meta.temperature;
      for (const TopkEntry& e : rec.topk) pv.p.push_back(e.prob);
      const std::vector<double> sigma = predict_std(pv, noise);
      const double d = expected_range_factor(cfg.runs);
      for (std::size_t k = 0; k < rec.topk.size(); ++k) {
        preds.push_back({prompt, rec.step_index, rec.topk[k].token_id, pv.p[k], sigma[k], d * sigma[k]});
      }
    }
  }

  std::string header = cfg.echo("estimate") + " noise-scale=" + short_real(noise.s) + " noise-source=" +
                       (noise.source == NoiseScale::Source::user_supplied ? "supplied" : "calibrated");
  write_atomically(cfg.output, [&](std::ostream& os) { write_predictions(os, preds, cfg.thresholds, header); });

  std::ostringstream os;
  os << "noise scale " << short_real(noise.s)
     << (noise.source == NoiseScale::Source::user_supplied ? " (supplied)" : " (calibrated)") << "; "
     << preds.size() << " token predictions over " << chosen.size() << " prompt(s) written to " << cfg.output;
  out.summary = os.str();
  return out;
}

CommandResult cmd_validate(const RunConfig& cfg) {
  require(!cfg.predictions.empty(), "validate needs a predictions file");
  CommandResult out;
  std::ifstream pin(cfg.predictions);
  if (!pin) fail(ErrorKind::io, "cannot open '" + cfg.predictions + "'");
  const std::vector<TokenPrediction> preds = read_predictions(pin);
  const std::vector<TokenTrace> traces = read_trace_file(cfg, cfg.input, out.warnings);
  const std::vector<VariationStats> stats = collect_stats(align_groups(traces, out.warnings), cfg.include_imputed);
  const ValidationReport rep = validate_estimate(preds, stats, cfg.thresholds);

  const std::pair<const char*, const RegimeErrors*> rows[] = {
      {"all", &rep.all},
      {"suppressed_low", &rep.suppressed_low},
      {"amplified_mid", &rep.amplified_mid},
      {"suppressed_high", &rep.suppressed_high},
  };
  if (!cfg.output.empty()) {
    write_atomically(cfg.output, [&](std::ostream& os) {
      os << "# " << cfg.echo("validate") << '\n' << "regime,metric,count,median_rel_error,p90_rel_error\n";
      for (const auto& [name, errs] : rows) {
        for (const auto& [metric, s] : {std::pair{"sigma", &errs->sigma}, std::pair{"range", &errs->range}}) {
          os << name << ',' << metric << ',' << s->count << ',' << (s->count ? format_real(s->median) : "") << ','
             << (s->count ? format_real(s->p90) : "") << '\n';
        }
      }
    });
  }

  std::ostringstream os;
  os << "matched " << rep.matched << " cells (" << rep.unmatched_predictions << " predictions and "
     << rep.unmatched_observations << " observations unmatched)\n";
  for (const auto& [name, errs] : rows) {
    os << summary_line(std::string(name) + " sigma", errs->sigma) << '\n';
    os << summary_line(std::string(name) + " range", errs->range) << '\n';
  }
  const ErrorSummary& gate = rep.amplified_mid.sigma;
  if (gate.count == 0) {
    out.warnings.push_back("no mid-regime observations; error budget not evaluated");
  }
  os << "budget " << short_real(cfg.budget) << " on mid-regime median relative sigma error";
  out.summary = os.str();
  if (gate.count > 0 && gate.median > cfg.budget) {
    fail(ErrorKind::budget_exceeded, out.summary + "\nerror budget exceeded: mid-regime median " +
                                         short_real(gate.median) + " > " + short_real(cfg.budget));
  }
  return out;
}

void write_predictions(std::ostream& out, const std::vector<TokenPrediction>& preds,
                       const RegimeThresholds& thresholds, const std::string& header) {
  out << "# " << header << '\n' << kPredictionHeader << '\n';
  for (const TokenPrediction& p : preds) {
    out << p.prompt_id << ',' << p.step_index << ',' << p.token_id << ',' << format_real(p.prob) << ','
        << to_string(sensitivity_regime(p.prob, thresholds)) << ',' << format_real(p.sigma) << ','
        << format_real(p.range) << '\n';
  }
}

std::vector<TokenPrediction> read_predictions(std::istream& in) {
  std::vector<TokenPrediction> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kPredictionHeader) {
        fail(ErrorKind::parse, "predictions line " + std::to_string(lineno) + ": expected header '" +
                                   kPredictionHeader + "'");
      }
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) {
      fail(ErrorKind::parse, "predictions line " + std::to_string(lineno) + ": expected 7 fields");
    }
    try {
      TokenPrediction p;
      p.prompt_id = f[0];
      p.step_index = parse_value<std::size_t>("step", f[1]);
      p.token_id = parse_value<std::int64_t>("token_id", f[2]);
      p.prob = parse_value<double>("prob", f[3]);
      p.sigma = parse_value<double>("pred_sigma", f[5]);
      p.range = parse_value<double>("pred_range", f[6]);
      out.push_back(std::move(p));
    } catch (const Error& e) {
      fail(ErrorKind::parse, "predictions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ndlab
