// SPDX-License-Identifier: Apache-2.0

#include "ndlab/ndlab.h"

#include <algorithm>
#include <cstring>
#include <exception>
#include <fstream>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "ndlab/error.hpp"
#include "ndlab/estimator.hpp"
#include "ndlab/fpemu.hpp"
#include "ndlab/metrics.hpp"
#include "ndlab/pipeline.hpp"
#include "ndlab/softmax.hpp"
#include "ndlab/trace.hpp"

struct ndl_config {
  ndlab::RunConfig cfg;
};

struct ndl_report {
  ndlab::CommandResult result;
};

struct ndl_traces {
  std::vector<ndlab::TokenTrace> traces;
  std::size_t errors = 0;
};

namespace {

thread_local std::string g_last_error;

ndl_status status_of(ndlab::ErrorKind kind) {
  switch (kind) {
    case ndlab::ErrorKind::invalid_argument: return NDL_INVALID_ARGUMENT;
    case ndlab::ErrorKind::parse: return NDL_PARSE_ERROR;
    case ndlab::ErrorKind::io: return NDL_IO_ERROR;
    case ndlab::ErrorKind::validation: return NDL_VALIDATION_ERROR;
    case ndlab::ErrorKind::budget_exceeded: return NDL_BUDGET_EXCEEDED;
  }
  return NDL_INTERNAL_ERROR;
}

template <class Fn>
ndl_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return NDL_OK;
  } catch (const ndlab::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return NDL_INTERNAL_ERROR;
}

void need(const void* p, const char* what) {
  if (p == nullptr) ndlab::fail(ndlab::ErrorKind::invalid_argument, std::string(what) + " is null");
}

void need_array(const void* p, std::size_t n, const char* what) {
  if (n > 0) need(p, what);
}

ndlab::fp::FloatFormat format_of(ndl_format f) {
  switch (f) {
    case NDL_BF16: return ndlab::fp::FloatFormat::bf16();
    case NDL_FP16: return ndlab::fp::FloatFormat::fp16();
    case NDL_FP32: return ndlab::fp::FloatFormat::fp32();
    case NDL_EXACT: return ndlab::fp::FloatFormat::exact();
  }
  ndlab::fail(ndlab::ErrorKind::invalid_argument, "unknown number format");
}

ndlab::TraceFormat trace_format_of(ndl_trace_format f) {
  switch (f) {
    case NDL_TRACE_JSONL: return ndlab::TraceFormat::jsonl;
    case NDL_TRACE_CSV: return ndlab::TraceFormat::csv;
  }
  ndlab::fail(ndlab::ErrorKind::invalid_argument, "unknown trace format");
}

using Command = ndlab::CommandResult (*)(const ndlab::RunConfig&);

ndl_status run_command(const ndl_config* cfg, ndl_report** out, Command cmd) {
  if (out != nullptr) *out = nullptr;
  return guarded([&] {
    need(cfg, "config");
    try {
      auto report = std::make_unique<ndl_report>();
      report->result = cmd(cfg->cfg);
      if (out != nullptr) *out = report.release();
    } catch (const ndlab::Error& e) {
      if (e.kind() == ndlab::ErrorKind::budget_exceeded && out != nullptr) {
        *out = new ndl_report{{e.what(), {}}};
      }
      throw;
    }
  });
}

}  // namespace

extern "C" {

const char* ndl_version(void) { return ndlab::version(); }

const char* ndl_last_error(void) { return g_last_error.c_str(); }

const char* ndl_status_name(ndl_status status) {
  switch (status) {
    case NDL_OK: return "ok";
    case NDL_INVALID_ARGUMENT: return "invalid argument";
    case NDL_PARSE_ERROR: return "parse error";
    case NDL_IO_ERROR: return "i/o error";
    case NDL_VALIDATION_ERROR: return "validation error";
    case NDL_BUDGET_EXCEEDED: return "error budget exceeded";
    case NDL_INTERNAL_ERROR: return "internal error";
  }
  return "unknown status";
}

ndl_status ndl_config_create(ndl_config** out) {
  return guarded([&] {
    need(out, "output handle");
    *out = new ndl_config();
  });
}

void ndl_config_destroy(ndl_config* cfg) { delete cfg; }

ndl_status ndl_config_set(ndl_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    cfg->cfg.set(key, value);
  });
}

ndl_status ndl_config_load_file(ndl_config* cfg, const char* path) {
  return guarded([&] {
    need(cfg, "config");
    need(path, "path");
    cfg->cfg.load_file(path);
  });
}

ndl_status ndl_config_echo(const ndl_config* cfg, const char* command, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(cfg, "config");
    need(command, "command");
    const std::string text = cfg->cfg.echo(command);
    if (needed != nullptr) *needed = text.size() + 1;
    if (cap > 0) {
      need(buf, "buffer");
      const std::size_t n = std::min(cap - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
  });
}

ndl_status ndl_simulate(const ndl_config* cfg, ndl_report** out) {
  return run_command(cfg, out, &ndlab::cmd_simulate);
}
ndl_status ndl_analyze(const ndl_config* cfg, ndl_report** out) {
  return run_command(cfg, out, &ndlab::cmd_analyze);
}
ndl_status ndl_estimate(const ndl_config* cfg, ndl_report** out) {
  return run_command(cfg, out, &ndlab::cmd_estimate);
}
ndl_status ndl_validate(const ndl_config* cfg, ndl_report** out) {
  return run_command(cfg, out, &ndlab::cmd_validate);
}

const char* ndl_report_summary(const ndl_report* report) {
  return report != nullptr ? report->result.summary.c_str() : "";
}

size_t ndl_report_warning_count(const ndl_report* report) {
  return report != nullptr ? report->result.warnings.size() : 0;
}

const char* ndl_report_warning(const ndl_report* report, size_t index) {
  if (report == nullptr || index >= report->result.warnings.size()) return nullptr;
  return report->result.warnings[index].c_str();
}

void ndl_report_destroy(ndl_report* report) { delete report; }

ndl_status ndl_traces_read(const char* path, ndl_trace_format format, int strict, ndl_traces** out) {
  if (out != nullptr) *out = nullptr;
  return guarded([&] {
    need(path, "path");
    need(out, "output handle");
    std::ifstream in(path, std::ios::binary);
    if (!in) ndlab::fail(ndlab::ErrorKind::io, std::string("cannot open '") + path + "'");
    ndlab::ParseResult res = ndlab::parse_traces(in, trace_format_of(format), strict != 0);
    auto handle = std::make_unique<ndl_traces>();
    handle->traces = std::move(res.traces);
    handle->errors = res.errors.size();
    *out = handle.release();
  });
}

ndl_status ndl_traces_write(const ndl_traces* traces, const char* path, ndl_trace_format format,
                            const char* header) {
  return guarded([&] {
    need(traces, "traces");
    need(path, "path");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) ndlab::fail(ndlab::ErrorKind::io, std::string("cannot open '") + path + "' for writing");
    ndlab::write_traces(out, traces->traces, trace_format_of(format), header != nullptr ? header : "");
    out.flush();
    if (!out) ndlab::fail(ndlab::ErrorKind::io, std::string("failed writing '") + path + "'");
  });
}

size_t ndl_traces_count(const ndl_traces* traces) { return traces != nullptr ? traces->traces.size() : 0; }

size_t ndl_traces_error_count(const ndl_traces* traces) { return traces != nullptr ? traces->errors : 0; }

ndl_status ndl_traces_common_prefix(const ndl_traces* traces, const char* prompt_id, size_t* out) {
  return guarded([&] {
    need(traces, "traces");
    need(prompt_id, "prompt id");
    need(out, "output");
    std::vector<ndlab::TokenTrace> group;
    for (const auto& t : traces->traces) {
      if (t.prompt_id == prompt_id) group.push_back(t);
    }
    *out = ndlab::align_to_divergence(group).common_prefix_len;
  });
}

void ndl_traces_destroy(ndl_traces* traces) { delete traces; }

ndl_status ndl_round_to_format(double x, ndl_format format, double* out) {
  return guarded([&] {
    need(out, "output");
    *out = ndlab::fp::round_to_format(x, format_of(format));
  });
}

ndl_status ndl_sum_ordered(const double* values, const size_t* order, size_t n, ndl_format format, double* out,
                           int* overflow) {
  return guarded([&] {
    need_array(values, n, "values");
    need(out, "output");
    ndlab::fp::AccumulationOrder ord = ndlab::fp::AccumulationOrder::identity(n);
    if (order != nullptr) {
      ord.permutation.assign(order, order + n);
      ord.policy = ndlab::fp::OrderPolicy::sequential;
    }
    const auto r = ndlab::fp::sum_ordered({values, n}, ord, format_of(format));
    *out = r.value;
    if (overflow != nullptr) *overflow = r.overflow ? 1 : 0;
  });
}

ndl_status ndl_exact_sum(const double* values, size_t n, double* out) {
  return guarded([&] {
    need_array(values, n, "values");
    need(out, "output");
    *out = ndlab::fp::exact_sum({values, n});
  });
}

ndl_status ndl_softmax(const double* logits, size_t n, double temperature, double* probs_out) {
  return guarded([&] {
    need_array(logits, n, "logits");
    need_array(probs_out, n, "output");
    const auto p = ndlab::softmax_t({logits, n}, temperature);
    std::copy(p.p.begin(), p.p.end(), probs_out);
  });
}

ndl_status ndl_two_token_prob(double z1, double z2, double* out) {
  return guarded([&] {
    need(out, "output");
    *out = ndlab::two_token_prob(z1, z2);
  });
}

ndl_status ndl_std_dev(const double* samples, size_t n, double* out) {
  return guarded([&] {
    need_array(samples, n, "samples");
    need(out, "output");
    *out = ndlab::std_dev({samples, n});
  });
}

ndl_status ndl_prob_range(const double* samples, size_t n, double* out) {
  return guarded([&] {
    need_array(samples, n, "samples");
    need(out, "output");
    *out = ndlab::prob_range({samples, n});
  });
}

ndl_status ndl_se_std(double sigma, size_t n, double* out) {
  return guarded([&] {
    need(out, "output");
    *out = ndlab::se_std(sigma, n);
  });
}

ndl_status ndl_predict_std(const double* probs, size_t n, double temperature, double noise_scale,
                           double* sigma_out) {
  return guarded([&] {
    need_array(probs, n, "probabilities");
    need_array(sigma_out, n, "output");
    ndlab::ProbabilityVector pv;
    pv.p.assign(probs, probs + n);
    pv.temperature = temperature;
    const auto s = ndlab::predict_std(pv, ndlab::NoiseScale::supplied(noise_scale));
    std::copy(s.begin(), s.end(), sigma_out);
  });
}

ndl_status ndl_expected_range_factor(size_t n, double* out) {
  return guarded([&] {
    need(out, "output");
    *out = ndlab::expected_range_factor(n);
  });
}

}  // extern "C"
