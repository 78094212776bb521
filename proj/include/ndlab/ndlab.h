/* SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the ndlab library. Objects are opaque handles created and
 * destroyed through this API; every fallible call returns an ndl_status and
 * leaves a thread-local message retrievable with ndl_last_error().
 */

#ifndef NDLAB_NDLAB_H
#define NDLAB_NDLAB_H

#include <stddef.h>
#include <stdint.h>

#if defined(NDL_BUILDING_LIBRARY)
#define NDL_API __attribute__((visibility("default")))
#else
#define NDL_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ndl_status {
  NDL_OK = 0,
  NDL_INVALID_ARGUMENT = 1,
  NDL_PARSE_ERROR = 2,
  NDL_IO_ERROR = 3,
  NDL_VALIDATION_ERROR = 4,
  NDL_BUDGET_EXCEEDED = 5,
  NDL_INTERNAL_ERROR = 6
} ndl_status;

typedef enum ndl_format { NDL_BF16 = 0, NDL_FP16 = 1, NDL_FP32 = 2, NDL_EXACT = 3 } ndl_format;

typedef enum ndl_trace_format { NDL_TRACE_JSONL = 0, NDL_TRACE_CSV = 1 } ndl_trace_format;

typedef struct ndl_config ndl_config;
typedef struct ndl_report ndl_report;
typedef struct ndl_traces ndl_traces;

NDL_API const char* ndl_version(void);
/* Message of the most recent failure on this thread; "" after a success. */
NDL_API const char* ndl_last_error(void);
NDL_API const char* ndl_status_name(ndl_status status);

/* ---- run configuration ---- */
NDL_API ndl_status ndl_config_create(ndl_config** out);
NDL_API void ndl_config_destroy(ndl_config* cfg);
/* key is a flag name without dashes prefix, e.g. "bin-width". */
NDL_API ndl_status ndl_config_set(ndl_config* cfg, const char* key, const char* value);
NDL_API ndl_status ndl_config_load_file(ndl_config* cfg, const char* path);
/* Copies the header line the given command would write into buf (always
 * NUL-terminated); *needed receives the full length including the NUL. */
NDL_API ndl_status ndl_config_echo(const ndl_config* cfg, const char* command, char* buf, size_t cap,
                                   size_t* needed);

/* ---- commands ---- */
/* On success and on NDL_BUDGET_EXCEEDED a report is returned in *out (may be
 * NULL to discard); release it with ndl_report_destroy. */
NDL_API ndl_status ndl_simulate(const ndl_config* cfg, ndl_report** out);
NDL_API ndl_status ndl_analyze(const ndl_config* cfg, ndl_report** out);
NDL_API ndl_status ndl_estimate(const ndl_config* cfg, ndl_report** out);
NDL_API ndl_status ndl_validate(const ndl_config* cfg, ndl_report** out);

NDL_API const char* ndl_report_summary(const ndl_report* report);
NDL_API size_t ndl_report_warning_count(const ndl_report* report);
NDL_API const char* ndl_report_warning(const ndl_report* report, size_t index);
NDL_API void ndl_report_destroy(ndl_report* report);

/* ---- traces ---- */
NDL_API ndl_status ndl_traces_read(const char* path, ndl_trace_format format, int strict, ndl_traces** out);
NDL_API ndl_status ndl_traces_write(const ndl_traces* traces, const char* path, ndl_trace_format format,
                                    const char* header);
NDL_API size_t ndl_traces_count(const ndl_traces* traces);
/* Number of lines skipped during a non-strict read. */
NDL_API size_t ndl_traces_error_count(const ndl_traces* traces);
/* Length of the common prefix of all runs of the given prompt. */
NDL_API ndl_status ndl_traces_common_prefix(const ndl_traces* traces, const char* prompt_id, size_t* out);
NDL_API void ndl_traces_destroy(ndl_traces* traces);

/* ---- numeric kernels ---- */
NDL_API ndl_status ndl_round_to_format(double x, ndl_format format, double* out);
/* Sums values[order[0]], values[order[1]], ... sequentially in the format.
 * order may be NULL for the identity. *overflow (optional) is set to 1 when
 * an intermediate saturated to infinity. */
NDL_API ndl_status ndl_sum_ordered(const double* values, const size_t* order, size_t n, ndl_format format,
                                   double* out, int* overflow);
NDL_API ndl_status ndl_exact_sum(const double* values, size_t n, double* out);
NDL_API ndl_status ndl_softmax(const double* logits, size_t n, double temperature, double* probs_out);
NDL_API ndl_status ndl_two_token_prob(double z1, double z2, double* out);
NDL_API ndl_status ndl_std_dev(const double* samples, size_t n, double* out);
NDL_API ndl_status ndl_prob_range(const double* samples, size_t n, double* out);
NDL_API ndl_status ndl_se_std(double sigma, size_t n, double* out);
NDL_API ndl_status ndl_predict_std(const double* probs, size_t n, double temperature, double noise_scale,
                                   double* sigma_out);
NDL_API ndl_status ndl_expected_range_factor(size_t n, double* out);

#ifdef __cplusplus
}
#endif

#endif /* NDLAB_NDLAB_H */
