#ifndef IPN_H
#define IPN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Unseen classes only.
#define IPN_PROTOCOL_ZSL 0

// Seen and unseen classes.
#define IPN_PROTOCOL_GZSL 1

// Result of every fallible call.
typedef enum IpnStatus {
  IPN_STATUS_OK = 0,
  // Null pointer, bad UTF-8, or a value outside its domain.
  IPN_STATUS_INVALID_ARGUMENT = 1,
  IPN_STATUS_CONFIG = 2,
  IPN_STATUS_DATA = 3,
  IPN_STATUS_NUMERIC = 4,
  IPN_STATUS_IO = 5,
  IPN_STATUS_PANIC = 6,
} IpnStatus;

typedef struct IpnDataset IpnDataset;

typedef struct IpnModel IpnModel;

// Headline metrics of one evaluation. `acc_seen` and `harmonic` are only
// meaningful when `has_seen` is true.
typedef struct IpnEvalSummary {
  double acc_seen;
  double acc_unseen;
  double harmonic;
  bool has_seen;
} IpnEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *ipn_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ipn_version(void);

// Loads a dataset directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum IpnStatus ipn_dataset_load(const char *dir, struct IpnDataset **out);

// Generates a synthetic dataset from a JSON spec; null or empty selects
// the default spec.
//
// # Safety
// `spec_json` must be null or NUL-terminated; `out` must be writable.
enum IpnStatus ipn_dataset_generate(const char *spec_json, struct IpnDataset **out);

// # Safety
// `ds` must come from this library; `dir` must be NUL-terminated.
enum IpnStatus ipn_dataset_save(const struct IpnDataset *ds, const char *dir);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `ds` must be null or come from this library.
size_t ipn_dataset_num_classes(const struct IpnDataset *ds);

// # Safety
// `ds` must be null or come from this library and not be used afterwards.
void ipn_dataset_free(struct IpnDataset *ds);

// Trains a model. `hyperparams_json` may be null or empty for defaults
// and may omit fields; `variant` may be null for the full model.
//
// # Safety
// `ds` must come from this library; strings must be null or
// NUL-terminated; `out` must be writable.
enum IpnStatus ipn_model_train(const struct IpnDataset *ds,
                               const char *hyperparams_json,
                               const char *variant,
                               struct IpnModel **out);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be NUL-terminated; `out` must be writable.
enum IpnStatus ipn_model_load(const char *dir, struct IpnModel **out);

// Writes a checkpoint directory (without optimiser state).
//
// # Safety
// `model` must come from this library; `dir` must be NUL-terminated.
enum IpnStatus ipn_model_save(const struct IpnModel *model, const char *dir);

// # Safety
// `model` must be null or come from this library and not be used
// afterwards.
void ipn_model_free(struct IpnModel *model);

// Evaluates under `IPN_PROTOCOL_ZSL` or `IPN_PROTOCOL_GZSL`.
//
// # Safety
// Handles must come from this library; `out` must be writable.
enum IpnStatus ipn_evaluate(const struct IpnModel *model,
                            const struct IpnDataset *ds,
                            uint32_t protocol,
                            struct IpnEvalSummary *out);

// Full evaluation report as a JSON string, released with
// [`ipn_string_free`].
//
// # Safety
// Handles must come from this library; `out_json` must be writable.
enum IpnStatus ipn_evaluate_json(const struct IpnModel *model,
                                 const struct IpnDataset *ds,
                                 uint32_t protocol,
                                 char **out_json);

// # Safety
// `s` must be null or a string returned by this library.
void ipn_string_free(char *s);

// `2·S·U / (S + U)`, or 0 when both are 0.
double ipn_harmonic(double acc_seen, double acc_unseen);

// Mean over `targets` of each class's accuracy on its own samples.
//
// # Safety
// `predictions` and `labels` must point to `n` readable values, `targets`
// to `n_targets`; `out` must be writable.
enum IpnStatus ipn_per_class_accuracy(const size_t *predictions,
                                      const size_t *labels,
                                      size_t n,
                                      const size_t *targets,
                                      size_t n_targets,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IPN_H */
