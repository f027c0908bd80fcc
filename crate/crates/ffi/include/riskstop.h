#ifndef RISKSTOP_H
#define RISKSTOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RstopStatus {
  RSTOP_STATUS_OK = 0,
  RSTOP_STATUS_NULL_POINTER = 1,
  RSTOP_STATUS_INVALID_ARGUMENT = 2,
  RSTOP_STATUS_PARSE_ERROR = 3,
  RSTOP_STATUS_NUMERICAL_FAILURE = 4,
  RSTOP_STATUS_PANIC = 5,
} RstopStatus;

/**
 * Result of a cutting-plane run.
 */
typedef struct RstopSddp RstopSddp;

/**
 * Snell envelope over a tree.
 */
typedef struct RstopSnell RstopSnell;

/**
 * Filtration tree built from JSON.
 */
typedef struct RstopTree RstopTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *rstop_last_error_message(void);

/**
 * Evaluates the risk spec on a discrete distribution. `probs` may be null
 * for equal weights.
 *
 * # Safety
 * `spec_json` is a NUL-terminated string; `atoms` (and `probs` unless null)
 * point to `len` doubles; `out` is writable.
 */
enum RstopStatus rstop_risk_evaluate(const char *spec_json,
                                     const double *atoms,
                                     const double *probs,
                                     uintptr_t len,
                                     double *out);

/**
 * Maximizing probability weights of AVaR at level `alpha`, one per atom;
 * `sum q_i z_i` is the AVaR value.
 *
 * # Safety
 * `atoms` (and `probs` unless null) point to `len` doubles; `out` has room
 * for `len` doubles.
 */
enum RstopStatus rstop_avar_dual_weights(double alpha,
                                         const double *atoms,
                                         const double *probs,
                                         uintptr_t len,
                                         double *out);

/**
 * Reweighted probabilities from tail frequencies: the `ceil(alpha N)` most
 * frequent atoms get the raised weight.
 *
 * # Safety
 * `frequencies` points to `len` doubles; `out` has room for `len` doubles.
 */
enum RstopStatus rstop_reweight_concave(double lambda,
                                        double alpha,
                                        const double *frequencies,
                                        uintptr_t len,
                                        double *out);

/**
 * Parses a tree (`{"nodes": [{"id", "parent", "prob", "z"}, ...]}`).
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is writable.
 */
enum RstopStatus rstop_tree_from_json(const char *json, struct RstopTree **out);

/**
 * Number of nodes, 0 for a null handle.
 *
 * # Safety
 * `tree` is null or a live handle.
 */
uintptr_t rstop_tree_node_count(const struct RstopTree *tree);

/**
 * # Safety
 * `tree` is null or a handle not yet freed.
 */
void rstop_tree_free(struct RstopTree *tree);

/**
 * Envelope with the same one-step spec at every stage; `min_stop` selects
 * the minimizing recursion.
 *
 * # Safety
 * `tree` is a live handle; `spec_json` is a NUL-terminated string; `out` is writable.
 */
enum RstopStatus rstop_snell_envelope(const struct RstopTree *tree,
                                      const char *spec_json,
                                      bool min_stop,
                                      struct RstopSnell **out);

/**
 * Root value, NaN for a null handle.
 *
 * # Safety
 * `snell` is null or a live handle.
 */
double rstop_snell_root_value(const struct RstopSnell *snell);

/**
 * Copies the per-node envelope (tree node order) into `out`.
 *
 * # Safety
 * `snell` is a live handle; `out` has room for `capacity` doubles.
 */
enum RstopStatus rstop_snell_values(const struct RstopSnell *snell,
                                    double *out,
                                    uintptr_t capacity);

/**
 * # Safety
 * `snell` is null or a handle not yet freed.
 */
void rstop_snell_free(struct RstopSnell *snell);

/**
 * Grid pricing of the put for each spec in a `price` config; writes the
 * root values to `out` and their number to `written`.
 *
 * # Safety
 * `config_json` is a NUL-terminated string; `out` has room for `capacity`
 * doubles; `written` is writable.
 */
enum RstopStatus rstop_price_put(const char *config_json,
                                 double *out,
                                 uintptr_t capacity,
                                 uintptr_t *written);

/**
 * Runs the cutting-plane solver (or the concave reweighting loop) for an
 * `sddp` config.
 *
 * # Safety
 * `config_json` is a NUL-terminated string; `out` is writable.
 */
enum RstopStatus rstop_sddp_solve(const char *config_json, struct RstopSddp **out);

/**
 * Final lower bound, NaN for a null handle.
 *
 * # Safety
 * `sddp` is null or a live handle.
 */
double rstop_sddp_lower(const struct RstopSddp *sddp);

/**
 * Deterministic upper bound, NaN when unavailable (baskets) or for a null handle.
 *
 * # Safety
 * `sddp` is null or a live handle.
 */
double rstop_sddp_upper(const struct RstopSddp *sddp);

/**
 * Number of recorded iterations, 0 for a null handle.
 *
 * # Safety
 * `sddp` is null or a live handle.
 */
uintptr_t rstop_sddp_trace_len(const struct RstopSddp *sddp);

/**
 * Lower and upper bound after iteration `index + 1`; the upper bound is
 * NaN on iterations where it was not reported.
 *
 * # Safety
 * `sddp` is a live handle; `lower` and `upper` are writable.
 */
enum RstopStatus rstop_sddp_trace_get(const struct RstopSddp *sddp,
                                      uintptr_t index,
                                      double *lower,
                                      double *upper);

/**
 * # Safety
 * `sddp` is null or a handle not yet freed.
 */
void rstop_sddp_free(struct RstopSddp *sddp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RISKSTOP_H */
