#ifndef ECOKIT_H
#define ECOKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ECOKIT_STATUS_OK = 0,
  ECOKIT_STATUS_NULL_POINTER = 1,
  ECOKIT_STATUS_INVALID_INPUT = 2,
  ECOKIT_STATUS_IO = 3,
  ECOKIT_STATUS_PARSE = 4,
  ECOKIT_STATUS_CONFIG = 5,
  ECOKIT_STATUS_SINGULAR_DESIGN = 6,
  ECOKIT_STATUS_BOOTSTRAP_ABORTED = 7,
  ECOKIT_STATUS_BUFFER_TOO_SMALL = 8,
  ECOKIT_STATUS_INTERNAL = 99,
} EcokitStatus;

typedef enum {
  // Divide off-diagonal sums by `m - 1`.
  ECOKIT_NORMALIZER_ROWS = 0,
  // Divide by `m (m - 1)`.
  ECOKIT_NORMALIZER_ORDERED_PAIRS = 1,
} EcokitNormalizer;

// Bootstrapped impulse responses.
typedef struct EcokitIrf EcokitIrf;

// Weekly log-size panel.
typedef struct EcokitPanel EcokitPanel;

// VAR(1) fit together with the spec it was fitted under.
typedef struct EcokitVarFit EcokitVarFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ecokit_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *ecokit_last_error(void);

// Releases a string returned by this library.
void ecokit_string_free(char *s);

// Builds a panel from a row-major `n_groups x n_weeks` matrix of log sizes.
// `names` may be null, in which case groups are named `g1`, `g2`, ...
EcokitStatus ecokit_panel_from_matrix(const double *sizes,
                                      uintptr_t n_groups,
                                      uintptr_t n_weeks,
                                      const char *const *names,
                                      EcokitPanel **out);

// Reads a `panel.csv` written by the ingest stage.
EcokitStatus ecokit_panel_read_csv(const char *path, EcokitPanel **out);

EcokitStatus ecokit_panel_dims(const EcokitPanel *panel, uintptr_t *n_groups, uintptr_t *n_weeks);

void ecokit_panel_free(EcokitPanel *panel);

// Fits a VAR(1) over every group of the panel, training on all but the last
// `holdout` weeks. `baseline` fixes the off-diagonal of Phi at 0.
EcokitStatus ecokit_var_fit(const EcokitPanel *panel,
                            uintptr_t holdout,
                            uintptr_t min_weeks,
                            bool baseline,
                            EcokitVarFit **out);

void ecokit_var_free(EcokitVarFit *fit);

// Number of members, or 0 for a null handle.
uintptr_t ecokit_var_n_members(const EcokitVarFit *fit);

// Copies Phi row-major; entry `(i, j)` is the effect of member `j` at
// `t - 1` on member `i` at `t`.
EcokitStatus ecokit_var_phi(const EcokitVarFit *fit, double *out, uintptr_t len);

// Copies the residual covariance row-major.
EcokitStatus ecokit_var_sigma(const EcokitVarFit *fit, double *out, uintptr_t len);

EcokitStatus ecokit_var_spectral_radius(const EcokitVarFit *fit, double *out);

// Average interaction and interaction strength of the fitted Phi.
EcokitStatus ecokit_var_metrics(const EcokitVarFit *fit,
                                EcokitNormalizer normalizer,
                                double *mean_interaction,
                                double *strength);

// Residual-bootstrap impulse responses with 95% bands.
EcokitStatus ecokit_irf_bootstrap(const EcokitPanel *panel,
                                  const EcokitVarFit *fit,
                                  uintptr_t horizon,
                                  uintptr_t replicates,
                                  uint64_t seed,
                                  EcokitIrf **out);

void ecokit_irf_free(EcokitIrf *irf);

// Copies the point response and band at lag `t` (0..=horizon), each
// row-major `m x m`. Any of the three buffers may be null to skip it.
EcokitStatus ecokit_irf_at(const EcokitIrf *irf,
                           uintptr_t t,
                           double *theta,
                           double *lower,
                           double *upper,
                           uintptr_t len);

// Renders the cluster network as Graphviz DOT. Free the result with
// [`ecokit_string_free`].
EcokitStatus ecokit_network_dot(const EcokitVarFit *fit,
                                const EcokitIrf *irf,
                                const char *name,
                                uintptr_t window,
                                char **out);

// Closed-form CRPS of `N(mu, sigma^2)` at `y`.
double ecokit_crps_normal(double y, double mu, double sigma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECOKIT_H */
