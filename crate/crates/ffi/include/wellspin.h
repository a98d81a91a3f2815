#ifndef WELLSPIN_H
#define WELLSPIN_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WsStatus {
  WS_STATUS_OK = 0,
  WS_STATUS_NULL_POINTER = 1,
  WS_STATUS_INVALID_UTF8 = 2,
  WS_STATUS_INPUT = 3,
  WS_STATUS_DOMAIN = 4,
  WS_STATUS_CONFIG = 5,
  WS_STATUS_RESOURCE = 6,
  WS_STATUS_INCOMPATIBLE_MESH = 7,
  WS_STATUS_ENERGY_BOUND = 8,
  WS_STATUS_UNSUPPORTED = 9,
  WS_STATUS_IO = 10,
  WS_STATUS_PARSE = 11,
  WS_STATUS_PANIC = 12,
} WsStatus;

typedef enum WsLatticeKind {
  WS_LATTICE_KIND_ANTIFERRO_RAW = 0,
  WS_LATTICE_KIND_ANTIFERRO_REMAPPED = 1,
  WS_LATTICE_KIND_SYNTHETIC_PLANAR = 2,
} WsLatticeKind;

typedef struct WsField WsField;

typedef struct WsLattice WsLattice;

typedef struct WsMesh WsMesh;

/**
 * Well set with solved rank-one connections.
 */
typedef struct WsWellSet WsWellSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *ws_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ws_version(void);

/**
 * The pair `diag(2, 1/2)`, `diag(1/2, 2)` with constants evaluated at `delta0`.
 *
 * # Safety
 * `result` must be a valid pointer.
 */
enum WsStatus ws_wellset_reference(double delta0, struct WsWellSet **result);

/**
 * Well set from its JSON form `{"dim": n, "wells": [[row-major], ...]}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `result` a valid pointer.
 */
enum WsStatus ws_wellset_from_json(const char *json, double delta0, struct WsWellSet **result);

/**
 * # Safety
 * `ws` must come from a `ws_wellset_*` constructor, or be NULL.
 */
void ws_wellset_free(struct WsWellSet *ws);

/**
 * Separation `d`, incompatibility constant `dbar` and `c0 = min(d, dbar)`.
 * Infinite values (single-well sets) are reported as `INFINITY`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_wellset_constants(const struct WsWellSet *ws, double *d, double *dbar, double *c0);

/**
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_wellset_connection_count(const struct WsWellSet *ws, size_t *count);

/**
 * Connection `index`: wells `i`, `j`, rotation angle, `a` and `b` (2-vectors)
 * and the residual `|U_i - Q U_j - a⊗b|`.
 *
 * # Safety
 * `a` and `b` must point to two doubles each; all other pointers valid.
 */
enum WsStatus ws_wellset_connection(const struct WsWellSet *ws,
                                    size_t index,
                                    size_t *i,
                                    size_t *j,
                                    double *theta,
                                    double *a,
                                    double *b,
                                    double *residual);

/**
 * Lattice rotation angle maximising the incompatibility margin (n = 2).
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_admissible_rotation(const struct WsWellSet *ws,
                                     double delta0,
                                     double *angle,
                                     double *margin);

/**
 * Kuhn triangulation of the unit square at scale `m`, lattice rotated by `angle`.
 *
 * # Safety
 * `result` must be a valid pointer.
 */
enum WsStatus ws_mesh_kuhn2d(size_t m, double angle, struct WsMesh **result);

/**
 * # Safety
 * `mesh` must come from `ws_mesh_kuhn2d`, or be NULL.
 */
void ws_mesh_free(struct WsMesh *mesh);

/**
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_mesh_num_cells(const struct WsMesh *mesh, size_t *count);

/**
 * Simple laminate along connection `connection` of `ws` on `mesh`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_field_laminate(const struct WsMesh *mesh,
                                const struct WsWellSet *ws,
                                size_t connection,
                                double fraction,
                                double period,
                                double offset,
                                struct WsField **result);

/**
 * Affine field `x ↦ F x` with `F` given row-major (`n*n` doubles).
 *
 * # Safety
 * `gradient` must point to `n*n` doubles; other pointers valid.
 */
enum WsStatus ws_field_affine(const struct WsMesh *mesh,
                              const double *gradient,
                              struct WsField **result);

/**
 * # Safety
 * `field` must come from a `ws_field_*` constructor, or be NULL.
 */
void ws_field_free(struct WsField *field);

/**
 * Multi-well energy with density `c1 dist²(·, K)`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_field_energy(const struct WsField *field,
                              const struct WsWellSet *ws,
                              double c1,
                              double *energy);

/**
 * Classification at threshold `c0/100`: number of BAD cells and number of
 * spin-lemma violations among adjacent cells.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_field_spin_check(const struct WsField *field,
                                  const struct WsWellSet *ws,
                                  size_t *bad_cells,
                                  size_t *violations);

/**
 * # Safety
 * `result` must be a valid pointer.
 */
enum WsStatus ws_lattice_builtin(enum WsLatticeKind kind, struct WsLattice **result);

/**
 * Lattice system from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `result` a valid pointer.
 */
enum WsStatus ws_lattice_from_json(const char *json, struct WsLattice **result);

/**
 * # Safety
 * `sys` must come from a `ws_lattice_*` constructor, or be NULL.
 */
void ws_lattice_free(struct WsLattice *sys);

/**
 * Checks the window lower bound; writes the fitted constant (0 if none),
 * whether the check was exhaustive and whether it passed.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WsStatus ws_lattice_h2(const struct WsLattice *sys,
                            size_t budget,
                            uint64_t seed,
                            double *constant,
                            bool *exhaustive,
                            bool *passed);

/**
 * Runs a scenario with an optional JSON config (NULL for defaults) and
 * output root (NULL for the default). `exit_code` receives the command-line
 * exit code: 0 all gates pass, 1 a gate failed, 2 incompatible mesh,
 * 3 energy bound, 4 other errors. The status reports errors as usual.
 *
 * # Safety
 * `scenario` must be a NUL-terminated string; `config_json` and `out_dir`
 * NUL-terminated or NULL; `exit_code` valid.
 */
enum WsStatus ws_run_scenario(const char *scenario,
                              const char *config_json,
                              const char *out_dir,
                              bool force,
                              int32_t *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WELLSPIN_H */
