#ifndef DIVDR_H
#define DIVDR_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DivdrStatus {
  DIVDR_STATUS_OK = 0,
  DIVDR_STATUS_NULL_POINTER = 1,
  DIVDR_STATUS_INVALID_ARGUMENT = 2,
  DIVDR_STATUS_SHAPE_MISMATCH = 3,
  DIVDR_STATUS_IO = 4,
  DIVDR_STATUS_FORMAT = 5,
  DIVDR_STATUS_CONFIG = 6,
  DIVDR_STATUS_NON_FINITE = 7,
  DIVDR_STATUS_PANIC = 8,
} DivdrStatus;

// A lattice with its parameters.
typedef struct DivdrLattice DivdrLattice;

// A set of route centers.
typedef struct DivdrRegistry DivdrRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread. Valid until the next
// call on the same thread; never NULL.
const char *divdr_last_error(void);

// Builds a freshly initialized lattice. `config_json` is a lattice
// config object (`num_layers`, `num_scales`, `channels`, ...), or NULL for
// the defaults.
//
// # Safety
// `config_json` must be NULL or a valid C string; `out` must be writable.
enum DivdrStatus divdr_lattice_init(const char *config_json,
                                    uint64_t seed,
                                    struct DivdrLattice **out);

// Loads the lattice of a run directory written by `divdr train`.
//
// # Safety
// `run_dir` must be a valid C string; `out` must be writable.
enum DivdrStatus divdr_lattice_load(const char *run_dir, struct DivdrLattice **out);

// # Safety
// `lattice` must be NULL or a handle from this library, not yet freed.
void divdr_lattice_free(struct DivdrLattice *lattice);

// Number of gates (A-space dimension); 0 for a NULL handle.
//
// # Safety
// `lattice` must be NULL or a live handle.
size_t divdr_lattice_gate_dim(const struct DivdrLattice *lattice);

// Values in one input image, `input_channels * height * width`.
//
// # Safety
// `lattice` must be NULL or a live handle.
size_t divdr_lattice_input_len(const struct DivdrLattice *lattice);

// Values in one logits map, `num_classes * height * width`.
//
// # Safety
// `lattice` must be NULL or a live handle.
size_t divdr_lattice_logits_len(const struct DivdrLattice *lattice);

// Runs one image through the lattice. `logits` receives class-major
// scores, `gates` the gate activations in A-space order. Either output may
// be NULL when not wanted.
//
// # Safety
// Buffers must hold at least the stated number of doubles.
enum DivdrStatus divdr_lattice_forward(const struct DivdrLattice *lattice,
                                       const double *input,
                                       size_t input_len,
                                       double *logits,
                                       size_t logits_len,
                                       double *gates,
                                       size_t gates_len);

// Normalized expected compute cost of a gate vector.
//
// # Safety
// `gates` must hold `len` doubles; `out` must be writable.
enum DivdrStatus divdr_expected_cost(const struct DivdrLattice *lattice,
                                     const double *gates,
                                     size_t len,
                                     double *out);

// Builds a registry from `k * dim` row-major center coordinates.
//
// # Safety
// `centers` must hold `k * dim` doubles; `out` must be writable.
enum DivdrStatus divdr_registry_new(const double *centers,
                                    size_t k,
                                    size_t dim,
                                    struct DivdrRegistry **out);

// Loads a `centers.csv` written by a training run.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum DivdrStatus divdr_registry_load(const char *path, struct DivdrRegistry **out);

// # Safety
// `registry` must be NULL or a handle from this library, not yet freed.
void divdr_registry_free(struct DivdrRegistry *registry);

// Number of centers; 0 for a NULL handle.
//
// # Safety
// `registry` must be NULL or a live handle.
size_t divdr_registry_k(const struct DivdrRegistry *registry);

// Index of and Euclidean distance to the nearest center; ties go to the
// lower index.
//
// # Safety
// `point` must hold `dim` doubles; outputs must be writable.
enum DivdrStatus divdr_nearest_center(const struct DivdrRegistry *registry,
                                      const double *point,
                                      size_t dim,
                                      size_t *out_index,
                                      double *out_distance);

// Margin clustering loss of gate vector `a` against the registry's
// centers, with scale `sigma_sq` and margin `alpha`. `squared` selects
// squared distances.
//
// # Safety
// `a` must hold `dim` doubles; `out` must be writable.
enum DivdrStatus divdr_clustering_loss(const struct DivdrRegistry *registry,
                                       const double *a,
                                       size_t dim,
                                       double sigma_sq,
                                       double alpha,
                                       bool squared,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIVDR_H */
