#ifndef NCS_NCS_H
#define NCS_NCS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  define NCS_API __declspec(dllexport)
#else
#  define NCS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ncs_status {
  NCS_OK = 0,
  NCS_ERR_INVALID_ARGUMENT = 1,
  NCS_ERR_CONFIG = 2,
  NCS_ERR_NUMERICAL = 3,
  NCS_ERR_IO = 4,
  NCS_ERR_CONTRACT = 5,
  NCS_ERR_INTERNAL = 6
} ncs_status;

/* Field marginal scales. */
enum { NCS_SCALE_RAW = 0, NCS_SCALE_FRECHET = 1, NCS_SCALE_GUMBEL = 2 };

typedef struct ncs_grid ncs_grid;
typedef struct ncs_field ncs_field;
typedef struct ncs_mask ncs_mask;
typedef struct ncs_model ncs_model;
typedef struct ncs_experiment ncs_experiment;

/* Command-line style overrides. threads <= 0 and out == NULL mean unset. */
typedef struct ncs_overrides {
  int has_seed;
  uint64_t seed;
  const char* out;
  int threads;
} ncs_overrides;

NCS_API const char* ncs_version(void);
/* Message of the last failure on the calling thread; never NULL. */
NCS_API const char* ncs_last_error(void);
/* Process exit code for a status: 0, 2 (config), 3 (numerical), 4 (I/O). */
NCS_API int ncs_exit_code(ncs_status s);
/* 0 silences progress lines on standard error. */
NCS_API void ncs_set_verbosity(int level);

NCS_API ncs_status ncs_grid_create(int side, double lower, double upper, ncs_grid** out);
NCS_API void ncs_grid_destroy(ncs_grid* g);
NCS_API size_t ncs_grid_size(const ncs_grid* g);
NCS_API ncs_status ncs_grid_location(const ncs_grid* g, size_t index, double* x, double* y);

NCS_API ncs_status ncs_field_create(const double* values, size_t n, int scale, ncs_field** out);
NCS_API ncs_status ncs_field_read(const char* path, ncs_field** out, int* side);
NCS_API ncs_status ncs_field_write(const char* path, int side, const ncs_field* f);
NCS_API size_t ncs_field_size(const ncs_field* f);
NCS_API int ncs_field_scale(const ncs_field* f);
NCS_API ncs_status ncs_field_values(const ncs_field* f, double* out, size_t n);
NCS_API void ncs_field_destroy(ncs_field* f);

/* Any nonzero byte marks an observed location. */
NCS_API ncs_status ncs_mask_create(const uint8_t* bits, size_t n, ncs_mask** out);
NCS_API ncs_status ncs_mask_sample_bernoulli(const ncs_grid* g, double rho, uint64_t seed, ncs_mask** out);
NCS_API ncs_status ncs_mask_sample_fixed_count(const ncs_grid* g, size_t k, uint64_t seed, ncs_mask** out);
NCS_API ncs_status ncs_mask_read(const char* path, ncs_mask** out, int* side);
NCS_API ncs_status ncs_mask_write(const char* path, int side, const ncs_mask* m);
NCS_API size_t ncs_mask_size(const ncs_mask* m);
NCS_API size_t ncs_mask_observed_count(const ncs_mask* m);
NCS_API void ncs_mask_destroy(ncs_mask* m);

/* expected_side <= 0 accepts any side. */
NCS_API ncs_status ncs_model_load(const char* path, int expected_side, ncs_model** out);
NCS_API int ncs_model_side(const ncs_model* m);
NCS_API size_t ncs_model_parameter_count(const ncs_model* m);
/* Writes `count` completions of `obs` to `out` (count * n doubles);
   completion i fills out[i * n, (i + 1) * n) and uses stream i of `seed`. */
NCS_API ncs_status ncs_model_sample(const ncs_model* m, const ncs_field* obs, const ncs_mask* mask, double theta,
                                    uint64_t seed, size_t count, int suppress_final_noise, double* out);
NCS_API void ncs_model_destroy(ncs_model* m);

NCS_API ncs_status ncs_experiment_load(const char* path, const ncs_overrides* ov, ncs_experiment** out);
NCS_API ncs_status ncs_experiment_parse(const char* toml_text, const ncs_overrides* ov, ncs_experiment** out);
NCS_API const char* ncs_experiment_out_dir(const ncs_experiment* e);
NCS_API uint64_t ncs_experiment_seed(const ncs_experiment* e);
NCS_API void ncs_experiment_destroy(ncs_experiment* e);

NCS_API ncs_status ncs_cmd_simulate(const ncs_experiment* e, size_t count, int with_masks);
/* resume may be NULL. */
NCS_API ncs_status ncs_cmd_train(const ncs_experiment* e, const char* resume);
NCS_API ncs_status ncs_cmd_sample(const ncs_experiment* e, const char* checkpoint, const char* observations,
                                  const char* mask, size_t count);
/* Exactly one of checkpoint (non-NULL) or oracle (nonzero). */
NCS_API ncs_status ncs_cmd_validate(const ncs_experiment* e, const char* checkpoint, int oracle);
NCS_API ncs_status ncs_cmd_report(const ncs_experiment* e, const char* dataset_dir);

#ifdef __cplusplus
}
#endif

#endif
