#ifndef SPONGE_H
#define SPONGE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define SPONGE_SKIP_ON_ZERO_ACTIVATION 0

#define SPONGE_SKIP_ON_ZERO_WEIGHT 1

#define SPONGE_SKIP_ON_EITHER 2

#define SPONGE_SCOPE_POST_RELU 0

#define SPONGE_SCOPE_ALL_LAYERS 1

#define SPONGE_NORM_LAYER_MEAN 0

#define SPONGE_NORM_SUM 1

typedef enum SpongeStatus {
  SPONGE_STATUS_OK = 0,
  SPONGE_STATUS_NULL_POINTER = 1,
  SPONGE_STATUS_INVALID_ARGUMENT = 2,
  SPONGE_STATUS_SHAPE = 3,
  SPONGE_STATUS_NON_FINITE = 4,
  SPONGE_STATUS_FORMAT = 5,
  SPONGE_STATUS_IO = 6,
  SPONGE_STATUS_BATTERY_EXHAUSTED = 7,
  SPONGE_STATUS_PANIC = 8,
} SpongeStatus;

// Images and labels.
typedef struct SpongeDataset SpongeDataset;

// A trained or freshly initialised network.
typedef struct SpongeModel SpongeModel;

typedef struct SpongeTrainConfig {
  double alpha;
  size_t epochs;
  size_t batch_size;
  uint64_t seed;
  double sigma;
  double lambda;
  double poison_fraction;
  // One of the `SPONGE_SCOPE_*` constants.
  uint32_t scope;
  // One of the `SPONGE_NORM_*` constants.
  uint32_t normalization;
} SpongeTrainConfig;

typedef struct SpongeTrainSummary {
  size_t epochs;
  double task_loss;
  double val_accuracy;
  double mean_density;
} SpongeTrainSummary;

typedef struct SpongeEnergySummary {
  uint64_t total_worst_macs;
  uint64_t total_consumed_macs;
  double energy_ratio;
} SpongeEnergySummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *sponge_last_error(void);

// Fills `config` with the library defaults.
enum SpongeStatus sponge_train_config_default(struct SpongeTrainConfig *config);

// Synthetic class-prototype images of shape `channels × height × width`.
enum SpongeStatus sponge_dataset_synth(size_t samples,
                                       size_t classes,
                                       size_t channels,
                                       size_t height,
                                       size_t width,
                                       uint64_t seed,
                                       struct SpongeDataset **dataset);

enum SpongeStatus sponge_dataset_load_cifar10(const char *file, struct SpongeDataset **dataset);

enum SpongeStatus sponge_dataset_load_idx(const char *images,
                                          const char *labels,
                                          struct SpongeDataset **dataset);

// Splits into the first `n_first` samples and the rest. The source is left untouched.
enum SpongeStatus sponge_dataset_split(const struct SpongeDataset *dataset,
                                       size_t n_first,
                                       struct SpongeDataset **first,
                                       struct SpongeDataset **rest);

enum SpongeStatus sponge_dataset_len(const struct SpongeDataset *dataset, size_t *len);

// Grayscales then box-downsamples by `factor` (1 keeps the size), in place.
enum SpongeStatus sponge_dataset_shrink(struct SpongeDataset *dataset,
                                        bool grayscale,
                                        size_t factor);

void sponge_dataset_free(struct SpongeDataset *dataset);

// The default depthwise-separable network for `channels × height × width` inputs.
enum SpongeStatus sponge_model_build(size_t channels,
                                     size_t height,
                                     size_t width,
                                     size_t classes,
                                     double width_multiplier,
                                     uint64_t seed,
                                     struct SpongeModel **model);

enum SpongeStatus sponge_model_load(const char *file, struct SpongeModel **model);

enum SpongeStatus sponge_model_save(const struct SpongeModel *model, const char *file);

enum SpongeStatus sponge_model_param_count(const struct SpongeModel *model, size_t *count);

void sponge_model_free(struct SpongeModel *model);

// Trains `model` in place; on failure the model is unchanged.
// `summary` may be null.
enum SpongeStatus sponge_train(struct SpongeModel *model,
                               const struct SpongeDataset *trainset,
                               const struct SpongeDataset *valset,
                               const struct SpongeTrainConfig *config,
                               struct SpongeTrainSummary *summary);

enum SpongeStatus sponge_validate(const struct SpongeModel *model,
                                  const struct SpongeDataset *dataset,
                                  double *accuracy);

enum SpongeStatus sponge_energy(const struct SpongeModel *model,
                                const struct SpongeDataset *dataset,
                                uint32_t rule,
                                struct SpongeEnergySummary *summary);

// Per-layer energy report as JSON. Release the string with [`sponge_string_free`].
enum SpongeStatus sponge_energy_json(const struct SpongeModel *model,
                                     const struct SpongeDataset *dataset,
                                     uint32_t rule,
                                     char **json);

void sponge_string_free(char *s);

// Smoothed non-zero count `Σ x² / (x² + σ)` of a buffer.
enum SpongeStatus sponge_l0_hat(const double *data, size_t len, double sigma, double *value);

// Fraction of entries with magnitude above `tolerance`.
enum SpongeStatus sponge_true_density(const double *data,
                                      size_t len,
                                      double tolerance,
                                      double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPONGE_H */
