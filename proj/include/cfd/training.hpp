#pragma once

// Joint conditional/unconditional training of the denoiser on the
// noise-prediction MSE, with label dropout and slice augmentation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cfd/data.hpp"
#include "cfd/denoiser.hpp"
#include "cfd/diffusion.hpp"

namespace cfd {

struct AugmentConfig {
    bool enabled = true;
    bool translate = true;
    double max_translation = 10.0;  // pixels, each axis uniform in (-max, max)
    bool rotate = true;
    double max_rotation = 0.26179938779914943;  // pi / 12
    bool scale = true;
    double scale_factor = 1.1;  // isotropic factor uniform in (2 - f, f)
    bool elastic = true;
    int elastic_grid = 4;
    double elastic_max_offset = 1.0;  // pixels
    double elastic_max_sigma = 1.0;   // pixels
    bool gamma = true;
    std::array<double, 2> gamma_range{0.7, 1.5};

    static AugmentConfig disabled() {
        AugmentConfig a;
        a.enabled = false;
        return a;
    }
};

/// Explicit transform parameters; the random augment draws one of these.
struct AugmentParams {
    double dy = 0, dx = 0;  // translation in pixels (content moves by +dy, +dx)
    double angle = 0;       // radians
    double scale = 1;
    Grid2D<float> field_y, field_x;  // optional dense displacement, same shape as the image
    double gamma = 1;
};

AugmentParams sample_augment(const AugmentConfig& cfg, int height, int width, Rng& rng);
/// Bilinear for pixels, nearest for the mask; zero outside the source.
SliceRecord apply_augment(const SliceRecord& slice, const AugmentParams& params);
SliceRecord augment(const SliceRecord& slice, const AugmentConfig& cfg, Rng& rng);

struct TrainingConfig {
    double learning_rate = 1e-5;
    int epochs = 1000;
    int batch_size = 64;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    double p_uncond = 0.15;
    AugmentConfig augment{};
    std::uint64_t seed = 0;
    double clip_grad_norm = 0.0;  // 0 disables clipping
    int max_batches_per_epoch = 0;  // 0 means a full pass over the training set
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double train_mse = 0;
    double val_mse = 0;
};

struct TrainState {
    DenoiserParams params;
    std::vector<float> adam_m, adam_v;
    int epoch = 0;
    std::int64_t step = 0;
    double best_val_mse = 0;
    int best_epoch = -1;
    DenoiserParams best_params;
    std::vector<EpochRecord> history;  // history[0] is the pre-training validation
};

TrainState make_train_state(const DenoiserConfig& config, std::uint64_t init_seed);

/// Training loss went non-finite; carries the offending item.
class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(int t, int label, double max_abs_xt);
    int t, label;
    double max_abs_xt;
};

struct StepResult {
    double loss = 0;
    std::vector<int> timesteps;
    std::vector<int> effective_labels;  // after dropout to 0
};

/// Draws (t, eps, dropout) per item from the step's seed, accumulates the batch-mean MSE
/// gradient and applies one Adam update.
StepResult training_step(const std::vector<SliceRecord>& batch, TrainState& state, const ScheduleTable& schedule,
                         const TrainingConfig& config, const Denoiser<float>& net);

/// Effective label after dropout; exposed for frequency checks.
int drop_label(int label, double p_uncond, Rng& rng);

/// Validation set with per-item timestep and noise frozen from `seed`.
struct ValidationSet {
    std::vector<SliceRecord> items;
    std::vector<int> timesteps;
    std::vector<Image> noise;
};
ValidationSet make_validation_set(std::vector<SliceRecord> items, int T, std::uint64_t seed);
double validation_mse(const ValidationSet& val, const DenoiserParams& params, const ScheduleTable& schedule,
                      const Denoiser<float>& net);

using EpochCallback = std::function<void(const TrainState&, const EpochRecord&)>;

/// Trains for config.epochs epochs (continuing from state.epoch) and tracks the
/// lowest validation MSE.
void fit(TrainState& state, const std::vector<SliceRecord>& train, const ValidationSet& val,
         const TrainingConfig& config, const EpochCallback& on_epoch = {});

/// Fresh state, then fit.
TrainState fit(const std::vector<SliceRecord>& train, const std::vector<SliceRecord>& val,
               const DenoiserConfig& model, const TrainingConfig& config, const EpochCallback& on_epoch = {});

void save_train_state(const TrainState& state, const std::string& path);
TrainState load_train_state(const std::string& path);

}  // namespace cfd
