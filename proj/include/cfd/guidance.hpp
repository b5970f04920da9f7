#pragma once

// Implicit guidance and counterfactual generation: unconditional DDIM encoding
// to noise level D, guided DDIM decoding toward the target class, and the
// absolute-difference anomaly map.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cfd/denoiser.hpp"
#include "cfd/diffusion.hpp"

namespace cfd {

struct GuidanceConfig {
    int D = 400;
    double w = 3.0;
    int stride = 1;
    ClassLabel target_class = ClassLabel::Healthy;

    void validate(int T) const;
};

/// Noise predictor eps(x_t, c, t).
using NoiseFn = std::function<Image(const Image&, ClassLabel, int)>;

/// `net` and `params` must outlive the returned function.
NoiseFn denoiser_fn(const Denoiser<float>& net, const DenoiserParams& params);

/// w * eps(x, c, t) + (1 - w) * eps(x, 0, t); two predictor calls.
Image guided_eps(const NoiseFn& eps, const Image& xt, ClassLabel c, int t, double w);

/// 0, stride, 2*stride, ..., D (the last step may be shorter).
std::vector<int> timestep_grid(int D, int stride);

/// DDIM inversion from t = 0 to D with the unconditional prediction.
SliceState encode(const SliceState& x0, const GuidanceConfig& cfg, const NoiseFn& eps, const ScheduleTable& schedule);

/// Guided DDIM decoding from D back to 0.
SliceState decode(const SliceState& xD, const GuidanceConfig& cfg, const NoiseFn& eps, const ScheduleTable& schedule);

struct AnomalyMap {
    Image scores;          // |x0 - counterfactual|, in [0,1]
    Image counterfactual;  // clipped to [0,1]
    std::string slice_id;
    GuidanceConfig config;
    AttentionVariant variant;
};

AnomalyMap anomaly_pipeline(const Image& x0, const GuidanceConfig& cfg, const NoiseFn& eps,
                            const ScheduleTable& schedule, const std::string& slice_id = "",
                            AttentionVariant variant = {});

/// Writes `<stem>.f32` (little-endian float grid) and `<stem>.json`; with `pgm`, also `<stem>.pgm`.
void write_anomaly_map(const AnomalyMap& map, const std::string& stem, std::uint64_t checkpoint_hash,
                       bool pgm = false);

struct LoadedMap {
    Image scores;
    std::string slice_id;
};
LoadedMap read_anomaly_map(const std::string& stem);

/// 8-bit binary PGM of an image in [0,1].
void write_pgm(const Image& img, const std::string& path);

}  // namespace cfd
