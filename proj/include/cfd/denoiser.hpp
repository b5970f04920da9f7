#pragma once

// Class-conditional noise-prediction UNet eps_theta(x_t, c, t).
//
// Three resolution levels with a constant channel width. Each level holds
// ResNet blocks, upgraded to ResNet + SpatialTransformer where the variant
// flag for that level is set. The bottleneck is always ResNet, transformer,
// ResNet, so even the (000) variant sees the class through deep features.
// Encoder features are concatenated into the decoder at every level.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cfd/common.hpp"
#include "cfd/layers.hpp"

namespace cfd {

/// Per-level attention flags (k1 k2 k3), level 1 being the finest.
struct AttentionVariant {
    bool k1 = false, k2 = true, k3 = true;

    bool at_level(int level) const { return level == 0 ? k1 : level == 1 ? k2 : k3; }
    std::string str() const;
    static AttentionVariant parse(const std::string& s);
    bool operator==(const AttentionVariant&) const = default;
};

struct DenoiserConfig {
    int channels = 64;
    int blocks_per_level = 1;
    int head_channels = 16;
    int class_count = 3;
    int embed_dim = 64;
    int height = 64;
    int width = 64;
    int group_channels = 8;
    int ff_mult = 4;
    AttentionVariant variant{};

    static constexpr int levels = 3;

    void validate() const;
    std::string to_json() const;
    static DenoiserConfig from_json(const std::string& text);
    bool operator==(const DenoiserConfig&) const = default;
};

/// Learnable parameters (UNet weights and the class-embedding table) in declared order.
struct DenoiserParams {
    DenoiserConfig config;
    std::vector<float> values;
    std::uint64_t seed = 0;
};

template <typename Real>
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig config);
    ~Denoiser();
    Denoiser(Denoiser&&) noexcept;
    Denoiser& operator=(Denoiser&&) noexcept;

    const DenoiserConfig& config() const noexcept;
    const nn::ParamLayout& layout() const noexcept;
    std::size_t parameter_count() const noexcept;

    std::vector<Real> initialize(std::uint64_t seed) const;

    /// Row c of the class-embedding table.
    std::vector<Real> embed_class(std::span<const Real> params, ClassLabel c) const;

    /// eps_hat for one image.
    Image predict(std::span<const Real> params, const Image& x, ClassLabel c, int t) const;

    /// Same as predict, but returns the output at full precision.
    std::vector<Real> predict_raw(std::span<const Real> params, std::span<const Real> x, ClassLabel c, int t) const;

    /// Mean squared error between target and eps_hat; grad += scale * dLoss/dparams.
    double loss_and_gradient(std::span<const Real> params, std::span<const Real> x, ClassLabel c, int t,
                             std::span<const Real> target, Real scale, std::span<Real> grad) const;

    /// Named intermediate activations of one forward pass ("enc0".."enc2", "mid", "dec2".."dec0", "out").
    std::map<std::string, std::vector<Real>> probe(std::span<const Real> params, const Image& x, ClassLabel c,
                                                   int t) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

extern template class Denoiser<float>;
extern template class Denoiser<double>;

/// Fresh parameters for `config` drawn from `seed`.
DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

/// Checkpoint archive: magic, schema version, JSON config, little-endian float32 payload.
inline constexpr std::uint32_t kCheckpointSchema = 1;
void save_checkpoint(const DenoiserParams& params, const std::string& path);
DenoiserParams load_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const DenoiserParams& params);
DenoiserParams decode_checkpoint(std::span<const std::uint8_t> bytes);
std::uint64_t checkpoint_hash(const DenoiserParams& params);

}  // namespace cfd
