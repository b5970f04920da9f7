#pragma once

// Building blocks of the conditional UNet, each with an explicit backward pass.
//
// Parameters live in one flat vector described by a ParamLayout; a layer only
// stores offsets into it. Forward passes fill a per-layer Cache that the
// matching backward pass consumes. Gradients are always accumulated (+=).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfd/common.hpp"

namespace cfd::nn {

template <typename Real>
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<Real> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, Real(0)) {}

    int spatial() const noexcept { return h * w; }
    std::size_t size() const noexcept { return v.size(); }
    std::span<Real> span() noexcept { return v; }
    std::span<const Real> span() const noexcept { return v; }
    bool same_shape(const Tensor& o) const noexcept { return c == o.c && h == o.h && w == o.w; }
};

struct ParamRef {
    std::size_t offset = 0;
    std::size_t size = 0;

    template <typename Real>
    std::span<const Real> in(std::span<const Real> all) const {
        return all.subspan(offset, size);
    }
    template <typename Real>
    std::span<Real> in(std::span<Real> all) const {
        return all.subspan(offset, size);
    }
};

enum class Init { Zero, One, Normal, FanIn };

struct ParamEntry {
    std::string name;
    ParamRef ref;
    std::vector<int> shape;
    Init init = Init::Zero;
    int fan_in = 1;
};

/// Ordered registry of named parameter blocks.
class ParamLayout {
public:
    ParamRef add(const std::string& name, std::vector<int> shape, Init init, int fan_in = 1);

    /// Names added while a scope is active are prefixed with "scope.".
    void push_scope(const std::string& s) { scopes_.push_back(s); }
    void pop_scope() { scopes_.pop_back(); }

    const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return total_; }
    const ParamEntry* find(const std::string& name) const;

    /// Deterministic initialization from `seed`; each entry draws from its own derived stream.
    template <typename Real>
    std::vector<Real> initialize(std::uint64_t seed) const;

private:
    std::vector<ParamEntry> entries_;
    std::vector<std::string> scopes_;
    std::size_t total_ = 0;
};

class ScopeGuard {
public:
    ScopeGuard(ParamLayout& l, const std::string& s) : l_(l) { l_.push_scope(s); }
    ~ScopeGuard() { l_.pop_scope(); }
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;

private:
    ParamLayout& l_;
};

// ---------------------------------------------------------------------------

template <typename Real>
class Conv2d {
public:
    struct Cache {
        Tensor<Real> x;
    };
    Conv2d() = default;
    Conv2d(ParamLayout& layout, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
           Init weight_init = Init::FanIn);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const;
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache, const Tensor<Real>& gy,
                          bool need_input_grad = true) const;

    int in_channels() const noexcept { return in_; }
    int out_channels() const noexcept { return out_; }

private:
    int in_ = 0, out_ = 0, k_ = 3, stride_ = 1;
    ParamRef w_, b_;
};

template <typename Real>
class GroupNorm {
public:
    struct Cache {
        Tensor<Real> x;
        std::vector<Real> mean, rstd;
    };
    GroupNorm() = default;
    GroupNorm(ParamLayout& layout, const std::string& name, int channels, int group_channels);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const;
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                          const Tensor<Real>& gy) const;

private:
    int channels_ = 0, groups_ = 1;
    ParamRef gamma_, beta_;
};

/// Layer norm across channels of a channel-major token matrix.
template <typename Real>
class LayerNorm {
public:
    struct Cache {
        Tensor<Real> x;
        std::vector<Real> mean, rstd;
    };
    LayerNorm() = default;
    LayerNorm(ParamLayout& layout, const std::string& name, int channels);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const;
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                          const Tensor<Real>& gy) const;

private:
    int channels_ = 0;
    ParamRef gamma_, beta_;
};

/// Dense layer acting on a vector, or on every token column of a channel-major matrix.
template <typename Real>
class Linear {
public:
    struct Cache {
        Tensor<Real> x;
    };
    Linear() = default;
    Linear(ParamLayout& layout, const std::string& name, int in_features, int out_features, bool bias = true,
           Init weight_init = Init::FanIn);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const;
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                          const Tensor<Real>& gy) const;

    int in_features() const noexcept { return in_; }
    int out_features() const noexcept { return out_; }
    ParamRef weight() const noexcept { return w_; }
    ParamRef bias() const noexcept { return b_; }

private:
    int in_ = 0, out_ = 0;
    bool has_bias_ = true;
    ParamRef w_, b_;
};

template <typename Real>
Tensor<Real> silu_forward(const Tensor<Real>& x);
template <typename Real>
Tensor<Real> silu_backward(const Tensor<Real>& x, const Tensor<Real>& gy);

/// Multi-head scaled dot-product attention over the tokens of a channel-major matrix.
///
/// Self mode: keys and values come from the tokens. Class-token mode: the
/// projected class embedding is appended as one extra key/value column, so each
/// query attends over N + 1 entries.
template <typename Real>
class Attention {
public:
    struct Cache {
        Tensor<Real> x;                 // C x N input tokens
        std::vector<Real> context;      // d, empty in self mode
        Tensor<Real> q, k, v;           // C x N, C x M, C x M
        std::vector<Real> probs;        // heads x N x M
        Tensor<Real> o;                 // C x N, pre output-projection
        bool mask_context = false;
    };
    Attention() = default;
    Attention(ParamLayout& layout, const std::string& name, int channels, int head_channels, int context_dim);

    /// `context` empty selects self mode. With mask_context the class column gets zero weight.
    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, std::span<const Real> context,
                         Cache& cache, bool mask_context = false) const;
    /// Returns grad wrt x; grad wrt context is accumulated into grad_context when non-empty.
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache, const Tensor<Real>& gy,
                          std::span<Real> grad_context) const;

    int heads() const noexcept { return heads_; }
    int channels() const noexcept { return channels_; }
    bool uses_context() const noexcept { return context_dim_ > 0; }

    ParamRef wq() const noexcept { return q_.weight(); }
    ParamRef wk() const noexcept { return k_.weight(); }
    ParamRef wv() const noexcept { return v_.weight(); }
    ParamRef wk_context() const noexcept { return kc_; }
    ParamRef wv_context() const noexcept { return vc_; }
    ParamRef wo() const noexcept { return out_.weight(); }
    ParamRef bo() const noexcept { return out_.bias(); }

private:
    int channels_ = 0, heads_ = 1, head_dim_ = 1, context_dim_ = 0;
    Linear<Real> q_, k_, v_, out_;
    ParamRef kc_, vc_;  // C x d projections of the class token
};

/// GEGLU feed-forward: Linear(C -> 2F), a * gelu(g), Linear(F -> C).
template <typename Real>
class FeedForward {
public:
    struct Cache {
        typename Linear<Real>::Cache in, out;
        Tensor<Real> proj;  // 2F x N
    };
    FeedForward() = default;
    FeedForward(ParamLayout& layout, const std::string& name, int channels, int mult);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const;
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                          const Tensor<Real>& gy) const;

private:
    int inner_ = 0;
    Linear<Real> in_, out_;
};

/// Residual transformer branch inserted after a ResNet block:
/// norm, 1x1 projection in, self-attention, class-token attention, GEGLU,
/// 1x1 projection out, added back to the block input.
template <typename Real>
class SpatialTransformer {
public:
    struct Cache {
        typename GroupNorm<Real>::Cache norm;
        typename Conv2d<Real>::Cache proj_in, proj_out;
        typename LayerNorm<Real>::Cache ln1, ln2, ln3;
        typename Attention<Real>::Cache self_attn, cross_attn;
        typename FeedForward<Real>::Cache ff;
    };
    SpatialTransformer() = default;
    SpatialTransformer(ParamLayout& layout, const std::string& name, int channels, int head_channels,
                       int context_dim, int group_channels, int ff_mult);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, std::span<const Real> class_emb,
                         Cache& cache) const;
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache, const Tensor<Real>& gy,
                          std::span<Real> grad_class_emb) const;

    const Attention<Real>& cross_attention() const noexcept { return cross_; }
    std::string name() const { return name_; }

private:
    std::string name_;
    GroupNorm<Real> norm_;
    Conv2d<Real> proj_in_, proj_out_;
    LayerNorm<Real> ln1_, ln2_, ln3_;
    Attention<Real> self_, cross_;
    FeedForward<Real> ff_;
};

/// GN-SiLU-conv, + time projection, GN-SiLU-conv, plus a (1x1 when needed) skip.
template <typename Real>
class ResBlock {
public:
    struct Cache {
        typename GroupNorm<Real>::Cache gn1, gn2;
        Tensor<Real> a1, a2;  // pre-activation inputs to SiLU
        typename Conv2d<Real>::Cache conv1, conv2, skip;
        typename Linear<Real>::Cache temb;
        Tensor<Real> temb_act;  // silu(temb)
        Tensor<Real> temb_raw;
    };
    ResBlock() = default;
    ResBlock(ParamLayout& layout, const std::string& name, int in_ch, int out_ch, int temb_dim, int group_channels);

    Tensor<Real> forward(std::span<const Real> p, const Tensor<Real>& x, const Tensor<Real>& temb, Cache& cache) const;
    /// Returns grad wrt x; accumulates grad wrt temb into grad_temb.
    Tensor<Real> backward(std::span<const Real> p, std::span<Real> g, const Cache& cache, const Tensor<Real>& gy,
                          Tensor<Real>& grad_temb) const;

private:
    int in_ = 0, out_ = 0;
    GroupNorm<Real> gn1_, gn2_;
    Conv2d<Real> conv1_, conv2_, skip_;
    Linear<Real> temb_;
    bool has_skip_ = false;
};

/// Sinusoidal timestep encoding: first half sin, second half cos, geometric frequencies.
std::vector<double> time_embedding(int t, int dim);

}  // namespace cfd::nn
