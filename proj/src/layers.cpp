#include "cfd/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cfd/kernels.hpp"

namespace cfd::nn {

namespace k = cfd::kernels;

// ---------------------------------------------------------------- ParamLayout

ParamRef ParamLayout::add(const std::string& name, std::vector<int> shape, Init init, int fan_in) {
    std::string full;
    for (const auto& s : scopes_) full += s + ".";
    full += name;
    require(find(full) == nullptr, "duplicate parameter name " + full);
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    ParamRef ref{total_, n};
    entries_.push_back({std::move(full), ref, std::move(shape), init, std::max(1, fan_in)});
    total_ += n;
    return ref;
}

const ParamEntry* ParamLayout::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

template <typename Real>
std::vector<Real> ParamLayout::initialize(std::uint64_t seed) const {
    std::vector<Real> p(total_, Real(0));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& e = entries_[i];
        Rng rng(derive_seed(seed, i));
        const double scale = e.init == Init::FanIn ? 1.0 / std::sqrt(static_cast<double>(e.fan_in)) : 1.0;
        for (std::size_t j = 0; j < e.ref.size; ++j) {
            Real& v = p[e.ref.offset + j];
            switch (e.init) {
                case Init::Zero: v = Real(0); break;
                case Init::One: v = Real(1); break;
                case Init::Normal:
                case Init::FanIn: v = static_cast<Real>(rng.normal() * scale); break;
            }
        }
    }
    return p;
}

template std::vector<float> ParamLayout::initialize<float>(std::uint64_t) const;
template std::vector<double> ParamLayout::initialize<double>(std::uint64_t) const;

// ---------------------------------------------------------------- helpers

namespace {

template <typename Real>
void add_into(Tensor<Real>& dst, const Tensor<Real>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.v[i] += src.v[i];
}

template <typename Real>
Real sigmoid(Real x) {
    return Real(1) / (Real(1) + std::exp(-x));
}

template <typename Real>
Real gelu(Real x) {
    return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
}

template <typename Real>
Real gelu_grad(Real x) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.39894228040143267794);
    return cdf + x * pdf;
}

// Rows [r0, r0 + rows) of a row-major matrix with `cols` columns.
template <typename Real>
std::span<Real> rows_of(std::vector<Real>& m, int r0, int rows, int cols) {
    return std::span<Real>(m).subspan(static_cast<std::size_t>(r0) * cols, static_cast<std::size_t>(rows) * cols);
}
template <typename Real>
std::span<const Real> rows_of(const std::vector<Real>& m, int r0, int rows, int cols) {
    return std::span<const Real>(m).subspan(static_cast<std::size_t>(r0) * cols,
                                            static_cast<std::size_t>(rows) * cols);
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename Real>
Conv2d<Real>::Conv2d(ParamLayout& layout, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                     Init weight_init)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride) {
    w_ = layout.add(name + ".weight", {out_ch, in_ch, kernel, kernel}, weight_init, in_ch * kernel * kernel);
    b_ = layout.add(name + ".bias", {out_ch}, Init::Zero);
}

template <typename Real>
Tensor<Real> Conv2d<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const {
    require(x.c == in_, "conv2d: expected " + std::to_string(in_) + " input channels, got " + std::to_string(x.c));
    const k::ConvShape s{in_, out_, x.h, x.w, k_, stride_, k_ / 2};
    Tensor<Real> y(out_, s.out_height(), s.out_width());
    k::conv2d_forward<Real>(s, x.span(), w_.in(p), b_.in(p), y.span());
    cache.x = x;
    return y;
}

template <typename Real>
Tensor<Real> Conv2d<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                    const Tensor<Real>& gy, bool need_input_grad) const {
    const auto& x = cache.x;
    const k::ConvShape s{in_, out_, x.h, x.w, k_, stride_, k_ / 2};
    Tensor<Real> gx;
    if (need_input_grad) gx = Tensor<Real>(x.c, x.h, x.w);
    k::conv2d_backward<Real>(s, x.span(), w_.in(p), gy.span(), need_input_grad ? gx.span() : std::span<Real>{},
                             w_.in(g), b_.in(g));
    return gx;
}

// ---------------------------------------------------------------- GroupNorm

template <typename Real>
GroupNorm<Real>::GroupNorm(ParamLayout& layout, const std::string& name, int channels, int group_channels)
    : channels_(channels) {
    const int gc = std::min(group_channels, channels);
    require(gc > 0 && channels % gc == 0, "group norm: channels must be divisible by the group size");
    groups_ = channels / gc;
    gamma_ = layout.add(name + ".gamma", {channels}, Init::One);
    beta_ = layout.add(name + ".beta", {channels}, Init::Zero);
}

template <typename Real>
Tensor<Real> GroupNorm<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const {
    require(x.c == channels_, "group norm: channel mismatch");
    Tensor<Real> y(x.c, x.h, x.w);
    cache.mean.assign(groups_, Real(0));
    cache.rstd.assign(groups_, Real(0));
    k::group_norm_forward<Real>(channels_, x.spatial(), groups_, x.span(), gamma_.in(p), beta_.in(p), Real(1e-5),
                                y.span(), cache.mean, cache.rstd);
    cache.x = x;
    return y;
}

template <typename Real>
Tensor<Real> GroupNorm<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                       const Tensor<Real>& gy) const {
    Tensor<Real> gx(cache.x.c, cache.x.h, cache.x.w);
    k::group_norm_backward<Real>(channels_, cache.x.spatial(), groups_, cache.x.span(), gamma_.in(p), cache.mean,
                                 cache.rstd, gy.span(), gx.span(), gamma_.in(g), beta_.in(g));
    return gx;
}

// ---------------------------------------------------------------- LayerNorm

template <typename Real>
LayerNorm<Real>::LayerNorm(ParamLayout& layout, const std::string& name, int channels) : channels_(channels) {
    gamma_ = layout.add(name + ".gamma", {channels}, Init::One);
    beta_ = layout.add(name + ".beta", {channels}, Init::Zero);
}

template <typename Real>
Tensor<Real> LayerNorm<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const {
    require(x.c == channels_, "layer norm: channel mismatch");
    Tensor<Real> y(x.c, x.h, x.w);
    cache.mean.assign(x.spatial(), Real(0));
    cache.rstd.assign(x.spatial(), Real(0));
    k::layer_norm_forward<Real>(channels_, x.spatial(), x.span(), gamma_.in(p), beta_.in(p), Real(1e-5), y.span(),
                                cache.mean, cache.rstd);
    cache.x = x;
    return y;
}

template <typename Real>
Tensor<Real> LayerNorm<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                       const Tensor<Real>& gy) const {
    Tensor<Real> gx(cache.x.c, cache.x.h, cache.x.w);
    k::layer_norm_backward<Real>(channels_, cache.x.spatial(), cache.x.span(), gamma_.in(p), cache.mean, cache.rstd,
                                 gy.span(), gx.span(), gamma_.in(g), beta_.in(g));
    return gx;
}

// ---------------------------------------------------------------- Linear

template <typename Real>
Linear<Real>::Linear(ParamLayout& layout, const std::string& name, int in_features, int out_features, bool bias,
                     Init weight_init)
    : in_(in_features), out_(out_features), has_bias_(bias) {
    w_ = layout.add(name + ".weight", {out_features, in_features}, weight_init, in_features);
    if (bias) b_ = layout.add(name + ".bias", {out_features}, Init::Zero);
}

template <typename Real>
Tensor<Real> Linear<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const {
    require(x.c == in_, "linear: expected " + std::to_string(in_) + " features, got " + std::to_string(x.c));
    const int n = x.spatial();
    Tensor<Real> y(out_, x.h, x.w);
    k::gemm<Real>(false, false, out_, n, in_, w_.in(p), x.span(), Real(0), y.span());
    if (has_bias_) {
        const auto b = b_.in(p);
        for (int o = 0; o < out_; ++o)
            for (int i = 0; i < n; ++i) y.v[static_cast<std::size_t>(o) * n + i] += b[o];
    }
    cache.x = x;
    return y;
}

template <typename Real>
Tensor<Real> Linear<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                    const Tensor<Real>& gy) const {
    const auto& x = cache.x;
    const int n = x.spatial();
    k::gemm<Real>(false, true, out_, in_, n, gy.span(), x.span(), Real(1), w_.in(g));
    if (has_bias_) {
        auto gb = b_.in(g);
        for (int o = 0; o < out_; ++o) {
            Real acc = 0;
            for (int i = 0; i < n; ++i) acc += gy.v[static_cast<std::size_t>(o) * n + i];
            gb[o] += acc;
        }
    }
    Tensor<Real> gx(x.c, x.h, x.w);
    k::gemm<Real>(true, false, in_, n, out_, w_.in(p), gy.span(), Real(0), gx.span());
    return gx;
}

// ---------------------------------------------------------------- SiLU

template <typename Real>
Tensor<Real> silu_forward(const Tensor<Real>& x) {
    Tensor<Real> y(x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) y.v[i] = x.v[i] * sigmoid(x.v[i]);
    return y;
}

template <typename Real>
Tensor<Real> silu_backward(const Tensor<Real>& x, const Tensor<Real>& gy) {
    Tensor<Real> gx(x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Real s = sigmoid(x.v[i]);
        gx.v[i] = gy.v[i] * s * (Real(1) + x.v[i] * (Real(1) - s));
    }
    return gx;
}

// ---------------------------------------------------------------- Attention

template <typename Real>
Attention<Real>::Attention(ParamLayout& layout, const std::string& name, int channels, int head_channels,
                           int context_dim)
    : channels_(channels), context_dim_(context_dim) {
    require(head_channels > 0 && channels % head_channels == 0,
            "attention: channels must be divisible by the head width");
    heads_ = channels / head_channels;
    head_dim_ = head_channels;
    q_ = Linear<Real>(layout, name + ".to_q", channels, channels, false);
    k_ = Linear<Real>(layout, name + ".to_k", channels, channels, false);
    v_ = Linear<Real>(layout, name + ".to_v", channels, channels, false);
    if (context_dim > 0) {
        kc_ = layout.add(name + ".to_k_class", {channels, context_dim}, Init::FanIn, context_dim);
        vc_ = layout.add(name + ".to_v_class", {channels, context_dim}, Init::FanIn, context_dim);
    }
    out_ = Linear<Real>(layout, name + ".to_out", channels, channels, true);
}

template <typename Real>
Tensor<Real> Attention<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, std::span<const Real> context,
                                      Cache& cache, bool mask_context) const {
    require(x.c == channels_, "attention: channel mismatch");
    const bool ctx = !context.empty();
    require(!ctx || static_cast<int>(context.size()) == context_dim_, "attention: class embedding size mismatch");
    require(ctx == (context_dim_ > 0), "attention: class embedding presence does not match the layer");
    const int c = channels_, n = x.spatial(), m = n + (ctx ? 1 : 0);

    cache.x = x;
    cache.context.assign(context.begin(), context.end());
    cache.mask_context = mask_context;
    cache.q = Tensor<Real>(c, x.h, x.w);
    cache.k = Tensor<Real>(c, 1, m);
    cache.v = Tensor<Real>(c, 1, m);
    k::gemm<Real>(false, false, c, n, c, q_.weight().in(p), x.span(), Real(0), cache.q.span());
    {
        std::vector<Real> kx(static_cast<std::size_t>(c) * n), vx(static_cast<std::size_t>(c) * n);
        k::gemm<Real>(false, false, c, n, c, k_.weight().in(p), x.span(), Real(0), kx);
        k::gemm<Real>(false, false, c, n, c, v_.weight().in(p), x.span(), Real(0), vx);
        for (int ch = 0; ch < c; ++ch) {
            std::copy_n(kx.begin() + static_cast<std::ptrdiff_t>(ch) * n, n, cache.k.v.begin() + static_cast<std::ptrdiff_t>(ch) * m);
            std::copy_n(vx.begin() + static_cast<std::ptrdiff_t>(ch) * n, n, cache.v.v.begin() + static_cast<std::ptrdiff_t>(ch) * m);
        }
    }
    if (ctx) {
        std::vector<Real> kc(c), vc(c);
        k::gemm<Real>(false, false, c, 1, context_dim_, kc_.in(p), context, Real(0), kc);
        k::gemm<Real>(false, false, c, 1, context_dim_, vc_.in(p), context, Real(0), vc);
        for (int ch = 0; ch < c; ++ch) {
            cache.k.v[static_cast<std::size_t>(ch) * m + n] = kc[ch];
            cache.v.v[static_cast<std::size_t>(ch) * m + n] = vc[ch];
        }
    }

    const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim_));
    const std::size_t nm = static_cast<std::size_t>(n) * m;
    cache.probs.assign(nm * heads_, Real(0));
    cache.o = Tensor<Real>(c, x.h, x.w);
    for (int hd = 0; hd < heads_; ++hd) {
        const int r0 = hd * head_dim_;
        std::span<Real> probs = std::span<Real>(cache.probs).subspan(nm * hd, nm);
        k::gemm<Real>(true, false, n, m, head_dim_, rows_of(cache.q.v, r0, head_dim_, n),
                      rows_of(cache.k.v, r0, head_dim_, m), Real(0), probs);
        for (auto& s : probs) s *= scale;
        if (ctx && mask_context)
            for (int i = 0; i < n; ++i) probs[static_cast<std::size_t>(i) * m + n] = -std::numeric_limits<Real>::infinity();
        k::softmax_rows<Real>(n, m, probs);
        k::gemm<Real>(false, true, head_dim_, n, m, rows_of(cache.v.v, r0, head_dim_, m), probs, Real(0),
                      rows_of(cache.o.v, r0, head_dim_, n));
    }

    typename Linear<Real>::Cache unused;
    return out_.forward(p, cache.o, unused);
}

template <typename Real>
Tensor<Real> Attention<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                       const Tensor<Real>& gy, std::span<Real> grad_context) const {
    const bool ctx = !cache.context.empty();
    const int c = channels_, n = cache.x.spatial(), m = n + (ctx ? 1 : 0);

    typename Linear<Real>::Cache out_cache{cache.o};
    const Tensor<Real> go = out_.backward(p, g, out_cache, gy);

    const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim_));
    const std::size_t nm = static_cast<std::size_t>(n) * m;
    std::vector<Real> gq(static_cast<std::size_t>(c) * n, Real(0));
    std::vector<Real> gk(static_cast<std::size_t>(c) * m, Real(0));
    std::vector<Real> gv(static_cast<std::size_t>(c) * m, Real(0));
    std::vector<Real> gp(nm);
    for (int hd = 0; hd < heads_; ++hd) {
        const int r0 = hd * head_dim_;
        const auto probs = std::span<const Real>(cache.probs).subspan(nm * hd, nm);
        const auto go_h = rows_of(go.v, r0, head_dim_, n);
        const auto v_h = rows_of(cache.v.v, r0, head_dim_, m);
        k::gemm<Real>(true, false, n, m, head_dim_, go_h, v_h, Real(0), gp);
        k::gemm<Real>(false, false, head_dim_, m, n, go_h, probs, Real(0), rows_of(gv, r0, head_dim_, m));
        k::softmax_rows_backward<Real>(n, m, probs, gp);
        for (auto& s : gp) s *= scale;
        k::gemm<Real>(false, true, head_dim_, n, m, rows_of(cache.k.v, r0, head_dim_, m), gp, Real(0),
                      rows_of(gq, r0, head_dim_, n));
        k::gemm<Real>(false, false, head_dim_, m, n, rows_of(cache.q.v, r0, head_dim_, n), gp, Real(0),
                      rows_of(gk, r0, head_dim_, m));
    }

    // split token columns from the class column
    std::vector<Real> gkx(static_cast<std::size_t>(c) * n), gvx(static_cast<std::size_t>(c) * n);
    std::vector<Real> gkc(c, Real(0)), gvc(c, Real(0));
    for (int ch = 0; ch < c; ++ch) {
        std::copy_n(gk.begin() + static_cast<std::ptrdiff_t>(ch) * m, n, gkx.begin() + static_cast<std::ptrdiff_t>(ch) * n);
        std::copy_n(gv.begin() + static_cast<std::ptrdiff_t>(ch) * m, n, gvx.begin() + static_cast<std::ptrdiff_t>(ch) * n);
        if (ctx) {
            gkc[ch] = gk[static_cast<std::size_t>(ch) * m + n];
            gvc[ch] = gv[static_cast<std::size_t>(ch) * m + n];
        }
    }

    const auto& x = cache.x;
    k::gemm<Real>(false, true, c, c, n, gq, x.span(), Real(1), q_.weight().in(g));
    k::gemm<Real>(false, true, c, c, n, gkx, x.span(), Real(1), k_.weight().in(g));
    k::gemm<Real>(false, true, c, c, n, gvx, x.span(), Real(1), v_.weight().in(g));
    Tensor<Real> gx(c, x.h, x.w);
    k::gemm<Real>(true, false, c, n, c, q_.weight().in(p), gq, Real(1), gx.span());
    k::gemm<Real>(true, false, c, n, c, k_.weight().in(p), gkx, Real(1), gx.span());
    k::gemm<Real>(true, false, c, n, c, v_.weight().in(p), gvx, Real(1), gx.span());

    if (ctx) {
        const std::span<const Real> e(cache.context);
        k::gemm<Real>(false, true, c, context_dim_, 1, gkc, e, Real(1), kc_.in(g));
        k::gemm<Real>(false, true, c, context_dim_, 1, gvc, e, Real(1), vc_.in(g));
        if (!grad_context.empty()) {
            k::gemm<Real>(true, false, context_dim_, 1, c, kc_.in(p), gkc, Real(1), grad_context);
            k::gemm<Real>(true, false, context_dim_, 1, c, vc_.in(p), gvc, Real(1), grad_context);
        }
    }
    return gx;
}

// ---------------------------------------------------------------- FeedForward

template <typename Real>
FeedForward<Real>::FeedForward(ParamLayout& layout, const std::string& name, int channels, int mult)
    : inner_(channels * mult) {
    in_ = Linear<Real>(layout, name + ".proj_in", channels, 2 * inner_, true);
    out_ = Linear<Real>(layout, name + ".proj_out", inner_, channels, true);
}

template <typename Real>
Tensor<Real> FeedForward<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, Cache& cache) const {
    cache.proj = in_.forward(p, x, cache.in);
    const std::size_t half = static_cast<std::size_t>(inner_) * x.spatial();
    Tensor<Real> h(inner_, x.h, x.w);
    for (std::size_t i = 0; i < half; ++i) h.v[i] = cache.proj.v[i] * gelu(cache.proj.v[half + i]);
    return out_.forward(p, h, cache.out);
}

template <typename Real>
Tensor<Real> FeedForward<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                         const Tensor<Real>& gy) const {
    const Tensor<Real> gh = out_.backward(p, g, cache.out, gy);
    const std::size_t half = gh.size();
    Tensor<Real> gproj(cache.proj.c, cache.proj.h, cache.proj.w);
    for (std::size_t i = 0; i < half; ++i) {
        const Real a = cache.proj.v[i], gate = cache.proj.v[half + i];
        gproj.v[i] = gh.v[i] * gelu(gate);
        gproj.v[half + i] = gh.v[i] * a * gelu_grad(gate);
    }
    return in_.backward(p, g, cache.in, gproj);
}

// ---------------------------------------------------------------- SpatialTransformer

template <typename Real>
SpatialTransformer<Real>::SpatialTransformer(ParamLayout& layout, const std::string& name, int channels,
                                             int head_channels, int context_dim, int group_channels, int ff_mult)
    : name_(name) {
    ScopeGuard scope(layout, name);
    norm_ = GroupNorm<Real>(layout, "norm", channels, group_channels);
    proj_in_ = Conv2d<Real>(layout, "proj_in", channels, channels, 1, 1);
    ln1_ = LayerNorm<Real>(layout, "ln1", channels);
    self_ = Attention<Real>(layout, "self_attn", channels, head_channels, 0);
    ln2_ = LayerNorm<Real>(layout, "ln2", channels);
    cross_ = Attention<Real>(layout, "class_attn", channels, head_channels, context_dim);
    ln3_ = LayerNorm<Real>(layout, "ln3", channels);
    ff_ = FeedForward<Real>(layout, "ff", channels, ff_mult);
    proj_out_ = Conv2d<Real>(layout, "proj_out", channels, channels, 1, 1, Init::Zero);
}

template <typename Real>
Tensor<Real> SpatialTransformer<Real>::forward(std::span<const Real> p, const Tensor<Real>& x,
                                               std::span<const Real> class_emb, Cache& cache) const {
    Tensor<Real> h = proj_in_.forward(p, norm_.forward(p, x, cache.norm), cache.proj_in);
    add_into(h, self_.forward(p, ln1_.forward(p, h, cache.ln1), {}, cache.self_attn));
    add_into(h, cross_.forward(p, ln2_.forward(p, h, cache.ln2), class_emb, cache.cross_attn));
    add_into(h, ff_.forward(p, ln3_.forward(p, h, cache.ln3), cache.ff));
    Tensor<Real> y = proj_out_.forward(p, h, cache.proj_out);
    add_into(y, x);
    return y;
}

template <typename Real>
Tensor<Real> SpatialTransformer<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                                const Tensor<Real>& gy, std::span<Real> grad_class_emb) const {
    Tensor<Real> gh = proj_out_.backward(p, g, cache.proj_out, gy);
    add_into(gh, ln3_.backward(p, g, cache.ln3, ff_.backward(p, g, cache.ff, gh)));
    add_into(gh, ln2_.backward(p, g, cache.ln2, cross_.backward(p, g, cache.cross_attn, gh, grad_class_emb)));
    add_into(gh, ln1_.backward(p, g, cache.ln1, self_.backward(p, g, cache.self_attn, gh, {})));
    Tensor<Real> gx = norm_.backward(p, g, cache.norm, proj_in_.backward(p, g, cache.proj_in, gh));
    add_into(gx, gy);
    return gx;
}

// ---------------------------------------------------------------- ResBlock

template <typename Real>
ResBlock<Real>::ResBlock(ParamLayout& layout, const std::string& name, int in_ch, int out_ch, int temb_dim,
                         int group_channels)
    : in_(in_ch), out_(out_ch), has_skip_(in_ch != out_ch) {
    ScopeGuard scope(layout, name);
    gn1_ = GroupNorm<Real>(layout, "norm1", in_ch, group_channels);
    conv1_ = Conv2d<Real>(layout, "conv1", in_ch, out_ch, 3, 1);
    temb_ = Linear<Real>(layout, "time_proj", temb_dim, out_ch, true);
    gn2_ = GroupNorm<Real>(layout, "norm2", out_ch, group_channels);
    conv2_ = Conv2d<Real>(layout, "conv2", out_ch, out_ch, 3, 1);
    if (has_skip_) skip_ = Conv2d<Real>(layout, "skip", in_ch, out_ch, 1, 1);
}

template <typename Real>
Tensor<Real> ResBlock<Real>::forward(std::span<const Real> p, const Tensor<Real>& x, const Tensor<Real>& temb,
                                     Cache& cache) const {
    cache.a1 = gn1_.forward(p, x, cache.gn1);
    Tensor<Real> h = conv1_.forward(p, silu_forward(cache.a1), cache.conv1);
    cache.temb_raw = temb;
    const Tensor<Real> tp = temb_.forward(p, silu_forward(temb), cache.temb);
    const int hw = h.spatial();
    for (int ch = 0; ch < out_; ++ch)
        for (int i = 0; i < hw; ++i) h.v[static_cast<std::size_t>(ch) * hw + i] += tp.v[ch];
    cache.a2 = gn2_.forward(p, h, cache.gn2);
    Tensor<Real> y = conv2_.forward(p, silu_forward(cache.a2), cache.conv2);
    if (has_skip_)
        add_into(y, skip_.forward(p, x, cache.skip));
    else
        add_into(y, x);
    return y;
}

template <typename Real>
Tensor<Real> ResBlock<Real>::backward(std::span<const Real> p, std::span<Real> g, const Cache& cache,
                                      const Tensor<Real>& gy, Tensor<Real>& grad_temb) const {
    Tensor<Real> gh = gn2_.backward(p, g, cache.gn2, silu_backward(cache.a2, conv2_.backward(p, g, cache.conv2, gy)));
    Tensor<Real> gtp(out_, 1, 1);
    const int hw = gh.spatial();
    for (int ch = 0; ch < out_; ++ch) {
        Real acc = 0;
        for (int i = 0; i < hw; ++i) acc += gh.v[static_cast<std::size_t>(ch) * hw + i];
        gtp.v[ch] = acc;
    }
    add_into(grad_temb, silu_backward(cache.temb_raw, temb_.backward(p, g, cache.temb, gtp)));
    Tensor<Real> gx = gn1_.backward(p, g, cache.gn1, silu_backward(cache.a1, conv1_.backward(p, g, cache.conv1, gh)));
    if (has_skip_)
        add_into(gx, skip_.backward(p, g, cache.skip, gy));
    else
        add_into(gx, gy);
    return gx;
}

// ---------------------------------------------------------------- time embedding

std::vector<double> time_embedding(int t, int dim) {
    require(t >= 0, "time embedding requires t >= 0");
    require(dim > 0 && dim % 2 == 0, "time embedding dimension must be positive and even");
    const int half = dim / 2;
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e[static_cast<std::size_t>(i)] = std::sin(t * freq);
        e[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
    }
    return e;
}

// ---------------------------------------------------------------- instantiation

#define CFD_LAYER_INSTANTIATE(R)                                                        \
    template class Conv2d<R>;                                                           \
    template class GroupNorm<R>;                                                        \
    template class LayerNorm<R>;                                                        \
    template class Linear<R>;                                                           \
    template class Attention<R>;                                                        \
    template class FeedForward<R>;                                                      \
    template class SpatialTransformer<R>;                                               \
    template class ResBlock<R>;                                                         \
    template Tensor<R> silu_forward<R>(const Tensor<R>&);                               \
    template Tensor<R> silu_backward<R>(const Tensor<R>&, const Tensor<R>&);

CFD_LAYER_INSTANTIATE(float)
CFD_LAYER_INSTANTIATE(double)

}  // namespace cfd::nn
