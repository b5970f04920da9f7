#include "cfd/denoiser.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>

#include "cfd/binary_io.hpp"
#include "json.hpp"

namespace cfd {

using nn::Tensor;

// ---------------------------------------------------------------- config

std::string AttentionVariant::str() const {
    return std::string{k1 ? '1' : '0', k2 ? '1' : '0', k3 ? '1' : '0'};
}

AttentionVariant AttentionVariant::parse(const std::string& s) {
    require(s.size() == 3 && std::all_of(s.begin(), s.end(), [](char ch) { return ch == '0' || ch == '1'; }),
            "attention variant must be three binary digits, got '" + s + "'");
    return {s[0] == '1', s[1] == '1', s[2] == '1'};
}

void DenoiserConfig::validate() const {
    require(channels > 0 && channels % 2 == 0, "channels must be positive and even");
    require(head_channels > 0 && channels % head_channels == 0,
            "channels_per_level must be divisible by attention_head_channels");
    require(class_count >= 3, "class_count must be >= 3");
    require(embed_dim >= 1, "embed_dim must be >= 1");
    require(blocks_per_level >= 1, "blocks_per_level must be >= 1");
    require(group_channels >= 1 && channels % std::min(group_channels, channels) == 0,
            "channels must be divisible by group_channels");
    require(ff_mult >= 1, "ff_mult must be >= 1");
    require(height > 0 && width > 0 && height % 4 == 0 && width % 4 == 0,
            "image size must be positive and divisible by 4 (two downsampling stages)");
}

std::string DenoiserConfig::to_json() const {
    nlohmann::ordered_json j;
    j["channels_per_level"] = channels;
    j["blocks_per_level"] = blocks_per_level;
    j["attention_head_channels"] = head_channels;
    j["class_count"] = class_count;
    j["embed_dim"] = embed_dim;
    j["image_height"] = height;
    j["image_width"] = width;
    j["group_channels"] = group_channels;
    j["ff_mult"] = ff_mult;
    j["variant"] = variant.str();
    return j.dump(2);
}

DenoiserConfig DenoiserConfig::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    DenoiserConfig c;
    c.channels = j.at("channels_per_level").get<int>();
    c.blocks_per_level = j.at("blocks_per_level").get<int>();
    c.head_channels = j.at("attention_head_channels").get<int>();
    c.class_count = j.at("class_count").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.height = j.at("image_height").get<int>();
    c.width = j.at("image_width").get<int>();
    c.group_channels = j.value("group_channels", 8);
    c.ff_mult = j.value("ff_mult", 4);
    c.variant = AttentionVariant::parse(j.at("variant").get<std::string>());
    c.validate();
    return c;
}

// ---------------------------------------------------------------- network

namespace {

template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
    Tensor<Real> y(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), y.v.begin());
    std::copy(b.v.begin(), b.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return y;
}

template <typename Real>
void split_channels(const Tensor<Real>& g, int first, Tensor<Real>& a, Tensor<Real>& b) {
    a = Tensor<Real>(first, g.h, g.w);
    b = Tensor<Real>(g.c - first, g.h, g.w);
    std::copy(g.v.begin(), g.v.begin() + static_cast<std::ptrdiff_t>(a.size()), a.v.begin());
    std::copy(g.v.begin() + static_cast<std::ptrdiff_t>(a.size()), g.v.end(), b.v.begin());
}

template <typename Real>
Tensor<Real> upsample_nearest2(const Tensor<Real>& x) {
    Tensor<Real> y(x.c, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c)
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx)
                y.v[(static_cast<std::size_t>(c) * y.h + yy) * y.w + xx] =
                    x.v[(static_cast<std::size_t>(c) * x.h + yy / 2) * x.w + xx / 2];
    return y;
}

template <typename Real>
Tensor<Real> upsample_nearest2_backward(const Tensor<Real>& gy) {
    Tensor<Real> gx(gy.c, gy.h / 2, gy.w / 2);
    for (int c = 0; c < gy.c; ++c)
        for (int yy = 0; yy < gy.h; ++yy)
            for (int xx = 0; xx < gy.w; ++xx)
                gx.v[(static_cast<std::size_t>(c) * gx.h + yy / 2) * gx.w + xx / 2] +=
                    gy.v[(static_cast<std::size_t>(c) * gy.h + yy) * gy.w + xx];
    return gx;
}

template <typename Real>
void add_into(Tensor<Real>& dst, const Tensor<Real>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.v[i] += src.v[i];
}

}  // namespace

template <typename Real>
struct Denoiser<Real>::Impl {
    using Res = nn::ResBlock<Real>;
    using ST = nn::SpatialTransformer<Real>;

    struct Level {
        std::vector<Res> res;
        std::vector<std::optional<ST>> attn;
    };

    struct LevelTrace {
        std::vector<typename Res::Cache> res;
        std::vector<typename ST::Cache> attn;
    };

    struct Trace {
        typename nn::Conv2d<Real>::Cache conv_in;
        typename nn::Linear<Real>::Cache time1, time2;
        Tensor<Real> time_hidden;  // pre-activation between the two time layers
        Tensor<Real> temb;
        std::vector<Real> class_emb;
        ClassLabel label{};
        std::array<LevelTrace, 3> enc, dec;
        std::array<typename nn::Conv2d<Real>::Cache, 2> down, up;
        typename Res::Cache mid1, mid2;
        typename ST::Cache mid_attn;
        typename nn::GroupNorm<Real>::Cache out_norm;
        Tensor<Real> out_pre;
        typename nn::Conv2d<Real>::Cache out_conv;
    };

    DenoiserConfig cfg;
    nn::ParamLayout layout;
    int temb_dim = 0;
    nn::ParamRef class_table;
    nn::Linear<Real> time1, time2;
    nn::Conv2d<Real> conv_in;
    std::array<Level, 3> enc, dec;
    std::array<nn::Conv2d<Real>, 2> down, up;
    Res mid1, mid2;
    ST mid_attn;
    nn::GroupNorm<Real> out_norm;
    nn::Conv2d<Real> out_conv;

    explicit Impl(DenoiserConfig c) : cfg(std::move(c)) {
        cfg.validate();
        const int ch = cfg.channels, gc = cfg.group_channels;
        temb_dim = 4 * ch;
        auto make_st = [&](const std::string& name) {
            return ST(layout, name, ch, cfg.head_channels, cfg.embed_dim, gc, cfg.ff_mult);
        };

        class_table = layout.add("class_embedding", {cfg.class_count, cfg.embed_dim}, nn::Init::Normal);
        time1 = nn::Linear<Real>(layout, "time_mlp.0", ch, temb_dim);
        time2 = nn::Linear<Real>(layout, "time_mlp.1", temb_dim, temb_dim);
        conv_in = nn::Conv2d<Real>(layout, "conv_in", 1, ch, 3, 1);
        for (int l = 0; l < 3; ++l) {
            const std::string p = "down." + std::to_string(l);
            for (int b = 0; b < cfg.blocks_per_level; ++b) {
                const std::string q = p + ".block" + std::to_string(b);
                enc[l].res.emplace_back(layout, q + ".res", ch, ch, temb_dim, gc);
                enc[l].attn.push_back(cfg.variant.at_level(l) ? std::optional<ST>(make_st(q + ".attn")) : std::nullopt);
            }
            if (l < 2) down[l] = nn::Conv2d<Real>(layout, p + ".downsample", ch, ch, 3, 2);
        }
        mid1 = Res(layout, "mid.res0", ch, ch, temb_dim, gc);
        mid_attn = make_st("mid.attn");
        mid2 = Res(layout, "mid.res1", ch, ch, temb_dim, gc);
        for (int l = 2; l >= 0; --l) {
            const std::string p = "up." + std::to_string(l);
            for (int b = 0; b < cfg.blocks_per_level; ++b) {
                const std::string q = p + ".block" + std::to_string(b);
                dec[l].res.emplace_back(layout, q + ".res", b == 0 ? 2 * ch : ch, ch, temb_dim, gc);
                dec[l].attn.push_back(cfg.variant.at_level(l) ? std::optional<ST>(make_st(q + ".attn")) : std::nullopt);
            }
            if (l > 0) up[l - 1] = nn::Conv2d<Real>(layout, p + ".upsample", ch, ch, 3, 1);
        }
        out_norm = nn::GroupNorm<Real>(layout, "out.norm", ch, gc);
        out_conv = nn::Conv2d<Real>(layout, "out.conv", ch, 1, 3, 1);
    }

    std::vector<Real> class_row(std::span<const Real> p, ClassLabel c) const {
        const int ci = static_cast<int>(c);
        require(ci >= 0 && ci < cfg.class_count, "class label outside the embedding table");
        const auto table = class_table.in(p);
        const auto begin = table.begin() + static_cast<std::ptrdiff_t>(ci) * cfg.embed_dim;
        return std::vector<Real>(begin, begin + cfg.embed_dim);
    }

    Tensor<Real> forward(std::span<const Real> p, std::span<const Real> x, ClassLabel c, int t, Trace& tr,
                         std::map<std::string, std::vector<Real>>* probe) const {
        require(p.size() == layout.size(), "parameter vector length does not match the configuration");
        require(x.size() == static_cast<std::size_t>(cfg.height) * cfg.width, "input image shape mismatch");
        require(t >= 0, "timestep must be >= 0");

        tr.label = c;
        tr.class_emb = class_row(p, c);
        const std::span<const Real> e(tr.class_emb);

        Tensor<Real> te(cfg.channels, 1, 1);
        const auto sin = nn::time_embedding(t, cfg.channels);
        for (int i = 0; i < cfg.channels; ++i) te.v[i] = static_cast<Real>(sin[i]);
        tr.time_hidden = time1.forward(p, te, tr.time1);
        tr.temb = time2.forward(p, nn::silu_forward(tr.time_hidden), tr.time2);

        Tensor<Real> img(1, cfg.height, cfg.width);
        std::copy(x.begin(), x.end(), img.v.begin());
        Tensor<Real> h = conv_in.forward(p, img, tr.conv_in);

        std::array<Tensor<Real>, 3> skips;
        for (int l = 0; l < 3; ++l) {
            auto& lt = tr.enc[l];
            lt.res.resize(enc[l].res.size());
            lt.attn.resize(enc[l].res.size());
            for (std::size_t b = 0; b < enc[l].res.size(); ++b) {
                h = enc[l].res[b].forward(p, h, tr.temb, lt.res[b]);
                if (enc[l].attn[b]) h = enc[l].attn[b]->forward(p, h, e, lt.attn[b]);
            }
            skips[l] = h;
            if (probe) (*probe)["enc" + std::to_string(l)] = h.v;
            if (l < 2) h = down[l].forward(p, h, tr.down[l]);
        }
        h = mid1.forward(p, h, tr.temb, tr.mid1);
        h = mid_attn.forward(p, h, e, tr.mid_attn);
        h = mid2.forward(p, h, tr.temb, tr.mid2);
        if (probe) (*probe)["mid"] = h.v;
        for (int l = 2; l >= 0; --l) {
            auto& lt = tr.dec[l];
            lt.res.resize(dec[l].res.size());
            lt.attn.resize(dec[l].res.size());
            h = concat_channels(h, skips[l]);
            for (std::size_t b = 0; b < dec[l].res.size(); ++b) {
                h = dec[l].res[b].forward(p, h, tr.temb, lt.res[b]);
                if (dec[l].attn[b]) h = dec[l].attn[b]->forward(p, h, e, lt.attn[b]);
            }
            if (probe) (*probe)["dec" + std::to_string(l)] = h.v;
            if (l > 0) h = up[l - 1].forward(p, upsample_nearest2(h), tr.up[l - 1]);
        }
        tr.out_pre = out_norm.forward(p, h, tr.out_norm);
        Tensor<Real> y = out_conv.forward(p, nn::silu_forward(tr.out_pre), tr.out_conv);
        if (probe) (*probe)["out"] = y.v;
        return y;
    }

    void backward(std::span<const Real> p, std::span<Real> g, const Trace& tr, const Tensor<Real>& gy) const {
        const int ch = cfg.channels;
        Tensor<Real> gtemb(temb_dim, 1, 1);
        std::vector<Real> ge(static_cast<std::size_t>(cfg.embed_dim), Real(0));

        Tensor<Real> gh = out_norm.backward(p, g, tr.out_norm,
                                           nn::silu_backward(tr.out_pre, out_conv.backward(p, g, tr.out_conv, gy)));
        std::array<Tensor<Real>, 3> gskips;
        for (int l = 0; l < 3; ++l) {
            const auto& lt = tr.dec[l];
            if (l > 0) gh = upsample_nearest2_backward(up[l - 1].backward(p, g, tr.up[l - 1], gh));
            for (std::size_t b = dec[l].res.size(); b-- > 0;) {
                if (dec[l].attn[b]) gh = dec[l].attn[b]->backward(p, g, lt.attn[b], gh, ge);
                gh = dec[l].res[b].backward(p, g, lt.res[b], gh, gtemb);
            }
            Tensor<Real> gprev;
            split_channels(gh, ch, gprev, gskips[l]);
            gh = std::move(gprev);
        }
        gh = mid2.backward(p, g, tr.mid2, gh, gtemb);
        gh = mid_attn.backward(p, g, tr.mid_attn, gh, ge);
        gh = mid1.backward(p, g, tr.mid1, gh, gtemb);
        for (int l = 2; l >= 0; --l) {
            const auto& lt = tr.enc[l];
            if (l < 2) gh = down[l].backward(p, g, tr.down[l], gh);
            add_into(gh, gskips[l]);
            for (std::size_t b = enc[l].res.size(); b-- > 0;) {
                if (enc[l].attn[b]) gh = enc[l].attn[b]->backward(p, g, lt.attn[b], gh, ge);
                gh = enc[l].res[b].backward(p, g, lt.res[b], gh, gtemb);
            }
        }
        conv_in.backward(p, g, tr.conv_in, gh, false);

        const Tensor<Real> gact = time2.backward(p, g, tr.time2, gtemb);
        time1.backward(p, g, tr.time1, nn::silu_backward(tr.time_hidden, gact));

        auto table = class_table.in(g);
        const auto off = static_cast<std::size_t>(static_cast<int>(tr.label)) * cfg.embed_dim;
        for (int i = 0; i < cfg.embed_dim; ++i) table[off + i] += ge[i];
    }
};

template <typename Real>
Denoiser<Real>::Denoiser(DenoiserConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}
template <typename Real>
Denoiser<Real>::~Denoiser() = default;
template <typename Real>
Denoiser<Real>::Denoiser(Denoiser&&) noexcept = default;
template <typename Real>
Denoiser<Real>& Denoiser<Real>::operator=(Denoiser&&) noexcept = default;

template <typename Real>
const DenoiserConfig& Denoiser<Real>::config() const noexcept {
    return impl_->cfg;
}
template <typename Real>
const nn::ParamLayout& Denoiser<Real>::layout() const noexcept {
    return impl_->layout;
}
template <typename Real>
std::size_t Denoiser<Real>::parameter_count() const noexcept {
    return impl_->layout.size();
}

template <typename Real>
std::vector<Real> Denoiser<Real>::initialize(std::uint64_t seed) const {
    return impl_->layout.template initialize<Real>(seed);
}

template <typename Real>
std::vector<Real> Denoiser<Real>::embed_class(std::span<const Real> params, ClassLabel c) const {
    return impl_->class_row(params, c);
}

template <typename Real>
std::vector<Real> Denoiser<Real>::predict_raw(std::span<const Real> params, std::span<const Real> x, ClassLabel c,
                                              int t) const {
    typename Impl::Trace tr;
    return impl_->forward(params, x, c, t, tr, nullptr).v;
}

template <typename Real>
Image Denoiser<Real>::predict(std::span<const Real> params, const Image& x, ClassLabel c, int t) const {
    require(x.height == impl_->cfg.height && x.width == impl_->cfg.width, "input image shape mismatch");
    std::vector<Real> xin(x.data.begin(), x.data.end());
    const auto y = predict_raw(params, xin, c, t);
    Image out(x.height, x.width);
    for (std::size_t i = 0; i < y.size(); ++i) out.data[i] = static_cast<float>(y[i]);
    return out;
}

template <typename Real>
double Denoiser<Real>::loss_and_gradient(std::span<const Real> params, std::span<const Real> x, ClassLabel c, int t,
                                         std::span<const Real> target, Real scale, std::span<Real> grad) const {
    require(grad.size() == params.size(), "gradient buffer length mismatch");
    require(target.size() == x.size(), "target shape mismatch");
    typename Impl::Trace tr;
    const Tensor<Real> y = impl_->forward(params, x, c, t, tr, nullptr);
    const double n = static_cast<double>(y.size());
    double loss = 0;
    Tensor<Real> gy(y.c, y.h, y.w);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = static_cast<double>(y.v[i]) - target[i];
        loss += d * d;
        gy.v[i] = static_cast<Real>(2.0 * d / n) * scale;
    }
    impl_->backward(params, grad, tr, gy);
    return loss / n;
}

template <typename Real>
std::map<std::string, std::vector<Real>> Denoiser<Real>::probe(std::span<const Real> params, const Image& x,
                                                               ClassLabel c, int t) const {
    std::vector<Real> xin(x.data.begin(), x.data.end());
    typename Impl::Trace tr;
    std::map<std::string, std::vector<Real>> acts;
    impl_->forward(params, xin, c, t, tr, &acts);
    return acts;
}

template class Denoiser<float>;
template class Denoiser<double>;

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
    Denoiser<float> net(config);
    return {config, net.initialize(seed), seed};
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[8] = {'C', 'F', 'D', 'C', 'K', 'P', 'T', '1'};
}

std::vector<std::uint8_t> encode_checkpoint(const DenoiserParams& params) {
    io::ByteWriter w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointSchema);
    w.u64(params.seed);
    const std::string cfg = params.config.to_json();
    w.u64(cfg.size());
    w.bytes(cfg.data(), cfg.size());
    w.u64(params.values.size());
    for (float v : params.values) w.f32(v);
    return w.take();
}

DenoiserParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("not a checkpoint file", 0);
    const std::uint64_t schema_at = r.offset();
    const std::uint32_t schema = r.u32();
    if (schema != kCheckpointSchema)
        throw FormatError("unsupported checkpoint schema " + std::to_string(schema), schema_at);
    DenoiserParams p;
    p.seed = r.u64();
    const std::uint64_t cfg_len = r.u64();
    const std::uint64_t cfg_at = r.offset();
    std::string cfg(r.need(cfg_len), '\0');
    r.bytes(cfg.data(), cfg.size());
    try {
        p.config = DenoiserConfig::from_json(cfg);
    } catch (const std::exception& ex) {
        throw FormatError(std::string("bad checkpoint config: ") + ex.what(), cfg_at);
    }
    const std::uint64_t count_at = r.offset();
    const std::uint64_t count = r.u64();
    const std::size_t expected = Denoiser<float>(p.config).parameter_count();
    if (count != expected)
        throw SchemaError("checkpoint holds " + std::to_string(count) + " parameters but its config needs " +
                          std::to_string(expected) + " (count at byte " + std::to_string(count_at) + ")");
    r.need(count * 4);
    p.values.resize(count);
    for (auto& v : p.values) v = r.f32();
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint payload", r.offset());
    return p;
}

void save_checkpoint(const DenoiserParams& params, const std::string& path) {
    io::write_file(path, encode_checkpoint(params));
}

DenoiserParams load_checkpoint(const std::string& path) {
    const auto bytes = io::read_file(path);
    return decode_checkpoint(bytes);
}

std::uint64_t checkpoint_hash(const DenoiserParams& params) {
    const auto bytes = encode_checkpoint(params);
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace cfd
