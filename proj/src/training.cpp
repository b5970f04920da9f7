#include "cfd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "cfd/binary_io.hpp"

namespace cfd {

// ---------------------------------------------------------------- augmentation

namespace {

// Separable Gaussian blur with zero-flux (clamped) borders.
void gaussian_blur(Grid2D<float>& g, double sigma) {
    if (sigma <= 1e-6) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    Grid2D<float> tmp(g.height, g.width);
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * g(y, std::clamp(x + i, 0, g.width - 1));
            tmp(y, x) = static_cast<float>(acc);
        }
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * tmp(std::clamp(y + i, 0, g.height - 1), x);
            g(y, x) = static_cast<float>(acc);
        }
}

// Bilinear upsampling of a coarse control grid to the full image, corners aligned.
Grid2D<float> upsample_controls(const std::vector<double>& ctrl, int n, int height, int width) {
    Grid2D<float> out(height, width);
    for (int y = 0; y < height; ++y) {
        const double gy = height > 1 ? static_cast<double>(y) * (n - 1) / (height - 1) : 0.0;
        const int y0 = std::min(static_cast<int>(gy), n - 2);
        const double fy = gy - y0;
        for (int x = 0; x < width; ++x) {
            const double gx = width > 1 ? static_cast<double>(x) * (n - 1) / (width - 1) : 0.0;
            const int x0 = std::min(static_cast<int>(gx), n - 2);
            const double fx = gx - x0;
            auto c = [&](int yy, int xx) { return ctrl[static_cast<std::size_t>(yy) * n + xx]; };
            out(y, x) = static_cast<float>((1 - fy) * ((1 - fx) * c(y0, x0) + fx * c(y0, x0 + 1)) +
                                           fy * ((1 - fx) * c(y0 + 1, x0) + fx * c(y0 + 1, x0 + 1)));
        }
    }
    return out;
}

}  // namespace

AugmentParams sample_augment(const AugmentConfig& cfg, int height, int width, Rng& rng) {
    AugmentParams p;
    if (!cfg.enabled) return p;
    if (cfg.translate) {
        p.dy = rng.uniform(-cfg.max_translation, cfg.max_translation);
        p.dx = rng.uniform(-cfg.max_translation, cfg.max_translation);
    }
    if (cfg.rotate) p.angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation);
    if (cfg.scale) p.scale = rng.uniform(2.0 - cfg.scale_factor, cfg.scale_factor);
    if (cfg.elastic && cfg.elastic_grid >= 2) {
        const int n = cfg.elastic_grid;
        std::vector<double> cy(static_cast<std::size_t>(n) * n), cx(cy.size());
        for (std::size_t i = 0; i < cy.size(); ++i) {
            cy[i] = rng.uniform(-cfg.elastic_max_offset, cfg.elastic_max_offset);
            cx[i] = rng.uniform(-cfg.elastic_max_offset, cfg.elastic_max_offset);
        }
        const double sigma = rng.uniform(0.0, cfg.elastic_max_sigma);
        p.field_y = upsample_controls(cy, n, height, width);
        p.field_x = upsample_controls(cx, n, height, width);
        gaussian_blur(p.field_y, sigma);
        gaussian_blur(p.field_x, sigma);
    }
    if (cfg.gamma) p.gamma = rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1]);
    return p;
}

SliceRecord apply_augment(const SliceRecord& slice, const AugmentParams& p) {
    const int h = slice.pixels.height, w = slice.pixels.width;
    const bool has_field = p.field_y.size() > 0;
    if (has_field) require(p.field_y.height == h && p.field_y.width == w && p.field_x.same_shape(p.field_y),
                           "displacement field shape must match the slice");
    require(p.scale > 0, "augment scale must be positive");
    SliceRecord out = slice;
    const bool geometric = p.dy != 0 || p.dx != 0 || p.angle != 0 || p.scale != 1 || has_field;
    if (geometric) {
        const double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
        const double ca = std::cos(p.angle), sa = std::sin(p.angle);
        Mask mask_out;
        if (slice.mask) mask_out = Mask(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                // inverse map: output pixel -> source position
                const double ry = (y - cy - p.dy) / p.scale, rx = (x - cx - p.dx) / p.scale;
                double sy = cy + ca * ry + sa * rx;
                double sx = cx - sa * ry + ca * rx;
                if (has_field) {
                    sy += p.field_y(y, x);
                    sx += p.field_x(y, x);
                }
                const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
                const double fy = sy - y0, fx = sx - x0;
                auto px = [&](int yy, int xx) -> double {
                    return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? 0.0 : slice.pixels(yy, xx);
                };
                out.pixels(y, x) = static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                                                      fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)));
                if (slice.mask) {
                    const int ny = static_cast<int>(std::floor(sy + 0.5)), nx = static_cast<int>(std::floor(sx + 0.5));
                    mask_out(y, x) = (ny < 0 || ny >= h || nx < 0 || nx >= w) ? 0 : (*slice.mask)(ny, nx);
                }
            }
        if (slice.mask) {
            const bool any = std::any_of(mask_out.data.begin(), mask_out.data.end(), [](auto v) { return v != 0; });
            out.label = any ? 2 : 1;
            out.mask = std::move(mask_out);
        }
    }
    if (p.gamma != 1.0)
        for (auto& v : out.pixels.data) v = static_cast<float>(std::pow(std::clamp<double>(v, 0.0, 1.0), p.gamma));
    return out;
}

SliceRecord augment(const SliceRecord& slice, const AugmentConfig& cfg, Rng& rng) {
    if (!cfg.enabled) return slice;
    return apply_augment(slice, sample_augment(cfg, slice.pixels.height, slice.pixels.width, rng));
}

// ---------------------------------------------------------------- training

void TrainingConfig::validate() const {
    require(learning_rate > 0, "learning_rate must be > 0");
    require(epochs >= 0, "epochs must be >= 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(T >= 1, "T must be >= 1");
    require(p_uncond >= 0 && p_uncond <= 1, "p_uncond must be in [0,1]");
    require(clip_grad_norm >= 0, "clip_grad_norm must be >= 0");
    require(max_batches_per_epoch >= 0, "max_batches_per_epoch must be >= 0");
}

NonFiniteLoss::NonFiniteLoss(int t_, int label_, double max_abs)
    : std::runtime_error("non-finite training loss at t=" + std::to_string(t_) + ", c=" + std::to_string(label_) +
                         ", max|x_t|=" + fmt9(max_abs)),
      t(t_), label(label_), max_abs_xt(max_abs) {}

TrainState make_train_state(const DenoiserConfig& config, std::uint64_t init_seed) {
    TrainState s;
    s.params = init_denoiser(config, init_seed);
    s.adam_m.assign(s.params.values.size(), 0.0f);
    s.adam_v.assign(s.params.values.size(), 0.0f);
    s.best_val_mse = std::numeric_limits<double>::infinity();
    s.best_params = s.params;
    return s;
}

int drop_label(int label, double p_uncond, Rng& rng) {
    return rng.bernoulli(p_uncond) ? 0 : label;
}

StepResult training_step(const std::vector<SliceRecord>& batch, TrainState& state, const ScheduleTable& schedule,
                         const TrainingConfig& config, const Denoiser<float>& net) {
    require(!batch.empty(), "training batch must be nonempty");
    const int h = batch.front().pixels.height, w = batch.front().pixels.width;
    for (const auto& r : batch) require(r.pixels.height == h && r.pixels.width == w, "batch slices differ in shape");
    require(schedule.steps() == config.T, "schedule length does not match config.T");

    auto& params = state.params.values;
    std::vector<float> grad(params.size(), 0.0f);
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(state.step)));
    StepResult res;
    const float scale = 1.0f / static_cast<float>(batch.size());
    double total = 0;
    for (const auto& item : batch) {
        const SliceRecord x0 = augment(item, config.augment, rng);
        const int t = static_cast<int>(rng.uniform_int(1, config.T));
        const int c = drop_label(x0.label, config.p_uncond, rng);
        const Image eps = rng.normal_image(h, w);
        const SliceState xt = forward_noise({x0.pixels, 0, 0}, t, eps, schedule);
        const double loss = net.loss_and_gradient(params, xt.pixels.data, class_label_from_int(c), t, eps.data,
                                                  scale, grad);
        if (!std::isfinite(loss)) {
            double mx = 0;
            for (float v : xt.pixels.data) mx = std::max(mx, std::abs(static_cast<double>(v)));
            throw NonFiniteLoss(t, c, mx);
        }
        total += loss;
        res.timesteps.push_back(t);
        res.effective_labels.push_back(c);
    }
    res.loss = total / static_cast<double>(batch.size());

    if (config.clip_grad_norm > 0) {
        double sq = 0;
        for (float g : grad) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm > config.clip_grad_norm) {
            const float f = static_cast<float>(config.clip_grad_norm / norm);
            for (auto& g : grad) g *= f;
        }
    }

    ++state.step;
    const double b1 = config.adam_beta1, b2 = config.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    const float lr = static_cast<float>(config.learning_rate);
    const float eps = static_cast<float>(config.adam_eps);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < params.size(); ++i) {
        const float g = grad[i];
        state.adam_m[i] = static_cast<float>(b1 * state.adam_m[i] + (1 - b1) * g);
        state.adam_v[i] = static_cast<float>(b2 * state.adam_v[i] + (1 - b2) * g * g);
        const float mh = static_cast<float>(state.adam_m[i] / c1);
        const float vh = static_cast<float>(state.adam_v[i] / c2);
        params[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    return res;
}

ValidationSet make_validation_set(std::vector<SliceRecord> items, int T, std::uint64_t seed) {
    require(T >= 1, "T must be >= 1");
    ValidationSet v;
    v.items = std::move(items);
    for (std::size_t i = 0; i < v.items.size(); ++i) {
        Rng rng(derive_seed(seed, i));
        v.timesteps.push_back(static_cast<int>(rng.uniform_int(1, T)));
        v.noise.push_back(rng.normal_image(v.items[i].pixels.height, v.items[i].pixels.width));
    }
    return v;
}

double validation_mse(const ValidationSet& val, const DenoiserParams& params, const ScheduleTable& schedule,
                      const Denoiser<float>& net) {
    require(!val.items.empty(), "validation set must be nonempty");
    double total = 0;
    for (std::size_t i = 0; i < val.items.size(); ++i) {
        const auto& item = val.items[i];
        const SliceState xt = forward_noise({item.pixels, 0, 0}, val.timesteps[i], val.noise[i], schedule);
        const Image pred = net.predict(params.values, xt.pixels, class_label_from_int(item.label), val.timesteps[i]);
        double se = 0;
        for (std::size_t k = 0; k < pred.size(); ++k) {
            const double d = static_cast<double>(pred.data[k]) - val.noise[i].data[k];
            se += d * d;
        }
        total += se / static_cast<double>(pred.size());
    }
    return total / static_cast<double>(val.items.size());
}

void fit(TrainState& state, const std::vector<SliceRecord>& train, const ValidationSet& val,
         const TrainingConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    require(!train.empty(), "training set must be nonempty");
    require(!val.items.empty(), "validation set must be nonempty");
    const ScheduleTable schedule = make_linear_schedule(config.T, config.beta_start, config.beta_end);
    const Denoiser<float> net(state.params.config);
    require(state.params.values.size() == net.parameter_count(), "parameter vector does not match the config");

    if (state.history.empty()) state.history.push_back({0, std::nan(""), validation_mse(val, state.params, schedule, net)});

    const int batch = config.batch_size;
    const int full = static_cast<int>((train.size() + batch - 1) / batch);
    const int batches = config.max_batches_per_epoch > 0 ? std::min(full, config.max_batches_per_epoch) : full;
    std::vector<std::size_t> order(train.size());
    std::vector<SliceRecord> items;

    for (int e = state.epoch + 1; e <= config.epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle(derive_seed(derive_seed(config.seed, 0x5348u), static_cast<std::uint64_t>(e)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        double sum = 0;
        for (int b = 0; b < batches; ++b) {
            items.clear();
            const std::size_t lo = static_cast<std::size_t>(b) * batch;
            const std::size_t hi = std::min(order.size(), lo + batch);
            for (std::size_t i = lo; i < hi; ++i) items.push_back(train[order[i]]);
            sum += training_step(items, state, schedule, config, net).loss;
        }
        state.epoch = e;
        EpochRecord rec{e, sum / batches, validation_mse(val, state.params, schedule, net)};
        state.history.push_back(rec);
        if (rec.val_mse < state.best_val_mse) {
            state.best_val_mse = rec.val_mse;
            state.best_epoch = e;
            state.best_params = state.params;
        }
        if (on_epoch) on_epoch(state, rec);
    }
}

TrainState fit(const std::vector<SliceRecord>& train, const std::vector<SliceRecord>& val,
               const DenoiserConfig& model, const TrainingConfig& config, const EpochCallback& on_epoch) {
    require(!train.empty(), "training set must be nonempty");
    require(!val.empty(), "validation set must be nonempty");
    TrainState state = make_train_state(model, derive_seed(config.seed, 0x494e4954u));
    fit(state, train, make_validation_set(val, config.T, derive_seed(config.seed, 0x56414cu)), config, on_epoch);
    return state;
}

// ---------------------------------------------------------------- state files

namespace {
constexpr char kStateMagic[8] = {'C', 'F', 'D', 'T', 'R', 'N', 'S', '1'};

void put_blob(io::ByteWriter& w, const std::vector<std::uint8_t>& b) {
    w.u64(b.size());
    w.bytes(b.data(), b.size());
}

std::vector<std::uint8_t> get_blob(io::ByteReader& r) {
    const std::uint64_t n = r.u64();
    std::vector<std::uint8_t> b(r.need(n));
    r.bytes(b.data(), b.size());
    return b;
}

void put_f64(io::ByteWriter& w, double v) { w.u64(std::bit_cast<std::uint64_t>(v)); }
double get_f64(io::ByteReader& r) { return std::bit_cast<double>(r.u64()); }
}  // namespace

void save_train_state(const TrainState& s, const std::string& path) {
    io::ByteWriter w;
    w.bytes(kStateMagic, sizeof kStateMagic);
    put_blob(w, encode_checkpoint(s.params));
    put_blob(w, encode_checkpoint(s.best_params));
    w.u64(s.adam_m.size());
    for (float v : s.adam_m) w.f32(v);
    for (float v : s.adam_v) w.f32(v);
    w.u32(static_cast<std::uint32_t>(s.epoch));
    w.u64(static_cast<std::uint64_t>(s.step));
    put_f64(w, s.best_val_mse);
    w.u32(static_cast<std::uint32_t>(s.best_epoch));
    w.u64(s.history.size());
    for (const auto& h : s.history) {
        w.u32(static_cast<std::uint32_t>(h.epoch));
        put_f64(w, h.train_mse);
        put_f64(w, h.val_mse);
    }
    io::write_file(path, w.take());
}

TrainState load_train_state(const std::string& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r(bytes);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kStateMagic, sizeof kStateMagic) != 0) throw FormatError("not a training state file", 0);
    TrainState s;
    s.params = decode_checkpoint(get_blob(r));
    s.best_params = decode_checkpoint(get_blob(r));
    const std::uint64_t n = r.u64();
    if (n != s.params.values.size()) throw SchemaError("optimizer moments do not match the parameter count");
    r.need(n * 8);
    s.adam_m.resize(n);
    s.adam_v.resize(n);
    for (auto& v : s.adam_m) v = r.f32();
    for (auto& v : s.adam_v) v = r.f32();
    s.epoch = static_cast<int>(r.u32());
    s.step = static_cast<std::int64_t>(r.u64());
    s.best_val_mse = get_f64(r);
    s.best_epoch = static_cast<int>(static_cast<std::int32_t>(r.u32()));
    const std::uint64_t hn = r.u64();
    r.need(hn * 20);
    for (std::uint64_t i = 0; i < hn; ++i) {
        EpochRecord h;
        h.epoch = static_cast<int>(r.u32());
        h.train_mse = get_f64(r);
        h.val_mse = get_f64(r);
        s.history.push_back(h);
    }
    if (!r.at_end()) throw FormatError("trailing bytes after training state", r.offset());
    return s;
}

}  // namespace cfd
