#include "cfd/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "cfd/binary_io.hpp"
#include "json.hpp"

namespace cfd {

void GuidanceConfig::validate(int T) const {
    require(D >= 0 && D <= T, "noise level D must be in [0, T], got " + std::to_string(D));
    require(w >= 0, "guidance scale w must be >= 0");
    require(stride >= 1, "stride must be >= 1");
    require(target_class != ClassLabel::Unconditional, "target class must be 1 or 2");
}

NoiseFn denoiser_fn(const Denoiser<float>& net, const DenoiserParams& params) {
    require(params.config == net.config(), "parameters were built for a different denoiser config");
    return [&net, &params](const Image& x, ClassLabel c, int t) { return net.predict(params.values, x, c, t); };
}

Image guided_eps(const NoiseFn& eps, const Image& xt, ClassLabel c, int t, double w) {
    require(c != ClassLabel::Unconditional, "guidance needs a class label of 1 or 2");
    require(w >= 0, "guidance scale w must be >= 0");
    const Image ec = eps(xt, c, t);
    const Image e0 = eps(xt, ClassLabel::Unconditional, t);
    require(ec.same_shape(xt) && e0.same_shape(xt), "noise prediction shape mismatch");
    Image out(xt.height, xt.width);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = static_cast<float>(w * ec.data[i] + (1.0 - w) * e0.data[i]);
    return out;
}

std::vector<int> timestep_grid(int D, int stride) {
    require(D >= 0 && stride >= 1, "timestep grid needs D >= 0 and stride >= 1");
    std::vector<int> g;
    for (int t = 0; t < D; t += stride) g.push_back(t);
    g.push_back(D);
    return g;
}

SliceState encode(const SliceState& x0, const GuidanceConfig& cfg, const NoiseFn& eps, const ScheduleTable& schedule) {
    cfg.validate(schedule.steps());
    require(x0.t == 0, "encoding starts from a clean image (t = 0)");
    const auto grid = timestep_grid(cfg.D, cfg.stride);
    SliceState x = x0;
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const Image e = eps(x.pixels, ClassLabel::Unconditional, grid[i]);
        x = ddim_inverse_step(x, grid[i], grid[i + 1], e, schedule);
    }
    return x;
}

SliceState decode(const SliceState& xD, const GuidanceConfig& cfg, const NoiseFn& eps, const ScheduleTable& schedule) {
    cfg.validate(schedule.steps());
    require(xD.t == cfg.D, "decoding starts at t = D");
    const auto grid = timestep_grid(cfg.D, cfg.stride);
    SliceState x = xD;
    for (std::size_t i = grid.size() - 1; i > 0; --i) {
        const Image e = guided_eps(eps, x.pixels, cfg.target_class, grid[i], cfg.w);
        x = ddim_step(x, grid[i], grid[i - 1], e, schedule);
    }
    return x;
}

AnomalyMap anomaly_pipeline(const Image& x0, const GuidanceConfig& cfg, const NoiseFn& eps,
                            const ScheduleTable& schedule, const std::string& slice_id, AttentionVariant variant) {
    AnomalyMap m;
    m.slice_id = slice_id;
    m.config = cfg;
    m.variant = variant;
    const SliceState latent = encode({x0, 0, 0}, cfg, eps, schedule);
    m.counterfactual = decode(latent, cfg, eps, schedule).pixels;
    m.scores = Image(x0.height, x0.width);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        float& cf = m.counterfactual.data[i];
        cf = std::clamp(cf, 0.0f, 1.0f);
        m.scores.data[i] = std::clamp(std::abs(x0.data[i] - cf), 0.0f, 1.0f);
    }
    return m;
}

void write_pgm(const Image& img, const std::string& path) {
    std::string head = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(head.begin(), head.end());
    for (float v : img.data)
        bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    io::write_file(path, bytes);
}

void write_anomaly_map(const AnomalyMap& map, const std::string& stem, std::uint64_t checkpoint_hash, bool pgm) {
    io::ByteWriter w;
    for (float v : map.scores.data) w.f32(v);
    io::write_file(stem + ".f32", w.take());
    nlohmann::ordered_json j;
    j["slice_id"] = map.slice_id;
    j["height"] = map.scores.height;
    j["width"] = map.scores.width;
    j["D"] = map.config.D;
    j["w"] = map.config.w;
    j["stride"] = map.config.stride;
    j["target_class"] = static_cast<int>(map.config.target_class);
    j["variant"] = map.variant.str();
    j["checkpoint_hash"] = hex64(checkpoint_hash);
    io::write_text(stem + ".json", j.dump(2) + "\n");
    if (pgm) {
        write_pgm(map.scores, stem + ".pgm");
        write_pgm(map.counterfactual, stem + "_cf.pgm");
    }
}

LoadedMap read_anomaly_map(const std::string& stem) {
    const std::string text = io::read_text(stem + ".json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed map sidecar: ") + e.what(), e.byte);
    }
    LoadedMap m;
    m.slice_id = j.value("slice_id", "");
    const int h = j.at("height").get<int>(), w = j.at("width").get<int>();
    if (h <= 0 || w <= 0) throw FormatError("map sidecar has non-positive size", 0);
    const auto bytes = io::read_file(stem + ".f32");
    io::ByteReader r(bytes);
    m.scores = Image(h, w);
    r.need(m.scores.size() * 4);
    for (auto& v : m.scores.data) v = r.f32();
    if (!r.at_end()) throw FormatError("trailing bytes after map payload", r.offset());
    return m;
}

}  // namespace cfd
