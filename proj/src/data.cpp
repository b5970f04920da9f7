#include "cfd/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "cfd/binary_io.hpp"
#include "json.hpp"

namespace cfd {

void Volume::validate() const {
    require(nx > 0 && ny > 0 && nz > 0, "volume dimensions must be positive");
    require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "volume spacing must be positive");
    require(voxels.size() == static_cast<std::size_t>(nx) * ny * nz, "voxel count does not match dimensions");
    for (float v : voxels) require(std::isfinite(v) && v >= 0.0f, "volume intensities must be finite and >= 0");
}

void PhantomSpec::validate() const {
    require(nx >= 8 && ny >= 8 && nz >= 8, "phantom grid must be at least 8 voxels per axis");
    require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "phantom spacing must be positive");
    auto range_ok = [](const std::array<double, 2>& r) { return r[0] > 0 && r[0] <= r[1]; };
    require(body_uptake > 0, "body uptake must be positive");
    require(range_ok(organ_uptake) && range_ok(hot_uptake) && range_ok(brain_uptake) && range_ok(bladder_uptake),
            "uptake ranges must be positive and ordered");
    require(range_ok(lesion_uptake), "lesion uptake range must be positive and ordered");
    require(lesion_uptake[0] <= hot_uptake[1] && lesion_uptake[1] >= organ_uptake[0],
            "lesion uptake must overlap the organ uptake ranges");
    require(range_ok(lesion_radius_mm), "lesion radius range must be positive and ordered");
    require(lesion_rate >= 0 && max_lesions >= 0, "lesion count parameters must be non-negative");
    require(healthy_patient_fraction >= 0 && healthy_patient_fraction <= 1,
            "healthy_patient_fraction must be in [0,1]");
    require(noise >= 0 && noise < 1, "noise must be in [0,1)");
    const double extent = std::min({nx * spacing[0], ny * spacing[1], nz * spacing[2]});
    require(2 * lesion_radius_mm[1] < 0.5 * extent, "lesion radius is too large for the phantom grid");
}

// ---------------------------------------------------------------- phantom

namespace {

// Ellipsoid in normalized body coordinates (u, v, w each in [-1, 1] over the grid).
struct Blob {
    double cu, cv, cw, ru, rv, rw;
    double value;
};

double blob_membership(const Blob& b, double u, double v, double w, double edge) {
    const double du = (u - b.cu) / b.ru, dv = (v - b.cv) / b.rv, dw = (w - b.cw) / b.rw;
    const double r = std::sqrt(du * du + dv * dv + dw * dw);
    if (r <= 1.0 - edge) return 1.0;
    if (r >= 1.0) return 0.0;
    return (1.0 - r) / edge;
}

int poisson(double lambda, Rng& rng) {
    // Knuth's product method; lambda is small here
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = rng.uniform();
    while (p > limit) {
        ++k;
        p *= rng.uniform();
    }
    return k;
}

Phantom build_phantom(const PhantomSpec& spec, std::uint64_t base, const std::string& id, bool with_lesions) {
    spec.validate();
    Rng anatomy(derive_seed(base, 0));
    Rng lesions(derive_seed(base, 1));
    Rng speckle(derive_seed(base, 2));

    Phantom ph{Volume(spec.nx, spec.ny, spec.nz, spec.spacing), Volume(spec.nx, spec.ny, spec.nz, spec.spacing)};
    ph.image.patient_id = ph.mask.patient_id = id;
    ph.mask.modality = "MASK";

    auto jitter = [&](double x, double amount) { return x + anatomy.uniform(-amount, amount); };
    auto draw = [&](const std::array<double, 2>& r) { return anatomy.uniform(r[0], r[1]); };

    // body: elliptic cylinder from the pelvis to the neck, head above it
    const double body_ru = jitter(0.72, 0.06), body_rv = jitter(0.5, 0.05);
    const double body_lo = -0.92, body_hi = 0.62;
    const Blob head{0, 0, jitter(0.8, 0.02), 0.28, 0.32, 0.16, spec.body_uptake};

    std::vector<Blob> organs;
    organs.push_back({jitter(0.0, 0.05), jitter(0.0, 0.05), jitter(0.82, 0.02), 0.22, 0.26, 0.1,
                      draw(spec.brain_uptake)});  // brain
    organs.push_back({jitter(0.0, 0.05), jitter(0.1, 0.05), jitter(-0.78, 0.03), 0.16, 0.14, 0.07,
                      draw(spec.bladder_uptake)});  // bladder
    organs.push_back({jitter(-0.2, 0.05), jitter(-0.05, 0.05), jitter(0.1, 0.03), 0.4, 0.32, 0.14,
                      draw(spec.organ_uptake)});  // liver
    organs.push_back({jitter(0.35, 0.04), jitter(0.1, 0.04), jitter(0.12, 0.03), 0.14, 0.14, 0.08,
                      draw(spec.organ_uptake)});  // spleen
    organs.push_back({jitter(0.12, 0.04), jitter(-0.12, 0.04), jitter(0.4, 0.03), 0.2, 0.2, 0.08,
                      draw(spec.hot_uptake)});  // heart
    const double kidney = draw(spec.hot_uptake);
    const double kz = jitter(-0.05, 0.03);
    organs.push_back({-0.32, 0.3, kz, 0.09, 0.1, 0.08, kidney});
    organs.push_back({0.32, 0.3, kz, 0.09, 0.1, 0.08, kidney});

    // lesions: spheres inside the torso, away from the brain and bladder
    struct Sphere {
        double x, y, z, r, value;  // mm
    };
    std::vector<Sphere> spheres;
    const bool patient_unhealthy = !spec.force_no_lesions && !lesions.bernoulli(spec.healthy_patient_fraction);
    if (patient_unhealthy) {
        const int count = std::min(spec.max_lesions, 1 + poisson(std::max(0.0, spec.lesion_rate - 1.0), lesions));
        const double ex = spec.nx * spec.spacing[0], ey = spec.ny * spec.spacing[1], ez = spec.nz * spec.spacing[2];
        for (int i = 0; i < count; ++i) {
            const double r = lesions.uniform(spec.lesion_radius_mm[0], spec.lesion_radius_mm[1]);
            // place the centre inside the torso ellipse shrunk by the radius
            const double a = lesions.uniform(0.0, 6.283185307179586);
            const double rho = std::sqrt(lesions.uniform()) * 0.8;
            const double u = rho * body_ru * std::cos(a), v = rho * body_rv * std::sin(a);
            const double w = lesions.uniform(-0.6, 0.5);
            Sphere s{(u + 1) * 0.5 * ex, (v + 1) * 0.5 * ey, (w + 1) * 0.5 * ez, r,
                     lesions.uniform(spec.lesion_uptake[0], spec.lesion_uptake[1])};
            spheres.push_back(s);
        }
    }
    if (!with_lesions) spheres.clear();

    const double edge = 0.15;
    for (int z = 0; z < spec.nz; ++z) {
        const double w = (z + 0.5) / spec.nz * 2 - 1;
        for (int y = 0; y < spec.ny; ++y) {
            const double v = (y + 0.5) / spec.ny * 2 - 1;
            for (int x = 0; x < spec.nx; ++x) {
                const double u = (x + 0.5) / spec.nx * 2 - 1;
                double val = 0;
                const double rb = std::sqrt((u / body_ru) * (u / body_ru) + (v / body_rv) * (v / body_rv));
                if (w >= body_lo && w <= body_hi && rb <= 1.0) val = spec.body_uptake;
                val = std::max(val, blob_membership(head, u, v, w, edge) > 0 ? spec.body_uptake : 0.0);
                for (const auto& o : organs) {
                    const double m = blob_membership(o, u, v, w, edge);
                    if (m > 0) val = std::max(val, spec.body_uptake + m * (o.value - spec.body_uptake));
                }
                const double noise = spec.noise > 0 ? 1.0 + spec.noise * speckle.normal() : 1.0;
                const std::size_t idx = ph.image.index(x, y, z);
                // lesions are painted on top of the same noise draw, so the pair differs only inside them
                const double px = (x + 0.5) * spec.spacing[0], py = (y + 0.5) * spec.spacing[1],
                             pz = (z + 0.5) * spec.spacing[2];
                for (const auto& s : spheres) {
                    const double d2 = (px - s.x) * (px - s.x) + (py - s.y) * (py - s.y) + (pz - s.z) * (pz - s.z);
                    if (d2 <= s.r * s.r) {
                        val = std::max(val, s.value);
                        ph.mask.voxels[idx] = 1.0f;
                    }
                }
                ph.image.voxels[idx] = static_cast<float>(std::max(0.0, val * noise));
            }
        }
    }
    return ph;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec, Rng& rng, const std::string& patient_id) {
    return build_phantom(spec, rng.next_u64(), patient_id, true);
}

Phantom generate_phantom_pair_healthy(const PhantomSpec& spec, Rng& rng, const std::string& patient_id) {
    return build_phantom(spec, rng.next_u64(), patient_id, false);
}

// ---------------------------------------------------------------- resampling

namespace {

struct Tap {
    int i0, i1;
    double f;
};

// Linear interpolation taps, edge-clamped.
Tap tap(double pos, int n) {
    if (pos <= 0) return {0, 0, 0.0};
    if (pos >= n - 1) return {n - 1, n - 1, 0.0};
    const int i0 = static_cast<int>(std::floor(pos));
    return {i0, std::min(i0 + 1, n - 1), pos - i0};
}

int nearest(double pos, int n) {
    return std::clamp(static_cast<int>(std::floor(pos + 0.5)), 0, n - 1);
}

// Samples v at fractional source coordinates given per axis.
Volume sample(const Volume& v, int ox, int oy, int oz, std::array<double, 3> spacing,
              const std::vector<double>& sx, const std::vector<double>& sy, const std::vector<double>& sz,
              bool use_nearest) {
    Volume out(ox, oy, oz, spacing);
    out.patient_id = v.patient_id;
    out.modality = v.modality;
    out.raw_max = v.raw_max;
#pragma omp parallel for schedule(static)
    for (int z = 0; z < oz; ++z) {
        for (int y = 0; y < oy; ++y)
            for (int x = 0; x < ox; ++x) {
                float val;
                if (use_nearest) {
                    val = v.at(nearest(sx[x], v.nx), nearest(sy[y], v.ny), nearest(sz[z], v.nz));
                } else {
                    const Tap tx = tap(sx[x], v.nx), ty = tap(sy[y], v.ny), tz = tap(sz[z], v.nz);
                    auto lerp_x = [&](int yy, int zz) {
                        return (1 - tx.f) * v.at(tx.i0, yy, zz) + tx.f * v.at(tx.i1, yy, zz);
                    };
                    auto lerp_xy = [&](int zz) { return (1 - ty.f) * lerp_x(ty.i0, zz) + ty.f * lerp_x(ty.i1, zz); };
                    val = static_cast<float>((1 - tz.f) * lerp_xy(tz.i0) + tz.f * lerp_xy(tz.i1));
                }
                out.at(x, y, z) = val;
            }
    }
    return out;
}

}  // namespace

Volume resample_spacing(const Volume& v, std::array<double, 3> spacing, bool use_nearest) {
    v.validate();
    require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "target spacing must be positive");
    const std::array<int, 3> n{v.nx, v.ny, v.nz};
    std::array<int, 3> dims{};
    std::array<std::vector<double>, 3> src;
    for (int a = 0; a < 3; ++a) {
        const double ratio = v.spacing[a] / spacing[a];
        dims[a] = static_cast<int>(std::floor((n[a] - 1) * ratio + 1e-9)) + 1;
        src[a].resize(dims[a]);
        for (int i = 0; i < dims[a]; ++i) src[a][i] = i / ratio;
    }
    return sample(v, dims[0], dims[1], dims[2], spacing, src[0], src[1], src[2], use_nearest);
}

Volume center_crop(const Volume& v, std::array<int, 3> size) {
    require(size[0] > 0 && size[1] > 0 && size[2] > 0, "crop size must be positive");
    Volume out(size[0], size[1], size[2], v.spacing);
    out.patient_id = v.patient_id;
    out.modality = v.modality;
    out.raw_max = v.raw_max;
    const int off_x = (v.nx - size[0]) / 2, off_y = (v.ny - size[1]) / 2, off_z = (v.nz - size[2]) / 2;
    for (int z = 0; z < size[2]; ++z) {
        const int sz = z + off_z;
        if (sz < 0 || sz >= v.nz) continue;
        for (int y = 0; y < size[1]; ++y) {
            const int sy = y + off_y;
            if (sy < 0 || sy >= v.ny) continue;
            for (int x = 0; x < size[0]; ++x) {
                const int sx = x + off_x;
                if (sx >= 0 && sx < v.nx) out.at(x, y, z) = v.at(sx, sy, sz);
            }
        }
    }
    return out;
}

Volume resize(const Volume& v, std::array<int, 3> size, bool use_nearest) {
    v.validate();
    require(size[0] > 0 && size[1] > 0 && size[2] > 0, "resize target must be positive");
    const std::array<int, 3> n{v.nx, v.ny, v.nz};
    std::array<double, 3> spacing{};
    std::array<std::vector<double>, 3> src;
    for (int a = 0; a < 3; ++a) {
        const double scale = static_cast<double>(n[a]) / size[a];
        spacing[a] = v.spacing[a] * scale;
        src[a].resize(size[a]);
        // pixel centres map onto pixel centres
        for (int i = 0; i < size[a]; ++i) src[a][i] = (i + 0.5) * scale - 0.5;
    }
    return sample(v, size[0], size[1], size[2], spacing, src[0], src[1], src[2], use_nearest);
}

// ---------------------------------------------------------------- slices

std::vector<SliceRecord> slices_of(const Volume& normalized, const Volume* mask) {
    normalized.validate();
    if (mask)
        require(mask->nx == normalized.nx && mask->ny == normalized.ny && mask->nz == normalized.nz,
                "mask grid must match the volume grid");
    const double raw_max = normalized.raw_max.value_or(1.0);
    const bool degenerate = raw_max <= 0.0;
    std::vector<SliceRecord> out;
    out.reserve(normalized.nz);
    for (int z = 0; z < normalized.nz; ++z) {
        SliceRecord r;
        r.pixels = Image(normalized.ny, normalized.nx);
        r.patient_id = normalized.patient_id;
        r.slice_index = z;
        r.raw_max = raw_max;
        r.degenerate = degenerate;
        for (int y = 0; y < normalized.ny; ++y)
            for (int x = 0; x < normalized.nx; ++x) r.pixels(y, x) = std::clamp(normalized.at(x, y, z), 0.0f, 1.0f);
        r.label = 1;
        if (mask) {
            Mask m(normalized.ny, normalized.nx);
            bool any = false;
            for (int y = 0; y < normalized.ny; ++y)
                for (int x = 0; x < normalized.nx; ++x) {
                    const bool on = mask->at(x, y, z) > 0.5f;
                    m(y, x) = on ? 1 : 0;
                    any = any || on;
                }
            r.label = any ? 2 : 1;
            r.mask = std::move(m);
        }
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

Volume normalize(Volume v) {
    float mx = 0.0f;
    for (float x : v.voxels) mx = std::max(mx, x);
    const double prior = v.raw_max.value_or(1.0);
    v.raw_max = mx * prior;
    if (mx <= 0.0f) {
        v.raw_max = 0.0;
        return v;
    }
    const float inv = 1.0f / std::max(mx, 1e-12f);
    for (auto& x : v.voxels) x = std::min(1.0f, x * inv);
    return v;
}

}  // namespace

Volume preprocess_volume(const Volume& volume, const PreprocessConfig& cfg, bool is_mask) {
    Volume v = resample_spacing(volume, cfg.spacing, is_mask);
    v = center_crop(v, cfg.crop);
    v = resize(v, cfg.output, is_mask);
    if (is_mask)
        for (auto& x : v.voxels) x = x > 0.5f ? 1.0f : 0.0f;
    else
        v = normalize(std::move(v));
    return v;
}

std::vector<SliceRecord> preprocess(const Volume& volume, const Volume* mask, const PreprocessConfig& cfg) {
    volume.validate();
    if (mask)
        require(mask->nx == volume.nx && mask->ny == volume.ny && mask->nz == volume.nz,
                "mask grid must match the volume grid");
    const Volume img = preprocess_volume(volume, cfg, false);
    if (!mask) return slices_of(img, nullptr);
    const Volume m = preprocess_volume(*mask, cfg, true);
    return slices_of(img, &m);
}

Mask threshold_baseline(const SliceRecord& record, double fraction) {
    Mask m(record.pixels.height, record.pixels.width);
    const double cut = fraction * record.raw_max;
    for (std::size_t i = 0; i < m.size(); ++i)
        m.data[i] = static_cast<double>(record.pixels.data[i]) * record.raw_max > cut ? 1 : 0;
    return m;
}

// ---------------------------------------------------------------- splits

Split split_by_patient(const std::vector<std::string>& patient_ids, std::array<double, 3> ratios,
                       std::uint64_t seed) {
    for (double r : ratios) require(r >= 0, "split ratios must be non-negative");
    require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) < 1e-9, "split ratios must sum to 1");
    std::vector<std::string> ids = patient_ids;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    const int n = static_cast<int>(ids.size());
    const int parts = static_cast<int>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; }));
    require(n >= parts, "fewer patients (" + std::to_string(n) + ") than non-empty partitions");

    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) std::swap(ids[i], ids[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    // largest remainder; ties go to the earlier partition
    std::array<int, 3> count{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double exact = ratios[k] * n;
        count[k] = static_cast<int>(std::floor(exact + 1e-9));
        rem[k] = exact - count[k];
        assigned += count[k];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
    for (int i = 0; assigned < n; ++i, ++assigned) ++count[order[i % 3]];
    // a non-zero ratio always gets at least one patient
    for (int k = 0; k < 3; ++k)
        if (ratios[k] > 0 && count[k] == 0) {
            const int donor = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
            --count[donor];
            ++count[k];
        }

    Split s;
    int pos = 0;
    std::array<std::vector<std::string>*, 3> dst{&s.train, &s.val, &s.test};
    for (int k = 0; k < 3; ++k) {
        for (int i = 0; i < count[k]; ++i) dst[k]->push_back(ids[pos++]);
        std::sort(dst[k]->begin(), dst[k]->end());
    }
    return s;
}

// ---------------------------------------------------------------- volume files

std::string payload_path_for(const std::string& header_path) {
    return std::filesystem::path(header_path).replace_extension(".raw").string();
}

std::uint64_t volume_checksum(const Volume& v) {
    io::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(v.nx));
    w.u32(static_cast<std::uint32_t>(v.ny));
    w.u32(static_cast<std::uint32_t>(v.nz));
    for (double s : v.spacing) w.u64(std::bit_cast<std::uint64_t>(s));
    for (float x : v.voxels) w.f32(x);
    const auto bytes = w.take();
    return fnv1a64(bytes.data(), bytes.size());
}

void save_volume(const Volume& v, const std::string& header_path) {
    v.validate();
    nlohmann::ordered_json j;
    j["format"] = "cfdiff-volume";
    j["version"] = 1;
    j["dims"] = {v.nx, v.ny, v.nz};
    j["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    j["patient_id"] = v.patient_id;
    j["modality"] = v.modality;
    if (v.raw_max) j["raw_max"] = *v.raw_max;
    j["payload"] = std::filesystem::path(payload_path_for(header_path)).filename().string();
    j["checksum"] = hex64(volume_checksum(v));
    io::write_text(header_path, j.dump(2) + "\n");
    io::ByteWriter w;
    for (float x : v.voxels) w.f32(x);
    io::write_file(payload_path_for(header_path), w.take());
}

Volume load_volume(const std::string& header_path) {
    const std::string text = io::read_text(header_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed volume header: ") + e.what(), e.byte);
    }
    Volume v;
    try {
        if (j.at("format").get<std::string>() != "cfdiff-volume") throw FormatError("not a volume header", 0);
        const auto dims = j.at("dims").get<std::vector<int>>();
        const auto sp = j.at("spacing").get<std::vector<double>>();
        if (dims.size() != 3 || sp.size() != 3) throw FormatError("dims and spacing need three entries", 0);
        if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw FormatError("non-positive volume dimensions", 0);
        if (!(sp[0] > 0 && sp[1] > 0 && sp[2] > 0)) throw FormatError("non-positive voxel spacing", 0);
        v = Volume(dims[0], dims[1], dims[2], {sp[0], sp[1], sp[2]});
        v.patient_id = j.value("patient_id", "");
        v.modality = j.value("modality", "PET");
        if (j.contains("raw_max")) v.raw_max = j.at("raw_max").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad volume header field: ") + e.what(), 0);
    }
    const auto bytes = io::read_file(payload_path_for(header_path));
    io::ByteReader r(bytes);
    r.need(static_cast<std::uint64_t>(v.size()) * 4);
    for (auto& x : v.voxels) x = r.f32();
    if (!r.at_end()) throw FormatError("trailing bytes after volume payload", r.offset());
    if (j.contains("checksum") && j["checksum"].get<std::string>() != hex64(volume_checksum(v)))
        throw FormatError("volume checksum mismatch", 0);
    return v;
}

}  // namespace cfd
