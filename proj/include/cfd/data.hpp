#pragma once

// Synthetic phantoms, volume I/O, resample/crop/resize preprocessing,
// slice labeling, patient-level splits and the SUVmax-fraction baseline.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfd/common.hpp"

namespace cfd {

/// 3D intensity grid, X fastest.
struct Volume {
    int nx = 0, ny = 0, nz = 0;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
    std::vector<float> voxels;
    std::string patient_id;
    std::string modality = "PET";
    /// Set when voxels were min-max normalized: the raw maximum that maps to 1.
    std::optional<double> raw_max;

    Volume() = default;
    Volume(int x, int y, int z, std::array<double, 3> sp = {1.0, 1.0, 1.0})
        : nx(x), ny(y), nz(z), spacing(sp), voxels(static_cast<std::size_t>(x) * y * z, 0.0f) {}

    std::size_t index(int x, int y, int z) const noexcept {
        return (static_cast<std::size_t>(z) * ny + y) * nx + x;
    }
    float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
    float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
    std::size_t size() const noexcept { return voxels.size(); }
    void validate() const;
};

struct SliceRecord {
    Image pixels;  // [0, 1]
    int label = 1; // 1 healthy, 2 unhealthy
    std::optional<Mask> mask;
    std::string patient_id;
    int slice_index = 0;
    double raw_max = 1.0;
    bool degenerate = false;  // source volume had no signal

    std::string id() const { return patient_id + ":" + std::to_string(slice_index); }
};

struct PhantomSpec {
    int nx = 96, ny = 96, nz = 144;
    std::array<double, 3> spacing{4.0, 4.0, 6.0};
    double body_uptake = 1.0;          // soft background inside the body
    std::array<double, 2> organ_uptake{1.5, 3.0};   // liver/spleen-like structures
    std::array<double, 2> hot_uptake{6.0, 9.0};     // heart/kidneys, above 41% of the max
    std::array<double, 2> brain_uptake{12.0, 15.0}; // top of the volume
    std::array<double, 2> bladder_uptake{13.0, 17.0};  // bottom of the volume
    double lesion_rate = 5.0;          // mean lesion count per unhealthy patient
    int max_lesions = 8;
    double healthy_patient_fraction = 0.2;
    std::array<double, 2> lesion_radius_mm{8.0, 18.0};
    std::array<double, 2> lesion_uptake{3.0, 9.0};
    double noise = 0.05;               // multiplicative speckle
    std::array<double, 2> unhealthy_slice_band{0.08, 0.25};
    std::uint64_t seed = 1;
    bool force_no_lesions = false;

    void validate() const;
};

struct Phantom {
    Volume image;
    Volume mask;
};

/// One phantom patient. Lesion voxels are the only positives of the mask.
Phantom generate_phantom(const PhantomSpec& spec, Rng& rng, const std::string& patient_id = "P0000");

/// Same anatomy as generate_phantom(spec, rng) but with every lesion removed.
Phantom generate_phantom_pair_healthy(const PhantomSpec& spec, Rng& rng, const std::string& patient_id = "P0000");

struct PreprocessConfig {
    std::array<double, 3> spacing{2.0, 2.0, 3.0};
    std::array<int, 3> crop{192, 192, 288};
    std::array<int, 3> output{64, 64, 96};
};

/// Trilinear resampling to a new spacing; dims = floor((n-1) * s / s') + 1.
Volume resample_spacing(const Volume& v, std::array<double, 3> spacing, bool nearest);
/// Central crop (zero padded where the volume is smaller).
Volume center_crop(const Volume& v, std::array<int, 3> size);
/// Resize to the given grid; trilinear for images, nearest for masks.
Volume resize(const Volume& v, std::array<int, 3> size, bool nearest);

/// Resample, crop and resize one volume; images are then max-normalized (raw_max recorded),
/// masks binarized.
Volume preprocess_volume(const Volume& volume, const PreprocessConfig& cfg, bool is_mask);

/// Full chain: resample, crop, resize, per-volume [0,1] normalization, slice labeling.
std::vector<SliceRecord> preprocess(const Volume& volume, const Volume* mask, const PreprocessConfig& cfg = {});

/// Slices of a volume that is already on the output grid and normalized.
std::vector<SliceRecord> slices_of(const Volume& normalized, const Volume* mask);

/// Pixels whose de-normalized value strictly exceeds fraction * raw_max.
Mask threshold_baseline(const SliceRecord& record, double fraction = 0.41);

struct Split {
    std::vector<std::string> train, val, test;  // patient ids
};

/// Patient-level partition with largest-remainder rounding of the ratios.
Split split_by_patient(const std::vector<std::string>& patient_ids, std::array<double, 3> ratios, std::uint64_t seed);

/// Header at `header_path` (JSON) plus payload next to it with extension .raw.
void save_volume(const Volume& v, const std::string& header_path);
Volume load_volume(const std::string& header_path);
std::string payload_path_for(const std::string& header_path);
std::uint64_t volume_checksum(const Volume& v);

}  // namespace cfd
