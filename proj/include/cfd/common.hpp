#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfd {

/// Raised when an operation receives arguments outside its contract.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a file cannot be decoded. Carries the byte offset of the failure.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// Checkpoint/config incompatibility.
class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ParameterError(msg);
}

/// Dense row-major 2D grid.
template <typename T>
struct Grid2D {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Grid2D() = default;
    Grid2D(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    T& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    bool same_shape(const Grid2D& o) const noexcept { return height == o.height && width == o.width; }
    bool operator==(const Grid2D&) const = default;
};

using Image = Grid2D<float>;
using Mask = Grid2D<std::uint8_t>;

/// Class-conditioning label: 0 unconditional, 1 healthy, 2 unhealthy.
enum class ClassLabel : int { Unconditional = 0, Healthy = 1, Unhealthy = 2 };

inline ClassLabel class_label_from_int(int c) {
    require(c >= 0 && c <= 2, "class label must be in {0,1,2}, got " + std::to_string(c));
    return static_cast<ClassLabel>(c);
}

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Child seed number `index` of `master`. Used for per-patient and per-epoch streams.
inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
    return splitmix64(master ^ splitmix64(index + 1));
}

/// Random source with platform-stable uniform and normal draws.
///
/// std::mt19937_64 is fully specified by the standard; the distributions in
/// <random> are not, so the conversions to doubles live here.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer on [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    Image normal_image(int h, int w) {
        Image img(h, w);
        for (auto& v : img.data) v = static_cast<float>(normal());
        return img;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// 64-bit FNV-1a; used for checkpoint and manifest fingerprints.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(std::uint64_t v);

/// Formats a floating value with 9 significant digits (fixed CSV formatting).
std::string fmt9(double v);

}  // namespace cfd
