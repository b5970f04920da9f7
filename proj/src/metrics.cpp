#include "cfd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cfd {

namespace {

std::size_t count_on(const Mask& m) {
    return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v != 0; }));
}

}  // namespace

double dice(const Mask& g, const Mask& p) {
    require(g.same_shape(p), "dice: mask shapes differ");
    std::size_t inter = 0, ng = 0, np = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const bool a = g.data[i] != 0, b = p.data[i] != 0;
        inter += a && b;
        ng += a;
        np += b;
    }
    if (ng + np == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ng + np);
}

std::vector<double> tau_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 16; ++i) g.push_back((10 + 5 * i) / 100.0);
    return g;
}

Mask binarize(const Image& scores, double tau) {
    Mask m(scores.height, scores.width);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = scores.data[i] >= tau ? 1 : 0;
    return m;
}

OptimalDice optimal_dice(const Mask& g, const Image& scores) {
    require(g.height == scores.height && g.width == scores.width, "optimal_dice: shapes differ");
    OptimalDice best{-1.0, 0.0};
    for (double tau : tau_grid()) {
        const double d = dice(g, binarize(scores, tau));
        if (d > best.dsc) best = {d, tau};
    }
    return best;
}

// ---------------------------------------------------------------- HD95

std::vector<int> boundary_pixels(const Mask& m) {
    std::vector<int> out;
    auto on = [&](int y, int x) { return y >= 0 && y < m.height && x >= 0 && x < m.width && m(y, x) != 0; };
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)))
                out.push_back(y * m.width + x);
    return out;
}

namespace {

constexpr double kFar = 1e20;

// Felzenszwalb-Huttenlocher lower envelope of parabolas; result replaces f.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
    f.swap(d);
}

// Squared Euclidean distance from every pixel to the nearest seed.
std::vector<double> squared_edt(int h, int w, const std::vector<int>& seeds) {
    std::vector<double> grid(static_cast<std::size_t>(h) * w, kFar);
    for (int s : seeds) grid[s] = 0.0;
    const int n = std::max(h, w);
    std::vector<double> f, d(n);
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    for (int x = 0; x < w; ++x) {
        f.assign(h, kFar);
        for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
        d.resize(h);
        edt_1d(f, d, v, z);
        for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = f[y];
    }
    for (int y = 0; y < h; ++y) {
        f.assign(grid.begin() + static_cast<std::ptrdiff_t>(y) * w, grid.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
        d.resize(w);
        edt_1d(f, d, v, z);
        std::copy(f.begin(), f.end(), grid.begin() + static_cast<std::ptrdiff_t>(y) * w);
    }
    return grid;
}

}  // namespace

double percentile(std::vector<double> values, double q) {
    require(!values.empty(), "percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

double hd95(const Mask& g, const Mask& p) {
    require(g.same_shape(p), "hd95: mask shapes differ");
    const auto bg = boundary_pixels(g), bp = boundary_pixels(p);
    if (bg.empty() && bp.empty()) return 0.0;
    if (bg.empty() || bp.empty()) return std::hypot(static_cast<double>(g.height), static_cast<double>(g.width));
    auto directed = [&](const std::vector<int>& from, const std::vector<int>& to) {
        const auto dt = squared_edt(g.height, g.width, to);
        std::vector<double> d;
        d.reserve(from.size());
        for (int i : from) d.push_back(std::sqrt(dt[i]));
        return percentile(std::move(d), 95.0);
    };
    return std::max(directed(bg, bp), directed(bp, bg));
}

// ---------------------------------------------------------------- AUPRC

std::optional<double> auprc(const Mask& g, const Image& scores) {
    require(g.height == scores.height && g.width == scores.width, "auprc: shapes differ");
    const std::size_t positives = count_on(g);
    if (positives == 0) return std::nullopt;
    std::vector<int> order(g.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores.data[a] != scores.data[b]) return scores.data[a] > scores.data[b];
        return (g.data[a] != 0) < (g.data[b] != 0);
    });
    double area = 0;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (g.data[order[i]] == 0) continue;
        ++tp;
        area += (1.0 / static_cast<double>(positives)) * (static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    return area;
}

// ---------------------------------------------------------------- components

namespace {

int find_root(std::vector<int>& parent, int a) {
    while (parent[a] != a) {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    return a;
}

}  // namespace

LesionSet connected_components(const Mask& m) {
    const int h = m.height, w = m.width;
    std::vector<int> parent(m.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto unite = [&](int a, int b) {
        a = find_root(parent, a);
        b = find_root(parent, b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!m(y, x)) continue;
            const int i = y * w + x;
            // already-visited neighbours: W, NW, N, NE
            if (x > 0 && m(y, x - 1)) unite(i, i - 1);
            if (y > 0) {
                if (x > 0 && m(y - 1, x - 1)) unite(i, i - w - 1);
                if (m(y - 1, x)) unite(i, i - w);
                if (x + 1 < w && m(y - 1, x + 1)) unite(i, i - w + 1);
            }
        }
    LesionSet out;
    out.labels = Grid2D<int>(h, w, 0);
    std::vector<int> label_of_root(m.size(), 0);
    for (int i = 0; i < static_cast<int>(m.size()); ++i) {
        if (!m.data[i]) continue;
        const int r = find_root(parent, i);
        if (label_of_root[r] == 0) {
            out.pixels.emplace_back();
            label_of_root[r] = static_cast<int>(out.pixels.size());
        }
        out.labels.data[i] = label_of_root[r];
        out.pixels[label_of_root[r] - 1].push_back(i);
    }
    return out;
}

std::optional<double> detection_sensitivity(const Mask& g, const Mask& p, double iou_threshold) {
    require(g.same_shape(p), "detection_sensitivity: mask shapes differ");
    const LesionSet gl = connected_components(g), pl = connected_components(p);
    if (gl.size() == 0) return std::nullopt;
    // overlap counts between every gt/pred component pair
    std::vector<std::vector<int>> inter(gl.size(), std::vector<int>(pl.size(), 0));
    for (std::size_t i = 0; i < g.size(); ++i) {
        const int a = gl.labels.data[i], b = pl.labels.data[i];
        if (a && b) ++inter[a - 1][b - 1];
    }
    struct Pair {
        double iou;
        int gi, pi;
    };
    std::vector<Pair> pairs;
    for (std::size_t a = 0; a < gl.size(); ++a)
        for (std::size_t b = 0; b < pl.size(); ++b) {
            const int in = inter[a][b];
            if (in == 0) continue;
            const double uni = static_cast<double>(gl.pixels[a].size() + pl.pixels[b].size() - in);
            pairs.push_back({in / uni, static_cast<int>(a), static_cast<int>(b)});
        }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.iou > y.iou; });
    std::vector<bool> g_used(gl.size(), false), p_used(pl.size(), false);
    int tp = 0;
    for (const auto& pr : pairs) {
        if (g_used[pr.gi] || p_used[pr.pi]) continue;
        g_used[pr.gi] = p_used[pr.pi] = true;
        if (pr.iou >= iou_threshold) ++tp;
    }
    return static_cast<double>(tp) / static_cast<double>(gl.size());
}

// ---------------------------------------------------------------- significance

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "wilcoxon: samples must be paired");
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
    WilcoxonResult r;
    r.n = static_cast<int>(d.size());
    if (d.empty()) {
        r.degenerate = true;
        r.p_value = 1.0;
        return r;
    }
    require(r.n >= 5, "wilcoxon: need at least 5 non-zero differences, got " + std::to_string(r.n));

    // mid-ranks of |d|
    const int n = r.n;
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return std::abs(d[x]) < std::abs(d[y]); });
    std::vector<double> rank(n);
    double tie_term = 0;
    for (int i = 0; i < n;) {
        int j = i;
        while (j + 1 < n && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
        const double mid = 0.5 * (i + j) + 1.0;
        for (int k = i; k <= j; ++k) rank[idx[k]] = mid;
        const double t = j - i + 1;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    for (int i = 0; i < n; ++i)
        if (d[i] > 0) r.w_plus += rank[i];
    const double mean = n * (n + 1) / 4.0;
    const double dev = std::abs(r.w_plus - mean);

    if (n <= 12) {
        r.exact = true;
        // the null distribution over all 2^n sign patterns, using the observed (mid-)ranks
        std::uint64_t extreme = 0;
        const std::uint64_t total = 1ull << n;
        for (std::uint64_t s = 0; s < total; ++s) {
            double w = 0;
            for (int i = 0; i < n; ++i)
                if (s >> i & 1) w += rank[i];
            if (std::abs(w - mean) >= dev - 1e-9) ++extreme;
        }
        r.p_value = static_cast<double>(extreme) / static_cast<double>(total);
        return r;
    }
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0) {
        r.degenerate = true;
        r.p_value = 1.0;
        return r;
    }
    const double z = std::max(0.0, dev - 0.5) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    return r;
}

double bonferroni(double alpha, int comparisons) {
    require(comparisons >= 1, "bonferroni: comparisons must be >= 1");
    require(alpha > 0 && alpha <= 1, "bonferroni: alpha must be in (0, 1]");
    return alpha / comparisons;
}

// ---------------------------------------------------------------- records

double MetricRecord::measure(const std::string& axis) const {
    if (axis == "normalized_size") return normalized_size;
    if (axis == "lesion_pixels") return lesion_pixels;
    if (axis == "suv_mean") return suv_mean;
    if (axis == "suv_sum") return suv_sum;
    throw ParameterError("unknown lesion measure '" + axis + "'");
}

double MetricRecord::metric(const std::string& name) const {
    if (name == "dsc_opt") return dsc_opt;
    if (name == "hd95") return hd95;
    if (name == "auprc") return auprc;
    if (name == "sensitivity") return sensitivity;
    if (name == "tau_star") return tau_star;
    throw ParameterError("unknown metric '" + name + "'");
}

MetricRecord evaluate_slice(const std::string& slice_id, const Mask& g, const Image& scores, const Image& pixels,
                            double raw_max) {
    require(g.height == scores.height && g.width == scores.width, "evaluate_slice: shapes differ");
    MetricRecord r;
    r.slice_id = slice_id;
    const auto od = optimal_dice(g, scores);
    r.dsc_opt = od.dsc;
    r.tau_star = od.tau;
    const Mask pred = binarize(scores, od.tau);
    r.hd95 = hd95(g, pred);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.auprc = auprc(g, scores).value_or(nan);
    r.sensitivity = detection_sensitivity(g, pred).value_or(nan);
    double sum = 0;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (g.data[i]) {
            ++r.lesion_pixels;
            sum += static_cast<double>(pixels.data[i]) * raw_max;
        }
    r.suv_sum = sum;
    r.suv_mean = r.lesion_pixels ? sum / r.lesion_pixels : 0.0;
    return r;
}

void normalize_lesion_sizes(std::vector<MetricRecord>& records) {
    int mx = 0;
    for (const auto& r : records) mx = std::max(mx, r.lesion_pixels);
    for (auto& r : records) r.normalized_size = mx > 0 ? static_cast<double>(r.lesion_pixels) / mx : 0.0;
}

std::vector<StratBin> stratify(const std::vector<std::pair<double, double>>& samples, int bins,
                               std::optional<std::pair<double, double>> range) {
    require(bins >= 1, "stratify: bins must be >= 1");
    if (samples.empty()) return {};
    double lo, hi;
    if (range) {
        lo = range->first;
        hi = range->second;
        require(hi > lo, "stratify: empty range");
    } else {
        lo = hi = samples.front().first;
        for (const auto& s : samples) {
            lo = std::min(lo, s.first);
            hi = std::max(hi, s.first);
        }
    }
    const double width = (hi - lo) / bins;
    std::vector<StratBin> out(bins);
    std::vector<std::vector<double>> vals(bins);
    for (int b = 0; b < bins; ++b) {
        out[b].lower = lo + b * width;
        out[b].upper = b + 1 == bins ? hi : lo + (b + 1) * width;
    }
    for (const auto& [m, v] : samples) {
        if (std::isnan(v)) continue;
        int b;
        if (range) {
            if (m < lo || m >= hi) continue;  // explicit ranges are half-open
            b = std::min(bins - 1, static_cast<int>((m - lo) / width));
        } else {
            b = width > 0 ? std::min(bins - 1, static_cast<int>((m - lo) / width)) : 0;
        }
        vals[b].push_back(v);
    }
    for (int b = 0; b < bins; ++b) {
        const auto& v = vals[b];
        out[b].count = static_cast<int>(v.size());
        out[b].empty = v.empty();
        if (v.empty()) continue;
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double ss = 0;
        for (double x : v) ss += (x - mean) * (x - mean);
        out[b].mean = mean;
        out[b].sem = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) / std::sqrt(static_cast<double>(v.size())) : 0.0;
    }
    return out;
}

std::vector<StratBin> stratified_report(const std::vector<MetricRecord>& records, const std::string& axis, int bins,
                                        const std::string& metric, std::optional<std::pair<double, double>> range) {
    std::vector<std::pair<double, double>> samples;
    for (const auto& r : records) samples.emplace_back(r.measure(axis), r.metric(metric));
    return stratify(samples, bins, range);
}

std::string metric_csv(const std::vector<MetricRecord>& records) {
    std::string s =
        "slice_id,dsc_opt,tau_star,hd95,auprc,sensitivity,lesion_pixels,normalized_size,suv_mean,suv_sum\n";
    for (const auto& r : records)
        s += r.slice_id + "," + fmt9(r.dsc_opt) + "," + fmt9(r.tau_star) + "," + fmt9(r.hd95) + "," + fmt9(r.auprc) +
             "," + fmt9(r.sensitivity) + "," + std::to_string(r.lesion_pixels) + "," + fmt9(r.normalized_size) +
             "," + fmt9(r.suv_mean) + "," + fmt9(r.suv_sum) + "\n";
    return s;
}

std::string strat_csv(const std::string& axis, const std::vector<StratBin>& bins) {
    std::string s = "axis,bin_lower,bin_upper,mean,sem,n,empty\n";
    for (const auto& b : bins)
        s += axis + "," + fmt9(b.lower) + "," + fmt9(b.upper) + "," + fmt9(b.mean) + "," + fmt9(b.sem) + "," +
             std::to_string(b.count) + "," + (b.empty ? "1" : "0") + "\n";
    return s;
}

}  // namespace cfd
