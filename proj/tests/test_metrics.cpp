#include <cmath>

#include "cfd/metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cfd;

namespace {

Mask random_mask(Rng& rng, int h, int w, double density) {
    Mask m(h, w);
    for (auto& v : m.data) v = rng.bernoulli(density) ? 1 : 0;
    return m;
}

Image random_map(Rng& rng, int h, int w) {
    Image a(h, w);
    // quantized so ties actually occur
    for (auto& v : a.data) v = static_cast<float>(rng.uniform_int(0, 20) / 20.0);
    return a;
}

Mask from_rows(const std::vector<std::string>& rows) {
    Mask m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) m(y, x) = rows[y][x] == '#' ? 1 : 0;
    return m;
}

}  // namespace

TEST_CASE("dice hand cases") {
    const Mask g = from_rows({"##..", "#...", "...."});
    const Mask p = from_rows({"##..", "....", "...."});
    CHECK(dice(g, g) == 1.0);
    CHECK(dice(g, p) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(dice(g, from_rows({"....", "....", "..##"})) == 0.0);
    CHECK(dice(Mask(3, 4), Mask(3, 4)) == 1.0);
    CHECK(dice(Mask(3, 4), p) == 0.0);
    CHECK_THROWS_AS(dice(Mask(3, 4), Mask(4, 3)), ParameterError);
}

TEST_CASE("tau grid runs 0.10 to 0.90 in 0.05 steps") {
    const auto g = tau_grid();
    REQUIRE(g.size() == 17);
    CHECK(g.front() == doctest::Approx(0.10));
    CHECK(g.back() == doctest::Approx(0.90));
}

TEST_CASE("optimal dice") {
    const Mask g = from_rows({".##.", ".##.", "...."});
    Image am(3, 4);
    for (std::size_t i = 0; i < g.size(); ++i) am.data[i] = g.data[i];
    auto od = optimal_dice(g, am);
    CHECK(od.dsc == 1.0);
    CHECK(od.tau == doctest::Approx(0.10));

    // 1 - g: every tau selects exactly the complement, so the best is dice(g, complement) = 0 at tau 0.1
    for (auto& v : am.data) v = 1.0f - v;
    od = optimal_dice(g, am);
    double best = -1;
    for (double tau : tau_grid()) best = std::max(best, oracle::dice(g, binarize(am, tau)));
    CHECK(od.dsc == best);
    CHECK(od.tau == doctest::Approx(0.10));

    Rng rng(11);
    for (int it = 0; it < 50; ++it) {
        const Mask gg = random_mask(rng, 16, 16, 0.2);
        const Image a = random_map(rng, 16, 16);
        const auto r = optimal_dice(gg, a);
        double b = -1, bt = 0;
        for (int k = 0; k <= 16; ++k) {
            const double tau = 0.10 + 0.05 * k;
            Mask p(16, 16);
            for (std::size_t i = 0; i < p.size(); ++i) p.data[i] = a.data[i] >= (10 + 5 * k) / 100.0 ? 1 : 0;
            const double d = oracle::dice(gg, p);
            if (d > b) b = d, bt = tau;
        }
        CHECK(r.dsc == b);
        CHECK(r.tau == doctest::Approx(bt));
        for (double tau : tau_grid()) CHECK(r.dsc >= dice(gg, binarize(a, tau)));
    }
}

TEST_CASE("hd95 hand cases and sentinels") {
    Mask a(8, 8), b(8, 8);
    a(0, 0) = 1;
    b(3, 4) = 1;
    CHECK(hd95(a, b) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(hd95(a, a) == 0.0);
    CHECK(hd95(Mask(8, 8), Mask(8, 8)) == 0.0);
    CHECK(hd95(a, Mask(8, 8)) == doctest::Approx(std::sqrt(128.0)));
    CHECK(hd95(Mask(8, 8), a) == doctest::Approx(std::sqrt(128.0)));
}

TEST_CASE("hd95 interior pixels are not boundary") {
    Mask m(5, 5);
    for (int y = 1; y < 4; ++y)
        for (int x = 1; x < 4; ++x) m(y, x) = 1;
    const auto b = boundary_pixels(m);
    CHECK(b.size() == 8);
    CHECK(std::find(b.begin(), b.end(), 2 * 5 + 2) == b.end());
    Mask full(3, 3, 1);
    CHECK(boundary_pixels(full).size() == 8);  // image edge counts as background
}

TEST_CASE("percentile interpolates linearly") {
    CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3);
    CHECK(percentile({0, 10}, 95) == doctest::Approx(9.5));
    CHECK(percentile({4}, 95) == 4);
}

TEST_CASE("auprc closed forms") {
    Mask g(4, 4);
    g(0, 0) = g(1, 1) = 1;
    Image am(4, 4, 0.1f);
    am(0, 0) = am(1, 1) = 0.9f;
    CHECK(*auprc(g, am) == 1.0);

    Mask single(4, 4);
    single(2, 2) = 1;
    Image worst(4, 4, 0.5f);
    worst(2, 2) = 0.1f;
    CHECK(*auprc(single, worst) == doctest::Approx(1.0 / 16).epsilon(1e-15));

    // ties put negatives first
    Image flat(4, 4, 0.5f);
    CHECK(*auprc(single, flat) == doctest::Approx(1.0 / 16).epsilon(1e-15));

    CHECK_FALSE(auprc(Mask(4, 4), am).has_value());
}

TEST_CASE("auprc is invariant to monotone score transforms") {
    Rng rng(5);
    for (int it = 0; it < 20; ++it) {
        Mask g = random_mask(rng, 12, 12, 0.15);
        g(0, 0) = 1;
        const Image a = random_map(rng, 12, 12);
        Image b = a;
        for (auto& v : b.data) v = v * v * 0.5f + 0.1f;
        CHECK(*auprc(g, a) == *auprc(g, b));
    }
}

TEST_CASE("connected components") {
    CHECK(connected_components(Mask(4, 4)).size() == 0);
    const Mask diag = from_rows({"#...", ".#..", "....", "...#"});
    const auto cc = connected_components(diag);
    CHECK(cc.size() == 2);
    CHECK(cc.labels(0, 0) == 1);
    CHECK(cc.labels(1, 1) == 1);
    CHECK(cc.labels(3, 3) == 2);
    // U shape that joins late in raster order
    const Mask u = from_rows({"#.#", "#.#", "###"});
    CHECK(connected_components(u).size() == 1);
}

TEST_CASE("detection sensitivity rules") {
    const Mask g = from_rows({"##....##", "##....##", "........"});
    CHECK(*detection_sensitivity(g, g) == 1.0);
    // half of one lesion covered: IoU exactly 1/2 counts as a hit
    const Mask half = from_rows({"##......", "........", "........"});
    CHECK(*detection_sensitivity(g, half) == 0.5);
    CHECK_FALSE(detection_sensitivity(Mask(3, 8), g).has_value());

    // one prediction overlapping two lesions: matched to the better one only
    const Mask g2 = from_rows({"###.##", "......", "......"});
    const Mask p2 = from_rows({"######", "......", "......"});
    // IoU with the 3-pixel lesion 3/6, with the 2-pixel lesion 2/6
    CHECK(*detection_sensitivity(g2, p2) == 0.5);

    const Mask g3 = from_rows({"###.......", "###.......", "###....##.", ".......##."});
    const Mask p3 = from_rows({"###.......", "###.......", "###.....#.", "........#."});
    // first lesion IoU 1; second IoU 2/4 = 0.5
    CHECK(*detection_sensitivity(g3, p3) == 1.0);
}

TEST_CASE("sensitivity monotonicity") {
    Rng rng(9);
    for (int it = 0; it < 30; ++it) {
        Mask g = random_mask(rng, 16, 16, 0.08);
        g(8, 8) = 1;
        Mask p = random_mask(rng, 16, 16, 0.08);
        const double s = *detection_sensitivity(g, p);
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
        // an isolated false positive far from everything in an enlarged frame
        Mask g2(18, 18), p2(18, 18);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) g2(y, x) = g(y, x), p2(y, x) = p(y, x);
        const double before = *detection_sensitivity(g2, p2);
        p2(17, 17) = 1;
        CHECK(*detection_sensitivity(g2, p2) <= before);
        CHECK(*detection_sensitivity(g, g) >= s);
    }
}

TEST_CASE("100 random 16x16 instances agree with brute-force oracles") {
    Rng rng(2024);
    for (int it = 0; it < 100; ++it) {
        const double dens = 0.05 + 0.4 * rng.uniform();
        Mask g = random_mask(rng, 16, 16, dens);
        g(static_cast<int>(rng.uniform_int(0, 15)), static_cast<int>(rng.uniform_int(0, 15))) = 1;
        const Mask p = random_mask(rng, 16, 16, dens);
        const Image am = random_map(rng, 16, 16);
        CHECK(dice(g, p) == oracle::dice(g, p));
        CHECK(dice(g, p) == dice(p, g));
        CHECK(std::abs(hd95(g, p) - oracle::hd95(g, p)) <= 1e-9);
        CHECK(hd95(g, p) == hd95(p, g));
        CHECK(std::abs(*auprc(g, am) - oracle::auprc(g, am)) <= 1e-12);
        int n = 0;
        const auto lab = oracle::components(p, n);
        const auto cc = connected_components(p);
        CHECK(static_cast<int>(cc.size()) == n);
        CHECK(cc.labels.data == lab.data);
        CHECK(*detection_sensitivity(g, p) == oracle::sensitivity(g, p));
    }
}

TEST_CASE("wilcoxon exact and approximate") {
    const std::vector<double> a{1, 2, 3, 4, 5, 6}, zero(6, 0.0);
    auto r = wilcoxon_signed_rank(a, zero);
    CHECK(r.exact);
    CHECK(r.n == 6);
    CHECK(r.p_value == 0.03125);

    auto same = wilcoxon_signed_rank(a, a);
    CHECK(same.degenerate);
    CHECK(same.p_value == 1.0);

    CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2, 3}, {0, 0, 0}), ParameterError);
    CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {0}), ParameterError);

    // symmetric statistic: sign flip leaves p unchanged
    std::vector<double> neg;
    for (double v : a) neg.push_back(-v);
    CHECK(wilcoxon_signed_rank(neg, zero).p_value == r.p_value);
}

TEST_CASE("wilcoxon normal approximation tracks a permutation estimate") {
    Rng rng(77);
    const int n = 50;
    std::vector<double> a(n), b(n), d(n);
    for (int i = 0; i < n; ++i) {
        a[i] = rng.normal() + 0.3;
        b[i] = rng.normal();
        d[i] = a[i] - b[i];
    }
    const auto r = wilcoxon_signed_rank(a, b);
    CHECK_FALSE(r.exact);
    // permutation oracle: random sign flips of the ranked differences
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int x, int y) { return std::abs(d[x]) < std::abs(d[y]); });
    std::vector<double> rank(n);
    for (int i = 0; i < n; ++i) rank[idx[i]] = i + 1;
    double wobs = 0;
    for (int i = 0; i < n; ++i)
        if (d[i] > 0) wobs += rank[i];
    const double mean = n * (n + 1) / 4.0;
    Rng perm(3);
    const int draws = 1000000;
    int extreme = 0;
    for (int k = 0; k < draws; ++k) {
        double w = 0;
        const std::uint64_t bits = perm.next_u64();
        for (int i = 0; i < n; ++i)
            if (bits >> i & 1) w += rank[i];
        if (std::abs(w - mean) >= std::abs(wobs - mean) - 1e-9) ++extreme;
    }
    CHECK(std::abs(r.p_value - double(extreme) / draws) < 0.01);
}

TEST_CASE("bonferroni") {
    CHECK(bonferroni(0.05, 1) == 0.05);
    CHECK(bonferroni(0.05, 28) == doctest::Approx(1.7857e-3).epsilon(1e-4));
    CHECK(bonferroni(0.05, 21) == doctest::Approx(2.381e-3).epsilon(1e-4));
    CHECK_THROWS_AS(bonferroni(0.05, 0), ParameterError);
}

TEST_CASE("stratified report") {
    std::vector<MetricRecord> recs(4);
    const double size[4] = {0.1, 0.2, 0.6, 1.0}, dsc[4] = {0.2, 0.4, 0.5, 0.9};
    for (int i = 0; i < 4; ++i) {
        recs[i].normalized_size = size[i];
        recs[i].dsc_opt = dsc[i];
    }
    const auto one = stratified_report(recs, "normalized_size", 1);
    REQUIRE(one.size() == 1);
    CHECK(one[0].mean == doctest::Approx(0.5));
    CHECK(one[0].count == 4);

    // bins [0.1, 0.55), [0.55, 1.0]
    const auto two = stratified_report(recs, "normalized_size", 2);
    REQUIRE(two.size() == 2);
    CHECK(two[0].count == 2);
    CHECK(two[0].mean == doctest::Approx(0.3));
    // sample sd of {0.2, 0.4} = 0.141421..., SEM = 0.1
    CHECK(two[0].sem == doctest::Approx(0.1));
    CHECK(two[1].mean == doctest::Approx(0.7));
    CHECK(two[1].sem == doctest::Approx(0.2));

    // six bins over [0, 0.5): only small lesions
    const auto small = stratified_report(recs, "normalized_size", 6, "dsc_opt", std::pair{0.0, 0.5});
    REQUIRE(small.size() == 6);
    int total = 0, empty = 0;
    for (const auto& b : small) total += b.count, empty += b.empty;
    CHECK(total == 2);
    CHECK(empty == 4);

    CHECK(stratified_report({}, "normalized_size", 3).empty());
    CHECK_THROWS_AS(stratified_report(recs, "colour", 3), ParameterError);
}

TEST_CASE("evaluate_slice lesion measures") {
    Mask g(4, 4);
    g(1, 1) = g(1, 2) = 1;
    Image px(4, 4, 0.1f);
    px(1, 1) = 0.5f;
    px(1, 2) = 1.0f;
    Image am(4, 4, 0.0f);
    am(1, 1) = am(1, 2) = 0.8f;
    auto r = evaluate_slice("P:1", g, am, px, 10.0);
    CHECK(r.dsc_opt == 1.0);
    CHECK(r.hd95 == 0.0);
    CHECK(r.auprc == 1.0);
    CHECK(r.sensitivity == 1.0);
    CHECK(r.lesion_pixels == 2);
    CHECK(r.suv_sum == doctest::Approx(15.0));
    CHECK(r.suv_mean == doctest::Approx(7.5));
    std::vector<MetricRecord> v{r, r};
    v[1].lesion_pixels = 1;
    normalize_lesion_sizes(v);
    CHECK(v[0].normalized_size == 1.0);
    CHECK(v[1].normalized_size == 0.5);
    const auto csv = metric_csv(v);
    CHECK(csv.rfind("slice_id,dsc_opt,tau_star,hd95,auprc,sensitivity", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
