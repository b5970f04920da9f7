#include <cmath>
#include <array>
#include <set>
#include <span>

#include "cfd/layers.hpp"
#include "doctest.h"

using namespace cfd;
using namespace cfd::nn;

TEST_CASE("time embedding") {
    const auto e0 = time_embedding(0, 64);
    REQUIRE(e0.size() == 64);
    for (int i = 0; i < 32; ++i) CHECK(e0[i] == 0.0);
    for (int i = 32; i < 64; ++i) CHECK(e0[i] == 1.0);
    std::set<std::vector<double>> seen;
    for (int t = 0; t <= 1000; ++t) {
        const auto e = time_embedding(t, 64);
        for (double v : e) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
        seen.insert(e);
    }
    CHECK(seen.size() == 1001);
    // frequency ladder: component i is sin(t * 10000^(-i/half))
    const auto e7 = time_embedding(7, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e7[i] == doctest::Approx(std::sin(7 * std::pow(10000.0, -i / 4.0))));
        CHECK(e7[i + 4] == doctest::Approx(std::cos(7 * std::pow(10000.0, -i / 4.0))));
    }
    CHECK_THROWS_AS(time_embedding(3, 7), ParameterError);
    CHECK_THROWS_AS(time_embedding(-1, 8), ParameterError);
}

namespace {

void set_matrix(std::vector<double>& p, ParamRef r, const std::vector<double>& vals) {
    REQUIRE(vals.size() == r.size);
    std::copy(vals.begin(), vals.end(), p.begin() + static_cast<std::ptrdiff_t>(r.offset));
}

std::vector<double> identity(int n) {
    std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i) * n + i] = 1.0;
    return m;
}

}  // namespace

TEST_CASE("class-token attention on a hand-set 4-token case") {
    // one head, C = 2, d = 2, four tokens
    ParamLayout layout;
    Attention<double> att(layout, "att", 2, 2, 2);
    std::vector<double> p(layout.size(), 0.0);
    const std::vector<double> wq{1, 0, 0, 2}, wk{0.5, 0, 0, 1}, wv{1, 1, 0, 1}, kc{1, -1, 0, 1}, vc{2, 0, 0, 3};
    set_matrix(p, att.wq(), wq);
    set_matrix(p, att.wk(), wk);
    set_matrix(p, att.wv(), wv);
    set_matrix(p, att.wk_context(), kc);
    set_matrix(p, att.wv_context(), vc);
    set_matrix(p, att.wo(), identity(2));
    // tokens (channel-major 2 x 4)
    const double tok[4][2] = {{1, 0}, {0, 1}, {1, 1}, {-1, 0.5}};
    Tensor<double> x(2, 1, 4);
    for (int n = 0; n < 4; ++n)
        for (int c = 0; c < 2; ++c) x.v[c * 4 + n] = tok[n][c];
    const std::vector<double> e{0.3, -0.7};

    // manual evaluation: rows of Q, K (tokens then class), V
    auto mat = [](const std::vector<double>& m, const double* v) {
        return std::array<double, 2>{m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]};
    };
    std::array<double, 2> K[5], V[5];
    for (int n = 0; n < 4; ++n) K[n] = mat(wk, tok[n]), V[n] = mat(wv, tok[n]);
    K[4] = mat(kc, e.data());
    V[4] = mat(vc, e.data());
    Attention<double>::Cache cache;
    const auto y = att.forward(p, x, e, cache);
    for (int n = 0; n < 4; ++n) {
        const auto q = mat(wq, tok[n]);
        double s[5], mx = -1e300, z = 0;
        for (int m = 0; m < 5; ++m) mx = std::max(mx, s[m] = (q[0] * K[m][0] + q[1] * K[m][1]) / std::sqrt(2.0));
        for (int m = 0; m < 5; ++m) z += s[m] = std::exp(s[m] - mx);
        double o[2] = {0, 0};
        for (int m = 0; m < 5; ++m)
            for (int c = 0; c < 2; ++c) o[c] += s[m] / z * V[m][c];
        for (int c = 0; c < 2; ++c) CHECK(y.v[c * 4 + n] == doctest::Approx(o[c]).epsilon(1e-12));
    }
    // every attention row sums to one over the N + 1 keys
    for (int n = 0; n < 4; ++n) {
        double sum = 0;
        for (int m = 0; m < 5; ++m) sum += cache.probs[n * 5 + m];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("masked class token with a single query returns its value projection") {
    ParamLayout layout;
    Attention<double> att(layout, "att", 4, 2, 3);
    auto p = layout.initialize<double>(5);
    Rng rng(1);
    for (auto& v : p) v = rng.normal();
    Tensor<double> x(4, 1, 1);
    for (auto& v : x.v) v = rng.normal();
    const std::vector<double> e{0.1, 0.2, 0.3};
    Attention<double>::Cache cache;
    const auto y = att.forward(p, x, e, cache, true);
    // expected: Wo (Wv x) + bo
    const std::span<const double> ps(p);
    const auto wv = att.wv().in(ps), wo = att.wo().in(ps), bo = att.bo().in(ps);
    for (int i = 0; i < 4; ++i) {
        double acc = bo[i];
        for (int j = 0; j < 4; ++j) {
            double v = 0;
            for (int k = 0; k < 4; ++k) v += wv[j * 4 + k] * x.v[k];
            acc += wo[i * 4 + j] * v;
        }
        CHECK(y.v[i] == doctest::Approx(acc).epsilon(1e-12));
    }
    CHECK_THROWS_AS(att.forward(p, x, std::vector<double>{1.0}, cache), ParameterError);
}

TEST_CASE("spatial transformer: identity at init, shape preserving") {
    for (int size : {16, 32}) {
        ParamLayout layout;
        SpatialTransformer<float> st(layout, "attn", 64, 16, 64, 8, 4);
        const auto p = layout.initialize<float>(3);
        Rng rng(2);
        Tensor<float> x(64, size, size);
        for (auto& v : x.v) v = static_cast<float>(rng.normal());
        std::vector<float> e(64);
        for (auto& v : e) v = static_cast<float>(rng.normal());
        SpatialTransformer<float>::Cache cache;
        const auto y = st.forward(p, x, e, cache);
        CHECK(y.same_shape(x));
        CHECK(y.v == x.v);  // proj_out starts at zero
    }
}

TEST_CASE("spatial transformer gradients match finite differences") {
    ParamLayout layout;
    SpatialTransformer<double> st(layout, "attn", 8, 4, 8, 4, 2);
    auto p = layout.initialize<double>(9);
    Rng rng(4);
    for (auto& v : p) v += 0.3 * rng.normal();
    Tensor<double> x(8, 8, 8);
    for (auto& v : x.v) v = rng.normal();
    std::vector<double> e(8), r(8 * 64);
    for (auto& v : e) v = rng.normal();
    for (auto& v : r) v = rng.normal();

    auto loss = [&](const std::vector<double>& pp, const Tensor<double>& xx, const std::vector<double>& ee) {
        SpatialTransformer<double>::Cache c;
        const auto y = st.forward(pp, xx, ee, c);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y.v[i];
        return s;
    };
    SpatialTransformer<double>::Cache cache;
    st.forward(p, x, e, cache);
    Tensor<double> gy(8, 8, 8);
    gy.v = r;
    std::vector<double> g(p.size(), 0.0), ge(8, 0.0);
    const auto gx = st.backward(p, g, cache, gy, ge);

    const double h = 1e-3;
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); };
    for (const auto& entry : layout.entries())
        for (std::size_t j = 0; j < std::min<std::size_t>(entry.ref.size, 4); ++j) {
            const std::size_t i = entry.ref.offset + (j * 7919) % entry.ref.size;
            auto pp = p;
            pp[i] += h;
            const double lp = loss(pp, x, e);
            pp[i] -= 2 * h;
            const double lm = loss(pp, x, e);
            INFO(entry.name);
            CHECK(rel((lp - lm) / (2 * h), g[i]) <= 1e-3);
        }
    for (int i = 0; i < 512; i += 37) {
        auto xp = x;
        xp.v[i] += h;
        const double lp = loss(p, xp, e);
        xp.v[i] -= 2 * h;
        CHECK(rel((lp - loss(p, xp, e)) / (2 * h), gx.v[i]) <= 1e-3);
    }
    for (int i = 0; i < 8; ++i) {
        auto ep = e;
        ep[i] += h;
        const double lp = loss(p, x, ep);
        ep[i] -= 2 * h;
        CHECK(rel((lp - loss(p, x, ep)) / (2 * h), ge[i]) <= 1e-3);
    }
}

TEST_CASE("parameter layout naming and initialization") {
    ParamLayout layout;
    {
        ScopeGuard g(layout, "outer");
        layout.add("w", {2, 3}, Init::FanIn, 3);
        layout.add("b", {2}, Init::One);
    }
    REQUIRE(layout.find("outer.w") != nullptr);
    CHECK(layout.find("outer.b")->ref.offset == 6);
    CHECK(layout.size() == 8);
    CHECK_THROWS_AS(layout.add("outer.w", {1}, Init::Zero), ParameterError);
    const auto a = layout.initialize<float>(1), b = layout.initialize<float>(1), c = layout.initialize<float>(2);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(a[6] == 1.0f);
    CHECK(a[7] == 1.0f);
}
