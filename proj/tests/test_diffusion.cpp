#include <cmath>

#include "cfd/diffusion.hpp"
#include "doctest.h"

using namespace cfd;

namespace {

Image filled(int h, int w, float v) { return Image(h, w, v); }

double max_rel(const Image& a, const Image& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a.data[i]) - b.data[i]) / std::max(1e-6, std::abs(double(b.data[i]))));
    return m;
}

double norm_rel(const Image& a, const Image& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (double(a.data[i]) - b.data[i]) * (double(a.data[i]) - b.data[i]);
        den += double(b.data[i]) * b.data[i];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("linear schedule") {
    const auto s = make_linear_schedule(1000);
    CHECK(s.steps() == 1000);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.beta(1) == doctest::Approx(1e-4));
    CHECK(s.beta(1000) == doctest::Approx(2e-2));
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.beta(t) > 0);
        CHECK(s.beta(t) < 1);
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));
    }

    const auto one = make_linear_schedule(1, 0.5, 0.5);
    CHECK(one.alpha_bar(0) == 1.0);
    CHECK(one.alpha_bar(1) == 0.5);

    const auto ten = make_linear_schedule(10, 1e-4, 2e-2);
    double prod = 1;
    for (int i = 0; i < 10; ++i) prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i / 9.0);
    CHECK(ten.alpha_bar(10) == doctest::Approx(prod).epsilon(1e-14));

    CHECK_THROWS_AS(make_linear_schedule(0), ParameterError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.1), ParameterError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.2, 0.1), ParameterError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ParameterError);
}

TEST_CASE("forward noise boundaries") {
    const auto s = make_linear_schedule(1000);
    Rng rng(1);
    const SliceState x0{rng.normal_image(4, 5), 0, 0};
    const Image eps = rng.normal_image(4, 5);
    CHECK(forward_noise(x0, 0, eps, s).pixels == x0.pixels);
    const auto z = forward_noise(x0, 300, Image(4, 5, 0.0f), s);
    CHECK(z.t == 300);
    for (std::size_t i = 0; i < z.pixels.size(); ++i)
        CHECK(z.pixels.data[i] == doctest::Approx(std::sqrt(s.alpha_bar(300)) * x0.pixels.data[i]));
    CHECK_THROWS_AS(forward_noise(x0, 10, Image(5, 4), s), ParameterError);
    CHECK_THROWS_AS(forward_noise({x0.pixels, 3, 0}, 10, eps, s), ParameterError);
    CHECK_THROWS_AS(forward_noise(x0, 1001, eps, s), ParameterError);
}

TEST_CASE("forward noise Monte-Carlo moments and chain consistency") {
    const auto s = make_linear_schedule(1000);
    const int t = 500, n = 100000;
    Rng rng(42);
    // direct: x_t from x0 = 1 in one shot
    double sum = 0, sq = 0;
    const SliceState x0{filled(1, 1, 1.0f), 0, 0};
    for (int i = 0; i < n; ++i) {
        const double v = forward_noise(x0, t, rng.normal_image(1, 1), s).pixels.data[0];
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    CHECK(std::abs(mean / std::sqrt(s.alpha_bar(t)) - 1) < 0.01);
    CHECK(std::abs(var / (1 - s.alpha_bar(t)) - 1) < 0.01);

    // Markov chain x_k = sqrt(alpha_k) x_{k-1} + sqrt(beta_k) z, coarse check at t = 100
    const int tc = 100, nc = 20000;
    sum = sq = 0;
    for (int i = 0; i < nc; ++i) {
        double x = 1.0;
        for (int k = 1; k <= tc; ++k) x = std::sqrt(s.alpha(k)) * x + std::sqrt(s.beta(k)) * rng.normal();
        sum += x;
        sq += x * x;
    }
    const double cm = sum / nc, cv = sq / nc - cm * cm;
    CHECK(std::abs(cm / std::sqrt(s.alpha_bar(tc)) - 1) < 0.01);
    CHECK(std::abs(cv / (1 - s.alpha_bar(tc)) - 1) < 0.05);

    // the expected signal decays monotonically
    for (int k = 1; k <= 1000; ++k) CHECK(std::sqrt(s.alpha_bar(k)) <= std::sqrt(s.alpha_bar(k - 1)));
}

TEST_CASE("ddpm posterior mean and step") {
    const auto s = make_linear_schedule(1000);
    Rng rng(3);
    const SliceState x0{rng.normal_image(2, 2), 0, 0};
    const Image eps = rng.normal_image(2, 2);
    const int t = 250;
    const auto xt = forward_noise(x0, t, eps, s);
    const Image mu = ddpm_posterior_mean(xt, t, eps, s);
    for (std::size_t i = 0; i < 4; ++i) {
        const double a = 1 - s.beta(t), ab = s.alpha_bar(t);
        const double ref = (xt.pixels.data[i] - (1 - a) / std::sqrt(1 - ab) * eps.data[i]) / std::sqrt(a);
        CHECK(mu.data[i] == doctest::Approx(ref).epsilon(1e-6));
    }

    const SliceState zero{Image(2, 2, 0.0f), t, 0};
    const Image ones(2, 2, 1.0f);
    const Image m1 = ddpm_posterior_mean(zero, t, ones, s);
    const double expect = -(1 - s.alpha(t)) / (std::sqrt(s.alpha(t)) * std::sqrt(1 - s.alpha_bar(t)));
    for (float v : m1.data) CHECK(v == doctest::Approx(expect).epsilon(1e-6));

    // tiny beta: the step collapses onto x_t
    const ScheduleTable tiny(std::vector<double>{1e-12, 1e-12});
    const Image m2 = ddpm_posterior_mean(xt, 1, Image(2, 2, 0.0f), tiny);
    for (std::size_t i = 0; i < 4; ++i) CHECK(m2.data[i] == doctest::Approx(xt.pixels.data[i]).epsilon(1e-6));

    const auto step0 = ddpm_step(xt, t, eps, Image(2, 2, 0.0f), s);
    CHECK(step0.pixels == mu);
    CHECK(step0.t == t - 1);
    const Image z = rng.normal_image(2, 2);
    const auto step = ddpm_step(xt, t, eps, z, s);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(step.pixels.data[i] == doctest::Approx(mu.data[i] + std::sqrt(s.beta(t)) * z.data[i]).epsilon(1e-6));
    CHECK_THROWS_AS(ddpm_posterior_mean({xt.pixels, 0, 0}, 0, eps, s), ParameterError);
}

TEST_CASE("ddim step identities") {
    const auto s = make_linear_schedule(1000);
    Rng rng(8);
    const SliceState x0{rng.normal_image(3, 3), 0, 0};
    const Image eps = rng.normal_image(3, 3);
    const auto x600 = forward_noise(x0, 600, eps, s);

    CHECK(ddim_step(x600, 600, 600, eps, s).pixels == x600.pixels);
    // exact eps lands on forward_noise at the new level
    const auto x200 = ddim_step(x600, 600, 200, eps, s);
    CHECK(max_rel(x200.pixels, forward_noise(x0, 200, eps, s).pixels) < 1e-4);
    // t_next = 0 gives the predicted x0
    const auto x00 = ddim_step(x600, 600, 0, eps, s);
    CHECK(x00.pixels == predict_x0(x600.pixels, 600, eps, s));
    CHECK(max_rel(x00.pixels, x0.pixels) < 1e-4);

    CHECK_THROWS_AS(ddim_step(x600, 600, 700, eps, s), ParameterError);
    CHECK_THROWS_AS(ddim_inverse_step(x600, 600, 100, eps, s), ParameterError);

    // eps = 0: inverse step is a rescale by sqrt(abar_next / abar_t)
    const auto up = ddim_inverse_step(x200, 200, 500, Image(3, 3, 0.0f), s);
    const double r = std::sqrt(s.alpha_bar(500) / s.alpha_bar(200));
    for (std::size_t i = 0; i < 9; ++i) CHECK(up.pixels.data[i] == doctest::Approx(r * x200.pixels.data[i]));
}

TEST_CASE("ddim round trips") {
    const auto s = make_linear_schedule(1000);
    Rng rng(9);
    // the transfer itself, in double, over the whole range
    for (int it = 0; it < 2000; ++it) {
        const int t = static_cast<int>(rng.uniform_int(0, 999));
        const int tn = t + static_cast<int>(rng.uniform_int(1, 1000 - t));
        const double x = rng.normal(), e = rng.normal();
        const double up = ddim_transfer(x, s.alpha_bar(t), s.alpha_bar(tn), e);
        const double back = ddim_transfer(up, s.alpha_bar(tn), s.alpha_bar(t), e);
        CHECK(std::abs(back - x) <= 1e-5 * std::max(std::abs(x), 1e-3));
    }
    // float images: storage rounding is amplified by 1/sqrt(abar), so stay where abar >= 0.02
    for (int it = 0; it < 20; ++it) {
        const SliceState x{rng.normal_image(4, 4), 0, 0};
        const int t = static_cast<int>(rng.uniform_int(0, 500));
        const int tn = t + static_cast<int>(rng.uniform_int(1, 600 - t));
        const Image e = rng.normal_image(4, 4);
        const SliceState at{x.pixels, t, 0};
        const auto back = ddim_step(ddim_inverse_step(at, t, tn, e, s), tn, t, e, s);
        CHECK(norm_rel(back.pixels, at.pixels) < 1e-5);
    }

    // chained 0 -> 400 -> 0 with a fixed deterministic eps function
    auto eps_fn = [](const Image& x, int t) {
        Image e(x.height, x.width);
        for (std::size_t i = 0; i < x.size(); ++i) e.data[i] = static_cast<float>(std::sin(0.7 * i + 0.01 * t));
        return e;
    };
    SliceState cur{rng.normal_image(8, 8), 0, 0};
    for (auto& v : cur.pixels.data) v = 0.5f + 0.25f * v;
    const Image start = cur.pixels;
    for (int t = 0; t < 400; ++t) cur = ddim_inverse_step(cur, t, t + 1, eps_fn(cur.pixels, t), s);
    for (int t = 400; t > 0; --t) cur = ddim_step(cur, t, t - 1, eps_fn(cur.pixels, t - 1), s);
    double mae = 0;
    for (std::size_t i = 0; i < start.size(); ++i) mae += std::abs(cur.pixels.data[i] - start.data[i]);
    CHECK(mae / start.size() <= 1e-4);
}
