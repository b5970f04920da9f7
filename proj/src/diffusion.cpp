#include "cfd/diffusion.hpp"

#include <cmath>
#include <string>

namespace cfd {

ScheduleTable::ScheduleTable(std::vector<double> betas) : beta_(std::move(betas)) {
    require(!beta_.empty(), "schedule needs at least one step");
    alpha_.resize(beta_.size());
    alpha_bar_.resize(beta_.size() + 1);
    alpha_bar_[0] = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
        require(beta_[i] > 0.0 && beta_[i] < 1.0, "beta must lie in (0, 1)");
        alpha_[i] = 1.0 - beta_[i];
        alpha_bar_[i + 1] = alpha_bar_[i] * alpha_[i];
    }
}

ScheduleTable make_linear_schedule(int steps, double beta_start, double beta_end) {
    require(steps >= 1, "schedule step count must be >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "schedule requires 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    if (steps == 1) {
        betas[0] = beta_start;
    } else {
        for (int i = 0; i < steps; ++i)
            betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (steps - 1);
        betas.back() = beta_end;
    }
    return ScheduleTable(std::move(betas));
}

namespace {

void check_t(int t, const ScheduleTable& s) {
    require(t >= 0 && t <= s.steps(), "timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.steps()) + "]");
}

void check_shape(const Image& a, const Image& b, const char* what) {
    require(a.same_shape(b), std::string(what) + ": shape mismatch");
}

Image ddim_move(const Image& x, double ab, double ab_next, const Image& e) {
    Image out(x.height, x.width);
    for (std::size_t i = 0; i < x.size(); ++i)
        out.data[i] = static_cast<float>(ddim_transfer(x.data[i], ab, ab_next, e.data[i]));
    return out;
}

}  // namespace

// x_next = sqrt(ab_next) * (x - sqrt(1 - ab) e) / sqrt(ab) + sqrt(1 - ab_next) e
double ddim_transfer(double x, double ab, double ab_next, double e) {
    const double x0 = (x - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
    return std::sqrt(ab_next) * x0 + std::sqrt(1.0 - ab_next) * e;
}

SliceState forward_noise(const SliceState& x0, int t, const Image& eps, const ScheduleTable& schedule) {
    require(x0.t == 0, "forward_noise expects a clean input (t == 0)");
    check_t(t, schedule);
    check_shape(x0.pixels, eps, "forward_noise");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    SliceState out{Image(x0.pixels.height, x0.pixels.width), t, x0.rng_seed};
    for (std::size_t i = 0; i < eps.size(); ++i)
        out.pixels.data[i] = static_cast<float>(a * x0.pixels.data[i] + b * eps.data[i]);
    return out;
}

Image ddpm_posterior_mean(const SliceState& xt, int t, const Image& eps_hat, const ScheduleTable& schedule) {
    require(t >= 1, "posterior mean undefined at t = 0");
    check_t(t, schedule);
    check_shape(xt.pixels, eps_hat, "ddpm_posterior_mean");
    const double alpha = schedule.alpha(t);
    const double coef = (1.0 - alpha) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv = 1.0 / std::sqrt(alpha);
    Image mu(eps_hat.height, eps_hat.width);
    for (std::size_t i = 0; i < mu.size(); ++i)
        mu.data[i] = static_cast<float>(inv * (xt.pixels.data[i] - coef * eps_hat.data[i]));
    return mu;
}

SliceState ddpm_step(const SliceState& xt, int t, const Image& eps_hat, const Image& z,
                     const ScheduleTable& schedule) {
    Image mu = ddpm_posterior_mean(xt, t, eps_hat, schedule);
    check_shape(mu, z, "ddpm_step");
    const double sigma = std::sqrt(schedule.beta(t));
    for (std::size_t i = 0; i < mu.size(); ++i)
        mu.data[i] = static_cast<float>(mu.data[i] + sigma * z.data[i]);
    return {std::move(mu), t - 1, xt.rng_seed};
}

SliceState ddim_step(const SliceState& xt, int t, int t_next, const Image& eps_hat,
                     const ScheduleTable& schedule) {
    check_t(t, schedule);
    check_t(t_next, schedule);
    require(t_next <= t, "ddim_step requires t_next <= t");
    check_shape(xt.pixels, eps_hat, "ddim_step");
    if (t_next == t) return {xt.pixels, t, xt.rng_seed};
    return {ddim_move(xt.pixels, schedule.alpha_bar(t), schedule.alpha_bar(t_next), eps_hat), t_next, xt.rng_seed};
}

SliceState ddim_inverse_step(const SliceState& xt, int t, int t_next, const Image& eps_hat,
                             const ScheduleTable& schedule) {
    check_t(t, schedule);
    check_t(t_next, schedule);
    require(t_next >= t, "ddim_inverse_step requires t_next >= t");
    check_shape(xt.pixels, eps_hat, "ddim_inverse_step");
    if (t_next == t) return {xt.pixels, t, xt.rng_seed};
    return {ddim_move(xt.pixels, schedule.alpha_bar(t), schedule.alpha_bar(t_next), eps_hat), t_next, xt.rng_seed};
}

Image predict_x0(const Image& xt, int t, const Image& eps_hat, const ScheduleTable& schedule) {
    check_t(t, schedule);
    check_shape(xt, eps_hat, "predict_x0");
    const double ab = schedule.alpha_bar(t);
    const double sa = std::sqrt(ab), s1a = std::sqrt(1.0 - ab);
    Image out(xt.height, xt.width);
    for (std::size_t i = 0; i < xt.size(); ++i)
        out.data[i] = static_cast<float>((static_cast<double>(xt.data[i]) - s1a * eps_hat.data[i]) / sa);
    return out;
}

}  // namespace cfd
