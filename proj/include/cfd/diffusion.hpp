#pragma once

// Closed-form diffusion mathematics: variance schedule, forward noising,
// ancestral (DDPM) stepping and deterministic DDIM stepping/inversion.
// Nothing here touches a learned network.

#include <cstdint>
#include <vector>

#include "cfd/common.hpp"

namespace cfd {

/// Precomputed variance schedule for T steps.
///
/// beta(t), alpha(t) are defined for t in [1, T]; alpha_bar(t) for t in [0, T]
/// with alpha_bar(0) == 1 meaning "clean".
class ScheduleTable {
public:
    ScheduleTable() = default;
    ScheduleTable(std::vector<double> betas);

    int steps() const noexcept { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_.at(static_cast<std::size_t>(t) - 1); }
    double alpha(int t) const { return alpha_.at(static_cast<std::size_t>(t) - 1); }
    double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }

    const std::vector<double>& betas() const noexcept { return beta_; }
    const std::vector<double>& alphas() const noexcept { return alpha_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

    double beta_start() const noexcept { return beta_.front(); }
    double beta_end() const noexcept { return beta_.back(); }

private:
    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
};

/// Linearly spaced betas from beta_start to beta_end inclusive.
ScheduleTable make_linear_schedule(int steps, double beta_start = 1e-4, double beta_end = 2e-2);

/// An image at diffusion time t (t == 0 is clean).
struct SliceState {
    Image pixels;
    int t = 0;
    std::uint64_t rng_seed = 0;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
SliceState forward_noise(const SliceState& x0, int t, const Image& eps, const ScheduleTable& schedule);

/// Posterior mean of the reverse step given a noise prediction. Requires t >= 1.
Image ddpm_posterior_mean(const SliceState& xt, int t, const Image& eps_hat, const ScheduleTable& schedule);

/// Ancestral step: posterior mean plus sqrt(beta_t) * z.
SliceState ddpm_step(const SliceState& xt, int t, const Image& eps_hat, const Image& z,
                     const ScheduleTable& schedule);

/// Scalar DDIM transfer between cumulative products ab and ab_next, in double precision.
double ddim_transfer(double x, double ab, double ab_next, double e);

/// Deterministic DDIM move from t down to t_next (t_next <= t).
SliceState ddim_step(const SliceState& xt, int t, int t_next, const Image& eps_hat,
                     const ScheduleTable& schedule);

/// Deterministic DDIM move from t up to t_next (t_next >= t); same algebra with the roles swapped.
SliceState ddim_inverse_step(const SliceState& xt, int t, int t_next, const Image& eps_hat,
                             const ScheduleTable& schedule);

/// Clean-image estimate (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
Image predict_x0(const Image& xt, int t, const Image& eps_hat, const ScheduleTable& schedule);

}  // namespace cfd
