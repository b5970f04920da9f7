#pragma once

// Dense numeric kernels used by the denoiser.
//
// Two implementations share each signature:
//   cfd::kernels::            OpenMP-parallel, loop orders chosen for vectorization
//   cfd::kernels::reference:: plain serial loops, kept as the test oracle
//
// Every parallel kernel assigns each output element to exactly one thread and
// accumulates in a fixed order, so results do not depend on the thread count.
// Feature maps are channel-major: element (c, y, x) lives at (c * H + y) * W + x.

#include <cstddef>
#include <span>

namespace cfd::kernels {

struct ConvShape {
    int in_channels = 0;
    int out_channels = 0;
    int height = 0;  // input
    int width = 0;   // input
    int kernel = 3;
    int stride = 1;
    int pad = 1;

    int out_height() const noexcept { return (height + 2 * pad - kernel) / stride + 1; }
    int out_width() const noexcept { return (width + 2 * pad - kernel) / stride + 1; }
    std::size_t weight_size() const noexcept {
        return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
    }
    std::size_t in_size() const noexcept { return static_cast<std::size_t>(in_channels) * height * width; }
    std::size_t out_size() const noexcept {
        return static_cast<std::size_t>(out_channels) * out_height() * out_width();
    }
};

/// out = conv(in, weight) + bias. `bias` may be empty.
template <typename Real>
void conv2d_forward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> out);

/// Accumulates into grad_in (skipped when empty), grad_weight and grad_bias (skipped when empty).
template <typename Real>
void conv2d_backward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                     std::span<const Real> grad_out, std::span<Real> grad_in, std::span<Real> grad_weight,
                     std::span<Real> grad_bias);

/// Row-major C[m x n] = beta * C + op(A) * op(B), op(A) is m x k and op(B) is k x n.
/// A is stored m x k (or k x m when trans_a); B is stored k x n (or n x k when trans_b).
template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, std::span<const Real> a, std::span<const Real> b,
          Real beta, std::span<Real> c);

/// Group normalization over (channels, spatial) with per-channel affine.
/// Saves per-group mean and reciprocal std for the backward pass.
template <typename Real>
void group_norm_forward(int channels, int spatial, int groups, std::span<const Real> x,
                        std::span<const Real> gamma, std::span<const Real> beta, Real eps, std::span<Real> y,
                        std::span<Real> mean, std::span<Real> rstd);

template <typename Real>
void group_norm_backward(int channels, int spatial, int groups, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean, std::span<const Real> rstd,
                         std::span<const Real> grad_y, std::span<Real> grad_x, std::span<Real> grad_gamma,
                         std::span<Real> grad_beta);

/// Layer normalization across channels, independently for each of `tokens` columns.
template <typename Real>
void layer_norm_forward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, Real eps, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd);

template <typename Real>
void layer_norm_backward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                         std::span<const Real> mean, std::span<const Real> rstd, std::span<const Real> grad_y,
                         std::span<Real> grad_x, std::span<Real> grad_gamma, std::span<Real> grad_beta);

/// In-place numerically stable softmax over each row of a rows x cols matrix.
template <typename Real>
void softmax_rows(int rows, int cols, std::span<Real> x);

/// grad_x = p * (grad_p - rowdot(grad_p, p)), written over grad_p.
template <typename Real>
void softmax_rows_backward(int rows, int cols, std::span<const Real> p, std::span<Real> grad);

namespace reference {

template <typename Real>
void conv2d_forward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> out);
template <typename Real>
void conv2d_backward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                     std::span<const Real> grad_out, std::span<Real> grad_in, std::span<Real> grad_weight,
                     std::span<Real> grad_bias);
template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, std::span<const Real> a, std::span<const Real> b,
          Real beta, std::span<Real> c);
template <typename Real>
void group_norm_forward(int channels, int spatial, int groups, std::span<const Real> x,
                        std::span<const Real> gamma, std::span<const Real> beta, Real eps, std::span<Real> y,
                        std::span<Real> mean, std::span<Real> rstd);
template <typename Real>
void group_norm_backward(int channels, int spatial, int groups, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean, std::span<const Real> rstd,
                         std::span<const Real> grad_y, std::span<Real> grad_x, std::span<Real> grad_gamma,
                         std::span<Real> grad_beta);
template <typename Real>
void layer_norm_forward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, Real eps, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd);
template <typename Real>
void layer_norm_backward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                         std::span<const Real> mean, std::span<const Real> rstd, std::span<const Real> grad_y,
                         std::span<Real> grad_x, std::span<Real> grad_gamma, std::span<Real> grad_beta);
template <typename Real>
void softmax_rows(int rows, int cols, std::span<Real> x);
template <typename Real>
void softmax_rows_backward(int rows, int cols, std::span<const Real> p, std::span<Real> grad);

}  // namespace reference

}  // namespace cfd::kernels
