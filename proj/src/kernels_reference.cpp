#include "cfd/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace cfd::kernels::reference {

template <typename Real>
void conv2d_forward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> out) {
    const int ho = s.out_height(), wo = s.out_width(), k = s.kernel;
    for (int co = 0; co < s.out_channels; ++co)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                Real acc = bias.empty() ? Real(0) : bias[co];
                for (int ci = 0; ci < s.in_channels; ++ci)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * s.stride + ky - s.pad;
                            const int ix = ox * s.stride + kx - s.pad;
                            if (iy < 0 || iy >= s.height || ix < 0 || ix >= s.width) continue;
                            acc += weight[((co * s.in_channels + ci) * k + ky) * k + kx] *
                                   in[(ci * s.height + iy) * s.width + ix];
                        }
                out[(co * ho + oy) * wo + ox] = acc;
            }
}

template <typename Real>
void conv2d_backward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                     std::span<const Real> grad_out, std::span<Real> grad_in, std::span<Real> grad_weight,
                     std::span<Real> grad_bias) {
    const int ho = s.out_height(), wo = s.out_width(), k = s.kernel;
    for (int co = 0; co < s.out_channels; ++co)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                const Real g = grad_out[(co * ho + oy) * wo + ox];
                if (!grad_bias.empty()) grad_bias[co] += g;
                for (int ci = 0; ci < s.in_channels; ++ci)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * s.stride + ky - s.pad;
                            const int ix = ox * s.stride + kx - s.pad;
                            if (iy < 0 || iy >= s.height || ix < 0 || ix >= s.width) continue;
                            const std::size_t wi = ((co * s.in_channels + ci) * k + ky) * k + kx;
                            const std::size_t ii = (ci * s.height + iy) * s.width + ix;
                            grad_weight[wi] += g * in[ii];
                            if (!grad_in.empty()) grad_in[ii] += g * weight[wi];
                        }
            }
}

template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, std::span<const Real> a, std::span<const Real> b,
          Real beta, std::span<Real> c) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            Real acc = 0;
            for (int p = 0; p < k; ++p) {
                const Real av = trans_a ? a[p * m + i] : a[i * k + p];
                const Real bv = trans_b ? b[j * k + p] : b[p * n + j];
                acc += av * bv;
            }
            c[i * n + j] = (beta == Real(0) ? Real(0) : beta * c[i * n + j]) + acc;
        }
}

template <typename Real>
void group_norm_forward(int channels, int spatial, int groups, std::span<const Real> x,
                        std::span<const Real> gamma, std::span<const Real> beta, Real eps, std::span<Real> y,
                        std::span<Real> mean, std::span<Real> rstd) {
    const int cpg = channels / groups;
    const double count = static_cast<double>(cpg) * spatial;
    for (int g = 0; g < groups; ++g) {
        double sum = 0;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c)
            for (int i = 0; i < spatial; ++i) sum += x[c * spatial + i];
        const double mu = sum / count;
        double var = 0;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c)
            for (int i = 0; i < spatial; ++i) {
                const double d = x[c * spatial + i] - mu;
                var += d * d;
            }
        var /= count;
        mean[g] = static_cast<Real>(mu);
        rstd[g] = static_cast<Real>(1.0 / std::sqrt(var + eps));
        for (int c = g * cpg; c < (g + 1) * cpg; ++c)
            for (int i = 0; i < spatial; ++i)
                y[c * spatial + i] = (x[c * spatial + i] - mean[g]) * rstd[g] * gamma[c] + beta[c];
    }
}

template <typename Real>
void group_norm_backward(int channels, int spatial, int groups, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean, std::span<const Real> rstd,
                         std::span<const Real> grad_y, std::span<Real> grad_x, std::span<Real> grad_gamma,
                         std::span<Real> grad_beta) {
    const int cpg = channels / groups;
    const double count = static_cast<double>(cpg) * spatial;
    for (int g = 0; g < groups; ++g) {
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c)
            for (int i = 0; i < spatial; ++i) {
                const std::size_t idx = static_cast<std::size_t>(c) * spatial + i;
                const double xhat = (x[idx] - mean[g]) * rstd[g];
                const double dxhat = grad_y[idx] * gamma[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                grad_gamma[c] += static_cast<Real>(grad_y[idx] * xhat);
                grad_beta[c] += grad_y[idx];
            }
        for (int c = g * cpg; c < (g + 1) * cpg; ++c)
            for (int i = 0; i < spatial; ++i) {
                const std::size_t idx = static_cast<std::size_t>(c) * spatial + i;
                const double xhat = (x[idx] - mean[g]) * rstd[g];
                const double dxhat = grad_y[idx] * gamma[c];
                grad_x[idx] += static_cast<Real>(rstd[g] * (dxhat - sum_dxhat / count - xhat * sum_dxhat_xhat / count));
            }
    }
}

template <typename Real>
void layer_norm_forward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, Real eps, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd) {
    for (int t = 0; t < tokens; ++t) {
        double mu = 0;
        for (int c = 0; c < channels; ++c) mu += x[c * tokens + t];
        mu /= channels;
        double var = 0;
        for (int c = 0; c < channels; ++c) {
            const double d = x[c * tokens + t] - mu;
            var += d * d;
        }
        var /= channels;
        mean[t] = static_cast<Real>(mu);
        rstd[t] = static_cast<Real>(1.0 / std::sqrt(var + eps));
        for (int c = 0; c < channels; ++c)
            y[c * tokens + t] = (x[c * tokens + t] - mean[t]) * rstd[t] * gamma[c] + beta[c];
    }
}

template <typename Real>
void layer_norm_backward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                         std::span<const Real> mean, std::span<const Real> rstd, std::span<const Real> grad_y,
                         std::span<Real> grad_x, std::span<Real> grad_gamma, std::span<Real> grad_beta) {
    for (int t = 0; t < tokens; ++t) {
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int c = 0; c < channels; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * tokens + t;
            const double xhat = (x[idx] - mean[t]) * rstd[t];
            const double dxhat = grad_y[idx] * gamma[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            grad_gamma[c] += static_cast<Real>(grad_y[idx] * xhat);
            grad_beta[c] += grad_y[idx];
        }
        for (int c = 0; c < channels; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * tokens + t;
            const double xhat = (x[idx] - mean[t]) * rstd[t];
            const double dxhat = grad_y[idx] * gamma[c];
            grad_x[idx] += static_cast<Real>(rstd[t] * (dxhat - sum_dxhat / channels - xhat * sum_dxhat_xhat / channels));
        }
    }
}

template <typename Real>
void softmax_rows(int rows, int cols, std::span<Real> x) {
    for (int r = 0; r < rows; ++r) {
        Real* row = x.data() + static_cast<std::size_t>(r) * cols;
        const Real mx = *std::max_element(row, row + cols);
        double sum = 0;
        for (int j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < cols; ++j) row[j] = static_cast<Real>(row[j] / sum);
    }
}

template <typename Real>
void softmax_rows_backward(int rows, int cols, std::span<const Real> p, std::span<Real> grad) {
    for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * cols;
        double dot = 0;
        for (int j = 0; j < cols; ++j) dot += grad[off + j] * p[off + j];
        for (int j = 0; j < cols; ++j) grad[off + j] = static_cast<Real>(p[off + j] * (grad[off + j] - dot));
    }
}

#define CFD_INSTANTIATE_REF(R)                                                                                     \
    template void conv2d_forward<R>(const ConvShape&, std::span<const R>, std::span<const R>, std::span<const R>, \
                                    std::span<R>);                                                             \
    template void conv2d_backward<R>(const ConvShape&, std::span<const R>, std::span<const R>,                 \
                                     std::span<const R>, std::span<R>, std::span<R>, std::span<R>);            \
    template void gemm<R>(bool, bool, int, int, int, std::span<const R>, std::span<const R>, R, std::span<R>); \
    template void group_norm_forward<R>(int, int, int, std::span<const R>, std::span<const R>,                \
                                        std::span<const R>, R, std::span<R>, std::span<R>, std::span<R>);      \
    template void group_norm_backward<R>(int, int, int, std::span<const R>, std::span<const R>,               \
                                         std::span<const R>, std::span<const R>, std::span<const R>,           \
                                         std::span<R>, std::span<R>, std::span<R>);                            \
    template void layer_norm_forward<R>(int, int, std::span<const R>, std::span<const R>, std::span<const R>, \
                                        R, std::span<R>, std::span<R>, std::span<R>);                          \
    template void layer_norm_backward<R>(int, int, std::span<const R>, std::span<const R>,                    \
                                         std::span<const R>, std::span<const R>, std::span<const R>,           \
                                         std::span<R>, std::span<R>, std::span<R>);                            \
    template void softmax_rows<R>(int, int, std::span<R>);                                                     \
    template void softmax_rows_backward<R>(int, int, std::span<const R>, std::span<R>);

CFD_INSTANTIATE_REF(float)
CFD_INSTANTIATE_REF(double)

}  // namespace cfd::kernels::reference
