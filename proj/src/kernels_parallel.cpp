#include "cfd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cfd::kernels {

namespace {

// Output rows [y0, y1) for which input row oy*stride + ky - pad is in range.
inline void valid_range(int in_len, int out_len, int stride, int pad, int k, int& lo, int& hi) {
    // need 0 <= o*stride + k - pad < in_len
    lo = 0;
    while (lo < out_len && lo * stride + k - pad < 0) ++lo;
    hi = out_len;
    while (hi > lo && (hi - 1) * stride + k - pad >= in_len) --hi;
}

}  // namespace

template <typename Real>
void conv2d_forward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> out) {
    const int ho = s.out_height(), wo = s.out_width(), k = s.kernel;
    const int h = s.height, w = s.width, st = s.stride;
    const std::size_t plane_out = static_cast<std::size_t>(ho) * wo;
    const std::size_t plane_in = static_cast<std::size_t>(h) * w;

#pragma omp parallel for schedule(static)
    for (int co = 0; co < s.out_channels; ++co) {
        Real* o = out.data() + co * plane_out;
        const Real b0 = bias.empty() ? Real(0) : bias[co];
        std::fill(o, o + plane_out, b0);
        for (int ci = 0; ci < s.in_channels; ++ci) {
            const Real* src = in.data() + ci * plane_in;
            const Real* wk = weight.data() + (static_cast<std::size_t>(co) * s.in_channels + ci) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                int y0, y1;
                valid_range(h, ho, st, s.pad, ky, y0, y1);
                for (int kx = 0; kx < k; ++kx) {
                    int x0, x1;
                    valid_range(w, wo, st, s.pad, kx, x0, x1);
                    const Real wv = wk[ky * k + kx];
                    for (int oy = y0; oy < y1; ++oy) {
                        Real* orow = o + static_cast<std::size_t>(oy) * wo;
                        const Real* irow = src + static_cast<std::size_t>(oy * st + ky - s.pad) * w + (kx - s.pad);
                        if (st == 1) {
#pragma omp simd
                            for (int ox = x0; ox < x1; ++ox) orow[ox] += wv * irow[ox];
                        } else {
                            for (int ox = x0; ox < x1; ++ox) orow[ox] += wv * irow[ox * st];
                        }
                    }
                }
            }
        }
    }
}

template <typename Real>
void conv2d_backward(const ConvShape& s, std::span<const Real> in, std::span<const Real> weight,
                     std::span<const Real> grad_out, std::span<Real> grad_in, std::span<Real> grad_weight,
                     std::span<Real> grad_bias) {
    const int ho = s.out_height(), wo = s.out_width(), k = s.kernel;
    const int h = s.height, w = s.width, st = s.stride;
    const std::size_t plane_out = static_cast<std::size_t>(ho) * wo;
    const std::size_t plane_in = static_cast<std::size_t>(h) * w;

    // im2col of the input: row (ci, ky, kx) holds the input sample seen by every output position
    const int kk = k * k;
    const std::size_t rows = static_cast<std::size_t>(s.in_channels) * kk;
    std::vector<Real> col(rows * plane_out, Real(0));
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < s.in_channels; ++ci) {
        const Real* src = in.data() + ci * plane_in;
        for (int ky = 0; ky < k; ++ky) {
            int y0, y1;
            valid_range(h, ho, st, s.pad, ky, y0, y1);
            for (int kx = 0; kx < k; ++kx) {
                int x0, x1;
                valid_range(w, wo, st, s.pad, kx, x0, x1);
                Real* crow = col.data() + (static_cast<std::size_t>(ci) * kk + ky * k + kx) * plane_out;
                for (int oy = y0; oy < y1; ++oy) {
                    const Real* irow = src + static_cast<std::size_t>(oy * st + ky - s.pad) * w + (kx - s.pad);
                    Real* cr = crow + static_cast<std::size_t>(oy) * wo;
                    for (int ox = x0; ox < x1; ++ox) cr[ox] = irow[ox * st];
                }
            }
        }
    }

    // weight and bias gradients: one thread per output channel
#pragma omp parallel for schedule(static)
    for (int co = 0; co < s.out_channels; ++co) {
        const Real* g = grad_out.data() + co * plane_out;
        if (!grad_bias.empty()) {
            Real acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < plane_out; ++i) acc += g[i];
            grad_bias[co] += acc;
        }
        Real* gw = grad_weight.data() + static_cast<std::size_t>(co) * rows;
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* cr = col.data() + r * plane_out;
            Real acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < plane_out; ++i) acc += g[i] * cr[i];
            gw[r] += acc;
        }
    }

    if (grad_in.empty()) return;

    // input gradient: one thread per input channel
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < s.in_channels; ++ci) {
        Real* gi = grad_in.data() + ci * plane_in;
        for (int co = 0; co < s.out_channels; ++co) {
            const Real* g = grad_out.data() + co * plane_out;
            const Real* wk = weight.data() + (static_cast<std::size_t>(co) * s.in_channels + ci) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                int y0, y1;
                valid_range(h, ho, st, s.pad, ky, y0, y1);
                for (int kx = 0; kx < k; ++kx) {
                    int x0, x1;
                    valid_range(w, wo, st, s.pad, kx, x0, x1);
                    const Real wv = wk[ky * k + kx];
                    for (int oy = y0; oy < y1; ++oy) {
                        const Real* grow = g + static_cast<std::size_t>(oy) * wo;
                        Real* irow = gi + static_cast<std::size_t>(oy * st + ky - s.pad) * w + (kx - s.pad);
                        if (st == 1) {
#pragma omp simd
                            for (int ox = x0; ox < x1; ++ox) irow[ox] += wv * grow[ox];
                        } else {
                            for (int ox = x0; ox < x1; ++ox) irow[ox * st] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, std::span<const Real> a, std::span<const Real> b,
          Real beta, std::span<Real> c) {
    if (!trans_b) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i) {
            Real* crow = c.data() + static_cast<std::size_t>(i) * n;
            if (beta == Real(0))
                std::fill(crow, crow + n, Real(0));
            else if (beta != Real(1))
                for (int j = 0; j < n; ++j) crow[j] *= beta;
            for (int p = 0; p < k; ++p) {
                const Real av = trans_a ? a[static_cast<std::size_t>(p) * m + i] : a[static_cast<std::size_t>(i) * k + p];
                const Real* brow = b.data() + static_cast<std::size_t>(p) * n;
#pragma omp simd
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    // op(B) = B^T: each C entry is a dot product of rows of A and B.
    std::vector<Real> at;
    const Real* arows = a.data();
    if (trans_a) {
        at.resize(static_cast<std::size_t>(m) * k);
        for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) at[static_cast<std::size_t>(i) * k + p] = a[static_cast<std::size_t>(p) * m + i];
        arows = at.data();
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const Real* arow = arows + static_cast<std::size_t>(i) * k;
        Real* crow = c.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const Real* brow = b.data() + static_cast<std::size_t>(j) * k;
            Real acc = 0;
#pragma omp simd reduction(+ : acc)
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = (beta == Real(0) ? Real(0) : beta * crow[j]) + acc;
        }
    }
}

template <typename Real>
void group_norm_forward(int channels, int spatial, int groups, std::span<const Real> x,
                        std::span<const Real> gamma, std::span<const Real> beta, Real eps, std::span<Real> y,
                        std::span<Real> mean, std::span<Real> rstd) {
    const int cpg = channels / groups;
    const double count = static_cast<double>(cpg) * spatial;
#pragma omp parallel for schedule(static)
    for (int g = 0; g < groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * cpg * spatial;
        const std::size_t len = static_cast<std::size_t>(cpg) * spatial;
        double sum = 0;
        for (std::size_t i = 0; i < len; ++i) sum += x[base + i];
        const double mu = sum / count;
        double var = 0;
        for (std::size_t i = 0; i < len; ++i) {
            const double d = x[base + i] - mu;
            var += d * d;
        }
        var /= count;
        const Real m = static_cast<Real>(mu);
        const Real r = static_cast<Real>(1.0 / std::sqrt(var + eps));
        mean[g] = m;
        rstd[g] = r;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
            const Real scale = r * gamma[c];
            const Real shift = beta[c] - m * scale;
            const Real* xs = x.data() + static_cast<std::size_t>(c) * spatial;
            Real* ys = y.data() + static_cast<std::size_t>(c) * spatial;
#pragma omp simd
            for (int i = 0; i < spatial; ++i) ys[i] = xs[i] * scale + shift;
        }
    }
}

template <typename Real>
void group_norm_backward(int channels, int spatial, int groups, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean, std::span<const Real> rstd,
                         std::span<const Real> grad_y, std::span<Real> grad_x, std::span<Real> grad_gamma,
                         std::span<Real> grad_beta) {
    const int cpg = channels / groups;
    const double count = static_cast<double>(cpg) * spatial;
#pragma omp parallel for schedule(static)
    for (int g = 0; g < groups; ++g) {
        const double m = mean[g], r = rstd[g];
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
            const Real* xs = x.data() + static_cast<std::size_t>(c) * spatial;
            const Real* gy = grad_y.data() + static_cast<std::size_t>(c) * spatial;
            double sg = 0, sgx = 0;
            for (int i = 0; i < spatial; ++i) {
                sg += gy[i];
                sgx += gy[i] * (xs[i] - m);
            }
            grad_gamma[c] += static_cast<Real>(sgx * r);
            grad_beta[c] += static_cast<Real>(sg);
            sum_dxhat += sg * gamma[c];
            sum_dxhat_xhat += sgx * r * gamma[c];
        }
        const double a = sum_dxhat / count;
        const double b = sum_dxhat_xhat / count;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
            const Real* xs = x.data() + static_cast<std::size_t>(c) * spatial;
            const Real* gy = grad_y.data() + static_cast<std::size_t>(c) * spatial;
            Real* gx = grad_x.data() + static_cast<std::size_t>(c) * spatial;
            const Real cg = static_cast<Real>(r * gamma[c]);
            const Real ca = static_cast<Real>(r * a);
            const Real cb = static_cast<Real>(r * r * b);
            const Real mm = static_cast<Real>(m);
#pragma omp simd
            for (int i = 0; i < spatial; ++i) gx[i] += cg * gy[i] - ca - cb * (xs[i] - mm);
        }
    }
}

template <typename Real>
void layer_norm_forward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, Real eps, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd) {
    // channel-major: accumulate per-token statistics across channel rows
    std::vector<double> mu(tokens, 0.0), var(tokens, 0.0);
    for (int c = 0; c < channels; ++c) {
        const Real* xs = x.data() + static_cast<std::size_t>(c) * tokens;
        for (int t = 0; t < tokens; ++t) mu[t] += xs[t];
    }
    for (int t = 0; t < tokens; ++t) mu[t] /= channels;
    for (int c = 0; c < channels; ++c) {
        const Real* xs = x.data() + static_cast<std::size_t>(c) * tokens;
        for (int t = 0; t < tokens; ++t) {
            const double d = xs[t] - mu[t];
            var[t] += d * d;
        }
    }
    for (int t = 0; t < tokens; ++t) {
        mean[t] = static_cast<Real>(mu[t]);
        rstd[t] = static_cast<Real>(1.0 / std::sqrt(var[t] / channels + eps));
    }
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const Real* xs = x.data() + static_cast<std::size_t>(c) * tokens;
        Real* ys = y.data() + static_cast<std::size_t>(c) * tokens;
        const Real gm = gamma[c], bt = beta[c];
#pragma omp simd
        for (int t = 0; t < tokens; ++t) ys[t] = (xs[t] - mean[t]) * rstd[t] * gm + bt;
    }
}

template <typename Real>
void layer_norm_backward(int channels, int tokens, std::span<const Real> x, std::span<const Real> gamma,
                         std::span<const Real> mean, std::span<const Real> rstd, std::span<const Real> grad_y,
                         std::span<Real> grad_x, std::span<Real> grad_gamma, std::span<Real> grad_beta) {
    std::vector<double> s1(tokens, 0.0), s2(tokens, 0.0);
    for (int c = 0; c < channels; ++c) {
        const Real* xs = x.data() + static_cast<std::size_t>(c) * tokens;
        const Real* gy = grad_y.data() + static_cast<std::size_t>(c) * tokens;
        double gg = 0, gb = 0;
        for (int t = 0; t < tokens; ++t) {
            const double xhat = (xs[t] - mean[t]) * rstd[t];
            const double dxhat = gy[t] * gamma[c];
            s1[t] += dxhat;
            s2[t] += dxhat * xhat;
            gg += gy[t] * xhat;
            gb += gy[t];
        }
        grad_gamma[c] += static_cast<Real>(gg);
        grad_beta[c] += static_cast<Real>(gb);
    }
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const Real* xs = x.data() + static_cast<std::size_t>(c) * tokens;
        const Real* gy = grad_y.data() + static_cast<std::size_t>(c) * tokens;
        Real* gx = grad_x.data() + static_cast<std::size_t>(c) * tokens;
        for (int t = 0; t < tokens; ++t) {
            const double xhat = (xs[t] - mean[t]) * rstd[t];
            const double dxhat = gy[t] * gamma[c];
            gx[t] += static_cast<Real>(rstd[t] * (dxhat - s1[t] / channels - xhat * s2[t] / channels));
        }
    }
}

template <typename Real>
void softmax_rows(int rows, int cols, std::span<Real> x) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        Real* row = x.data() + static_cast<std::size_t>(r) * cols;
        const Real mx = *std::max_element(row, row + cols);
        Real sum = 0;
        for (int j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const Real inv = Real(1) / sum;
#pragma omp simd
        for (int j = 0; j < cols; ++j) row[j] *= inv;
    }
}

template <typename Real>
void softmax_rows_backward(int rows, int cols, std::span<const Real> p, std::span<Real> grad) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* pr = p.data() + static_cast<std::size_t>(r) * cols;
        Real* gr = grad.data() + static_cast<std::size_t>(r) * cols;
        Real dot = 0;
#pragma omp simd reduction(+ : dot)
        for (int j = 0; j < cols; ++j) dot += gr[j] * pr[j];
#pragma omp simd
        for (int j = 0; j < cols; ++j) gr[j] = pr[j] * (gr[j] - dot);
    }
}

#define CFD_INSTANTIATE_PAR(R)                                                                                 \
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

CFD_INSTANTIATE_PAR(float)
CFD_INSTANTIATE_PAR(double)

}  // namespace cfd::kernels
