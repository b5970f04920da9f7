// Parallel kernels against their serial references, plus a full denoiser step.
#include <benchmark/benchmark.h>

#include <vector>

#include "cfd/common.hpp"
#include "cfd/denoiser.hpp"
#include "cfd/kernels.hpp"

namespace {

namespace k = cfd::kernels;

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    cfd::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

k::ConvShape conv_shape(const benchmark::State& st) {
    return {static_cast<int>(st.range(0)), static_cast<int>(st.range(0)), static_cast<int>(st.range(1)),
            static_cast<int>(st.range(1)), 3, 1, 1};
}

template <bool Reference>
void BM_ConvForward(benchmark::State& st) {
    const auto s = conv_shape(st);
    const auto in = random_vec(s.in_size(), 1), w = random_vec(s.weight_size(), 2), b = random_vec(s.out_channels, 3);
    std::vector<float> out(s.out_size());
    for (auto _ : st) {
        if constexpr (Reference)
            k::reference::conv2d_forward<float>(s, in, w, b, out);
        else
            k::conv2d_forward<float>(s, in, w, b, out);
        benchmark::DoNotOptimize(out.data());
    }
    st.counters["MAC/s"] = benchmark::Counter(static_cast<double>(s.out_size()) * s.in_channels * 9,
                                              benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Reference>
void BM_ConvBackward(benchmark::State& st) {
    const auto s = conv_shape(st);
    const auto in = random_vec(s.in_size(), 1), w = random_vec(s.weight_size(), 2), gy = random_vec(s.out_size(), 3);
    std::vector<float> gi(s.in_size()), gw(s.weight_size()), gb(s.out_channels);
    for (auto _ : st) {
        if constexpr (Reference)
            k::reference::conv2d_backward<float>(s, in, w, gy, gi, gw, gb);
        else
            k::conv2d_backward<float>(s, in, w, gy, gi, gw, gb);
        benchmark::DoNotOptimize(gw.data());
    }
    st.counters["MAC/s"] = benchmark::Counter(2.0 * static_cast<double>(s.out_size()) * s.in_channels * 9,
                                              benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Reference>
void BM_Gemm(benchmark::State& st) {
    const int n = static_cast<int>(st.range(0));
    const auto a = random_vec(static_cast<std::size_t>(n) * n, 1), b = random_vec(static_cast<std::size_t>(n) * n, 2);
    std::vector<float> c(static_cast<std::size_t>(n) * n);
    for (auto _ : st) {
        if constexpr (Reference)
            k::reference::gemm<float>(true, false, n, n, n, a, b, 0.0f, c);
        else
            k::gemm<float>(true, false, n, n, n, a, b, 0.0f, c);
        benchmark::DoNotOptimize(c.data());
    }
}

template <bool Reference>
void BM_GroupNorm(benchmark::State& st) {
    const int ch = static_cast<int>(st.range(0)), hw = static_cast<int>(st.range(1) * st.range(1));
    const auto x = random_vec(static_cast<std::size_t>(ch) * hw, 1);
    std::vector<float> gamma(ch, 1.0f), beta(ch, 0.0f), y(x.size()), mean(ch / 8), rstd(ch / 8);
    for (auto _ : st) {
        if constexpr (Reference)
            k::reference::group_norm_forward<float>(ch, hw, ch / 8, x, gamma, beta, 1e-5f, y, mean, rstd);
        else
            k::group_norm_forward<float>(ch, hw, ch / 8, x, gamma, beta, 1e-5f, y, mean, rstd);
        benchmark::DoNotOptimize(y.data());
    }
}

void BM_DenoiserTrainStep(benchmark::State& st) {
    cfd::DenoiserConfig cfg;
    cfg.channels = static_cast<int>(st.range(0));
    cfg.embed_dim = cfg.channels;
    cfg.head_channels = 16;
    cfg.height = cfg.width = static_cast<int>(st.range(1));
    cfd::Denoiser<float> net(cfg);
    const auto p = net.initialize(1);
    const auto x = random_vec(static_cast<std::size_t>(cfg.height) * cfg.width, 2);
    const auto eps = random_vec(x.size(), 3);
    std::vector<float> g(p.size());
    for (auto _ : st) benchmark::DoNotOptimize(net.loss_and_gradient(p, x, cfd::ClassLabel::Healthy, 500, eps, 1.0f, g));
}

void conv_args(benchmark::internal::Benchmark* b) {
    b->Args({16, 32})->Args({16, 64})->Args({64, 64});
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Apply(conv_args)->Name("conv_forward/parallel");
BENCHMARK(BM_ConvForward<true>)->Apply(conv_args)->Name("conv_forward/reference");
BENCHMARK(BM_ConvBackward<false>)->Apply(conv_args)->Name("conv_backward/parallel");
BENCHMARK(BM_ConvBackward<true>)->Apply(conv_args)->Name("conv_backward/reference");
BENCHMARK(BM_Gemm<false>)->Arg(64)->Arg(256)->Name("gemm_tn/parallel");
BENCHMARK(BM_Gemm<true>)->Arg(64)->Arg(256)->Name("gemm_tn/reference");
BENCHMARK(BM_GroupNorm<false>)->Args({64, 64})->Name("group_norm/parallel");
BENCHMARK(BM_GroupNorm<true>)->Args({64, 64})->Name("group_norm/reference");
BENCHMARK(BM_DenoiserTrainStep)->Args({16, 32})->Args({32, 32})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
