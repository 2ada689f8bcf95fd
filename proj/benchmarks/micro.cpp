#include <benchmark/benchmark.h>

#include <numeric>

#include "s3/encoder.hpp"
#include "s3/moe.hpp"
#include "s3/ops.hpp"
#include "s3/pipeline.hpp"

namespace {

using namespace s3;

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    Tensor a = ops::randn({n, n}, rng), b = ops::randn({n, n}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

// Forward of one MoE layer over 64 tokens; range(0) is the granularity chi.
void BM_MoEForward(benchmark::State& state) {
    MoEConfig c;
    c.d_model = 32;
    c.d_ffn = 128;
    c.granularity = static_cast<std::size_t>(state.range(0));
    c.expansion = 8;
    c.top_k = c.granularity;
    Rng rng(2);
    MoELayer layer(c, rng);
    Tensor x = ops::randn({64, c.d_model}, rng);
    std::vector<std::size_t> offsets{0, 64};
    for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x, offsets, 0).y);
}
BENCHMARK(BM_MoEForward)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

void BM_EncoderEncode(benchmark::State& state) {
    const EncoderConfig c = RunConfig::desk_encoder();
    Rng rng(3);
    Encoder enc(c, 0, rng);
    std::vector<Tensor> samples;
    for (int i = 0; i < state.range(0); ++i) samples.push_back(ops::randn({8, c.d_in}, rng));
    for (auto _ : state) benchmark::DoNotOptimize(enc.encode(samples).z);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncoderEncode)->Arg(16)->Arg(64);

// Loss, backward and update of one specialization batch of 64.
void BM_SpecializationStep(benchmark::State& state) {
    RunConfig cfg;
    cfg.data.n_train = 64;
    cfg.data.n_test = 0;
    const auto [train, test] = make_splits(cfg);
    S3Model model(cfg.encoder, 0);
    std::vector<Tensor> params;
    for (auto& p : model.parameters()) params.push_back(p.tensor);
    MomentumSgd opt(params, cfg.specialization.learning_rate, cfg.specialization.momentum,
                    cfg.specialization.grad_clip);
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng noise(4);
    for (auto _ : state) {
        opt.zero_grad();
        LossBreakdown loss = specialization_loss(model, train, idx, cfg.specialization, noise);
        loss.total.backward();
        benchmark::DoNotOptimize(opt.step());
    }
}
BENCHMARK(BM_SpecializationStep)->Unit(benchmark::kMillisecond);

void BM_BuildPruneMask(benchmark::State& state) {
    RunConfig cfg;
    cfg.data.n_train = 256;
    cfg.data.n_test = 0;
    const auto [train, test] = make_splits(cfg);
    S3Model model(cfg.encoder, 0);
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto pairs = routed_pairs(encode_batch(model, train, idx));
    for (auto _ : state)
        benchmark::DoNotOptimize(build_prune_mask(pairs, 0.5, PruneScope::kPerLayer, cfg.encoder.n_layers));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(pairs.size()));
}
BENCHMARK(BM_BuildPruneMask);

}  // namespace
BENCHMARK_MAIN();
