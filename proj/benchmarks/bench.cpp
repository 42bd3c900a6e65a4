// Microbenchmarks for the kernels that dominate training time, plus the two
// composite steps (base head update, generator alignment update) at the
// default experiment scale. Run with --benchmark_min_time=... to tighten.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "niff/config.hpp"
#include "niff/losses.hpp"
#include "niff/models.hpp"
#include "niff/rng.hpp"
#include "niff/sgd.hpp"
#include "niff/stats.hpp"
#include "niff/synthetic.hpp"
#include "niff/tensor.hpp"

namespace {

using namespace niff;

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& x : v) x = rng.normal();
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

void bm_matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(1);
    const auto a = random_tensor(rng, {n, n});
    const auto b = random_tensor(rng, {n, n});
    for (auto _ : state) {
        auto c = matmul(a, b);
        benchmark::DoNotOptimize(c.data().data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);

// One trunk convolution at the default scale: 32 -> C channels over 5x5.
void bm_conv2d(benchmark::State& state) {
    const int out_c = static_cast<int>(state.range(0));
    Rng rng(2);
    const auto x = random_tensor(rng, {32, 32, 5, 5});
    const auto w = random_tensor(rng, {out_c, 32, 3, 3});
    const auto b = random_tensor(rng, {out_c});
    for (auto _ : state) {
        auto y = conv2d(x, w, b, 1);
        benchmark::DoNotOptimize(y.data().data());
    }
    state.SetItemsProcessed(state.iterations() * 32 * 5 * 5 * out_c * 32 * 9 * 2);
}
BENCHMARK(bm_conv2d)->Arg(32)->Arg(64);

struct HeadFixture {
    ExperimentConfig cfg = ExperimentConfig::desk_default();
    Rng rng{3};
    HeadModel head = build_head(cfg.head_config(), rng);
    LabeledBatch data = make_synthetic_data(cfg.task_spec(), Split::base, 32, 1);

    HeadFixture() { head.calibrate_norms(data.features); }
};

void bm_head_forward(benchmark::State& state) {
    HeadFixture f;
    for (auto _ : state) {
        auto out = f.head.forward(f.data.features);
        benchmark::DoNotOptimize(out.logits.data().data());
    }
    state.SetItemsProcessed(state.iterations() * f.data.size());
}
BENCHMARK(bm_head_forward);

// Forward, classification loss, backward, and optimizer step on one batch.
void bm_head_train_step(benchmark::State& state) {
    HeadFixture f;
    SgdOptimizer opt(f.cfg.base.opt);
    opt.add_parameters(f.head.parameters());
    for (auto _ : state) {
        opt.zero_grad();
        auto out = f.head.forward(f.data.features);
        auto loss = cross_entropy(out.logits, f.data.labels);
        backward(loss);
        opt.step();
        benchmark::DoNotOptimize(loss.value());
    }
    state.SetItemsProcessed(state.iterations() * f.data.size());
}
BENCHMARK(bm_head_train_step);

// One full generator update at the default scale: forge features for every
// base class, align against recorded statistics, backpropagate, step.
void bm_generator_step(benchmark::State& state) {
    HeadFixture f;
    DataWatcher watcher(f.cfg.watcher, f.cfg.task.base_classes);
    f.head.forward(f.data.features, true, &watcher, f.data.labels);
    const auto stats = watcher.snapshot();
    auto gen = build_generator(f.cfg.generator_config(), f.rng);
    SgdOptimizer opt(f.cfg.generator.opt);
    opt.add_parameters(gen.parameters());
    const AlignmentScale scale{f.cfg.losses.lambda_kl, f.cfg.losses.eps, f.cfg.losses.include_post_softmax};
    const int per_class = f.cfg.generator.per_class(f.cfg.task.base_classes);
    for (auto _ : state) {
        opt.zero_grad();
        auto breakdown = generator_loss(stats, f.head, gen, per_class, scale, f.rng, true);
        opt.step();
        benchmark::DoNotOptimize(breakdown.total);
    }
    state.SetItemsProcessed(state.iterations() * per_class * f.cfg.task.base_classes);
}
BENCHMARK(bm_generator_step);

// Statistic accumulation for one rank-4 activation batch at a probe site.
void bm_stats_observe(benchmark::State& state) {
    Rng rng(4);
    const auto acts = random_tensor(rng, {32, 64, 5, 5});
    std::vector<int> labels(32);
    for (int i = 0; i < 32; ++i) labels[static_cast<std::size_t>(i)] = i % 8;
    WatcherConfig wc;
    for (auto _ : state) {
        DataWatcher watcher(wc, 8);
        watcher.observe("post_act_0", acts, labels);
        benchmark::DoNotOptimize(watcher.slot_count());
    }
    state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(bm_stats_observe);

void bm_merge_stats(benchmark::State& state) {
    Rng rng(5);
    ClassMoments a, b;
    std::vector<double> row(64);
    for (int i = 0; i < 4096; ++i) {
        for (double& v : row) v = rng.normal();
        (i % 2 ? a : b).observe(row);
    }
    for (auto _ : state) {
        auto merged = merge_stats(a, b);
        benchmark::DoNotOptimize(merged.count);
    }
}
BENCHMARK(bm_merge_stats);

}  // namespace

BENCHMARK_MAIN();
