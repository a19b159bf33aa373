#include <benchmark/benchmark.h>

#include "asymtok/engine.hpp"
#include "asymtok/model.hpp"
#include "asymtok/scorer.hpp"
#include "asymtok/synth.hpp"

namespace {

using namespace asymtok;

ToyVLM& bench_model() {
    static ToyVLM model = init_model(ModelConfig{});
    return model;
}

TokenSequence bench_sample(size_t vision_tokens) {
    SyntheticTaskSpec spec;
    spec.vision_tokens = vision_tokens;
    spec.hidden_dim = static_cast<size_t>(bench_model().config.hidden_dim);
    return generate_sample(bench_model(), spec, 17);
}

void BM_Prefill(benchmark::State& state) {
    const ToyVLM& model = bench_model();
    const TokenSequence seq = bench_sample(static_cast<size_t>(state.range(0)));
    const MaskAddends mask = MaskAddends::none(seq.size());
    for (auto _ : state) {
        auto trace = forward_prefill_trace(model, seq, mask);
        benchmark::DoNotOptimize(trace.final_hidden.data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(seq.size()));
}
BENCHMARK(BM_Prefill)->Arg(16)->Arg(32)->Arg(64);

void BM_DecodeStep(benchmark::State& state) {
    const ToyVLM& model = bench_model();
    const TokenSequence seq = bench_sample(32);
    auto [trace, cache] = forward_prefill(model, seq, MaskAddends::none(seq.size()));
    for (auto _ : state) {
        state.PauseTiming();
        KVCache working = cache;
        state.ResumeTiming();
        const Token tok = Token::text(1, working.next_position(), Phase::Generated, 0);
        auto step = forward_decode_step(model, tok, working);
        benchmark::DoNotOptimize(step.logits.data());
    }
}
BENCHMARK(BM_DecodeStep);

void BM_ScoreTokens(benchmark::State& state) {
    const ToyVLM& model = bench_model();
    const TokenSequence seq = bench_sample(static_cast<size_t>(state.range(0)));
    const std::vector<double> w(static_cast<size_t>(model.config.hidden_dim), 1.0);
    for (auto _ : state) {
        auto scores = score_sequence(model, w, seq);
        benchmark::DoNotOptimize(scores.values.data());
    }
}
BENCHMARK(BM_ScoreTokens)->Arg(32)->Arg(256);

void BM_LossGradient(benchmark::State& state) {
    const ToyVLM& model = bench_model();
    const TokenSequence seq = bench_sample(16);
    const ScorerState scorer = ScorerState::init(static_cast<size_t>(model.config.hidden_dim));
    for (auto _ : state) {
        auto grad = loss_gradient(model, seq, scorer, 0.5);
        benchmark::DoNotOptimize(grad.data());
    }
}
BENCHMARK(BM_LossGradient);

}  // namespace

BENCHMARK_MAIN();
