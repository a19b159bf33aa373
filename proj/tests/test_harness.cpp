#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "asymtok/harness.hpp"
#include "test_util.hpp"

using namespace asymtok;
using testutil::random_seq;
using testutil::small_config;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generate_sample is deterministic and shaped as requested") {
    const ToyVLM model = init_model(small_config(2, 2, 32, 64, 3));
    SyntheticTaskSpec spec;
    spec.vision_tokens = 12;
    spec.text_tokens = 5;
    spec.hidden_dim = 32;
    const TokenSequence a = generate_sample(model, spec, 91);
    const TokenSequence b = generate_sample(model, spec, 91);
    REQUIRE(a.size() == 17);
    CHECK(a.vision_count() == 12);
    CHECK(a.text_count() == 5);
    a.validate();
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.entries[i].modality == b.entries[i].modality);
        CHECK(a.entries[i].token_id == b.entries[i].token_id);
        CHECK(a.entries[i].embedding == b.entries[i].embedding);
    }
    const TokenSequence c = generate_sample(model, spec, 92);
    bool any_diff = false;
    for (size_t i = 0; i < c.size() && !any_diff; ++i)
        any_diff = c.entries[i].token_id != a.entries[i].token_id ||
                   c.entries[i].embedding != a.entries[i].embedding;
    CHECK(any_diff);
}

TEST_CASE("fully-relevant saturated samples collapse the gap") {
    // relevance 1 with overwhelming alignment to a single text direction:
    // every vision token scores the same saturated value, so the gap vanishes.
    const ToyVLM model = init_model(ModelConfig{});
    SyntheticTaskSpec spec;
    spec.vision_tokens = 16;
    spec.text_tokens = 1;
    spec.relevance_fraction = 1.0;
    spec.alignment_strength = 100.0;
    const std::vector<double> ones(model.config.hidden_dim, 1.0);
    const TokenSequence seq = generate_sample(model, spec, 5);
    const ImportanceScores scores = score_sequence(model, ones, seq);
    for (double v : scores.values) CHECK(v > 0.6);
    CHECK(importance_gap(scores) < 0.01);
}

TEST_CASE("strong alignment produces larger gaps than an isotropic corpus") {
    const ToyVLM model = init_model(small_config(2, 2, 32, 64, 3));
    SyntheticTaskSpec aligned;
    aligned.vision_tokens = 16;
    aligned.text_tokens = 4;
    aligned.hidden_dim = 32;
    aligned.relevance_fraction = 0.25;
    aligned.alignment_strength = 2.0;
    SyntheticTaskSpec weak = aligned;
    weak.alignment_strength = 0.0;

    const std::vector<double> ones(32, 1.0);
    double aligned_gap = 0.0, weak_gap = 0.0;
    for (uint64_t s = 0; s < 40; ++s) {
        aligned_gap += importance_gap(score_sequence(model, ones, generate_sample(model, aligned, s)));
        weak_gap += importance_gap(score_sequence(model, ones, generate_sample(model, weak, s)));
    }
    CHECK(aligned_gap / 40.0 > weak_gap / 40.0);
}

TEST_CASE("loo_oracle: duplicates score near zero, masked-in-baseline scores zero") {
    const ToyVLM model = init_model(small_config(2, 2, 16, 32, 7));
    const size_t d = model.config.hidden_dim;

    // Two identical vision tokens plus two distinct ones.
    Rng rng(15);
    auto draw = [&] {
        std::vector<float> v(d);
        for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 0.25));
        return v;
    };
    const std::vector<float> twin = draw();
    TokenSequence seq;
    seq.entries.push_back(Token::vision(twin, 0));
    seq.entries.push_back(Token::vision(twin, 1));
    seq.entries.push_back(Token::vision(draw(), 2));
    seq.entries.push_back(Token::vision(draw(), 3));
    seq.entries.push_back(Token::text(4, 4));
    seq.entries.push_back(Token::text(9, 5));

    const std::vector<double> loo = loo_oracle(model, seq);
    REQUIRE(loo.size() == 4);
    // Masking one twin leaves its copy in place; unique tokens matter more.
    CHECK(loo[0] < loo[2]);
    CHECK(loo[0] < loo[3]);
    CHECK(loo[1] < loo[2]);
    CHECK(loo[1] < loo[3]);

    SUBCASE("a token already masked in the baseline has zero importance") {
        const MaskAddends base = MaskAddends::hard_mask(seq, {2});
        const std::vector<double> with_base = loo_oracle(model, seq, &base);
        CHECK(with_base[2] == doctest::Approx(0.0));
    }

    SUBCASE("oracle is permutation-equivariant up to position effects") {
        // Causal ordering and absolute position embeddings leave a small
        // slot dependence, so the swapped importances match approximately,
        // and the ranking (twins below unique tokens) must be preserved.
        TokenSequence swapped = seq;
        std::swap(swapped.entries[2].embedding, swapped.entries[3].embedding);
        const std::vector<double> after = loo_oracle(model, swapped);
        CHECK(after[2] == doctest::Approx(loo[3]).epsilon(0.25));
        CHECK(after[3] == doctest::Approx(loo[2]).epsilon(0.25));
        CHECK(after[0] < after[2]);
        CHECK(after[1] < after[3]);
    }
}

TEST_CASE("spearman handles ties and perfect orderings") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {40, 30, 20, 10}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3, 4}, {7, 7, 7, 7}) == doctest::Approx(0.0));
    // monotone transform leaves the statistic unchanged
    CHECK(spearman({0.1, 0.5, 0.2, 0.9}, {1.0, 25.0, 4.0, 81.0}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(spearman({1.0}, {1.0, 2.0}), InputError);
    // self-correlation of any vector is 1
    const std::vector<double> v = {0.3, -0.2, 0.8, 0.1, 0.4};
    CHECK(spearman(v, v) == doctest::Approx(1.0));
}

TEST_CASE("edit distance matches hand-worked cases") {
    CHECK(edit_distance({}, {}) == 0);
    CHECK(edit_distance({1, 2, 3}, {1, 2, 3}) == 0);
    CHECK(edit_distance({1, 2, 3}, {1, 3}) == 1);
    CHECK(edit_distance({1, 2, 3}, {4, 5, 6}) == 3);
    CHECK(edit_distance({1, 2, 3, 4}, {2, 3, 4, 5}) == 2);
    CHECK(edit_distance({}, {9, 9}) == 2);
}

TEST_CASE("default corpus mean gap sits in the tuned band") {
    const ToyVLM model = init_model(ModelConfig{});
    CorpusSpec spec;
    spec.samples = 100;
    const auto corpus = generate_corpus(model, spec, 2718);
    const std::vector<double> ones(model.config.hidden_dim, 1.0);
    std::vector<ImportanceScores> scores;
    for (const auto& seq : corpus) scores.push_back(score_sequence(model, ones, seq));
    const GapStats stats = gap_stats(scores);
    CHECK(stats.mean > 0.15);
    CHECK(stats.mean < 0.30);
}

TEST_CASE("gap_stats histogram sums to the corpus size") {
    std::vector<ImportanceScores> scores;
    Rng rng(77);
    for (int s = 0; s < 50; ++s) {
        ImportanceScores is;
        for (int i = 0; i < 16; ++i) is.values.push_back(rng.uniform(-0.5, 0.9));
        scores.push_back(is);
    }
    const GapStats stats = gap_stats(scores);
    size_t total = 0;
    for (uint64_t b : stats.histogram) total += b;
    CHECK(total == 50);
    CHECK(stats.count == 50);
    CHECK(stats.stddev >= 0.0);

    SUBCASE("identical samples collapse the spread to zero") {
        std::vector<ImportanceScores> same(8, scores[0]);
        const GapStats flat = gap_stats(same);
        CHECK(flat.stddev == doctest::Approx(0.0));
        CHECK(flat.mean == doctest::Approx(importance_gap(scores[0])));
    }
}

TEST_CASE("report emission round-trips and is byte-stable") {
    std::vector<ReportRecord> records;
    for (int i = 0; i < 3; ++i) {
        ReportRecord r;
        r.eval = "prune";
        r.sample = static_cast<uint64_t>(i);
        r.method = i == 0 ? "learned" : (i == 1 ? "cosine" : "spiral");
        r.requested_ratio = 0.5;
        r.gap = 0.1 * i;
        r.applied_keep_ratio = 0.5;
        r.n_full = 40;
        r.n_kept = 24;
        r.vision_kept = 16;
        r.mse = 1e-4 * (i + 1);
        if (i != 1) r.spearman_loo = 0.75 + 0.05 * i;
        r.flops_full = 123456789ull;
        r.flops_pruned = 98765432ull;
        r.flops_saved = 0.2;
        r.flops_saved_vision_n = 0.25;
        r.kv_bytes_full = 4096;
        r.kv_bytes_pruned = 2048;
        r.peak_token_count = 24;
        records.push_back(r);
    }
    const auto dir = std::filesystem::temp_directory_path();
    const std::string base = (dir / "asymtok_report_test").string();
    const auto written = emit_report(records, base, "both");
    REQUIRE(written.size() == 2);

    const auto parsed = parse_report_json(base + ".json");
    REQUIRE(parsed.size() == records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        CHECK(parsed[i].method == records[i].method);
        CHECK(parsed[i].mse == records[i].mse);
        CHECK(parsed[i].flops_full == records[i].flops_full);
        CHECK(parsed[i].spearman_loo.has_value() == records[i].spearman_loo.has_value());
        if (parsed[i].spearman_loo)
            CHECK(*parsed[i].spearman_loo == *records[i].spearman_loo);
    }

    const std::string first_json = slurp(base + ".json");
    const std::string first_csv = slurp(base + ".csv");
    emit_report(records, base, "both");
    CHECK(slurp(base + ".json") == first_json);
    CHECK(slurp(base + ".csv") == first_csv);

    CHECK_THROWS_AS(emit_report({}, base, "json"), InputError);
    CHECK_THROWS_AS(emit_report(records, "/nonexistent-dir-zzz/x", "json"), IoError);
    std::filesystem::remove(base + ".json");
    std::filesystem::remove(base + ".csv");
}

TEST_CASE("experiment config parses overrides and rejects nonsense") {
    const std::string text = R"({
        "model": {"layers": 2, "heads": 2, "hidden_dim": 16, "ffn_dim": 32},
        "corpus": {"samples": 4, "vision_tokens": 8, "text_tokens": 3,
                    "grid_height": 2, "grid_width": 4},
        "scorer": {"methods": ["cosine"]},
        "keep_ratios": [0.5],
        "seed": 9
    })";
    const ExperimentConfig cfg = parse_experiment_config(text);
    CHECK(cfg.model.num_layers == 2);
    CHECK(cfg.corpus.samples == 4);
    CHECK(cfg.corpus.base.hidden_dim == 16);  // inherited from the model
    CHECK(cfg.seed == 9);

    CHECK_THROWS_AS(parse_experiment_config("{nope"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config(R"({"keep_ratios": [0.0]})"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config(R"({"format": "xml"})"), ConfigError);
    CHECK_THROWS_AS(
        parse_experiment_config(
            R"({"corpus": {"vision_tokens": 9, "grid_height": 2, "grid_width": 4}})"),
        ConfigError);
}

TEST_CASE("run_pruning_eval: ratio one is lossless and metrics are recomputable") {
    const ToyVLM model = init_model(small_config(2, 2, 16, 32, 5));
    ExperimentConfig cfg;
    cfg.model = model.config;
    cfg.corpus.samples = 3;
    cfg.corpus.base.vision_tokens = 8;
    cfg.corpus.base.text_tokens = 3;
    cfg.corpus.base.hidden_dim = 16;
    cfg.corpus.grid_height = 2;
    cfg.corpus.grid_width = 4;
    cfg.scorer_methods = {"cosine", "spiral"};
    cfg.keep_ratios = {1.0, 0.5};
    const auto records = run_pruning_eval(model, cfg);
    REQUIRE(records.size() == 3 * 2 * 2);

    const CostModel cost = CostModel::from_config(model.config);
    for (const auto& r : records) {
        if (r.requested_ratio == 1.0) CHECK(r.mse == doctest::Approx(0.0));
        // flops/kv columns recompute exactly from the token counts
        CHECK(r.flops_full == flops_total(r.n_full, cost));
        CHECK(r.flops_pruned == flops_total(r.n_kept, cost));
        CHECK(r.flops_saved == doctest::Approx(flops_saved(r.n_full, r.n_kept, cost)));
        CHECK(r.kv_bytes_pruned == kv_bytes(r.n_kept, cost));
        CHECK(r.spearman_loo.has_value());  // N is small enough for the oracle
    }

    SUBCASE("learned method without a scorer file is a config error") {
        ExperimentConfig bad = cfg;
        bad.scorer_methods = {"learned"};
        CHECK_THROWS_AS(run_pruning_eval(model, bad), ConfigError);
    }

    SUBCASE("parallel evaluation reproduces the serial records bit-for-bit") {
        ExperimentConfig par = cfg;
        par.jobs = 4;
        const auto parallel_records = run_pruning_eval(model, par);
        REQUIRE(parallel_records.size() == records.size());
        for (size_t i = 0; i < records.size(); ++i) {
            CHECK(parallel_records[i].mse == records[i].mse);
            CHECK(parallel_records[i].gap == records[i].gap);
            CHECK(parallel_records[i].method == records[i].method);
        }
    }
}

TEST_CASE("run_eviction_eval: slack budgets diverge nowhere") {
    const ToyVLM model = init_model(small_config(2, 2, 16, 32, 5));
    ExperimentConfig cfg;
    cfg.model = model.config;
    cfg.corpus.base.vision_tokens = 8;
    cfg.corpus.base.text_tokens = 3;
    cfg.corpus.base.hidden_dim = 16;
    cfg.corpus.grid_height = 2;
    cfg.corpus.grid_width = 4;
    cfg.eviction_samples = 2;
    cfg.decode_steps = 6;
    cfg.retentions = {1.0};
    const auto out = run_eviction_eval(model, cfg);
    REQUIRE(out.records.size() == 2 * 3);
    for (const auto& r : out.records) {
        CHECK(r.evictions == 0);
        CHECK(r.edit_distance_tokens == 0);
        CHECK(r.hidden_mse == doctest::Approx(0.0));
    }
    CHECK(out.events.empty());
}

TEST_CASE("parallel_for covers every index exactly once") {
    std::vector<int> hits(100, 0);
    parallel_for(100, 4, [&](size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    parallel_for(0, 4, [&](size_t) { REQUIRE(false); });
}
