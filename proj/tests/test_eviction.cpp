#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "asymtok/engine.hpp"
#include "asymtok/eviction.hpp"
#include "asymtok/model.hpp"
#include "asymtok/scorer.hpp"
#include "test_util.hpp"

using namespace asymtok;
using testutil::random_seq;
using testutil::small_config;

namespace {

std::vector<SlotMeta> scripted_slots(size_t prefill, size_t generated) {
    std::vector<SlotMeta> slots;
    for (size_t i = 0; i < prefill + generated; ++i) {
        SlotMeta m;
        m.slot_id = i;
        m.modality = i < prefill ? Modality::Vision : Modality::Text;
        m.phase = i < prefill ? Phase::Prefill : Phase::Generated;
        m.position_id = static_cast<int>(i);
        slots.push_back(m);
    }
    return slots;
}

}  // namespace

TEST_CASE("asym decision: scripted attention picks the weakest generated slot") {
    auto slots = scripted_slots(2, 4);
    // head-averaged attention for slots 0..5; generated slots carry
    // (0.1, 0.4, 0.2, 0.3)
    const std::vector<float> attn = {0.9f, 0.8f, 0.1f, 0.4f, 0.2f, 0.3f};

    SUBCASE("budget 3 evicts exactly the 0.1 slot") {
        const auto ids = asym_evict_decision(slots, attn, 3);
        CHECK(ids == std::vector<uint64_t>{2});
    }
    SUBCASE("generated count equal to the budget evicts nothing") {
        CHECK(asym_evict_decision(slots, attn, 4).empty());
    }
    SUBCASE("prefill slots are never candidates even with tiny attention") {
        const std::vector<float> flipped = {0.01f, 0.02f, 0.5f, 0.6f, 0.7f, 0.8f};
        const auto ids = asym_evict_decision(slots, flipped, 2);
        for (uint64_t id : ids) CHECK(id >= 2);
        CHECK(ids.size() == 2);
    }
}

TEST_CASE("h2o decision follows accumulated attention with id tie-breaks") {
    auto slots = scripted_slots(3, 3);
    slots[0].attention_accum = 5.0;
    slots[1].attention_accum = 0.7;
    slots[2].attention_accum = 2.0;
    slots[3].attention_accum = 0.7;
    slots[4].attention_accum = 3.0;
    slots[5].attention_accum = 0.1;

    SUBCASE("evicts the smallest accumulators regardless of modality") {
        const auto ids = h2o_evict_decision(slots, 3);
        CHECK(ids == std::vector<uint64_t>{5, 1, 3});  // 0.1, then tie 0.7 -> lower id first
    }
    SUBCASE("budget at or above the size evicts nothing") {
        CHECK(h2o_evict_decision(slots, 6).empty());
        CHECK(h2o_evict_decision(slots, 10).empty());
    }
    SUBCASE("uniform accumulators evict the lowest ids first") {
        for (auto& s : slots) s.attention_accum = 1.0;
        CHECK(h2o_evict_decision(slots, 4) == std::vector<uint64_t>{0, 1});
    }
}

TEST_CASE("streaming decision keeps sinks plus the recent window") {
    auto slots = scripted_slots(0, 10);  // ids 0..9
    SUBCASE("budget 6 with 2 sinks retains {0,1,6,7,8,9}") {
        const auto ids = streaming_evict_decision(slots, 6, 2);
        CHECK(ids == std::vector<uint64_t>{2, 3, 4, 5});
    }
    SUBCASE("zero sinks degenerate to a sliding window") {
        const auto ids = streaming_evict_decision(slots, 4, 0);
        CHECK(ids == std::vector<uint64_t>{0, 1, 2, 3, 4, 5});
    }
    SUBCASE("short sequences evict nothing") {
        CHECK(streaming_evict_decision(slots, 10, 2).empty());
        CHECK(streaming_evict_decision(slots, 12, 2).empty());
    }
    SUBCASE("sink count must leave room in the budget") {
        CHECK_THROWS_AS(streaming_evict_decision(slots, 4, 4), ConfigError);
        CHECK_THROWS_AS(streaming_evict_decision(slots, 4, 7), ConfigError);
    }
}

TEST_CASE("ten-step scripted decode reproduces the pencil-and-paper traces") {
    // Prefill of 3 protected slots (ids 0-2), then ten generated tokens with
    // scripted head-averaged attention; budget 4 for AsymThreshold.
    auto slots = scripted_slots(3, 0);
    uint64_t next_id = 3;
    std::vector<uint64_t> asym_evictions;
    // Attention over generated slots at each step (last value = new token).
    const std::vector<std::vector<float>> script = {
        {0.50f}, {0.30f, 0.20f}, {0.25f, 0.15f, 0.10f}, {0.20f, 0.15f, 0.10f, 0.05f},
        // budget exceeded from here on
        {0.30f, 0.10f, 0.20f, 0.15f, 0.25f},
        {0.05f, 0.30f, 0.20f, 0.10f, 0.35f},
        {0.40f, 0.05f, 0.30f, 0.20f, 0.05f},
        {0.10f, 0.20f, 0.30f, 0.40f, 0.50f},
        {0.50f, 0.40f, 0.30f, 0.20f, 0.10f},
        {0.25f, 0.25f, 0.25f, 0.25f, 0.25f},
    };
    for (const auto& gen_attn : script) {
        SlotMeta m;
        m.slot_id = next_id++;
        m.modality = Modality::Text;
        m.phase = Phase::Generated;
        slots.push_back(m);
        REQUIRE(gen_attn.size() == slots.size() - 3);
        std::vector<float> attn(slots.size(), 0.9f);  // prefill gets high attention
        for (size_t i = 0; i < gen_attn.size(); ++i) attn[3 + i] = gen_attn[i];
        const auto ids = asym_evict_decision(slots, attn, 4);
        for (uint64_t id : ids) {
            asym_evictions.push_back(id);
            slots.erase(std::find_if(slots.begin(), slots.end(),
                                     [&](const SlotMeta& s) { return s.slot_id == id; }));
        }
    }
    // Hand trace: step 5 evicts the 0.10 slot (id 4); step 6 the 0.05 (id 3);
    // step 7 ties at 0.05 between ids 6 and 9 -> id 6; step 8 evicts id 5
    // (0.10); step 9 evicts id 11 (0.10); step 10 all 0.25 -> lowest id 7.
    CHECK(asym_evictions == std::vector<uint64_t>{4, 3, 6, 5, 11, 7});
    CHECK(slots.size() == 3 + 4);
    for (size_t i = 0; i < 3; ++i) CHECK(slots[i].phase == Phase::Prefill);
}

TEST_CASE("h2o scripted accumulation trace") {
    // Slots 0-4; per-step attention rows accumulate, then budget 3 applies.
    auto slots = scripted_slots(2, 3);
    const std::vector<std::vector<double>> rows = {
        {0.5, 0.1, 0.2, 0.1, 0.1},
        {0.1, 0.1, 0.5, 0.2, 0.1},
        {0.0, 0.1, 0.1, 0.4, 0.4},
    };
    for (const auto& row : rows)
        for (size_t i = 0; i < slots.size(); ++i) slots[i].attention_accum += row[i];
    // accumulators: 0.6, 0.3, 0.8, 0.7, 0.6 -> evict 1 (0.3), then 0 (0.6 tie
    // with 4 -> lower id)
    const auto ids = h2o_evict_decision(slots, 3);
    CHECK(ids == std::vector<uint64_t>{1, 0});
}

TEST_CASE("cache census tracks modality, phase and turn") {
    const ToyVLM model = init_model(small_config());
    const TokenSequence seq = random_seq(model, 5, 3, 8);
    auto [trace, cache] = forward_prefill(model, seq, MaskAddends::none(seq.size()));

    CacheCensus census = cache_census(cache);
    CHECK(census[{Modality::Vision, Phase::Prefill, 0}] == 5);
    CHECK(census[{Modality::Text, Phase::Prefill, 0}] == 3);

    // decode a few steps, then check generated counts
    for (int k = 0; k < 4; ++k) {
        const Token tok = Token::text(1 + k, cache.next_position(), Phase::Generated, 0);
        forward_decode_step(model, tok, cache);
    }
    census = cache_census(cache);
    CHECK(census[{Modality::Text, Phase::Generated, 0}] == 4);
    size_t total = 0;
    for (const auto& [key, count] : census) total += count;
    CHECK(total == cache.size());
    for (int layer = 0; layer < model.config.num_layers; ++layer) {
        CHECK(cache.keys(layer).rows == cache.size());
        CHECK(cache.values(layer).rows == cache.size());
    }
}

TEST_CASE("removal keeps every layer aligned and ids stable") {
    const ToyVLM model = init_model(small_config());
    const TokenSequence seq = random_seq(model, 6, 2, 12);
    auto [trace, cache] = forward_prefill(model, seq, MaskAddends::none(seq.size()));
    const Mat before = cache.keys(1);

    cache.remove_slots({1, 4});
    CHECK(cache.size() == 6);
    for (int layer = 0; layer < model.config.num_layers; ++layer)
        CHECK(cache.keys(layer).rows == 6);
    // surviving rows keep their contents
    const Mat& after = cache.keys(1);
    const std::vector<size_t> survivors = {0, 2, 3, 5, 6, 7};
    for (size_t i = 0; i < survivors.size(); ++i)
        for (size_t j = 0; j < after.cols; ++j) CHECK(after(i, j) == before(survivors[i], j));
    CHECK(cache.slots()[1].slot_id == 2);

    CHECK_THROWS_AS(cache.remove_slots({1}), InputError);  // already gone
}

TEST_CASE("H2O accumulators sum the decode-step attention, layers and heads") {
    const ToyVLM model = init_model(small_config());
    const TokenSequence seq = random_seq(model, 4, 2, 19);
    auto [trace, cache] = forward_prefill(model, seq, MaskAddends::none(seq.size()));

    // Counters start at zero: only decode-time queries feed them.
    for (const auto& s : cache.slots()) CHECK(s.attention_accum == 0.0);

    std::vector<double> expected(seq.size(), 0.0);
    for (int k = 0; k < 3; ++k) {
        const Token tok = Token::text(k, cache.next_position(), Phase::Generated, 0);
        const DecodeStep step = forward_decode_step(model, tok, cache);
        // each step's attention row sums to num_layers * num_heads
        double total = 0.0;
        for (double a : step.attention_sum) total += a;
        CHECK(total == doctest::Approx(model.config.num_layers * model.config.num_heads)
                           .epsilon(1e-5));
        expected.push_back(0.0);
        for (size_t j = 0; j < expected.size(); ++j) expected[j] += step.attention_sum[j];
        for (size_t j = 0; j < expected.size(); ++j)
            CHECK(cache.slots()[j].attention_accum == doctest::Approx(expected[j]).epsilon(1e-6));
    }
}

TEST_CASE("post-eviction decode logits match a dense recomputation over retained slots") {
    // Oracle: after evicting, the next step's logits must be reproducible
    // from the retained keys/values alone by an independent dense attention
    // implemented here in the test. Any stale state leaking from evicted
    // slots would break the agreement.
    const ToyVLM model = init_model(small_config(3, 2, 16, 32, 29));
    const TokenSequence seq = random_seq(model, 6, 2, 23);
    auto [trace, cache] = forward_prefill(model, seq, MaskAddends::none(seq.size()));
    for (int k = 0; k < 5; ++k) {
        const Token tok = Token::text(2 + k, cache.next_position(), Phase::Generated, 0);
        forward_decode_step(model, tok, cache);
    }
    cache.remove_slots({1, 9, 11});

    const Token probe = Token::text(40, cache.next_position(), Phase::Generated, 0);
    KVCache engine_cache = cache;
    const DecodeStep engine_step = forward_decode_step(model, probe, engine_cache);

    // Dense re-derivation from the exported cache tensors.
    const auto& cfg = model.config;
    const size_t d = cfg.hidden_dim, heads = cfg.num_heads, dh = cfg.head_dim();
    TokenSequence one;
    one.entries.push_back(probe);
    const Mat emb = embed(model, one);
    std::vector<double> h(emb.row(0), emb.row(0) + d);
    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        const auto& w = model.layers[layer];
        // layer norm
        double mu = 0, var = 0;
        for (double x : h) mu += x;
        mu /= static_cast<double>(d);
        for (double x : h) var += (x - mu) * (x - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        std::vector<double> y(d), q(d, 0), kk(d, 0), vv(d, 0);
        for (size_t j = 0; j < d; ++j) y[j] = w.ln1_gain[j] * (h[j] - mu) * rstd;
        for (size_t a = 0; a < d; ++a)
            for (size_t j = 0; j < d; ++j) {
                q[j] += y[a] * w.wq(a, j);
                kk[j] += y[a] * w.wk(a, j);
                vv[j] += y[a] * w.wv(a, j);
            }
        const size_t slots = cache.size() + 1;
        std::vector<double> concat(d, 0.0);
        for (size_t head = 0; head < heads; ++head) {
            const size_t off = head * dh;
            std::vector<double> logits(slots);
            for (size_t s = 0; s < slots; ++s) {
                double acc = 0;
                for (size_t c = 0; c < dh; ++c) {
                    const double key = s < cache.size()
                                           ? static_cast<double>(cache.keys(layer)(s, off + c))
                                           : kk[off + c];
                    acc += q[off + c] * key;
                }
                logits[s] = acc / std::sqrt(static_cast<double>(dh));
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double denom = 0;
            for (double& z : logits) {
                z = std::exp(z - mx);
                denom += z;
            }
            for (size_t s = 0; s < slots; ++s) {
                const double p = logits[s] / denom;
                for (size_t c = 0; c < dh; ++c) {
                    const double val = s < cache.size()
                                           ? static_cast<double>(cache.values(layer)(s, off + c))
                                           : vv[off + c];
                    concat[off + c] += p * val;
                }
            }
        }
        std::vector<double> attn_out(d, 0.0);
        for (size_t a = 0; a < d; ++a)
            for (size_t j = 0; j < d; ++j) attn_out[j] += concat[a] * w.wo(a, j);
        for (size_t j = 0; j < d; ++j) h[j] += attn_out[j];
        // FFN
        mu = 0;
        var = 0;
        for (double x : h) mu += x;
        mu /= static_cast<double>(d);
        for (double x : h) var += (x - mu) * (x - mu);
        var /= static_cast<double>(d);
        const double rstd2 = 1.0 / std::sqrt(var + 1e-5);
        std::vector<double> y2(d);
        for (size_t j = 0; j < d; ++j) y2[j] = w.ln2_gain[j] * (h[j] - mu) * rstd2;
        std::vector<double> mid(cfg.ffn_dim, 0.0);
        for (size_t a = 0; a < d; ++a)
            for (int j = 0; j < cfg.ffn_dim; ++j) mid[j] += y2[a] * w.w_up(a, j);
        for (auto& x : mid) x = x / (1.0 + std::exp(-x));
        std::vector<double> out(d, 0.0);
        for (int a = 0; a < cfg.ffn_dim; ++a)
            for (size_t j = 0; j < d; ++j) out[j] += mid[a] * w.w_down(a, j);
        for (size_t j = 0; j < d; ++j) h[j] += out[j];
    }
    std::vector<double> ref_logits(cfg.vocab_size, 0.0);
    for (int t = 0; t < cfg.vocab_size; ++t)
        for (size_t j = 0; j < d; ++j) ref_logits[t] += h[j] * model.token_embedding(t, j);

    for (int t = 0; t < cfg.vocab_size; ++t)
        CHECK(engine_step.logits[t] ==
              doctest::Approx(ref_logits[t]).epsilon(1e-4).scale(1.0));
}

TEST_CASE("turn-level eviction drops whole low-scoring answers, nothing else") {
    const ToyVLM model = init_model(small_config(2, 2, 16, 32, 41));
    KVCache cache(model.config.num_layers, model.config.hidden_dim);
    const size_t d = model.config.hidden_dim;
    const std::vector<std::vector<float>> dummy_k(model.config.num_layers,
                                                  std::vector<float>(d, 0.1f));
    const std::vector<std::vector<float>> dummy_v = dummy_k;

    // Three turns: each with 1 image slot, 2 question slots, 3 answer slots.
    auto add_slot = [&](Modality mo, Phase ph, int turn, int token_id) {
        SlotMeta m;
        m.modality = mo;
        m.phase = ph;
        m.turn_id = turn;
        m.position_id = static_cast<int>(cache.size());
        m.token_id = token_id;
        cache.append(m, dummy_k, dummy_v);
    };
    for (int turn = 0; turn < 3; ++turn) {
        add_slot(Modality::Vision, Phase::Prefill, turn, -1);
        add_slot(Modality::Text, Phase::Prefill, turn, 1);
        add_slot(Modality::Text, Phase::Prefill, turn, 2);
        for (int a = 0; a < 3; ++a)
            add_slot(Modality::Text, Phase::Generated, turn, 10 + turn * 3 + a);
    }
    // Current turn 3 in progress: one image + question.
    add_slot(Modality::Vision, Phase::Prefill, 3, -1);
    add_slot(Modality::Text, Phase::Prefill, 3, 3);

    MatD images(1, d);
    for (size_t j = 0; j < d; ++j) images(0, j) = model.token_embedding(11, j);

    EvictionConfig cfg;
    cfg.policy = EvictionPolicy::TurnLevel;
    const std::vector<double> ones(d, 1.0);

    SUBCASE("budget not exceeded evicts nothing") {
        cfg.text_budget = 100;
        const TurnEvictResult res = turn_evict(cache, cfg, model, images, ones, 3);
        CHECK(res.evicted_turns.empty());
    }

    SUBCASE("one eviction removes the lowest-scoring completed answer") {
        cfg.text_budget = 13;  // current text = 16, one 3-token answer must go
        const TurnEvictResult res = turn_evict(cache, cfg, model, images, ones, 3);
        REQUIRE(res.evicted_turns.size() == 1);
        // The turn-0 answer contains token 11 == the current image, so it
        // scores highest and must survive.
        CHECK(res.evicted_turns[0] != 0);
        CHECK_FALSE(res.partial);
        // Census: questions and images intact, one answer gone.
        const CacheCensus census = cache.census();
        for (int turn = 0; turn < 3; ++turn) {
            CHECK(census.at({Modality::Vision, Phase::Prefill, turn}) == 1);
            CHECK(census.at({Modality::Text, Phase::Prefill, turn}) == 2);
        }
    }

    SUBCASE("unreachable budget reports partial eviction") {
        cfg.text_budget = 2;  // questions alone exceed this
        const TurnEvictResult res = turn_evict(cache, cfg, model, images, ones, 3);
        CHECK(res.evicted_turns.size() == 3);  // every completed answer went
        CHECK(res.partial);
        const CacheCensus census = cache.census();
        for (int turn = 0; turn < 3; ++turn)
            CHECK(census.at({Modality::Text, Phase::Prefill, turn}) == 2);
        CHECK(census.count({Modality::Text, Phase::Generated, 0}) == 0);
    }

    SUBCASE("current turn is never a candidate") {
        cfg.text_budget = 1;
        turn_evict(cache, cfg, model, images, ones, 2);  // current turn = 2
        const CacheCensus census = cache.census();
        CHECK(census.at({Modality::Text, Phase::Generated, 2}) == 3);
    }
}

TEST_CASE("policy protection fuzz: asym and turn never touch prefill slots") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t prefill = 1 + rng.below(6);
        const size_t generated = rng.below(12);
        auto slots = scripted_slots(prefill, generated);
        std::vector<float> attn(slots.size());
        for (auto& a : attn) a = static_cast<float>(rng.uniform());
        const size_t budget = 1 + rng.below(8);
        for (uint64_t id : asym_evict_decision(slots, attn, budget))
            CHECK(id >= prefill);  // generated ids start at prefill
    }
}

TEST_CASE("engine runs respect the policies end to end") {
    const ToyVLM model = init_model(small_config(2, 2, 16, 32, 61));
    const TokenSequence prompt = random_seq(model, 8, 3, 71);

    SUBCASE("asym: prefill census constant, generated capped at budget") {
        EvictionConfig cfg;
        cfg.policy = EvictionPolicy::AsymThreshold;
        cfg.text_budget = 5;
        const GenerationResult run = generate_single_turn(model, prompt, 12, cfg);
        const CacheCensus census = run.cache.census();
        CHECK(census.at({Modality::Vision, Phase::Prefill, 0}) == 8);
        CHECK(census.at({Modality::Text, Phase::Prefill, 0}) == 3);
        CHECK(census.at({Modality::Text, Phase::Generated, 0}) == 5);
        CHECK(run.events.size() == 12 - 5);
        // post-eviction occupancy stays at prefill + budget
        CHECK(run.peak_tokens <= prompt.size() + 5 + 1);
        for (size_t occ : run.occupancy) CHECK(occ <= prompt.size() + 5);
    }

    SUBCASE("budget >= steps evicts nothing for every policy") {
        for (EvictionPolicy p : {EvictionPolicy::AsymThreshold, EvictionPolicy::H2O,
                                 EvictionPolicy::Streaming}) {
            EvictionConfig cfg;
            cfg.policy = p;
            cfg.text_budget = 64;
            const GenerationResult run = generate_single_turn(model, prompt, 6, cfg);
            CHECK(run.events.empty());
            CHECK(run.cache.size() == prompt.size() + 6);
        }
    }

    SUBCASE("h2o and streaming may shrink the prefill set") {
        EvictionConfig cfg;
        cfg.policy = EvictionPolicy::Streaming;
        cfg.text_budget = 2;
        cfg.sink_count = 2;
        const GenerationResult run = generate_single_turn(model, prompt, 10, cfg);
        CHECK(run.cache.size() == prompt.size() + 2);  // total budget
        const CacheCensus census = run.cache.census();
        // sinks are the first two vision slots; the rest of the window is recent
        CHECK(census.at({Modality::Vision, Phase::Prefill, 0}) == 2);
    }
}
