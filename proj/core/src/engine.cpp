#include "asymtok/engine.hpp"

#include <algorithm>

namespace asymtok {

int argmax_token(const std::vector<float>& logits) {
    if (logits.empty()) throw InputError("argmax_token: empty logits");
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<float> logits_from_hidden(const ToyVLM& model, const float* hidden_row) {
    const size_t d = model.config.hidden_dim;
    std::vector<float> logits(model.config.vocab_size, 0.0f);
    for (int t = 0; t < model.config.vocab_size; ++t) {
        const float* row = model.token_embedding.row(t);
        float acc = 0.0f;
        for (size_t j = 0; j < d; ++j) acc += hidden_row[j] * row[j];
        logits[t] = acc;
    }
    return logits;
}

namespace {

const std::vector<double>& ones_vector(size_t d) {
    thread_local std::vector<double> ones;
    if (ones.size() != d) ones.assign(d, 1.0);
    return ones;
}

// Runs the configured policy once and appends eviction events. The attention
// row and image context are only used by the policies that need them.
struct PolicyRunner {
    const ToyVLM& model;
    EvictionConfig config;
    const std::vector<double>* scorer_w = nullptr;
    MatD current_images;  // latest turn's vision payloads (TurnLevel)
    int current_turn = 0;

    bool consult(KVCache& cache, size_t step, const std::vector<float>& head_avg,
                 std::vector<EvictionEvent>& events) {
        switch (config.policy) {
            case EvictionPolicy::None:
                return false;
            case EvictionPolicy::AsymThreshold: {
                // Scores must be captured before removal.
                std::vector<std::pair<uint64_t, double>> scored;
                for (size_t i = 0; i < cache.slots().size(); ++i)
                    scored.emplace_back(cache.slots()[i].slot_id, head_avg[i]);
                const auto ids = asym_evict(cache, config, head_avg);
                for (uint64_t id : ids) {
                    double score = 0.0;
                    for (const auto& [sid, s] : scored)
                        if (sid == id) score = s;
                    events.push_back({step, config.policy, id, Modality::Text, score});
                }
                return false;
            }
            case EvictionPolicy::H2O: {
                std::vector<std::pair<uint64_t, std::pair<Modality, double>>> snapshot;
                for (const auto& s : cache.slots())
                    snapshot.emplace_back(s.slot_id,
                                          std::make_pair(s.modality, s.attention_accum));
                const auto ids = h2o_evict(cache, config);
                for (uint64_t id : ids)
                    for (const auto& [sid, info] : snapshot)
                        if (sid == id)
                            events.push_back({step, config.policy, id, info.first, info.second});
                return false;
            }
            case EvictionPolicy::Streaming: {
                std::vector<std::pair<uint64_t, Modality>> snapshot;
                for (const auto& s : cache.slots()) snapshot.emplace_back(s.slot_id, s.modality);
                const auto ids = streaming_evict(cache, config);
                for (uint64_t id : ids)
                    for (const auto& [sid, m] : snapshot)
                        if (sid == id) events.push_back({step, config.policy, id, m, 0.0});
                return false;
            }
            case EvictionPolicy::TurnLevel: {
                const std::vector<double>& w = (scorer_w && !scorer_w->empty())
                                                   ? *scorer_w
                                                   : ones_vector(model.config.hidden_dim);
                const TurnEvictResult res =
                    turn_evict(cache, config, model, current_images, w, current_turn);
                for (size_t i = 0; i < res.evicted_turns.size(); ++i)
                    for (uint64_t slot : res.turn_slots[i])
                        events.push_back(
                            {step, config.policy, slot, Modality::Text, res.turn_scores[i]});
                return res.partial;
            }
        }
        return false;
    }
};

void resolve_total_budget(EvictionConfig& config, size_t prefill_len) {
    if ((config.policy == EvictionPolicy::H2O || config.policy == EvictionPolicy::Streaming) &&
        config.total_budget == 0)
        config.total_budget = prefill_len + config.text_budget;
}

}  // namespace

namespace {

// Greedy pick with the presence penalty applied against the ids currently
// resident in the cache's text slots.
int pick_token(const std::vector<float>& logits, const KVCache& cache, float presence_penalty) {
    if (presence_penalty == 0.0f) return argmax_token(logits);
    std::vector<float> adjusted = logits;
    for (const auto& slot : cache.slots())
        if (slot.modality == Modality::Text && slot.token_id >= 0 &&
            slot.token_id < static_cast<int>(adjusted.size()))
            adjusted[slot.token_id] = logits[slot.token_id] - presence_penalty;
    return argmax_token(adjusted);
}

}  // namespace

GenerationResult generate_single_turn(const ToyVLM& model, const TokenSequence& prompt,
                                      const DecodeOptions& options, EvictionConfig eviction) {
    eviction.validate();
    auto [trace, cache] = forward_prefill(model, prompt, MaskAddends::none(prompt.size()));
    resolve_total_budget(eviction, prompt.size());
    eviction.validate();

    GenerationResult result;
    PolicyRunner runner{model, eviction, nullptr, {}, 0};
    std::vector<float> logits =
        logits_from_hidden(model, trace.final_hidden.row(prompt.size() - 1));
    result.peak_tokens = cache.size();

    for (int step = 0; step < options.steps; ++step) {
        const int id = pick_token(logits, cache, options.presence_penalty);
        const Token token = Token::text(id, cache.next_position(), Phase::Generated, 0);
        const DecodeStep ds = forward_decode_step(model, token, cache);
        result.token_ids.push_back(id);
        result.hidden.push_back(ds.final_hidden);
        runner.consult(cache, static_cast<size_t>(step), ds.head_avg_attention, result.events);
        result.occupancy.push_back(cache.size());
        result.peak_tokens = std::max(result.peak_tokens, cache.size());
        logits = ds.logits;
    }
    result.cache = std::move(cache);
    return result;
}

GenerationResult run_conversation(const ToyVLM& model,
                                  const std::vector<TokenSequence>& turn_prompts,
                                  const std::vector<int>& answer_steps, EvictionConfig eviction,
                                  const std::vector<double>& scorer_w,
                                  float presence_penalty) {
    if (turn_prompts.empty()) throw InputError("run_conversation: no turns");
    if (turn_prompts.size() != answer_steps.size())
        throw InputError("run_conversation: prompts/answer_steps size mismatch");
    eviction.validate();

    GenerationResult result;
    PolicyRunner runner{model, eviction, &scorer_w, {}, 0};
    size_t step = 0;

    // First turn primes the cache with a batched prefill.
    auto [trace, cache] =
        forward_prefill(model, turn_prompts[0], MaskAddends::none(turn_prompts[0].size()));
    resolve_total_budget(eviction, turn_prompts[0].size());
    runner.config = eviction;
    result.peak_tokens = cache.size();

    auto image_payloads = [&](const TokenSequence& prompt) {
        const size_t d = model.config.hidden_dim;
        MatD images(prompt.vision_count(), d);
        size_t row = 0;
        for (const auto& t : prompt.entries)
            if (t.modality == Modality::Vision) {
                for (size_t j = 0; j < d; ++j) images(row, j) = t.embedding[j];
                ++row;
            }
        return images;
    };

    std::vector<float> logits =
        logits_from_hidden(model, trace.final_hidden.row(turn_prompts[0].size() - 1));
    for (size_t turn = 0; turn < turn_prompts.size(); ++turn) {
        runner.current_turn = static_cast<int>(turn);
        if (turn_prompts[turn].vision_count() > 0)
            runner.current_images = image_payloads(turn_prompts[turn]);
        if (turn > 0) {
            // Later turn prompts enter via teacher-forced decode steps.
            for (const Token& src : turn_prompts[turn].entries) {
                Token token = src;
                token.position_id = cache.next_position();
                const DecodeStep ds = forward_decode_step(model, token, cache);
                result.partial_eviction |=
                    runner.consult(cache, step, ds.head_avg_attention, result.events);
                result.peak_tokens = std::max(result.peak_tokens, cache.size());
                logits = ds.logits;
                ++step;
            }
        }
        for (int k = 0; k < answer_steps[turn]; ++k) {
            const int id = pick_token(logits, cache, presence_penalty);
            const Token token =
                Token::text(id, cache.next_position(), Phase::Generated, static_cast<int>(turn));
            const DecodeStep ds = forward_decode_step(model, token, cache);
            result.token_ids.push_back(id);
            result.hidden.push_back(ds.final_hidden);
            result.partial_eviction |=
                runner.consult(cache, step, ds.head_avg_attention, result.events);
            result.occupancy.push_back(cache.size());
            result.peak_tokens = std::max(result.peak_tokens, cache.size());
            logits = ds.logits;
            ++step;
        }
    }
    result.cache = std::move(cache);
    return result;
}

}  // namespace asymtok
