#pragma once

#include <vector>

#include "asymtok/eviction.hpp"
#include "asymtok/kv_cache.hpp"
#include "asymtok/model.hpp"
#include "asymtok/token.hpp"

namespace asymtok {

// Greedy decoding ties break toward the lower token id.
int argmax_token(const std::vector<float>& logits);

std::vector<float> logits_from_hidden(const ToyVLM& model, const float* hidden_row);

struct GenerationResult {
    std::vector<int> token_ids;                // generated ids, in order
    std::vector<std::vector<float>> hidden;    // final hidden state per generated step
    std::vector<EvictionEvent> events;
    std::vector<size_t> occupancy;             // cache size after each step (post-eviction)
    size_t peak_tokens = 0;
    bool partial_eviction = false;             // TurnLevel budget unreachable at some step
    KVCache cache;                             // final cache state
};

struct DecodeOptions {
    int steps = 0;
    // Presence penalty subtracted from the logits of every token id resident
    // in the cache's text slots. Keeps greedy decoding from collapsing into
    // repetition loops; an evicted token becomes emittable again.
    float presence_penalty = 0.0f;
};

// Single-turn greedy decode with the configured eviction policy consulted
// after every step. For the modality-blind baselines a zero total_budget is
// resolved to prefill length + text_budget.
GenerationResult generate_single_turn(const ToyVLM& model, const TokenSequence& prompt,
                                      const DecodeOptions& options, EvictionConfig eviction);

inline GenerationResult generate_single_turn(const ToyVLM& model, const TokenSequence& prompt,
                                             int steps, EvictionConfig eviction) {
    return generate_single_turn(model, prompt, DecodeOptions{steps, 0.0f}, eviction);
}

// Multi-turn driver: each turn's prompt tokens (vision + question text) are
// fed through decode steps, then answer_steps tokens are generated greedily.
// The eviction policy is consulted after every appended token; TurnLevel
// scores completed answers against the latest turn's images using w.
GenerationResult run_conversation(const ToyVLM& model,
                                  const std::vector<TokenSequence>& turn_prompts,
                                  const std::vector<int>& answer_steps, EvictionConfig eviction,
                                  const std::vector<double>& scorer_w,
                                  float presence_penalty = 0.0f);

}  // namespace asymtok
