#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "asymtok/kv_cache.hpp"
#include "asymtok/mat.hpp"
#include "asymtok/model.hpp"

namespace asymtok {

enum class EvictionPolicy : uint8_t { None = 0, AsymThreshold, H2O, Streaming, TurnLevel };

std::string to_string(EvictionPolicy policy);
EvictionPolicy eviction_policy_from_string(const std::string& name);

struct EvictionConfig {
    EvictionPolicy policy = EvictionPolicy::None;
    size_t text_budget = 90;  // generated-token budget (AsymThreshold) / text budget (TurnLevel)
    size_t sink_count = 4;    // Streaming only
    double retention = 1.0;   // parity sweeps: text_budget = retention * generation cap
    // Cache-size budget for the modality-blind baselines. 0 means "derive as
    // initial prefill length + text_budget" (engine fills it in).
    size_t total_budget = 0;

    void validate() const;
};

struct EvictionEvent {
    size_t step = 0;  // decode step index at which the eviction fired
    EvictionPolicy policy = EvictionPolicy::None;
    uint64_t slot_id = 0;
    Modality modality = Modality::Text;
    double score = 0.0;  // policy-specific importance of the evicted slot
};

// --- pure decision functions (unit-testable with scripted inputs) ---

// Lowest-attention Generated slots beyond the generated-token budget.
// Prefill slots are never candidates.
std::vector<uint64_t> asym_evict_decision(const std::vector<SlotMeta>& slots,
                                          const std::vector<float>& head_avg_attention,
                                          size_t text_budget);

// Smallest accumulated attention first, all slots are candidates, ties go to
// the lower slot id.
std::vector<uint64_t> h2o_evict_decision(const std::vector<SlotMeta>& slots,
                                         size_t total_budget);

// Keeps the first sink_count slots plus the most recent
// (total_budget - sink_count); evicts everything between.
std::vector<uint64_t> streaming_evict_decision(const std::vector<SlotMeta>& slots,
                                               size_t total_budget, size_t sink_count);

// --- cache-mutating operations ---

std::vector<uint64_t> asym_evict(KVCache& cache, const EvictionConfig& config,
                                 const std::vector<float>& final_layer_head_avg);

// Accumulators are maintained by prefill/decode; this only evicts.
std::vector<uint64_t> h2o_evict(KVCache& cache, const EvictionConfig& config);

std::vector<uint64_t> streaming_evict(KVCache& cache, const EvictionConfig& config);

struct TurnEvictResult {
    std::vector<int> evicted_turns;
    std::vector<double> turn_scores;               // parallel to evicted_turns
    std::vector<std::vector<uint64_t>> turn_slots; // parallel to evicted_turns
    std::vector<uint64_t> evicted_slots;           // flattened, eviction order
    bool partial = false;  // budget unreachable after evicting all answers
};

// Turn-level eviction: while total cached text exceeds the budget, evicts the
// completed answer (Generated text of a past turn) with the lowest mean
// weighted-cosine similarity to the current images. Questions, images and the
// current turn always survive.
TurnEvictResult turn_evict(KVCache& cache, const EvictionConfig& config, const ToyVLM& model,
                           const MatD& current_image_embs, const std::vector<double>& w,
                           int current_turn);

CacheCensus cache_census(const KVCache& cache);

}  // namespace asymtok
