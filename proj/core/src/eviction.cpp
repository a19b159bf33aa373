#include "asymtok/eviction.hpp"

#include <algorithm>
#include <map>

#include "asymtok/scorer.hpp"

namespace asymtok {

std::string to_string(EvictionPolicy policy) {
    switch (policy) {
        case EvictionPolicy::None: return "none";
        case EvictionPolicy::AsymThreshold: return "asym";
        case EvictionPolicy::H2O: return "h2o";
        case EvictionPolicy::Streaming: return "streaming";
        case EvictionPolicy::TurnLevel: return "turn";
    }
    return "unknown";
}

EvictionPolicy eviction_policy_from_string(const std::string& name) {
    if (name == "none") return EvictionPolicy::None;
    if (name == "asym") return EvictionPolicy::AsymThreshold;
    if (name == "h2o") return EvictionPolicy::H2O;
    if (name == "streaming") return EvictionPolicy::Streaming;
    if (name == "turn") return EvictionPolicy::TurnLevel;
    throw ConfigError("unknown eviction policy: " + name);
}

void EvictionConfig::validate() const {
    if (text_budget < 1) throw ConfigError("EvictionConfig: text_budget must be >= 1");
    if (policy == EvictionPolicy::Streaming && total_budget > 0 && sink_count + 1 > total_budget)
        throw ConfigError("EvictionConfig: sink_count must leave room in the budget");
}

std::vector<uint64_t> asym_evict_decision(const std::vector<SlotMeta>& slots,
                                          const std::vector<float>& head_avg_attention,
                                          size_t text_budget) {
    if (head_avg_attention.size() != slots.size())
        throw InputError("asym_evict: attention row length must equal slot count");
    std::vector<size_t> candidates;
    for (size_t i = 0; i < slots.size(); ++i)
        if (slots[i].phase == Phase::Generated) candidates.push_back(i);
    if (candidates.size() <= text_budget) return {};
    const size_t excess = candidates.size() - text_budget;
    std::sort(candidates.begin(), candidates.end(), [&](size_t a, size_t b) {
        if (head_avg_attention[a] != head_avg_attention[b])
            return head_avg_attention[a] < head_avg_attention[b];
        return slots[a].slot_id < slots[b].slot_id;
    });
    std::vector<uint64_t> out;
    for (size_t i = 0; i < excess; ++i) out.push_back(slots[candidates[i]].slot_id);
    return out;
}

std::vector<uint64_t> h2o_evict_decision(const std::vector<SlotMeta>& slots,
                                         size_t total_budget) {
    if (slots.size() <= total_budget) return {};
    const size_t excess = slots.size() - total_budget;
    std::vector<size_t> order(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (slots[a].attention_accum != slots[b].attention_accum)
            return slots[a].attention_accum < slots[b].attention_accum;
        return slots[a].slot_id < slots[b].slot_id;
    });
    std::vector<uint64_t> out;
    for (size_t i = 0; i < excess; ++i) out.push_back(slots[order[i]].slot_id);
    return out;
}

std::vector<uint64_t> streaming_evict_decision(const std::vector<SlotMeta>& slots,
                                               size_t total_budget, size_t sink_count) {
    if (sink_count + 1 > total_budget)
        throw ConfigError("streaming_evict: sink_count must be smaller than the budget");
    if (slots.size() <= total_budget) return {};
    const size_t recent = total_budget - sink_count;
    std::vector<uint64_t> out;
    for (size_t i = sink_count; i + recent < slots.size(); ++i) out.push_back(slots[i].slot_id);
    return out;
}

std::vector<uint64_t> asym_evict(KVCache& cache, const EvictionConfig& config,
                                 const std::vector<float>& final_layer_head_avg) {
    config.validate();
    auto ids = asym_evict_decision(cache.slots(), final_layer_head_avg, config.text_budget);
    cache.remove_slots(ids);
    return ids;
}

std::vector<uint64_t> h2o_evict(KVCache& cache, const EvictionConfig& config) {
    config.validate();
    if (config.total_budget == 0) throw ConfigError("h2o_evict: total_budget not set");
    auto ids = h2o_evict_decision(cache.slots(), config.total_budget);
    cache.remove_slots(ids);
    return ids;
}

std::vector<uint64_t> streaming_evict(KVCache& cache, const EvictionConfig& config) {
    config.validate();
    if (config.total_budget == 0) throw ConfigError("streaming_evict: total_budget not set");
    auto ids = streaming_evict_decision(cache.slots(), config.total_budget, config.sink_count);
    cache.remove_slots(ids);
    return ids;
}

TurnEvictResult turn_evict(KVCache& cache, const EvictionConfig& config, const ToyVLM& model,
                           const MatD& current_image_embs, const std::vector<double>& w,
                           int current_turn) {
    config.validate();
    TurnEvictResult result;
    if (cache.text_count() <= config.text_budget) return result;

    // Completed answers: Generated text slots from past turns, grouped by
    // turn. Slot ids and token ids are copied out first because removal
    // compacts the metadata vector.
    struct AnswerSlot {
        uint64_t slot_id;
        int token_id;
    };
    std::map<int, std::vector<AnswerSlot>> answers;
    for (const auto& slot : cache.slots()) {
        if (slot.phase != Phase::Generated || slot.modality != Modality::Text) continue;
        if (slot.turn_id >= current_turn) continue;
        answers[slot.turn_id].push_back({slot.slot_id, slot.token_id});
    }

    // Turn score: mean over answer tokens of the max weighted-cosine
    // similarity between the token embedding and the current images.
    std::vector<std::pair<double, int>> ranked;  // (score, turn)
    const size_t d = model.config.hidden_dim;
    for (const auto& [turn, slots] : answers) {
        MatD token_embs(slots.size(), d);
        for (size_t i = 0; i < slots.size(); ++i) {
            const float* row = model.token_embedding.row(slots[i].token_id);
            for (size_t j = 0; j < d; ++j) token_embs(i, j) = row[j];
        }
        double score;
        if (current_image_embs.rows == 0) {
            score = 0.0;  // no visual grounding available; rank by turn order only
        } else {
            const ImportanceScores s = score_tokens(w, token_embs, current_image_embs);
            double total = 0.0;
            for (double v : s.values) total += v;
            score = total / static_cast<double>(s.values.size());
        }
        ranked.emplace_back(score, turn);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });

    for (const auto& [score, turn] : ranked) {
        if (cache.text_count() <= config.text_budget) break;
        std::vector<uint64_t> ids;
        for (const AnswerSlot& slot : answers[turn]) ids.push_back(slot.slot_id);
        cache.remove_slots(ids);
        result.evicted_turns.push_back(turn);
        result.turn_scores.push_back(score);
        result.evicted_slots.insert(result.evicted_slots.end(), ids.begin(), ids.end());
        result.turn_slots.push_back(std::move(ids));
    }
    result.partial = cache.text_count() > config.text_budget;
    return result;
}

CacheCensus cache_census(const KVCache& cache) { return cache.census(); }

}  // namespace asymtok
