#pragma once

#include <cstdint>
#include <map>
#include <tuple>
#include <vector>

#include "asymtok/common.hpp"
#include "asymtok/mat.hpp"

namespace asymtok {

// Per-slot bookkeeping. Metadata is immutable once inserted; only the H2O
// attention accumulator changes over a slot's lifetime.
struct SlotMeta {
    uint64_t slot_id = 0;  // insertion order, never reused
    Modality modality = Modality::Text;
    Phase phase = Phase::Prefill;
    int turn_id = 0;
    int position_id = 0;
    int token_id = -1;          // -1 for vision slots
    double attention_accum = 0; // summed over layers, heads and query rows
};

using CacheCensus = std::map<std::tuple<Modality, Phase, int>, size_t>;

// Layer-aligned key/value store. Eviction removes a slot from every layer at
// once, so all layers always hold the same slot set.
class KVCache {
public:
    KVCache() = default;
    KVCache(int num_layers, int hidden_dim);

    int num_layers() const { return static_cast<int>(keys_.size()); }
    int hidden_dim() const { return hidden_dim_; }
    size_t size() const { return meta_.size(); }
    bool empty() const { return meta_.empty(); }

    const std::vector<SlotMeta>& slots() const { return meta_; }
    const Mat& keys(int layer) const { return keys_[layer]; }
    const Mat& values(int layer) const { return values_[layer]; }

    int next_position() const { return next_position_; }

    // Moves the monotone position counter forward (cache reconstruction from
    // retained slots whose newest position was evicted). Never moves back.
    void advance_position(int next);

    // Appends one slot; keys/values carry one row per layer.
    uint64_t append(SlotMeta meta, const std::vector<std::vector<float>>& k_rows,
                    const std::vector<std::vector<float>>& v_rows);

    // Removes the given slot ids from every layer. Unknown ids are an error.
    void remove_slots(const std::vector<uint64_t>& slot_ids);

    // Adds per-slot attention mass to the accumulators (H2O bookkeeping).
    void accumulate_attention(const std::vector<double>& per_slot);

    CacheCensus census() const;

    size_t generated_count() const;
    size_t text_count() const;

private:
    int hidden_dim_ = 0;
    std::vector<Mat> keys_;    // per layer, rows = slots
    std::vector<Mat> values_;  // per layer, rows = slots
    std::vector<SlotMeta> meta_;
    uint64_t next_slot_id_ = 0;
    int next_position_ = 0;

    friend class DecodeSession;
};

}  // namespace asymtok
