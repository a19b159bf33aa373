#include "asymtok/kv_cache.hpp"

#include <algorithm>

namespace asymtok {

KVCache::KVCache(int num_layers, int hidden_dim) : hidden_dim_(hidden_dim) {
    if (num_layers < 1 || hidden_dim < 1) throw ConfigError("KVCache: bad dimensions");
    keys_.assign(num_layers, Mat(0, hidden_dim));
    values_.assign(num_layers, Mat(0, hidden_dim));
}

void KVCache::advance_position(int next) {
    next_position_ = std::max(next_position_, next);
}

uint64_t KVCache::append(SlotMeta meta, const std::vector<std::vector<float>>& k_rows,
                         const std::vector<std::vector<float>>& v_rows) {
    if (k_rows.size() != keys_.size() || v_rows.size() != values_.size())
        throw InputError("KVCache::append: row count must equal layer count");
    meta.slot_id = next_slot_id_++;
    for (size_t l = 0; l < keys_.size(); ++l) {
        if (k_rows[l].size() != static_cast<size_t>(hidden_dim_) ||
            v_rows[l].size() != static_cast<size_t>(hidden_dim_))
            throw InputError("KVCache::append: row width must equal hidden_dim");
        keys_[l].data.insert(keys_[l].data.end(), k_rows[l].begin(), k_rows[l].end());
        keys_[l].rows += 1;
        values_[l].data.insert(values_[l].data.end(), v_rows[l].begin(), v_rows[l].end());
        values_[l].rows += 1;
    }
    next_position_ = std::max(next_position_, meta.position_id + 1);
    meta_.push_back(meta);
    return meta.slot_id;
}

void KVCache::remove_slots(const std::vector<uint64_t>& slot_ids) {
    if (slot_ids.empty()) return;
    std::vector<bool> drop(meta_.size(), false);
    for (uint64_t id : slot_ids) {
        bool found = false;
        for (size_t i = 0; i < meta_.size(); ++i) {
            if (meta_[i].slot_id == id) {
                drop[i] = true;
                found = true;
                break;
            }
        }
        if (!found) throw InputError("KVCache::remove_slots: unknown slot id");
    }
    const size_t d = hidden_dim_;
    size_t write = 0;
    for (size_t read = 0; read < meta_.size(); ++read) {
        if (drop[read]) continue;
        if (write != read) {
            meta_[write] = meta_[read];
            for (size_t l = 0; l < keys_.size(); ++l) {
                std::copy(keys_[l].row(read), keys_[l].row(read) + d, keys_[l].row(write));
                std::copy(values_[l].row(read), values_[l].row(read) + d, values_[l].row(write));
            }
        }
        ++write;
    }
    meta_.resize(write);
    for (size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].rows = write;
        keys_[l].data.resize(write * d);
        values_[l].rows = write;
        values_[l].data.resize(write * d);
    }
}

void KVCache::accumulate_attention(const std::vector<double>& per_slot) {
    if (per_slot.size() != meta_.size())
        throw InputError("KVCache::accumulate_attention: length mismatch");
    for (size_t i = 0; i < meta_.size(); ++i) meta_[i].attention_accum += per_slot[i];
}

CacheCensus KVCache::census() const {
    CacheCensus counts;
    for (const auto& m : meta_) counts[{m.modality, m.phase, m.turn_id}] += 1;
    return counts;
}

size_t KVCache::generated_count() const {
    size_t n = 0;
    for (const auto& m : meta_) n += (m.phase == Phase::Generated);
    return n;
}

size_t KVCache::text_count() const {
    size_t n = 0;
    for (const auto& m : meta_) n += (m.modality == Modality::Text);
    return n;
}

}  // namespace asymtok
