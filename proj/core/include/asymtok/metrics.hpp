#pragma once

#include <cstdint>

#include "asymtok/model.hpp"

namespace asymtok {

// Dimensions feeding the per-layer cost formula 4nd^2 + 2n^2d + 3ndm.
struct CostModel {
    int hidden_dim = 64;
    int ffn_dim = 256;
    int num_layers = 4;
    int num_heads = 4;
    int bytes_per_element = 2;  // fp16-style accounting

    int head_dim() const { return hidden_dim / num_heads; }
    void validate() const;

    static CostModel from_config(const ModelConfig& config, int bytes_per_element = 2);
};

// Per-layer FLOPs for a length-n sequence: QKV/output projections, attention
// score + value mixing, and the FFN.
uint64_t flops_per_layer(uint64_t n, const CostModel& model);

uint64_t flops_total(uint64_t n, const CostModel& model);

// 1 - flops(n_kept) / flops(n_full); layer-count invariant.
double flops_saved(uint64_t n_full, uint64_t n_kept, const CostModel& model);

// n * num_layers * 2 (K and V) * hidden_dim * bytes_per_element.
uint64_t kv_bytes(uint64_t n, const CostModel& model);

struct UsageReport {
    uint64_t flops_full = 0;
    uint64_t flops_pruned = 0;
    double flops_saved = 0.0;
    uint64_t kv_bytes_full = 0;
    uint64_t kv_bytes_pruned = 0;
    uint64_t peak_token_count = 0;
};

UsageReport usage_report(uint64_t n_full, uint64_t n_kept, uint64_t peak_tokens,
                         const CostModel& model);

}  // namespace asymtok
