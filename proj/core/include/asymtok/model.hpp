#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "asymtok/common.hpp"
#include "asymtok/kv_cache.hpp"
#include "asymtok/mat.hpp"
#include "asymtok/token.hpp"

namespace asymtok {

struct ModelConfig {
    int num_layers = 4;
    int num_heads = 4;
    int hidden_dim = 64;
    int ffn_dim = 256;
    int vocab_size = 256;
    int max_positions = 512;
    uint64_t init_seed = 7;
    float init_std = 0.02f;

    int head_dim() const { return hidden_dim / num_heads; }
    void validate() const;
};

template <typename T>
struct LayerWeightsT {
    MatT<T> wq, wk, wv, wo;   // hidden_dim x hidden_dim
    MatT<T> w_up;             // hidden_dim x ffn_dim
    MatT<T> w_down;           // ffn_dim x hidden_dim
    std::vector<T> ln1_gain;  // pre-attention norm gain
    std::vector<T> ln2_gain;  // pre-FFN norm gain
};

template <typename T>
struct ModelWeightsT {
    ModelConfig config;
    MatT<T> token_embedding;     // vocab_size x hidden_dim
    MatT<T> position_embedding;  // max_positions x hidden_dim
    std::vector<LayerWeightsT<T>> layers;
};

// Frozen decoder-only transformer surrogate. Weights are drawn once from a
// seeded normal distribution and never change; identical (config, seed) give
// bit-identical weights. The canonical store is float32; the gradient path
// promotes a copy to float64.
using ToyVLM = ModelWeightsT<float>;
using ToyVLMDouble = ModelWeightsT<double>;

ToyVLMDouble to_double(const ToyVLM& model);

ToyVLM init_model(const ModelConfig& config);

// FNV-1a over the raw weight bytes; used for determinism checks and as the
// serialization key.
uint64_t model_checksum(const ToyVLM& model);

// Binary weight container, round-trips bit-exactly.
void save_model(const ToyVLM& model, const std::string& path);
ToyVLM load_model(const std::string& path);

// Per-position additive logit penalties, shared across every layer and head.
// Text positions must stay at exactly 0.
struct MaskAddends {
    std::vector<float> addends;

    static MaskAddends none(size_t len) { return MaskAddends{std::vector<float>(len, 0.0f)}; }

    // Hard-masks every vision token whose index (within the vision tokens,
    // in order) is absent from keep_vision; text positions get 0.
    static MaskAddends hard_mask_complement(const TokenSequence& seq,
                                            const std::vector<size_t>& keep_vision);

    // Hard-masks exactly the given vision-token indices.
    static MaskAddends hard_mask(const TokenSequence& seq,
                                 const std::vector<size_t>& masked_vision);

    void validate(size_t expect_len) const;
};

struct ForwardTrace {
    // attention[layer][head] is the post-softmax (n x n) matrix; entries with
    // j > i are zero.
    std::vector<std::vector<Mat>> attention;
    Mat final_hidden;        // n x hidden_dim
    std::vector<Mat> keys;   // per layer, n x hidden_dim
    std::vector<Mat> values; // per layer, n x hidden_dim
};

// Embedding lookup: vision rows are payload + position embedding, text rows
// are token embedding + position embedding.
Mat embed(const ToyVLM& model, const TokenSequence& seq);

ForwardTrace forward_prefill_trace(const ToyVLM& model, const TokenSequence& seq,
                                   const MaskAddends& mask);

// Same forward pass but from raw embeddings; used by oracles that perturb
// individual rows.
ForwardTrace forward_from_embeddings(const ToyVLM& model, const Mat& embeddings,
                                     const MaskAddends& mask);

std::pair<ForwardTrace, KVCache> forward_prefill(const ToyVLM& model, const TokenSequence& seq,
                                                 const MaskAddends& mask);

struct DecodeStep {
    std::vector<float> logits;            // vocab_size
    Mat final_attention;                  // heads x cache_size, final layer
    std::vector<float> head_avg_attention;  // cache_size, final layer averaged over heads
    std::vector<double> attention_sum;    // cache_size, summed over all layers and heads
    std::vector<float> final_hidden;      // hidden_dim, the row producing the logits
};

// Appends the token's KV to every layer and returns the logits plus the
// final-layer attention row. The token must carry the cache's next position.
DecodeStep forward_decode_step(const ToyVLM& model, const Token& token, KVCache& cache);

// Final-layer hidden states at text positions, in sequence order (L x d).
Mat text_hidden_states(const ForwardTrace& trace, const TokenSequence& seq);

// Mean over text rows of the squared L2 difference; the output-discrepancy
// measure used by training, calibration and the evaluation harness.
double hidden_state_mse(const Mat& a, const Mat& b);

}  // namespace asymtok
