#pragma once

#include <cstdint>
#include <vector>

#include "asymtok/model.hpp"
#include "asymtok/token.hpp"

namespace asymtok {

// Recipe for one synthetic sample: L text tokens drawn from the vocabulary, N
// vision payloads of which a relevance_fraction subset aligns with a text
// direction at the given strength. The remaining payloads come from a handful
// of isotropic cluster centers with small jitter, giving the corpus the
// spatial redundancy that makes low-scoring tokens cheap to drop.
struct SyntheticTaskSpec {
    size_t vision_tokens = 32;  // N
    size_t text_tokens = 8;     // L
    size_t hidden_dim = 64;     // d, must match the model
    double relevance_fraction = 0.25;
    double alignment_strength = 1.0;  // default corpus mean gap sits in [0.15, 0.30]
    uint64_t noise_seed = 0;

    void validate() const;
};

TokenSequence generate_sample(const ToyVLM& model, const SyntheticTaskSpec& spec, uint64_t seed);

struct CorpusSpec {
    size_t samples = 64;
    SyntheticTaskSpec base;
    // When alignment_max > alignment_min, each sample draws its alignment
    // strength uniformly from the range (heterogeneous-gap corpora).
    double alignment_min = 0.0;
    double alignment_max = 0.0;
    // Grid factorization of N used by the position-based scorer.
    size_t grid_height = 4;
    size_t grid_width = 8;

    void validate() const;
};

std::vector<TokenSequence> generate_corpus(const ToyVLM& model, const CorpusSpec& spec,
                                           uint64_t seed);

// Prompt tokens for one conversation turn (vision then question text),
// positions continuing from position_start.
TokenSequence generate_turn_prompt(const ToyVLM& model, const SyntheticTaskSpec& spec,
                                   uint64_t seed, int turn_id, int position_start);

}  // namespace asymtok
