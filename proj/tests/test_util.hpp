#pragma once

#include <doctest.h>

#include <cmath>
#include <vector>

#include "asymtok/model.hpp"
#include "asymtok/rng.hpp"
#include "asymtok/token.hpp"

namespace testutil {

inline asymtok::ModelConfig small_config(int layers = 2, int heads = 2, int d = 16, int m = 32,
                                         uint64_t seed = 11) {
    asymtok::ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.num_heads = heads;
    cfg.hidden_dim = d;
    cfg.ffn_dim = m;
    cfg.vocab_size = 64;
    cfg.max_positions = 256;
    cfg.init_seed = seed;
    cfg.init_std = 0.02f;
    return cfg;
}

// Random vision + text sequence with unit-scale Gaussian payloads.
inline asymtok::TokenSequence random_seq(const asymtok::ToyVLM& model, size_t n_vis, size_t n_text,
                                         uint64_t seed) {
    asymtok::Rng rng(seed);
    asymtok::TokenSequence seq;
    const size_t d = model.config.hidden_dim;
    int pos = 0;
    for (size_t i = 0; i < n_vis; ++i) {
        std::vector<float> payload(d);
        for (auto& x : payload)
            x = static_cast<float>(rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d))));
        seq.entries.push_back(asymtok::Token::vision(std::move(payload), pos++));
    }
    for (size_t i = 0; i < n_text; ++i)
        seq.entries.push_back(asymtok::Token::text(
            static_cast<int>(rng.below(model.config.vocab_size)), pos++));
    return seq;
}

inline double max_rel_err(const asymtok::Mat& a, const asymtok::Mat& b, double abs_floor = 1e-7) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    double worst = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double da = a.data[i], db = b.data[i];
        const double denom = std::max({std::abs(da), std::abs(db), abs_floor});
        worst = std::max(worst, std::abs(da - db) / denom);
    }
    return worst;
}

}  // namespace testutil
