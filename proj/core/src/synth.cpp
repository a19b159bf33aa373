#include "asymtok/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "asymtok/rng.hpp"

namespace asymtok {

void SyntheticTaskSpec::validate() const {
    if (vision_tokens < 1 || text_tokens < 1)
        throw InputError("SyntheticTaskSpec: need at least one vision and one text token");
    if (!(relevance_fraction > 0.0 && relevance_fraction <= 1.0))
        throw InputError("SyntheticTaskSpec: relevance_fraction must lie in (0, 1]");
    if (!(alignment_strength >= 0.0))
        throw InputError("SyntheticTaskSpec: alignment_strength must be non-negative");
}

void CorpusSpec::validate() const {
    base.validate();
    if (samples < 1) throw InputError("CorpusSpec: need at least one sample");
    if (grid_height * grid_width != base.vision_tokens)
        throw InputError("CorpusSpec: grid dimensions must multiply to the vision token count");
    if (alignment_max < alignment_min)
        throw InputError("CorpusSpec: alignment_max must be >= alignment_min");
}

namespace {

// Cluster jitter relative scale for the redundant (non-relevant) payloads.
constexpr double kClusterJitter = 0.25;

std::vector<float> draw_direction(Rng& rng, size_t d, double scale) {
    std::vector<float> v(d);
    const double per_dim = scale / std::sqrt(static_cast<double>(d));
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, per_dim));
    return v;
}

// Dimensions carrying the cross-modal alignment signal. Fixed per noise_seed
// (not per sample), so a scorer trained on one corpus transfers to held-out
// corpora with the same noise_seed. Roughly half of the dimensions carry the
// signal; the rest only see noise, which is what per-dimension reweighting
// can learn to suppress.
std::vector<bool> alignment_dims(size_t d, uint64_t noise_seed) {
    Rng rng(mix_seed(0xa115ull, noise_seed));
    std::vector<bool> mask(d, false);
    bool any = false;
    for (size_t k = 0; k < d; ++k) {
        mask[k] = rng.uniform() < 0.5;
        any = any || mask[k];
    }
    if (!any) mask[0] = true;
    return mask;
}

}  // namespace

TokenSequence generate_sample(const ToyVLM& model, const SyntheticTaskSpec& spec, uint64_t seed) {
    spec.validate();
    if (spec.hidden_dim != static_cast<size_t>(model.config.hidden_dim))
        throw InputError("generate_sample: spec hidden_dim must match the model");
    const size_t d = spec.hidden_dim;
    const size_t n = spec.vision_tokens;
    const size_t l = spec.text_tokens;
    Rng rng(mix_seed(seed, spec.noise_seed));

    // Text side: vocabulary ids; their embedding rows are the fixed isotropic
    // draws in the model's table.
    std::vector<int> text_ids(l);
    for (auto& id : text_ids) id = static_cast<int>(rng.below(model.config.vocab_size));
    std::vector<std::vector<double>> text_dirs(l, std::vector<double>(d));
    for (size_t j = 0; j < l; ++j) {
        const float* row = model.token_embedding.row(text_ids[j]);
        double norm_sq = 0.0;
        for (size_t k = 0; k < d; ++k) norm_sq += static_cast<double>(row[k]) * row[k];
        const double norm = std::max(std::sqrt(norm_sq), 1e-12);
        for (size_t k = 0; k < d; ++k) text_dirs[j][k] = row[k] / norm;
    }

    // Which vision slots align with the text.
    const size_t n_rel =
        std::max<size_t>(1, static_cast<size_t>(std::llround(spec.relevance_fraction *
                                                             static_cast<double>(n))));
    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), size_t{0});
    for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<bool> relevant(n, false);
    for (size_t i = 0; i < std::min(n_rel, n); ++i) relevant[perm[i]] = true;

    const size_t n_irr = n - std::min(n_rel, n);
    const size_t n_clusters = std::max<size_t>(1, n_irr / 4);
    std::vector<std::vector<float>> centers;
    for (size_t c = 0; c < n_clusters; ++c) centers.push_back(draw_direction(rng, d, 1.0));

    const std::vector<bool> signal_dim = alignment_dims(d, spec.noise_seed);

    TokenSequence seq;
    int position = 0;
    for (size_t i = 0; i < n; ++i) {
        std::vector<float> payload(d);
        if (relevant[i]) {
            // Align with the text direction restricted to the signal
            // dimensions, renormalized so alignment_strength keeps its scale.
            const auto& dir = text_dirs[rng.below(l)];
            std::vector<double> proj(d, 0.0);
            double norm_sq = 0.0;
            for (size_t k = 0; k < d; ++k)
                if (signal_dim[k]) {
                    proj[k] = dir[k];
                    norm_sq += dir[k] * dir[k];
                }
            const double norm = std::max(std::sqrt(norm_sq), 1e-12);
            const double per_dim = 1.0 / std::sqrt(static_cast<double>(d));
            for (size_t k = 0; k < d; ++k)
                payload[k] = static_cast<float>(spec.alignment_strength * proj[k] / norm +
                                                rng.normal(0.0, per_dim));
        } else {
            const auto& center = centers[rng.below(n_clusters)];
            const double per_dim = kClusterJitter / std::sqrt(static_cast<double>(d));
            for (size_t k = 0; k < d; ++k)
                payload[k] = static_cast<float>(center[k] + rng.normal(0.0, per_dim));
        }
        seq.entries.push_back(Token::vision(std::move(payload), position++));
    }
    for (size_t j = 0; j < l; ++j)
        seq.entries.push_back(Token::text(text_ids[j], position++));
    return seq;
}

std::vector<TokenSequence> generate_corpus(const ToyVLM& model, const CorpusSpec& spec,
                                           uint64_t seed) {
    spec.validate();
    std::vector<TokenSequence> corpus;
    corpus.reserve(spec.samples);
    for (size_t i = 0; i < spec.samples; ++i) {
        SyntheticTaskSpec sample_spec = spec.base;
        if (spec.alignment_max > spec.alignment_min) {
            Rng pick(mix_seed(seed, 0x414c4e00ull + i));
            sample_spec.alignment_strength = pick.uniform(spec.alignment_min, spec.alignment_max);
        }
        corpus.push_back(generate_sample(model, sample_spec, mix_seed(seed, i)));
    }
    return corpus;
}

TokenSequence generate_turn_prompt(const ToyVLM& model, const SyntheticTaskSpec& spec,
                                   uint64_t seed, int turn_id, int position_start) {
    TokenSequence seq = generate_sample(model, spec, seed);
    int position = position_start;
    for (auto& t : seq.entries) {
        t.position_id = position++;
        t.turn_id = turn_id;
    }
    return seq;
}

}  // namespace asymtok
