#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "asymtok/mat.hpp"
#include "asymtok/model.hpp"
#include "asymtok/token.hpp"

namespace asymtok {

enum class ScoreSource : uint8_t { Learned = 0, Cosine = 1, Spiral = 2 };

struct ImportanceScores {
    std::vector<double> values;  // one per vision token, sequence order
    ScoreSource provenance = ScoreSource::Cosine;

    size_t size() const { return values.size(); }
};

struct ScorerHyperparams {
    double mask_strength = 5.0;  // C
    double transition = 1.0;     // tau
    double regularizer = 0.001;  // lambda
    double learning_rate = 1e-3;
    int epochs = 3;
    uint64_t train_seed = 0x5ceed;
};

// Learnable per-dimension weights plus the optimizer state that travels with
// them. w starts at all-ones and stays inside [0, 3] after every update.
struct ScorerState {
    std::vector<double> w;
    ScorerHyperparams hyper;
    std::vector<double> adam_m, adam_v;
    int64_t adam_step = 0;
    std::vector<double> epoch_loss;  // mean training loss per epoch
    uint64_t corpus_fingerprint = 0;

    static ScorerState init(size_t dim, ScorerHyperparams hyper = {});
};

// Keep ratios sampled (uniformly, per step) while training the scorer.
inline constexpr double kTrainKeepRatios[] = {0.5, 0.65, 0.75};

// Weighted max-cosine importance: rows of both inputs are l2-normalized, the
// weighted similarity matrix is S = (Vhat .* w) That^T and each vision token
// scores as its best alignment to any text token.
ImportanceScores score_tokens(const std::vector<double>& w, const MatD& vision_embs,
                              const MatD& text_embs);

// score_tokens with w = 1: plain max cosine similarity.
ImportanceScores cosine_scores(const MatD& vision_embs, const MatD& text_embs);

// Position-only baseline: cells ranked from the grid center outward, border
// (and corners in particular) last. Scores are strictly decreasing with rank.
ImportanceScores spiral_scores(size_t grid_height, size_t grid_width);

// Score of the floor(N*r)-th highest token (floor clamped to >= 1). Treated
// as a constant with respect to gradients.
double compute_threshold(const ImportanceScores& scores, double keep_ratio);

// Raw penalty values -C * sigmoid((theta - s_i) / tau), one per vision token.
std::vector<double> soft_mask_values(const ImportanceScores& scores, double theta, double c,
                                     double tau);

// Penalties placed at the sequence's vision positions; text positions get 0.
MaskAddends soft_mask(const TokenSequence& seq, const ImportanceScores& scores, double theta,
                      double c, double tau);

// Indices of the max(1, floor(N*r)) highest-scoring tokens, ties broken by
// lower index, result sorted ascending.
std::vector<size_t> select_top_k(const ImportanceScores& scores, double keep_ratio);

// Mean squared difference over rows plus the lambda * ||w - 1||^2 anchor.
double training_loss(const MatD& h_masked, const MatD& h_baseline, const std::vector<double>& w,
                     double lambda);

double mse_rows(const MatD& a, const MatD& b);

// k-th highest minus k-th lowest score, k = max(1, floor(N/4)).
double importance_gap(const ImportanceScores& scores);

// Scorer inputs per the scoring contract: vision payloads and text embedding
// rows straight from the embedding table, no position terms.
std::pair<MatD, MatD> scorer_inputs(const ToyVLM& model, const TokenSequence& seq);

ImportanceScores score_sequence(const ToyVLM& model, const std::vector<double>& w,
                                const TokenSequence& seq);

// Loss of one masked-vs-baseline pass at the given keep ratio, evaluated in
// float64. This is the function loss_gradient differentiates. The threshold
// is detached from gradients, so finite-difference checks must freeze it at
// the base point via theta_override.
double scorer_loss(const ToyVLMDouble& model, const TokenSequence& seq,
                   const std::vector<double>& w, const ScorerHyperparams& hyper,
                   double keep_ratio, const double* theta_override = nullptr);

// Exact reverse-mode gradient of scorer_loss with respect to w (threshold
// detached). Must agree with a float64 central-finite-difference oracle.
std::vector<double> loss_gradient(const ToyVLM& model, const TokenSequence& seq,
                                  const ScorerState& state, double keep_ratio);

// Trains w on the corpus: per sample, one baseline and one soft-masked pass,
// Eq-style output-discrepancy loss, one Adam step, then clamp to [0, 3].
ScorerState train_scorer(const ToyVLM& model, const std::vector<TokenSequence>& corpus,
                         ScorerState state);

uint64_t corpus_fingerprint(const std::vector<TokenSequence>& corpus);

// JSON container with hyperparameters and corpus fingerprint; round-trips w
// exactly.
void save_scorer(const ScorerState& state, const std::string& path);
ScorerState load_scorer(const std::string& path);

}  // namespace asymtok
