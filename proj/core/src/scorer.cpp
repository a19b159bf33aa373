#include "asymtok/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "asymtok/rng.hpp"
#include "forward_impl.hpp"

namespace asymtok {

namespace {

using json = nlohmann::ordered_json;

MatD normalize_rows(const MatD& m) {
    MatD out(m.rows, m.cols);
    for (size_t i = 0; i < m.rows; ++i) {
        const double* row = m.row(i);
        double norm_sq = 0.0;
        for (size_t j = 0; j < m.cols; ++j) norm_sq += row[j] * row[j];
        const double norm = std::sqrt(norm_sq);
        if (norm < 1e-12) throw InputError("score_tokens: zero-norm row, normalization undefined");
        double* o = out.row(i);
        for (size_t j = 0; j < m.cols; ++j) o[j] = row[j] / norm;
    }
    return out;
}

// Scores plus the argmax text index per vision token (needed for gradients).
struct ScoredDetail {
    std::vector<double> values;
    std::vector<size_t> argmax_text;
    MatD vhat, that;
};

ScoredDetail score_detail(const std::vector<double>& w, const MatD& vision_embs,
                          const MatD& text_embs) {
    if (vision_embs.rows < 1) throw InputError("score_tokens: need at least one vision token");
    if (text_embs.rows < 1) throw InputError("score_tokens: need at least one text token");
    if (vision_embs.cols != text_embs.cols)
        throw InputError("score_tokens: vision/text dimension mismatch");
    if (w.size() != vision_embs.cols) throw InputError("score_tokens: weight dimension mismatch");
    ScoredDetail out;
    out.vhat = normalize_rows(vision_embs);
    out.that = normalize_rows(text_embs);
    const size_t n = vision_embs.rows, l = text_embs.rows, d = vision_embs.cols;
    out.values.resize(n);
    out.argmax_text.resize(n);
    std::vector<double> weighted(d);
    for (size_t i = 0; i < n; ++i) {
        const double* v = out.vhat.row(i);
        for (size_t k = 0; k < d; ++k) weighted[k] = v[k] * w[k];
        double best = -std::numeric_limits<double>::infinity();
        size_t best_j = 0;
        for (size_t j = 0; j < l; ++j) {
            const double* t = out.that.row(j);
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) acc += weighted[k] * t[k];
            if (acc > best) {  // strict: ties keep the lower text index
                best = acc;
                best_j = j;
            }
        }
        out.values[i] = best;
        out.argmax_text[i] = best_j;
    }
    return out;
}

}  // namespace

ImportanceScores score_tokens(const std::vector<double>& w, const MatD& vision_embs,
                              const MatD& text_embs) {
    ScoredDetail detail = score_detail(w, vision_embs, text_embs);
    return ImportanceScores{std::move(detail.values), ScoreSource::Learned};
}

ImportanceScores cosine_scores(const MatD& vision_embs, const MatD& text_embs) {
    const std::vector<double> ones(vision_embs.cols, 1.0);
    ImportanceScores s = score_tokens(ones, vision_embs, text_embs);
    s.provenance = ScoreSource::Cosine;
    return s;
}

ImportanceScores spiral_scores(size_t grid_height, size_t grid_width) {
    if (grid_height < 1 || grid_width < 1) throw InputError("spiral_scores: empty grid");
    const size_t n = grid_height * grid_width;
    const double cr = (static_cast<double>(grid_height) - 1.0) / 2.0;
    const double cc = (static_cast<double>(grid_width) - 1.0) / 2.0;
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    auto dist_sq = [&](size_t idx) {
        const double dr = static_cast<double>(idx / grid_width) - cr;
        const double dc = static_cast<double>(idx % grid_width) - cc;
        return dr * dr + dc * dc;
    };
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const double da = dist_sq(a), db = dist_sq(b);
        if (da != db) return da < db;
        return a < b;  // row-major tie-break keeps the ordering deterministic
    });
    ImportanceScores s;
    s.provenance = ScoreSource::Spiral;
    s.values.assign(n, 0.0);
    for (size_t rank = 0; rank < n; ++rank)
        s.values[order[rank]] = static_cast<double>(n - rank) / static_cast<double>(n);
    return s;
}

namespace {

// floor(n * r) with a tolerance so ratios like 2/3 land on the intended
// integer, clamped to >= 1.
size_t keep_count(size_t n, double r) {
    if (!(r > 0.0 && r <= 1.0)) throw InputError("keep ratio must lie in (0, 1]");
    const auto k = static_cast<size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
    return std::max<size_t>(1, std::min(n, k));
}

}  // namespace

double compute_threshold(const ImportanceScores& scores, double keep_ratio) {
    const size_t n = scores.size();
    if (n < 1) throw InputError("compute_threshold: empty scores");
    const size_t k = keep_count(n, keep_ratio);
    std::vector<double> sorted = scores.values;
    std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end(),
                     std::greater<double>());
    return sorted[k - 1];
}

std::vector<double> soft_mask_values(const ImportanceScores& scores, double theta, double c,
                                     double tau) {
    if (!(tau > 0.0)) throw InputError("soft_mask: tau must be positive");
    if (c < 0.0) throw InputError("soft_mask: mask strength must be non-negative");
    std::vector<double> out(scores.size());
    for (size_t i = 0; i < scores.size(); ++i)
        out[i] = -c * detail::stable_sigmoid((theta - scores.values[i]) / tau);
    return out;
}

MaskAddends soft_mask(const TokenSequence& seq, const ImportanceScores& scores, double theta,
                      double c, double tau) {
    if (scores.size() != seq.vision_count())
        throw InputError("soft_mask: scores length must equal vision token count");
    const std::vector<double> values = soft_mask_values(scores, theta, c, tau);
    MaskAddends mask = MaskAddends::none(seq.size());
    size_t vis = 0;
    for (size_t i = 0; i < seq.entries.size(); ++i) {
        if (seq.entries[i].modality != Modality::Vision) continue;
        mask.addends[i] = static_cast<float>(values[vis++]);
    }
    return mask;
}

std::vector<size_t> select_top_k(const ImportanceScores& scores, double keep_ratio) {
    const size_t n = scores.size();
    if (n < 1) throw InputError("select_top_k: empty scores");
    const size_t k = keep_count(n, keep_ratio);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        if (scores.values[a] != scores.values[b]) return scores.values[a] > scores.values[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

double mse_rows(const MatD& a, const MatD& b) {
    if (!a.same_shape(b)) throw InputError("mse_rows: shape mismatch");
    if (a.rows == 0) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double diff = a.data[i] - b.data[i];
        total += diff * diff;
    }
    return total / static_cast<double>(a.rows);
}

double training_loss(const MatD& h_masked, const MatD& h_baseline, const std::vector<double>& w,
                     double lambda) {
    double reg = 0.0;
    for (double x : w) reg += (x - 1.0) * (x - 1.0);
    return mse_rows(h_masked, h_baseline) + lambda * reg;
}

double importance_gap(const ImportanceScores& scores) {
    const size_t n = scores.size();
    if (n < 1) throw InputError("importance_gap: empty scores");
    const size_t k = std::max<size_t>(1, n / 4);
    std::vector<double> sorted = scores.values;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    return sorted[k - 1] - sorted[n - k];
}

std::pair<MatD, MatD> scorer_inputs(const ToyVLM& model, const TokenSequence& seq) {
    const size_t d = model.config.hidden_dim;
    const size_t n = seq.vision_count();
    const size_t l = seq.text_count();
    MatD vision(n, d), text(l, d);
    size_t vi = 0, ti = 0;
    for (const Token& t : seq.entries) {
        if (t.modality == Modality::Vision) {
            if (t.embedding.size() != d) throw InputError("scorer_inputs: payload dimension mismatch");
            double* row = vision.row(vi++);
            for (size_t j = 0; j < d; ++j) row[j] = t.embedding[j];
        } else {
            if (t.token_id < 0 || t.token_id >= model.config.vocab_size)
                throw InputError("scorer_inputs: token id out of range");
            const float* emb = model.token_embedding.row(t.token_id);
            double* row = text.row(ti++);
            for (size_t j = 0; j < d; ++j) row[j] = emb[j];
        }
    }
    return {std::move(vision), std::move(text)};
}

ImportanceScores score_sequence(const ToyVLM& model, const std::vector<double>& w,
                                const TokenSequence& seq) {
    auto [vision, text] = scorer_inputs(model, seq);
    return score_tokens(w, vision, text);
}

ScorerState ScorerState::init(size_t dim, ScorerHyperparams hyper) {
    ScorerState s;
    s.w.assign(dim, 1.0);
    s.hyper = hyper;
    s.adam_m.assign(dim, 0.0);
    s.adam_v.assign(dim, 0.0);
    return s;
}

namespace {

// Everything about one sample that does not depend on w.
struct SampleCtx {
    const TokenSequence* seq = nullptr;
    MatD x0;                        // double-precision embeddings
    MatD vhat, that;                // normalized scorer inputs
    std::vector<size_t> vision_pos; // sequence positions of vision tokens
    std::vector<size_t> text_pos;
    MatD h_base_text;               // baseline text hidden states
};

MatD rows_at(const MatD& m, const std::vector<size_t>& idx) {
    MatD out(idx.size(), m.cols);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(m.row(idx[i]), m.row(idx[i]) + m.cols, out.row(i));
    return out;
}

SampleCtx make_ctx(const ToyVLMDouble& model, const TokenSequence& seq) {
    if (seq.vision_count() < 1 || seq.text_count() < 1)
        throw InputError("scorer training needs at least one vision and one text token");
    SampleCtx ctx;
    ctx.seq = &seq;
    ctx.x0 = detail::embed_core(model, seq);
    const size_t d = model.config.hidden_dim;
    MatD vision(seq.vision_count(), d), text(seq.text_count(), d);
    size_t vi = 0, ti = 0;
    for (size_t i = 0; i < seq.entries.size(); ++i) {
        const Token& t = seq.entries[i];
        if (t.modality == Modality::Vision) {
            ctx.vision_pos.push_back(i);
            double* row = vision.row(vi++);
            for (size_t j = 0; j < d; ++j) row[j] = t.embedding[j];
        } else {
            ctx.text_pos.push_back(i);
            const double* emb = model.token_embedding.row(t.token_id);
            std::copy(emb, emb + d, text.row(ti++));
        }
    }
    ctx.vhat = normalize_rows(vision);
    ctx.that = normalize_rows(text);
    const std::vector<double> zero_mask(seq.size(), 0.0);
    auto base = detail::forward_core(model, ctx.x0, zero_mask, /*with_tape=*/false);
    ctx.h_base_text = rows_at(base.final_hidden, ctx.text_pos);
    return ctx;
}

struct StepResult {
    double loss = 0.0;
    std::vector<double> grad;
};

// One masked pass at keep ratio r: loss and, when requested, the exact
// gradient through the sigmoid mask and Eq-1 scoring (theta detached).
StepResult step_eval(const ToyVLMDouble& model, const SampleCtx& ctx,
                     const std::vector<double>& w, const ScorerHyperparams& hyper, double r,
                     bool want_grad, const double* theta_override = nullptr) {
    const size_t n_vis = ctx.vision_pos.size();
    const size_t n_text = ctx.text_pos.size();
    const size_t n = ctx.seq->size();
    const size_t d = w.size();

    // Scores with argmax bookkeeping (recomputed from cached normalized rows).
    std::vector<double> scores(n_vis);
    std::vector<size_t> argmax_text(n_vis);
    std::vector<double> weighted(d);
    for (size_t i = 0; i < n_vis; ++i) {
        const double* v = ctx.vhat.row(i);
        for (size_t k = 0; k < d; ++k) weighted[k] = v[k] * w[k];
        double best = -std::numeric_limits<double>::infinity();
        size_t best_j = 0;
        for (size_t j = 0; j < ctx.that.rows; ++j) {
            const double* t = ctx.that.row(j);
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) acc += weighted[k] * t[k];
            if (acc > best) {
                best = acc;
                best_j = j;
            }
        }
        scores[i] = best;
        argmax_text[i] = best_j;
    }
    ImportanceScores s{scores, ScoreSource::Learned};
    const double theta = theta_override ? *theta_override : compute_threshold(s, r);

    std::vector<double> mask(n, 0.0);
    std::vector<double> sig(n_vis);
    for (size_t i = 0; i < n_vis; ++i) {
        sig[i] = detail::stable_sigmoid((theta - scores[i]) / hyper.transition);
        mask[ctx.vision_pos[i]] = -hyper.mask_strength * sig[i];
    }

    auto fwd = detail::forward_core(model, ctx.x0, mask, want_grad);
    MatD h_text = rows_at(fwd.final_hidden, ctx.text_pos);

    StepResult res;
    res.loss = training_loss(h_text, ctx.h_base_text, w, hyper.regularizer);
    if (!want_grad) return res;

    MatD d_final(n, model.config.hidden_dim);
    const double scale = 2.0 / static_cast<double>(n_text);
    for (size_t i = 0; i < n_text; ++i) {
        double* row = d_final.row(ctx.text_pos[i]);
        const double* hm = h_text.row(i);
        const double* hb = ctx.h_base_text.row(i);
        for (size_t j = 0; j < d_final.cols; ++j) row[j] = scale * (hm[j] - hb[j]);
    }
    const std::vector<double> d_mask = detail::backward_to_mask(model, fwd, d_final);

    res.grad.assign(d, 0.0);
    for (size_t i = 0; i < n_vis; ++i) {
        // dm/ds = (C / tau) * sigmoid' with theta held constant.
        const double ds = d_mask[ctx.vision_pos[i]] * (hyper.mask_strength / hyper.transition) *
                          sig[i] * (1.0 - sig[i]);
        const double* v = ctx.vhat.row(i);
        const double* t = ctx.that.row(argmax_text[i]);
        for (size_t k = 0; k < d; ++k) res.grad[k] += ds * v[k] * t[k];
    }
    for (size_t k = 0; k < d; ++k) res.grad[k] += 2.0 * hyper.regularizer * (w[k] - 1.0);
    return res;
}

}  // namespace

double scorer_loss(const ToyVLMDouble& model, const TokenSequence& seq,
                   const std::vector<double>& w, const ScorerHyperparams& hyper,
                   double keep_ratio, const double* theta_override) {
    const SampleCtx ctx = make_ctx(model, seq);
    return step_eval(model, ctx, w, hyper, keep_ratio, /*want_grad=*/false, theta_override).loss;
}

std::vector<double> loss_gradient(const ToyVLM& model, const TokenSequence& seq,
                                  const ScorerState& state, double keep_ratio) {
    const ToyVLMDouble model_d = to_double(model);
    const SampleCtx ctx = make_ctx(model_d, seq);
    return step_eval(model_d, ctx, state.w, state.hyper, keep_ratio, /*want_grad=*/true).grad;
}

ScorerState train_scorer(const ToyVLM& model, const std::vector<TokenSequence>& corpus,
                         ScorerState state) {
    if (corpus.empty()) throw InputError("train_scorer: empty corpus");
    if (state.w.size() != static_cast<size_t>(model.config.hidden_dim))
        throw InputError("train_scorer: scorer dimension must match hidden_dim");
    const ToyVLMDouble model_d = to_double(model);
    std::vector<SampleCtx> ctxs;
    ctxs.reserve(corpus.size());
    for (const auto& seq : corpus) ctxs.push_back(make_ctx(model_d, seq));

    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    const size_t d = state.w.size();
    Rng rng(state.hyper.train_seed);
    const size_t n_ratios = std::size(kTrainKeepRatios);

    for (int epoch = 0; epoch < state.hyper.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (const auto& ctx : ctxs) {
            const double r = kTrainKeepRatios[rng.below(n_ratios)];
            StepResult step = step_eval(model_d, ctx, state.w, state.hyper, r, /*want_grad=*/true);
            loss_sum += step.loss;
            state.adam_step += 1;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.adam_step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.adam_step));
            for (size_t k = 0; k < d; ++k) {
                const double g = step.grad[k];
                state.adam_m[k] = beta1 * state.adam_m[k] + (1.0 - beta1) * g;
                state.adam_v[k] = beta2 * state.adam_v[k] + (1.0 - beta2) * g * g;
                const double mhat = state.adam_m[k] / bc1;
                const double vhat = state.adam_v[k] / bc2;
                state.w[k] -= state.hyper.learning_rate * mhat / (std::sqrt(vhat) + adam_eps);
                state.w[k] = std::clamp(state.w[k], 0.0, 3.0);
            }
        }
        state.epoch_loss.push_back(loss_sum / static_cast<double>(ctxs.size()));
    }
    state.corpus_fingerprint = corpus_fingerprint(corpus);
    return state;
}

namespace {

uint64_t fnv_bytes(uint64_t h, const void* data, size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

uint64_t corpus_fingerprint(const std::vector<TokenSequence>& corpus) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& seq : corpus) {
        for (const auto& t : seq.entries) {
            const int32_t header[4] = {static_cast<int32_t>(t.modality), t.token_id, t.position_id,
                                       t.turn_id};
            h = fnv_bytes(h, header, sizeof(header));
            if (!t.embedding.empty())
                h = fnv_bytes(h, t.embedding.data(), t.embedding.size() * sizeof(float));
        }
    }
    return h;
}

void save_scorer(const ScorerState& state, const std::string& path) {
    json j;
    j["schema_version"] = 1;
    j["kind"] = "asymtok-scorer";
    j["hidden_dim"] = state.w.size();
    j["w"] = state.w;
    j["hyperparams"] = {{"mask_strength", state.hyper.mask_strength},
                        {"transition", state.hyper.transition},
                        {"regularizer", state.hyper.regularizer},
                        {"learning_rate", state.hyper.learning_rate},
                        {"epochs", state.hyper.epochs},
                        {"train_seed", state.hyper.train_seed}};
    j["adam"] = {{"m", state.adam_m}, {"v", state.adam_v}, {"step", state.adam_step}};
    j["epoch_loss"] = state.epoch_loss;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(state.corpus_fingerprint));
    j["corpus_fingerprint"] = buf;
    std::ofstream out(path);
    if (!out) throw IoError("save_scorer: cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("save_scorer: write failed for " + path);
}

ScorerState load_scorer(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_scorer: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw IoError("load_scorer: parse error in " + path + ": " + e.what());
    }
    if (j.value("kind", "") != "asymtok-scorer") throw IoError("load_scorer: not a scorer file");
    ScorerState s;
    s.w = j.at("w").get<std::vector<double>>();
    const auto& hp = j.at("hyperparams");
    s.hyper.mask_strength = hp.at("mask_strength").get<double>();
    s.hyper.transition = hp.at("transition").get<double>();
    s.hyper.regularizer = hp.at("regularizer").get<double>();
    s.hyper.learning_rate = hp.at("learning_rate").get<double>();
    s.hyper.epochs = hp.at("epochs").get<int>();
    s.hyper.train_seed = hp.at("train_seed").get<uint64_t>();
    s.adam_m = j.at("adam").at("m").get<std::vector<double>>();
    s.adam_v = j.at("adam").at("v").get<std::vector<double>>();
    s.adam_step = j.at("adam").at("step").get<int64_t>();
    s.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    s.corpus_fingerprint =
        std::stoull(j.at("corpus_fingerprint").get<std::string>(), nullptr, 16);
    return s;
}

}  // namespace asymtok
