#pragma once

// Internal templated forward/backward pass. The float instantiation backs the
// public engine; the double instantiation backs scorer training and the
// finite-difference oracles. Keeping one template avoids the two paths
// drifting apart numerically.

#include <cmath>
#include <limits>
#include <vector>

#include "asymtok/common.hpp"
#include "asymtok/mat.hpp"
#include "asymtok/model.hpp"
#include "asymtok/token.hpp"

namespace asymtok::detail {

inline constexpr double kLnEps = 1e-5;

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T silu(T x) {
    return x * stable_sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
    const T s = stable_sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
struct TapeLayerT {
    MatT<T> h_in;                      // layer input
    std::vector<T> ln1_rstd;           // per row
    MatT<T> x1hat;                     // (x - mu) * rstd, pre-gain
    MatT<T> q, k, v;                   // n x d
    MatT<T> attn_concat;               // n x d, pre-output-projection
    MatT<T> h_mid;                     // post-attention residual
    std::vector<T> ln2_rstd;
    MatT<T> x2hat;
    MatT<T> ffn_pre;                   // n x ffn_dim, pre-activation
};

template <typename T>
struct ForwardResultT {
    std::vector<std::vector<MatT<T>>> attention;  // [layer][head], n x n
    MatT<T> final_hidden;                         // n x d
    std::vector<MatT<T>> keys;                    // per layer, n x d
    std::vector<MatT<T>> values;                  // per layer, n x d
    std::vector<TapeLayerT<T>> tape;              // populated when with_tape
};

// Row-wise layer norm with gain only. Writes (x - mu) * rstd into xhat and
// gain-scaled rows into out.
template <typename T>
void layer_norm(const MatT<T>& x, const std::vector<T>& gain, MatT<T>& xhat, MatT<T>& out,
                std::vector<T>* rstd_out) {
    const size_t n = x.rows, d = x.cols;
    xhat = MatT<T>(n, d);
    out = MatT<T>(n, d);
    if (rstd_out) rstd_out->assign(n, T(0));
    for (size_t i = 0; i < n; ++i) {
        const T* row = x.row(i);
        T mu = T(0);
        for (size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (size_t j = 0; j < d; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        if (rstd_out) (*rstd_out)[i] = rstd;
        T* xh = xhat.row(i);
        T* o = out.row(i);
        for (size_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * rstd;
            o[j] = gain[j] * xh[j];
        }
    }
}

// Backward of layer_norm w.r.t. its input given d(xhat).
template <typename T>
MatT<T> layer_norm_backward(const MatT<T>& dxhat, const MatT<T>& xhat,
                            const std::vector<T>& rstd) {
    const size_t n = dxhat.rows, d = dxhat.cols;
    MatT<T> dx(n, d);
    for (size_t i = 0; i < n; ++i) {
        const T* dxh = dxhat.row(i);
        const T* xh = xhat.row(i);
        T mean_d = T(0), mean_dx = T(0);
        for (size_t j = 0; j < d; ++j) {
            mean_d += dxh[j];
            mean_dx += dxh[j] * xh[j];
        }
        mean_d /= static_cast<T>(d);
        mean_dx /= static_cast<T>(d);
        T* out = dx.row(i);
        for (size_t j = 0; j < d; ++j)
            out[j] = rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
    }
    return dx;
}

// Causal attention + FFN stack over the full sequence. `mask` holds the
// per-position additive logit penalties (shared across layers and heads).
template <typename T>
ForwardResultT<T> forward_core(const ModelWeightsT<T>& model, const MatT<T>& x0,
                               const std::vector<T>& mask, bool with_tape) {
    const ModelConfig& cfg = model.config;
    const size_t n = x0.rows;
    const size_t d = static_cast<size_t>(cfg.hidden_dim);
    const size_t heads = static_cast<size_t>(cfg.num_heads);
    const size_t dh = static_cast<size_t>(cfg.head_dim());
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    if (mask.size() != n) throw InputError("forward: mask length must equal sequence length");
    if (x0.cols != d) throw InputError("forward: embedding width must equal hidden_dim");

    ForwardResultT<T> res;
    res.attention.resize(cfg.num_layers);
    res.keys.resize(cfg.num_layers);
    res.values.resize(cfg.num_layers);
    if (with_tape) res.tape.resize(cfg.num_layers);

    MatT<T> h = x0;
    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        const auto& w = model.layers[layer];
        MatT<T> x1hat, y1;
        std::vector<T> rstd1;
        layer_norm(h, w.ln1_gain, x1hat, y1, with_tape ? &rstd1 : nullptr);

        MatT<T> q = matmul(y1, w.wq);
        MatT<T> k = matmul(y1, w.wk);
        MatT<T> v = matmul(y1, w.wv);

        MatT<T> attn_concat(n, d);
        auto& probs = res.attention[layer];
        probs.assign(heads, MatT<T>(n, n));
        std::vector<T> logits(n);
        for (size_t head = 0; head < heads; ++head) {
            const size_t off = head * dh;
            MatT<T>& p = probs[head];
            for (size_t i = 0; i < n; ++i) {
                const T* qi = q.row(i) + off;
                T max_logit = -std::numeric_limits<T>::infinity();
                for (size_t j = 0; j <= i; ++j) {
                    const T* kj = k.row(j) + off;
                    T acc = T(0);
                    for (size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    acc = acc * inv_sqrt_dh + mask[j];
                    logits[j] = acc;
                    if (acc > max_logit) max_logit = acc;
                }
                T denom = T(0);
                for (size_t j = 0; j <= i; ++j) {
                    const T e = std::exp(logits[j] - max_logit);
                    logits[j] = e;
                    denom += e;
                }
                T* prow = p.row(i);
                T* orow = attn_concat.row(i) + off;
                for (size_t j = 0; j <= i; ++j) {
                    const T pij = logits[j] / denom;
                    prow[j] = pij;
                    const T* vj = v.row(j) + off;
                    for (size_t c = 0; c < dh; ++c) orow[c] += pij * vj[c];
                }
            }
        }

        MatT<T> attn_out = matmul(attn_concat, w.wo);
        MatT<T> h_mid(n, d);
        for (size_t i = 0; i < n * d; ++i) h_mid.data[i] = h.data[i] + attn_out.data[i];

        MatT<T> x2hat, y2;
        std::vector<T> rstd2;
        layer_norm(h_mid, w.ln2_gain, x2hat, y2, with_tape ? &rstd2 : nullptr);

        MatT<T> ffn_pre = matmul(y2, w.w_up);
        MatT<T> act(n, ffn_pre.cols);
        for (size_t i = 0; i < act.data.size(); ++i) act.data[i] = silu(ffn_pre.data[i]);
        MatT<T> ffn_out = matmul(act, w.w_down);

        MatT<T> h_next(n, d);
        for (size_t i = 0; i < n * d; ++i) h_next.data[i] = h_mid.data[i] + ffn_out.data[i];

        if (with_tape) {
            auto& tl = res.tape[layer];
            tl.h_in = std::move(h);
            tl.ln1_rstd = std::move(rstd1);
            tl.x1hat = x1hat;
            tl.q = q;
            tl.k = k;
            tl.v = v;
            tl.attn_concat = std::move(attn_concat);
            tl.h_mid = h_mid;
            tl.ln2_rstd = std::move(rstd2);
            tl.x2hat = x2hat;
            tl.ffn_pre = std::move(ffn_pre);
        }
        res.keys[layer] = std::move(k);
        res.values[layer] = std::move(v);
        h = std::move(h_next);
    }
    res.final_hidden = std::move(h);
    return res;
}

// Reverse pass from a gradient on the final hidden states down to the shared
// mask addends. Model weights are frozen, so only activation gradients flow.
template <typename T>
std::vector<T> backward_to_mask(const ModelWeightsT<T>& model, const ForwardResultT<T>& fwd,
                                const MatT<T>& d_final) {
    const ModelConfig& cfg = model.config;
    const size_t n = d_final.rows;
    const size_t d = static_cast<size_t>(cfg.hidden_dim);
    const size_t heads = static_cast<size_t>(cfg.num_heads);
    const size_t dh = static_cast<size_t>(cfg.head_dim());
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    std::vector<T> d_mask(n, T(0));
    MatT<T> dh_next = d_final;

    for (int layer = cfg.num_layers - 1; layer >= 0; --layer) {
        const auto& w = model.layers[layer];
        const auto& tl = fwd.tape[layer];

        // FFN block: h_next = h_mid + silu(ffn_pre) * W_down
        MatT<T> d_act = matmul_bt(dh_next, w.w_down);
        MatT<T> d_ffn_pre(n, d_act.cols);
        for (size_t i = 0; i < d_act.data.size(); ++i)
            d_ffn_pre.data[i] = d_act.data[i] * silu_grad(tl.ffn_pre.data[i]);
        MatT<T> d_y2 = matmul_bt(d_ffn_pre, w.w_up);
        MatT<T> d_x2hat(n, d);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) d_x2hat(i, j) = d_y2(i, j) * w.ln2_gain[j];
        MatT<T> d_hmid_ln = layer_norm_backward(d_x2hat, tl.x2hat, tl.ln2_rstd);
        MatT<T> d_hmid(n, d);
        for (size_t i = 0; i < n * d; ++i)
            d_hmid.data[i] = dh_next.data[i] + d_hmid_ln.data[i];

        // Attention block: h_mid = h_in + attn_concat * W_o
        MatT<T> d_attn_concat = matmul_bt(d_hmid, w.wo);
        MatT<T> d_q(n, d), d_k(n, d), d_v(n, d);
        for (size_t head = 0; head < heads; ++head) {
            const size_t off = head * dh;
            const MatT<T>& p = fwd.attention[layer][head];
            for (size_t i = 0; i < n; ++i) {
                const T* d_out = d_attn_concat.row(i) + off;
                const T* prow = p.row(i);
                // dP and softmax backward, fused per row.
                std::vector<T> dp(i + 1);
                T inner = T(0);
                for (size_t j = 0; j <= i; ++j) {
                    const T* vj = tl.v.row(j) + off;
                    T acc = T(0);
                    for (size_t c = 0; c < dh; ++c) acc += d_out[c] * vj[c];
                    dp[j] = acc;
                    inner += prow[j] * acc;
                }
                const T* qi = tl.q.row(i) + off;
                for (size_t j = 0; j <= i; ++j) {
                    const T dz = prow[j] * (dp[j] - inner);
                    d_mask[j] += dz;
                    const T* kj = tl.k.row(j) + off;
                    T* dqi = d_q.row(i) + off;
                    T* dkj = d_k.row(j) + off;
                    for (size_t c = 0; c < dh; ++c) {
                        dqi[c] += dz * kj[c] * inv_sqrt_dh;
                        dkj[c] += dz * qi[c] * inv_sqrt_dh;
                    }
                    // dV accumulation: v_j receives p_ij * d_out
                    T* dvj = d_v.row(j) + off;
                    for (size_t c = 0; c < dh; ++c) dvj[c] += prow[j] * d_out[c];
                }
            }
        }
        MatT<T> d_y1 = matmul_bt(d_q, w.wq);
        MatT<T> tmp = matmul_bt(d_k, w.wk);
        for (size_t i = 0; i < n * d; ++i) d_y1.data[i] += tmp.data[i];
        tmp = matmul_bt(d_v, w.wv);
        for (size_t i = 0; i < n * d; ++i) d_y1.data[i] += tmp.data[i];
        MatT<T> d_x1hat(n, d);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) d_x1hat(i, j) = d_y1(i, j) * w.ln1_gain[j];
        MatT<T> d_hin_ln = layer_norm_backward(d_x1hat, tl.x1hat, tl.ln1_rstd);
        MatT<T> d_hin(n, d);
        for (size_t i = 0; i < n * d; ++i)
            d_hin.data[i] = d_hmid.data[i] + d_hin_ln.data[i];
        dh_next = std::move(d_hin);
    }
    return d_mask;
}

// Shared embedding for any precision.
template <typename T>
MatT<T> embed_core(const ModelWeightsT<T>& model, const TokenSequence& seq) {
    const ModelConfig& cfg = model.config;
    const size_t d = static_cast<size_t>(cfg.hidden_dim);
    MatT<T> out(seq.size(), d);
    for (size_t i = 0; i < seq.entries.size(); ++i) {
        const Token& t = seq.entries[i];
        if (t.position_id < 0 || t.position_id >= cfg.max_positions)
            throw InputError("embed: position_id out of range");
        const T* pos = model.position_embedding.row(t.position_id);
        T* row = out.row(i);
        if (t.modality == Modality::Vision) {
            if (t.embedding.size() != d)
                throw InputError("embed: vision payload dimension mismatch");
            for (size_t j = 0; j < d; ++j) row[j] = static_cast<T>(t.embedding[j]) + pos[j];
        } else {
            if (t.token_id < 0 || t.token_id >= cfg.vocab_size)
                throw InputError("embed: token id out of range");
            const T* emb = model.token_embedding.row(t.token_id);
            for (size_t j = 0; j < d; ++j) row[j] = emb[j] + pos[j];
        }
    }
    return out;
}

}  // namespace asymtok::detail
