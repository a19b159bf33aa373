#include "asymtok/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "asymtok/rng.hpp"
#include "forward_impl.hpp"

namespace asymtok {

void ModelConfig::validate() const {
    if (num_layers < 1 || num_heads < 1 || hidden_dim < 1 || ffn_dim < 1 || vocab_size < 1 ||
        max_positions < 1)
        throw ConfigError("ModelConfig: all counts must be >= 1");
    if (hidden_dim % num_heads != 0)
        throw ConfigError("ModelConfig: hidden_dim must be divisible by num_heads");
    if (!(init_std > 0.0f)) throw ConfigError("ModelConfig: init_std must be positive");
}

namespace {

Mat random_matrix(Rng& rng, size_t rows, size_t cols, float std) {
    Mat m(rows, cols);
    for (auto& x : m.data) x = static_cast<float>(rng.normal(0.0, std));
    return m;
}

}  // namespace

ToyVLM init_model(const ModelConfig& config) {
    config.validate();
    ToyVLM model;
    model.config = config;
    Rng rng(config.init_seed);
    const size_t d = config.hidden_dim;
    const size_t m = config.ffn_dim;
    // Draw order is fixed; it is part of the (config, seed) -> weights contract.
    model.token_embedding = random_matrix(rng, config.vocab_size, d, config.init_std);
    model.position_embedding = random_matrix(rng, config.max_positions, d, config.init_std);
    model.layers.resize(config.num_layers);
    for (auto& layer : model.layers) {
        layer.wq = random_matrix(rng, d, d, config.init_std);
        layer.wk = random_matrix(rng, d, d, config.init_std);
        layer.wv = random_matrix(rng, d, d, config.init_std);
        layer.wo = random_matrix(rng, d, d, config.init_std);
        layer.w_up = random_matrix(rng, d, m, config.init_std);
        layer.w_down = random_matrix(rng, m, d, config.init_std);
        layer.ln1_gain.assign(d, 1.0f);
        layer.ln2_gain.assign(d, 1.0f);
    }
    return model;
}

ToyVLMDouble to_double(const ToyVLM& model) {
    ToyVLMDouble out;
    out.config = model.config;
    out.token_embedding = mat_cast<float, double>(model.token_embedding);
    out.position_embedding = mat_cast<float, double>(model.position_embedding);
    out.layers.resize(model.layers.size());
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const auto& src = model.layers[i];
        auto& dst = out.layers[i];
        dst.wq = mat_cast<float, double>(src.wq);
        dst.wk = mat_cast<float, double>(src.wk);
        dst.wv = mat_cast<float, double>(src.wv);
        dst.wo = mat_cast<float, double>(src.wo);
        dst.w_up = mat_cast<float, double>(src.w_up);
        dst.w_down = mat_cast<float, double>(src.w_down);
        dst.ln1_gain.assign(src.ln1_gain.begin(), src.ln1_gain.end());
        dst.ln2_gain.assign(src.ln2_gain.begin(), src.ln2_gain.end());
    }
    return out;
}

namespace {

uint64_t fnv1a(uint64_t h, const void* data, size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t hash_mat(uint64_t h, const Mat& m) {
    return fnv1a(h, m.data.data(), m.data.size() * sizeof(float));
}

}  // namespace

uint64_t model_checksum(const ToyVLM& model) {
    uint64_t h = 0xcbf29ce484222325ull;
    h = hash_mat(h, model.token_embedding);
    h = hash_mat(h, model.position_embedding);
    for (const auto& layer : model.layers) {
        h = hash_mat(h, layer.wq);
        h = hash_mat(h, layer.wk);
        h = hash_mat(h, layer.wv);
        h = hash_mat(h, layer.wo);
        h = hash_mat(h, layer.w_up);
        h = hash_mat(h, layer.w_down);
        h = fnv1a(h, layer.ln1_gain.data(), layer.ln1_gain.size() * sizeof(float));
        h = fnv1a(h, layer.ln2_gain.data(), layer.ln2_gain.size() * sizeof(float));
    }
    return h;
}

namespace {

constexpr uint32_t kModelMagic = 0x4d565441;  // "ATVM"
constexpr uint32_t kModelVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void write_floats(std::ofstream& out, const float* data, size_t count) {
    out.write(reinterpret_cast<const char*>(data), count * sizeof(float));
}

void read_floats(std::ifstream& in, float* data, size_t count) {
    in.read(reinterpret_cast<char*>(data), count * sizeof(float));
}

}  // namespace

void save_model(const ToyVLM& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_model: cannot open " + path);
    write_pod(out, kModelMagic);
    write_pod(out, kModelVersion);
    const ModelConfig& c = model.config;
    write_pod(out, static_cast<int32_t>(c.num_layers));
    write_pod(out, static_cast<int32_t>(c.num_heads));
    write_pod(out, static_cast<int32_t>(c.hidden_dim));
    write_pod(out, static_cast<int32_t>(c.ffn_dim));
    write_pod(out, static_cast<int32_t>(c.vocab_size));
    write_pod(out, static_cast<int32_t>(c.max_positions));
    write_pod(out, c.init_seed);
    write_pod(out, c.init_std);
    write_floats(out, model.token_embedding.data.data(), model.token_embedding.data.size());
    write_floats(out, model.position_embedding.data.data(), model.position_embedding.data.size());
    for (const auto& layer : model.layers) {
        write_floats(out, layer.wq.data.data(), layer.wq.data.size());
        write_floats(out, layer.wk.data.data(), layer.wk.data.size());
        write_floats(out, layer.wv.data.data(), layer.wv.data.size());
        write_floats(out, layer.wo.data.data(), layer.wo.data.size());
        write_floats(out, layer.w_up.data.data(), layer.w_up.data.size());
        write_floats(out, layer.w_down.data.data(), layer.w_down.data.size());
        write_floats(out, layer.ln1_gain.data(), layer.ln1_gain.size());
        write_floats(out, layer.ln2_gain.data(), layer.ln2_gain.size());
    }
    if (!out) throw IoError("save_model: write failed for " + path);
}

ToyVLM load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_model: cannot open " + path);
    if (read_pod<uint32_t>(in) != kModelMagic) throw IoError("load_model: bad magic");
    if (read_pod<uint32_t>(in) != kModelVersion) throw IoError("load_model: unsupported version");
    ModelConfig c;
    c.num_layers = read_pod<int32_t>(in);
    c.num_heads = read_pod<int32_t>(in);
    c.hidden_dim = read_pod<int32_t>(in);
    c.ffn_dim = read_pod<int32_t>(in);
    c.vocab_size = read_pod<int32_t>(in);
    c.max_positions = read_pod<int32_t>(in);
    c.init_seed = read_pod<uint64_t>(in);
    c.init_std = read_pod<float>(in);
    c.validate();
    ToyVLM model;
    model.config = c;
    const size_t d = c.hidden_dim, m = c.ffn_dim;
    model.token_embedding = Mat(c.vocab_size, d);
    model.position_embedding = Mat(c.max_positions, d);
    read_floats(in, model.token_embedding.data.data(), model.token_embedding.data.size());
    read_floats(in, model.position_embedding.data.data(), model.position_embedding.data.size());
    model.layers.resize(c.num_layers);
    for (auto& layer : model.layers) {
        layer.wq = Mat(d, d);
        layer.wk = Mat(d, d);
        layer.wv = Mat(d, d);
        layer.wo = Mat(d, d);
        layer.w_up = Mat(d, m);
        layer.w_down = Mat(m, d);
        layer.ln1_gain.resize(d);
        layer.ln2_gain.resize(d);
        read_floats(in, layer.wq.data.data(), layer.wq.data.size());
        read_floats(in, layer.wk.data.data(), layer.wk.data.size());
        read_floats(in, layer.wv.data.data(), layer.wv.data.size());
        read_floats(in, layer.wo.data.data(), layer.wo.data.size());
        read_floats(in, layer.w_up.data.data(), layer.w_up.data.size());
        read_floats(in, layer.w_down.data.data(), layer.w_down.data.size());
        read_floats(in, layer.ln1_gain.data(), layer.ln1_gain.size());
        read_floats(in, layer.ln2_gain.data(), layer.ln2_gain.size());
    }
    if (!in) throw IoError("load_model: truncated file " + path);
    return model;
}

MaskAddends MaskAddends::hard_mask_complement(const TokenSequence& seq,
                                              const std::vector<size_t>& keep_vision) {
    std::vector<bool> keep_flag;
    keep_flag.assign(seq.vision_count(), false);
    for (size_t k : keep_vision) {
        if (k >= keep_flag.size()) throw InputError("hard_mask_complement: keep index out of range");
        keep_flag[k] = true;
    }
    MaskAddends mask = MaskAddends::none(seq.size());
    size_t vis = 0;
    for (size_t i = 0; i < seq.entries.size(); ++i) {
        if (seq.entries[i].modality != Modality::Vision) continue;
        if (!keep_flag[vis]) mask.addends[i] = kHardMaskPenalty;
        ++vis;
    }
    return mask;
}

MaskAddends MaskAddends::hard_mask(const TokenSequence& seq,
                                   const std::vector<size_t>& masked_vision) {
    const size_t n_vis = seq.vision_count();
    MaskAddends mask = MaskAddends::none(seq.size());
    std::vector<size_t> vision_pos;
    for (size_t i = 0; i < seq.entries.size(); ++i)
        if (seq.entries[i].modality == Modality::Vision) vision_pos.push_back(i);
    for (size_t k : masked_vision) {
        if (k >= n_vis) throw InputError("hard_mask: vision index out of range");
        mask.addends[vision_pos[k]] = kHardMaskPenalty;
    }
    return mask;
}

void MaskAddends::validate(size_t expect_len) const {
    if (addends.size() != expect_len)
        throw InputError("MaskAddends: length mismatch with sequence");
    for (float a : addends) {
        if (!(a <= 0.0f)) throw InputError("MaskAddends: entries must be <= 0 and finite");
        if (a < kHardMaskPenalty) throw InputError("MaskAddends: entry below hard-mask surrogate");
    }
}

Mat embed(const ToyVLM& model, const TokenSequence& seq) {
    return detail::embed_core(model, seq);
}

namespace {

ForwardTrace to_trace(detail::ForwardResultT<float>&& res) {
    ForwardTrace trace;
    trace.attention = std::move(res.attention);
    trace.final_hidden = std::move(res.final_hidden);
    trace.keys = std::move(res.keys);
    trace.values = std::move(res.values);
    return trace;
}

}  // namespace

ForwardTrace forward_from_embeddings(const ToyVLM& model, const Mat& embeddings,
                                     const MaskAddends& mask) {
    mask.validate(embeddings.rows);
    return to_trace(detail::forward_core(model, embeddings, mask.addends, /*with_tape=*/false));
}

ForwardTrace forward_prefill_trace(const ToyVLM& model, const TokenSequence& seq,
                                   const MaskAddends& mask) {
    seq.validate();
    return forward_from_embeddings(model, embed(model, seq), mask);
}

std::pair<ForwardTrace, KVCache> forward_prefill(const ToyVLM& model, const TokenSequence& seq,
                                                 const MaskAddends& mask) {
    ForwardTrace trace = forward_prefill_trace(model, seq, mask);
    const int layers = model.config.num_layers;
    const size_t n = seq.size();
    KVCache cache(layers, model.config.hidden_dim);
    std::vector<std::vector<float>> k_rows(layers), v_rows(layers);
    for (size_t i = 0; i < n; ++i) {
        const Token& t = seq.entries[i];
        SlotMeta meta;
        meta.modality = t.modality;
        meta.phase = t.phase;
        meta.turn_id = t.turn_id;
        meta.position_id = t.position_id;
        meta.token_id = t.modality == Modality::Text ? t.token_id : -1;
        for (int l = 0; l < layers; ++l) {
            k_rows[l].assign(trace.keys[l].row(i), trace.keys[l].row(i) + trace.keys[l].cols);
            v_rows[l].assign(trace.values[l].row(i), trace.values[l].row(i) + trace.values[l].cols);
        }
        cache.append(meta, k_rows, v_rows);
    }
    // Attention accumulators start at zero: the H2O counters track attention
    // received from decode-step queries only, so prefill slots compete on
    // equal footing once decoding starts.
    return {std::move(trace), std::move(cache)};
}

namespace {

// Single-row layer norm matching the batched implementation op-for-op.
std::vector<float> row_layer_norm(const std::vector<float>& x, const std::vector<float>& gain) {
    const size_t d = x.size();
    float mu = 0.0f;
    for (float v : x) mu += v;
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (float v : x) {
        const float c = v - mu;
        var += c * c;
    }
    var /= static_cast<float>(d);
    const float rstd = 1.0f / std::sqrt(var + static_cast<float>(detail::kLnEps));
    std::vector<float> out(d);
    for (size_t j = 0; j < d; ++j) out[j] = gain[j] * (x[j] - mu) * rstd;
    return out;
}

std::vector<float> row_matmul(const std::vector<float>& x, const Mat& w) {
    std::vector<float> out(w.cols, 0.0f);
    for (size_t k = 0; k < w.rows; ++k) {
        const float xk = x[k];
        const float* wrow = w.row(k);
        for (size_t j = 0; j < w.cols; ++j) out[j] += xk * wrow[j];
    }
    return out;
}

}  // namespace

DecodeStep forward_decode_step(const ToyVLM& model, const Token& token, KVCache& cache) {
    if (cache.empty()) throw StateError("forward_decode_step: cache is empty (run prefill first)");
    if (token.position_id != cache.next_position())
        throw InputError("forward_decode_step: token must carry the next position_id");
    const ModelConfig& cfg = model.config;
    const size_t d = cfg.hidden_dim;
    const size_t heads = cfg.num_heads;
    const size_t dh = cfg.head_dim();
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    const size_t old_slots = cache.size();
    const size_t slots = old_slots + 1;

    // Embed the single token.
    TokenSequence one;
    one.entries.push_back(token);
    Mat emb = embed(model, one);
    std::vector<float> h(emb.row(0), emb.row(0) + d);

    DecodeStep step;
    step.attention_sum.assign(slots, 0.0);
    std::vector<std::vector<float>> k_rows(cfg.num_layers), v_rows(cfg.num_layers);

    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        const auto& w = model.layers[layer];
        const std::vector<float> y1 = row_layer_norm(h, w.ln1_gain);
        const std::vector<float> q = row_matmul(y1, w.wq);
        std::vector<float> k = row_matmul(y1, w.wk);
        std::vector<float> v = row_matmul(y1, w.wv);

        const Mat& layer_k = cache.keys(layer);
        const Mat& layer_v = cache.values(layer);
        std::vector<float> attn_concat(d, 0.0f);
        Mat probs(heads, slots);
        std::vector<float> logits(slots);
        for (size_t head = 0; head < heads; ++head) {
            const size_t off = head * dh;
            float max_logit = -std::numeric_limits<float>::infinity();
            for (size_t j = 0; j < slots; ++j) {
                const float* kj = j < old_slots ? layer_k.row(j) + off : k.data() + off;
                float acc = 0.0f;
                for (size_t c = 0; c < dh; ++c) acc += q[off + c] * kj[c];
                acc *= inv_sqrt_dh;
                logits[j] = acc;
                if (acc > max_logit) max_logit = acc;
            }
            float denom = 0.0f;
            for (size_t j = 0; j < slots; ++j) {
                const float e = std::exp(logits[j] - max_logit);
                logits[j] = e;
                denom += e;
            }
            for (size_t j = 0; j < slots; ++j) {
                const float pij = logits[j] / denom;
                probs(head, j) = pij;
                step.attention_sum[j] += pij;
                const float* vj = j < old_slots ? layer_v.row(j) + off : v.data() + off;
                for (size_t c = 0; c < dh; ++c) attn_concat[off + c] += pij * vj[c];
            }
        }
        const std::vector<float> attn_out = row_matmul(attn_concat, w.wo);
        for (size_t j = 0; j < d; ++j) h[j] += attn_out[j];

        const std::vector<float> y2 = row_layer_norm(h, w.ln2_gain);
        std::vector<float> ffn_pre = row_matmul(y2, w.w_up);
        for (auto& x : ffn_pre) x = detail::silu(x);
        const std::vector<float> ffn_out = row_matmul(ffn_pre, w.w_down);
        for (size_t j = 0; j < d; ++j) h[j] += ffn_out[j];

        k_rows[layer] = std::move(k);
        v_rows[layer] = std::move(v);
        if (layer == cfg.num_layers - 1) {
            step.final_attention = std::move(probs);
            step.head_avg_attention.assign(slots, 0.0f);
            for (size_t head = 0; head < heads; ++head)
                for (size_t j = 0; j < slots; ++j)
                    step.head_avg_attention[j] += step.final_attention(head, j);
            for (auto& x : step.head_avg_attention) x /= static_cast<float>(heads);
        }
    }

    SlotMeta meta;
    meta.modality = token.modality;
    meta.phase = token.phase;
    meta.turn_id = token.turn_id;
    meta.position_id = token.position_id;
    meta.token_id = token.modality == Modality::Text ? token.token_id : -1;
    cache.append(meta, k_rows, v_rows);
    cache.accumulate_attention(step.attention_sum);

    step.final_hidden = h;
    step.logits.assign(cfg.vocab_size, 0.0f);
    for (int t = 0; t < cfg.vocab_size; ++t) {
        const float* row = model.token_embedding.row(t);
        float acc = 0.0f;
        for (size_t j = 0; j < d; ++j) acc += h[j] * row[j];
        step.logits[t] = acc;
    }
    return step;
}

Mat text_hidden_states(const ForwardTrace& trace, const TokenSequence& seq) {
    if (trace.final_hidden.rows != seq.size())
        throw InputError("text_hidden_states: trace/sequence size mismatch");
    const auto idx = seq.text_indices();
    Mat out(idx.size(), trace.final_hidden.cols);
    for (size_t i = 0; i < idx.size(); ++i) {
        const float* src = trace.final_hidden.row(idx[i]);
        std::copy(src, src + trace.final_hidden.cols, out.row(i));
    }
    return out;
}

double hidden_state_mse(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw InputError("hidden_state_mse: shape mismatch");
    if (a.rows == 0) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < a.rows; ++i) {
        const float* ra = a.row(i);
        const float* rb = b.row(i);
        double row = 0.0;
        for (size_t j = 0; j < a.cols; ++j) {
            const double diff = static_cast<double>(ra[j]) - static_cast<double>(rb[j]);
            row += diff * diff;
        }
        total += row;
    }
    return total / static_cast<double>(a.rows);
}

}  // namespace asymtok
