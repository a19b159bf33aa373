#include "asymtok/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "asymtok/rng.hpp"

namespace asymtok {

using json = nlohmann::ordered_json;

void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const size_t workers = std::min<size_t>(jobs, n);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (size_t t = 0; t < workers; ++t) {
        threads.emplace_back([&, t] {
            for (size_t i = t; i < n; i += workers) fn(i);
        });
    }
    for (auto& th : threads) th.join();
}

// --- config -----------------------------------------------------------------

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

ModelConfig parse_model(const json& j) {
    ModelConfig m;
    m.num_layers = get_or(j, "layers", m.num_layers);
    m.num_heads = get_or(j, "heads", m.num_heads);
    m.hidden_dim = get_or(j, "hidden_dim", m.hidden_dim);
    m.ffn_dim = get_or(j, "ffn_dim", m.ffn_dim);
    m.vocab_size = get_or(j, "vocab_size", m.vocab_size);
    m.max_positions = get_or(j, "max_positions", m.max_positions);
    m.init_seed = get_or(j, "init_seed", m.init_seed);
    m.init_std = get_or(j, "init_std", m.init_std);
    return m;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    if (j.contains("model")) cfg.model = parse_model(j.at("model"));
    if (j.contains("corpus")) {
        const json& c = j.at("corpus");
        cfg.corpus.samples = get_or<size_t>(c, "samples", cfg.corpus.samples);
        cfg.corpus.base.vision_tokens =
            get_or<size_t>(c, "vision_tokens", cfg.corpus.base.vision_tokens);
        cfg.corpus.base.text_tokens = get_or<size_t>(c, "text_tokens", cfg.corpus.base.text_tokens);
        cfg.corpus.base.relevance_fraction =
            get_or(c, "relevance_fraction", cfg.corpus.base.relevance_fraction);
        cfg.corpus.base.alignment_strength =
            get_or(c, "alignment_strength", cfg.corpus.base.alignment_strength);
        cfg.corpus.base.noise_seed = get_or(c, "noise_seed", cfg.corpus.base.noise_seed);
        cfg.corpus.alignment_min = get_or(c, "alignment_min", cfg.corpus.alignment_min);
        cfg.corpus.alignment_max = get_or(c, "alignment_max", cfg.corpus.alignment_max);
        cfg.corpus.grid_height = get_or<size_t>(c, "grid_height", cfg.corpus.grid_height);
        cfg.corpus.grid_width = get_or<size_t>(c, "grid_width", cfg.corpus.grid_width);
    }
    cfg.corpus.base.hidden_dim = static_cast<size_t>(cfg.model.hidden_dim);
    if (j.contains("scorer")) {
        const json& s = j.at("scorer");
        if (s.contains("methods")) cfg.scorer_methods = s.at("methods").get<std::vector<std::string>>();
        cfg.scorer_path = get_or<std::string>(s, "path", cfg.scorer_path);
    }
    if (j.contains("budget")) {
        const json& b = j.at("budget");
        cfg.budget.mode = get_or<std::string>(b, "mode", cfg.budget.mode);
        if (b.contains("threshold")) {
            const json& t = b.at("threshold");
            cfg.budget.threshold.g_lo = t.at("g_lo").get<double>();
            cfg.budget.threshold.g_hi = t.at("g_hi").get<double>();
            cfg.budget.threshold.r_conservative = t.at("r_conservative").get<double>();
            cfg.budget.threshold.r_moderate = t.at("r_moderate").get<double>();
            cfg.budget.threshold.r_aggressive = t.at("r_aggressive").get<double>();
        }
        if (b.contains("linear")) {
            const json& t = b.at("linear");
            cfg.budget.linear.r_target = t.at("r_target").get<double>();
            cfg.budget.linear.slope = t.at("slope").get<double>();
            cfg.budget.linear.g_bar = t.at("g_bar").get<double>();
            cfg.budget.linear.r_min = t.at("r_min").get<double>();
            cfg.budget.linear.r_max = t.at("r_max").get<double>();
        }
    }
    if (j.contains("keep_ratios")) cfg.keep_ratios = j.at("keep_ratios").get<std::vector<double>>();
    if (j.contains("retentions")) cfg.retentions = j.at("retentions").get<std::vector<double>>();
    if (j.contains("eviction")) {
        const json& e = j.at("eviction");
        if (e.contains("policies"))
            cfg.eviction_policies = e.at("policies").get<std::vector<std::string>>();
        cfg.eviction_samples = get_or<size_t>(e, "samples", cfg.eviction_samples);
        cfg.decode_steps = get_or(e, "decode_steps", cfg.decode_steps);
        cfg.streaming_sinks = get_or<size_t>(e, "sinks", cfg.streaming_sinks);
        cfg.presence_penalty = get_or(e, "presence_penalty", cfg.presence_penalty);
    }
    if (j.contains("conversation")) {
        const json& c = j.at("conversation");
        cfg.conversation.turns = get_or<size_t>(c, "turns", cfg.conversation.turns);
        cfg.conversation.question_tokens =
            get_or<size_t>(c, "question_tokens", cfg.conversation.question_tokens);
        cfg.conversation.vision_tokens =
            get_or<size_t>(c, "vision_tokens", cfg.conversation.vision_tokens);
        cfg.conversation.answer_steps = get_or(c, "answer_steps", cfg.conversation.answer_steps);
    }
    cfg.seed = get_or(j, "seed", cfg.seed);
    cfg.out_path = get_or<std::string>(j, "out", cfg.out_path);
    cfg.format = get_or<std::string>(j, "format", cfg.format);
    cfg.jobs = get_or(j, "jobs", cfg.jobs);

    try {
        cfg.model.validate();
        cfg.corpus.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    for (double r : cfg.keep_ratios)
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("config: keep ratios must lie in (0, 1]");
    for (double r : cfg.retentions)
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("config: retentions must lie in (0, 1]");
    if (cfg.format != "json" && cfg.format != "csv" && cfg.format != "both")
        throw ConfigError("config: format must be json, csv or both");
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment_config(buf.str());
}

// --- oracles and statistics --------------------------------------------------

std::vector<double> loo_oracle(const ToyVLM& model, const TokenSequence& seq,
                               const MaskAddends* base_mask) {
    const size_t n_vis = seq.vision_count();
    MaskAddends base = base_mask ? *base_mask : MaskAddends::none(seq.size());
    base.validate(seq.size());
    const ForwardTrace base_trace = forward_prefill_trace(model, seq, base);
    const Mat base_text = text_hidden_states(base_trace, seq);
    const auto vision_pos = seq.vision_indices();
    std::vector<double> importance(n_vis, 0.0);
    for (size_t i = 0; i < n_vis; ++i) {
        MaskAddends mask = base;
        mask.addends[vision_pos[i]] = kHardMaskPenalty;
        const ForwardTrace trace = forward_prefill_trace(model, seq, mask);
        importance[i] = hidden_state_mse(text_hidden_states(trace, seq), base_text);
    }
    return importance;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InputError("spearman: length mismatch");
    if (a.size() < 2) return 0.0;
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va < 1e-12 || vb < 1e-12) return 0.0;  // a constant vector carries no ordering
    return cov / std::sqrt(va * vb);
}

size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
    const size_t la = a.size(), lb = b.size();
    std::vector<size_t> prev(lb + 1), cur(lb + 1);
    for (size_t j = 0; j <= lb; ++j) prev[j] = j;
    for (size_t i = 1; i <= la; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= lb; ++j) {
            const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[lb];
}

GapStats gap_stats(const std::vector<ImportanceScores>& corpus_scores) {
    if (corpus_scores.empty()) throw InputError("gap_stats: empty corpus");
    GapStats stats;
    stats.count = corpus_scores.size();
    stats.histogram.assign(32, 0);
    std::vector<double> gaps;
    gaps.reserve(corpus_scores.size());
    for (const auto& s : corpus_scores) gaps.push_back(importance_gap(s));
    double sum = 0.0;
    for (double g : gaps) sum += g;
    stats.mean = sum / static_cast<double>(gaps.size());
    double var = 0.0;
    for (double g : gaps) var += (g - stats.mean) * (g - stats.mean);
    stats.stddev = std::sqrt(var / static_cast<double>(gaps.size()));
    for (double g : gaps) {
        auto bin = static_cast<long>(std::floor((g - stats.bin_origin) / stats.bin_width));
        bin = std::clamp<long>(bin, 0, static_cast<long>(stats.histogram.size()) - 1);
        stats.histogram[static_cast<size_t>(bin)] += 1;
    }
    return stats;
}

// --- evaluations --------------------------------------------------------------

namespace {

struct ScorerSet {
    std::vector<std::string> methods;
    std::vector<double> learned_w;  // empty unless "learned" requested
};

ScorerSet resolve_scorers(const ExperimentConfig& config) {
    ScorerSet set;
    set.methods = config.scorer_methods;
    for (const auto& m : set.methods) {
        if (m != "learned" && m != "cosine" && m != "spiral")
            throw ConfigError("unknown scorer method: " + m);
        if (m == "learned") {
            if (config.scorer_path.empty())
                throw ConfigError("scorer method 'learned' needs a scorer file path");
            set.learned_w = load_scorer(config.scorer_path).w;
            if (set.learned_w.size() != static_cast<size_t>(config.model.hidden_dim))
                throw ConfigError("scorer file dimension does not match the model");
        }
    }
    return set;
}

ImportanceScores scores_for_method(const std::string& method, const ScorerSet& set,
                                   const ToyVLM& model, const TokenSequence& seq,
                                   const CorpusSpec& corpus) {
    if (method == "learned") return score_sequence(model, set.learned_w, seq);
    if (method == "cosine") {
        auto [vision, text] = scorer_inputs(model, seq);
        return cosine_scores(vision, text);
    }
    return spiral_scores(corpus.grid_height, corpus.grid_width);
}

}  // namespace

std::vector<ReportRecord> run_pruning_eval(const ToyVLM& model, const ExperimentConfig& config) {
    const ScorerSet scorers = resolve_scorers(config);
    const std::vector<TokenSequence> corpus = generate_corpus(model, config.corpus, config.seed);
    const CostModel cost = CostModel::from_config(model.config);

    std::vector<std::vector<ReportRecord>> per_sample(corpus.size());
    parallel_for(corpus.size(), config.jobs, [&](size_t s) {
        const TokenSequence& seq = corpus[s];
        const size_t n_vis = seq.vision_count();
        const size_t n_text = seq.text_count();
        const ForwardTrace base_trace =
            forward_prefill_trace(model, seq, MaskAddends::none(seq.size()));
        const Mat base_text = text_hidden_states(base_trace, seq);
        std::vector<double> loo;
        if (n_vis <= 64) loo = loo_oracle(model, seq);

        for (const std::string& method : scorers.methods) {
            const ImportanceScores scores =
                scores_for_method(method, scorers, model, seq, config.corpus);
            if (scores.size() != n_vis)
                throw InputError("scorer produced a score per-token count mismatch");
            const double gap = importance_gap(scores);

            std::vector<double> ratios;
            if (config.budget.mode == "uniform") {
                ratios = config.keep_ratios;
            } else if (config.budget.mode == "threshold") {
                ratios = {keep_ratio_threshold(gap, config.budget.threshold)};
            } else if (config.budget.mode == "linear") {
                ratios = {keep_ratio_linear(gap, config.budget.linear)};
            } else {
                throw ConfigError("unknown budget mode: " + config.budget.mode);
            }

            for (double ratio : ratios) {
                const TokenSequence pruned = prune_vision(seq, scores, ratio);
                const ForwardTrace trace =
                    forward_prefill_trace(model, pruned, MaskAddends::none(pruned.size()));
                const double mse = hidden_state_mse(text_hidden_states(trace, pruned), base_text);
                const uint64_t kept = pruned.vision_count();

                ReportRecord rec;
                rec.eval = "prune";
                rec.sample = s;
                rec.method = method;
                rec.requested_ratio = ratio;
                rec.gap = gap;
                rec.applied_keep_ratio = ratio;
                rec.n_full = n_vis + n_text;
                rec.n_kept = kept + n_text;
                rec.vision_kept = kept;
                rec.mse = mse;
                if (!loo.empty()) rec.spearman_loo = spearman(scores.values, loo);
                const UsageReport usage = usage_report(rec.n_full, rec.n_kept, rec.n_kept, cost);
                rec.flops_full = usage.flops_full;
                rec.flops_pruned = usage.flops_pruned;
                rec.flops_saved = usage.flops_saved;
                rec.flops_saved_vision_n = flops_saved(n_vis, kept, cost);
                rec.kv_bytes_full = usage.kv_bytes_full;
                rec.kv_bytes_pruned = usage.kv_bytes_pruned;
                rec.peak_token_count = usage.peak_token_count;
                per_sample[s].push_back(std::move(rec));
            }
        }
    });

    std::vector<ReportRecord> records;
    for (auto& chunk : per_sample)
        for (auto& rec : chunk) records.push_back(std::move(rec));
    return records;
}

namespace {

double shared_hidden_mse(const std::vector<std::vector<float>>& a,
                         const std::vector<std::vector<float>>& b) {
    const size_t steps = std::min(a.size(), b.size());
    if (steps == 0) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < steps; ++i) {
        double step = 0.0;
        for (size_t j = 0; j < a[i].size(); ++j) {
            const double diff = static_cast<double>(a[i][j]) - static_cast<double>(b[i][j]);
            step += diff * diff;
        }
        total += step;
    }
    return total / static_cast<double>(steps);
}

size_t scaled_budget(double retention, size_t cap) {
    return std::max<size_t>(
        1, static_cast<size_t>(std::floor(retention * static_cast<double>(cap) + 1e-9)));
}

}  // namespace

EvictionEvalOutput run_eviction_eval(const ToyVLM& model, const ExperimentConfig& config) {
    EvictionEvalOutput out;
    const size_t samples = config.eviction_samples;
    const int steps = config.decode_steps;

    struct SampleOut {
        std::vector<ReportRecord> records;
        std::vector<EvictionEvent> events;
    };
    std::vector<SampleOut> per_sample(samples);

    parallel_for(samples, config.jobs, [&](size_t s) {
        SyntheticTaskSpec spec = config.corpus.base;
        const TokenSequence prompt =
            generate_sample(model, spec, mix_seed(config.seed, 0xe71c7 + s));
        const DecodeOptions decode{steps, static_cast<float>(config.presence_penalty)};
        EvictionConfig none_cfg;
        none_cfg.policy = EvictionPolicy::None;
        const GenerationResult baseline = generate_single_turn(model, prompt, decode, none_cfg);

        for (const std::string& policy_name : config.eviction_policies) {
            const EvictionPolicy policy = eviction_policy_from_string(policy_name);
            for (double retention : config.retentions) {
                // Each policy retains `retention` of its own eviction domain:
                // generated tokens for AsymThreshold, the whole cache for the
                // modality-blind baselines.
                EvictionConfig cfg;
                cfg.policy = policy;
                cfg.retention = retention;
                cfg.text_budget = scaled_budget(retention, steps);
                cfg.sink_count = config.streaming_sinks;
                if (policy == EvictionPolicy::H2O || policy == EvictionPolicy::Streaming)
                    cfg.total_budget = std::max(cfg.sink_count + 1,
                                                scaled_budget(retention, prompt.size() + steps));
                const GenerationResult run = generate_single_turn(model, prompt, decode, cfg);

                ReportRecord rec;
                rec.eval = "evict";
                rec.sample = s;
                rec.method = policy_name;
                rec.requested_ratio = retention;
                rec.n_full = prompt.size() + static_cast<size_t>(steps);
                rec.evictions = run.events.size();
                rec.edit_distance_tokens = edit_distance(run.token_ids, baseline.token_ids);
                rec.hidden_mse = shared_hidden_mse(run.hidden, baseline.hidden);
                rec.final_cache_size = run.cache.size();
                rec.peak_token_count = run.peak_tokens;
                per_sample[s].records.push_back(std::move(rec));
                per_sample[s].events.insert(per_sample[s].events.end(), run.events.begin(),
                                            run.events.end());
            }
        }

        // Multi-turn comparison, turn-level eviction included.
        if (config.conversation.turns > 0) {
            SyntheticTaskSpec turn_spec = config.corpus.base;
            turn_spec.vision_tokens = config.conversation.vision_tokens;
            turn_spec.text_tokens = config.conversation.question_tokens;
            std::vector<TokenSequence> prompts;
            std::vector<int> answers;
            for (size_t t = 0; t < config.conversation.turns; ++t) {
                prompts.push_back(generate_turn_prompt(model, turn_spec,
                                                       mix_seed(config.seed, 0xc0417 + s * 64 + t),
                                                       static_cast<int>(t), 0));
                answers.push_back(config.conversation.answer_steps);
            }
            // Positions for the first turn must start at zero and stay
            // strictly increasing; later turns are re-positioned on the fly.
            {
                int pos = 0;
                for (auto& tok : prompts[0].entries) tok.position_id = pos++;
            }
            EvictionConfig conv_none;
            conv_none.policy = EvictionPolicy::None;
            const float penalty = static_cast<float>(config.presence_penalty);
            const GenerationResult conv_base =
                run_conversation(model, prompts, answers, conv_none, {}, penalty);

            const size_t text_cap = config.conversation.turns *
                                    (config.conversation.question_tokens +
                                     static_cast<size_t>(config.conversation.answer_steps));
            const size_t gen_cap = config.conversation.turns *
                                   static_cast<size_t>(config.conversation.answer_steps);
            const size_t total_cap =
                text_cap + config.conversation.turns * config.conversation.vision_tokens;

            std::vector<std::string> conv_policies = config.eviction_policies;
            conv_policies.push_back("turn");
            for (const std::string& policy_name : conv_policies) {
                const EvictionPolicy policy = eviction_policy_from_string(policy_name);
                for (double retention : config.retentions) {
                    EvictionConfig cfg;
                    cfg.policy = policy;
                    cfg.retention = retention;
                    cfg.sink_count = config.streaming_sinks;
                    if (policy == EvictionPolicy::AsymThreshold)
                        cfg.text_budget = scaled_budget(retention, gen_cap);
                    else if (policy == EvictionPolicy::TurnLevel)
                        cfg.text_budget = scaled_budget(retention, text_cap);
                    else {
                        cfg.text_budget = scaled_budget(retention, text_cap);
                        cfg.total_budget =
                            std::max(cfg.sink_count + 1, scaled_budget(retention, total_cap));
                    }
                    const GenerationResult run =
                        run_conversation(model, prompts, answers, cfg, {}, penalty);

                    ReportRecord rec;
                    rec.eval = "evict-turns";
                    rec.sample = s;
                    rec.method = policy_name;
                    rec.requested_ratio = retention;
                    rec.n_full = total_cap;
                    rec.evictions = run.events.size();
                    rec.edit_distance_tokens = edit_distance(run.token_ids, conv_base.token_ids);
                    rec.hidden_mse = shared_hidden_mse(run.hidden, conv_base.hidden);
                    rec.final_cache_size = run.cache.size();
                    rec.peak_token_count = run.peak_tokens;
                    per_sample[s].records.push_back(std::move(rec));
                    per_sample[s].events.insert(per_sample[s].events.end(), run.events.begin(),
                                                run.events.end());
                }
            }
        }
    });

    for (auto& chunk : per_sample) {
        for (auto& rec : chunk.records) out.records.push_back(std::move(rec));
        out.events.insert(out.events.end(), chunk.events.begin(), chunk.events.end());
    }
    return out;
}

// --- report emission -----------------------------------------------------------

namespace {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

json record_to_json(const ReportRecord& r) {
    json j;
    j["eval"] = r.eval;
    j["sample"] = r.sample;
    j["method"] = r.method;
    j["requested_ratio"] = r.requested_ratio;
    j["gap"] = r.gap;
    j["applied_keep_ratio"] = r.applied_keep_ratio;
    j["n_full"] = r.n_full;
    j["n_kept"] = r.n_kept;
    j["vision_kept"] = r.vision_kept;
    j["mse"] = r.mse;
    if (r.spearman_loo)
        j["spearman_loo"] = *r.spearman_loo;
    else
        j["spearman_loo"] = nullptr;
    j["flops_full"] = r.flops_full;
    j["flops_pruned"] = r.flops_pruned;
    j["flops_saved"] = r.flops_saved;
    j["flops_saved_vision_n"] = r.flops_saved_vision_n;
    j["kv_bytes_full"] = r.kv_bytes_full;
    j["kv_bytes_pruned"] = r.kv_bytes_pruned;
    j["peak_token_count"] = r.peak_token_count;
    j["evictions"] = r.evictions;
    j["edit_distance"] = r.edit_distance_tokens;
    j["hidden_mse"] = r.hidden_mse;
    j["final_cache_size"] = r.final_cache_size;
    return j;
}

ReportRecord record_from_json(const json& j) {
    ReportRecord r;
    r.eval = j.at("eval").get<std::string>();
    r.sample = j.at("sample").get<uint64_t>();
    r.method = j.at("method").get<std::string>();
    r.requested_ratio = j.at("requested_ratio").get<double>();
    r.gap = j.at("gap").get<double>();
    r.applied_keep_ratio = j.at("applied_keep_ratio").get<double>();
    r.n_full = j.at("n_full").get<uint64_t>();
    r.n_kept = j.at("n_kept").get<uint64_t>();
    r.vision_kept = j.at("vision_kept").get<uint64_t>();
    r.mse = j.at("mse").get<double>();
    if (!j.at("spearman_loo").is_null()) r.spearman_loo = j.at("spearman_loo").get<double>();
    r.flops_full = j.at("flops_full").get<uint64_t>();
    r.flops_pruned = j.at("flops_pruned").get<uint64_t>();
    r.flops_saved = j.at("flops_saved").get<double>();
    r.flops_saved_vision_n = j.at("flops_saved_vision_n").get<double>();
    r.kv_bytes_full = j.at("kv_bytes_full").get<uint64_t>();
    r.kv_bytes_pruned = j.at("kv_bytes_pruned").get<uint64_t>();
    r.peak_token_count = j.at("peak_token_count").get<uint64_t>();
    r.evictions = j.at("evictions").get<uint64_t>();
    r.edit_distance_tokens = j.at("edit_distance").get<uint64_t>();
    r.hidden_mse = j.at("hidden_mse").get<double>();
    r.final_cache_size = j.at("final_cache_size").get<uint64_t>();
    return r;
}

constexpr const char* kCsvHeader =
    "eval,sample,method,requested_ratio,gap,applied_keep_ratio,n_full,n_kept,vision_kept,mse,"
    "spearman_loo,flops_full,flops_pruned,flops_saved,flops_saved_vision_n,kv_bytes_full,"
    "kv_bytes_pruned,peak_token_count,evictions,edit_distance,hidden_mse,final_cache_size";

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("emit_report: cannot open " + path);
    out << content;
    if (!out) throw IoError("emit_report: write failed for " + path);
}

}  // namespace

std::vector<std::string> emit_report(const std::vector<ReportRecord>& records,
                                     const std::string& base_path, const std::string& format) {
    if (records.empty()) throw InputError("emit_report: no records");
    if (format != "json" && format != "csv" && format != "both")
        throw InputError("emit_report: format must be json, csv or both");
    std::vector<std::string> written;
    if (format == "json" || format == "both") {
        json doc;
        doc["schema_version"] = kReportSchemaVersion;
        doc["records"] = json::array();
        for (const auto& r : records) doc["records"].push_back(record_to_json(r));
        const std::string path = base_path + ".json";
        write_file(path, doc.dump(2) + "\n");
        written.push_back(path);
    }
    if (format == "csv" || format == "both") {
        std::string csv = std::string(kCsvHeader) + "\n";
        for (const auto& r : records) {
            csv += csv_quote(r.eval) + ",";
            csv += std::to_string(r.sample) + ",";
            csv += csv_quote(r.method) + ",";
            csv += format_double(r.requested_ratio) + ",";
            csv += format_double(r.gap) + ",";
            csv += format_double(r.applied_keep_ratio) + ",";
            csv += std::to_string(r.n_full) + ",";
            csv += std::to_string(r.n_kept) + ",";
            csv += std::to_string(r.vision_kept) + ",";
            csv += format_double(r.mse) + ",";
            csv += (r.spearman_loo ? format_double(*r.spearman_loo) : std::string()) + ",";
            csv += std::to_string(r.flops_full) + ",";
            csv += std::to_string(r.flops_pruned) + ",";
            csv += format_double(r.flops_saved) + ",";
            csv += format_double(r.flops_saved_vision_n) + ",";
            csv += std::to_string(r.kv_bytes_full) + ",";
            csv += std::to_string(r.kv_bytes_pruned) + ",";
            csv += std::to_string(r.peak_token_count) + ",";
            csv += std::to_string(r.evictions) + ",";
            csv += std::to_string(r.edit_distance_tokens) + ",";
            csv += format_double(r.hidden_mse) + ",";
            csv += std::to_string(r.final_cache_size) + "\n";
        }
        const std::string path = base_path + ".csv";
        write_file(path, csv);
        written.push_back(path);
    }
    return written;
}

std::vector<ReportRecord> parse_report_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("parse_report_json: cannot open " + path);
    json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        throw IoError(std::string("parse_report_json: invalid JSON: ") + e.what());
    }
    std::vector<ReportRecord> records;
    for (const auto& j : doc.at("records")) records.push_back(record_from_json(j));
    return records;
}

void write_event_log(const std::vector<EvictionEvent>& events, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_event_log: cannot open " + path);
    for (const auto& e : events) {
        json j;
        j["step"] = e.step;
        j["policy"] = to_string(e.policy);
        j["slot"] = e.slot_id;
        j["modality"] = e.modality == Modality::Vision ? "vision" : "text";
        j["score"] = e.score;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write_event_log: write failed for " + path);
}

}  // namespace asymtok
