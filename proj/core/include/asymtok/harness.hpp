#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "asymtok/budget.hpp"
#include "asymtok/engine.hpp"
#include "asymtok/eviction.hpp"
#include "asymtok/metrics.hpp"
#include "asymtok/model.hpp"
#include "asymtok/scorer.hpp"
#include "asymtok/synth.hpp"

namespace asymtok {

inline constexpr int kReportSchemaVersion = 1;

// Name of the environment variable overriding the default output directory.
inline constexpr const char* kOutDirEnvVar = "ASYMTOK_OUT_DIR";

struct BudgetConfig {
    std::string mode = "uniform";  // uniform | threshold | linear
    ThresholdSweepPolicy threshold;
    LinearMapPolicy linear;
};

struct ConversationConfig {
    size_t turns = 0;  // 0 disables the multi-turn eviction evaluation
    size_t question_tokens = 6;
    size_t vision_tokens = 8;
    int answer_steps = 12;
};

struct ExperimentConfig {
    ModelConfig model;
    CorpusSpec corpus;
    std::vector<std::string> scorer_methods = {"cosine", "spiral"};
    std::string scorer_path;  // required when "learned" is listed
    BudgetConfig budget;
    std::vector<double> keep_ratios = {0.75, 0.65, 0.5};
    std::vector<double> retentions = {0.9, 0.75, 0.5};
    std::vector<std::string> eviction_policies = {"asym", "h2o", "streaming"};
    size_t eviction_samples = 8;
    int decode_steps = 40;
    size_t streaming_sinks = 4;
    // Optional presence penalty for eviction-evaluation decoding (0 keeps
    // plain greedy argmax).
    double presence_penalty = 0.0;
    ConversationConfig conversation;
    uint64_t seed = 42;
    std::string out_path = "report";
    std::string format = "both";  // json | csv | both
    int jobs = 1;
};

ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& json_text);

// One row per (sample, method/policy, ratio). Pruning rows leave the eviction
// block zeroed and vice versa.
struct ReportRecord {
    std::string eval;    // "prune" | "evict"
    uint64_t sample = 0;
    std::string method;  // scorer method or eviction policy
    double requested_ratio = 0.0;

    double gap = 0.0;
    double applied_keep_ratio = 0.0;
    uint64_t n_full = 0;
    uint64_t n_kept = 0;
    uint64_t vision_kept = 0;
    double mse = 0.0;
    std::optional<double> spearman_loo;
    uint64_t flops_full = 0;
    uint64_t flops_pruned = 0;
    double flops_saved = 0.0;
    double flops_saved_vision_n = 0.0;  // n counted over vision tokens only
    uint64_t kv_bytes_full = 0;
    uint64_t kv_bytes_pruned = 0;
    uint64_t peak_token_count = 0;

    uint64_t evictions = 0;
    uint64_t edit_distance_tokens = 0;
    double hidden_mse = 0.0;
    uint64_t final_cache_size = 0;
};

// Per-vision-token ground-truth importance: mean squared change of the text
// hidden states when that token alone is hard-masked (N+1 forward passes).
std::vector<double> loo_oracle(const ToyVLM& model, const TokenSequence& seq,
                               const MaskAddends* base_mask = nullptr);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);

std::vector<ReportRecord> run_pruning_eval(const ToyVLM& model, const ExperimentConfig& config);

struct EvictionEvalOutput {
    std::vector<ReportRecord> records;
    std::vector<EvictionEvent> events;
};

EvictionEvalOutput run_eviction_eval(const ToyVLM& model, const ExperimentConfig& config);

struct GapStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<uint64_t> histogram;
    double bin_width = 0.05;
    double bin_origin = 0.0;
    size_t count = 0;
};

GapStats gap_stats(const std::vector<ImportanceScores>& corpus_scores);

// Structured report emission. format is "json", "csv" or "both"; paths get
// the matching extension appended to base_path. Byte-stable for identical
// records.
std::vector<std::string> emit_report(const std::vector<ReportRecord>& records,
                                     const std::string& base_path, const std::string& format);

std::vector<ReportRecord> parse_report_json(const std::string& path);

void write_event_log(const std::vector<EvictionEvent>& events, const std::string& path);

// Deterministic helper: runs fn(i) for i in [0, n), optionally on several
// threads; outputs must be written to disjoint slots so results do not depend
// on the schedule.
void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& fn);

}  // namespace asymtok
