// Command-line front end: scorer training, budget calibration, pruning and
// eviction evaluations, gap statistics and report conversion. All experiment
// settings come from a JSON config file; --seed/--out/--format/--jobs
// override individual fields.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "asymtok/budget.hpp"
#include "asymtok/harness.hpp"
#include "asymtok/model.hpp"
#include "asymtok/rng.hpp"
#include "asymtok/scorer.hpp"
#include "asymtok/synth.hpp"

namespace {

using asymtok::ExperimentConfig;
using json = nlohmann::ordered_json;

struct CommonOpts {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> format;
    std::optional<int> jobs;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("-c,--config", opts.config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", opts.seed, "override the config seed");
    cmd->add_option("--out", opts.out, "override the output base path");
    cmd->add_option("--format", opts.format, "report format: json, csv or both")
        ->check(CLI::IsMember({"json", "csv", "both"}));
    cmd->add_option("--jobs", opts.jobs, "worker threads (1 = bit-exact serial)");
}

ExperimentConfig resolve_config(const CommonOpts& opts) {
    ExperimentConfig cfg = asymtok::load_experiment_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.out) cfg.out_path = *opts.out;
    if (opts.format) cfg.format = *opts.format;
    if (opts.jobs) cfg.jobs = *opts.jobs;
    // Relative outputs land in ASYMTOK_OUT_DIR when it is set.
    if (const char* dir = std::getenv(asymtok::kOutDirEnvVar)) {
        const std::filesystem::path p(cfg.out_path);
        if (p.is_relative()) cfg.out_path = (std::filesystem::path(dir) / p).string();
    }
    return cfg;
}

int cmd_train_scorer(const CommonOpts& opts) {
    const ExperimentConfig cfg = resolve_config(opts);
    const asymtok::ToyVLM model = asymtok::init_model(cfg.model);
    const auto corpus = asymtok::generate_corpus(model, cfg.corpus, cfg.seed);
    asymtok::ScorerState state =
        asymtok::ScorerState::init(static_cast<size_t>(cfg.model.hidden_dim));
    state = asymtok::train_scorer(model, corpus, state);
    const std::string path = cfg.out_path + ".scorer.json";
    asymtok::save_scorer(state, path);
    std::cout << "trained scorer on " << corpus.size() << " samples";
    for (size_t e = 0; e < state.epoch_loss.size(); ++e)
        std::cout << (e == 0 ? "; epoch losses: " : ", ") << state.epoch_loss[e];
    std::cout << "\nwrote " << path << "\n";
    return 0;
}

int cmd_calibrate(const CommonOpts& opts, const std::string& method, double target_avg,
                  double r_min, double r_max) {
    const ExperimentConfig cfg = resolve_config(opts);
    const asymtok::ToyVLM model = asymtok::init_model(cfg.model);
    const auto corpus = asymtok::generate_corpus(model, cfg.corpus, cfg.seed);

    std::vector<double> w(static_cast<size_t>(cfg.model.hidden_dim), 1.0);
    bool learned = false;
    for (const auto& m : cfg.scorer_methods)
        if (m == "learned") learned = true;
    if (learned && !cfg.scorer_path.empty()) w = asymtok::load_scorer(cfg.scorer_path).w;

    std::vector<asymtok::CalibrationSample> samples;
    samples.reserve(corpus.size());
    for (const auto& seq : corpus)
        samples.emplace_back(model, seq, asymtok::score_sequence(model, w, seq));

    json out;
    out["schema_version"] = 1;
    out["target_avg"] = target_avg;
    out["method"] = method;
    json grid = json::array();
    if (method == "threshold") {
        const auto cal = asymtok::calibrate_threshold(samples, target_avg);
        out["policy"] = {{"g_lo", cal.policy.g_lo},
                         {"g_hi", cal.policy.g_hi},
                         {"r_conservative", cal.policy.r_conservative},
                         {"r_moderate", cal.policy.r_moderate},
                         {"r_aggressive", cal.policy.r_aggressive}};
        out["realized_avg"] = cal.realized_avg;
        out["mean_mse"] = cal.mean_mse;
        for (const auto& p : cal.log)
            grid.push_back({{"g_lo", p.threshold.g_lo},
                            {"g_hi", p.threshold.g_hi},
                            {"r_conservative", p.threshold.r_conservative},
                            {"r_moderate", p.threshold.r_moderate},
                            {"r_aggressive", p.threshold.r_aggressive},
                            {"realized_avg", p.realized_avg},
                            {"mean_mse", p.mean_mse},
                            {"feasible", p.feasible}});
    } else if (method == "linear") {
        const auto cal = asymtok::calibrate_linear(samples, target_avg, r_min, r_max);
        out["policy"] = {{"r_target", cal.policy.r_target},
                         {"slope", cal.policy.slope},
                         {"g_bar", cal.policy.g_bar},
                         {"r_min", cal.policy.r_min},
                         {"r_max", cal.policy.r_max}};
        out["realized_avg"] = cal.realized_avg;
        out["mean_mse"] = cal.mean_mse;
        for (const auto& p : cal.log)
            grid.push_back({{"slope", p.slope},
                            {"realized_avg", p.realized_avg},
                            {"mean_mse", p.mean_mse},
                            {"feasible", p.feasible}});
    } else {
        throw asymtok::ConfigError("calibrate: method must be threshold or linear");
    }
    out["grid"] = grid;
    const std::string path = cfg.out_path + ".calibration.json";
    std::ofstream file(path);
    if (!file) throw asymtok::IoError("calibrate: cannot open " + path);
    file << out.dump(2) << "\n";
    std::cout << "calibrated " << method << " policy, realized avg "
              << out["realized_avg"].dump() << ", mean MSE " << out["mean_mse"].dump() << "\n"
              << "wrote " << path << "\n";
    return 0;
}

int cmd_eval_prune(const CommonOpts& opts) {
    const ExperimentConfig cfg = resolve_config(opts);
    const asymtok::ToyVLM model = asymtok::init_model(cfg.model);
    const auto records = asymtok::run_pruning_eval(model, cfg);
    for (const auto& path : asymtok::emit_report(records, cfg.out_path, cfg.format))
        std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_eval_evict(const CommonOpts& opts) {
    const ExperimentConfig cfg = resolve_config(opts);
    const asymtok::ToyVLM model = asymtok::init_model(cfg.model);
    const auto out = asymtok::run_eviction_eval(model, cfg);
    for (const auto& path : asymtok::emit_report(out.records, cfg.out_path, cfg.format))
        std::cout << "wrote " << path << "\n";
    const std::string events_path = cfg.out_path + ".events.jsonl";
    asymtok::write_event_log(out.events, events_path);
    std::cout << "wrote " << events_path << "\n";
    return 0;
}

int cmd_gap_stats(const CommonOpts& opts) {
    const ExperimentConfig cfg = resolve_config(opts);
    const asymtok::ToyVLM model = asymtok::init_model(cfg.model);
    const auto corpus = asymtok::generate_corpus(model, cfg.corpus, cfg.seed);

    std::vector<double> w(static_cast<size_t>(cfg.model.hidden_dim), 1.0);
    for (const auto& m : cfg.scorer_methods)
        if (m == "learned" && !cfg.scorer_path.empty())
            w = asymtok::load_scorer(cfg.scorer_path).w;

    std::vector<asymtok::ImportanceScores> scores;
    scores.reserve(corpus.size());
    for (const auto& seq : corpus) scores.push_back(asymtok::score_sequence(model, w, seq));
    const asymtok::GapStats stats = asymtok::gap_stats(scores);

    json out;
    out["schema_version"] = 1;
    out["count"] = stats.count;
    out["mean"] = stats.mean;
    out["stddev"] = stats.stddev;
    out["bin_origin"] = stats.bin_origin;
    out["bin_width"] = stats.bin_width;
    out["histogram"] = stats.histogram;
    const std::string path = cfg.out_path + ".gapstats.json";
    std::ofstream file(path);
    if (!file) throw asymtok::IoError("gap-stats: cannot open " + path);
    file << out.dump(2) << "\n";
    std::cout << "gap mean " << stats.mean << ", std " << stats.stddev << " over " << stats.count
              << " samples\nwrote " << path << "\n";
    return 0;
}

int cmd_report(const std::string& in_path, const std::string& out_base,
               const std::string& format) {
    const auto records = asymtok::parse_report_json(in_path);
    for (const auto& path : asymtok::emit_report(records, out_base, format))
        std::cout << "wrote " << path << "\n";
    return 0;
}

json error_record(const std::string& type, const std::string& message) {
    json j;
    j["error"] = {{"type", type}, {"message", message}};
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy multimodal inference engine with asymmetric token compression"};
    app.require_subcommand(1);

    CommonOpts train_opts, calib_opts, prune_opts, evict_opts, gap_opts;
    std::string calib_method = "threshold";
    double calib_target = 0.65, calib_rmin = 0.4, calib_rmax = 0.9;
    std::string report_in, report_out = "report", report_format = "csv";

    add_common(app.add_subcommand("train-scorer", "train the learned importance scorer"),
               train_opts);
    CLI::App* calib = app.add_subcommand("calibrate", "calibrate an adaptive budget policy");
    add_common(calib, calib_opts);
    calib->add_option("--method", calib_method, "threshold or linear")
        ->check(CLI::IsMember({"threshold", "linear"}));
    calib->add_option("--target-avg", calib_target, "target average keep ratio");
    calib->add_option("--r-min", calib_rmin, "clamp lower bound (linear)");
    calib->add_option("--r-max", calib_rmax, "clamp upper bound (linear)");
    add_common(app.add_subcommand("eval-prune", "vision-pruning evaluation sweep"), prune_opts);
    add_common(app.add_subcommand("eval-evict", "text-eviction evaluation sweep"), evict_opts);
    add_common(app.add_subcommand("gap-stats", "importance-gap statistics for a corpus"),
               gap_opts);
    CLI::App* report = app.add_subcommand("report", "convert a JSON report");
    report->add_option("-i,--in", report_in, "input report (JSON)")->required();
    report->add_option("--out", report_out, "output base path");
    report->add_option("--format", report_format, "json, csv or both")
        ->check(CLI::IsMember({"json", "csv", "both"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("train-scorer")) return cmd_train_scorer(train_opts);
        if (app.got_subcommand("calibrate"))
            return cmd_calibrate(calib_opts, calib_method, calib_target, calib_rmin, calib_rmax);
        if (app.got_subcommand("eval-prune")) return cmd_eval_prune(prune_opts);
        if (app.got_subcommand("eval-evict")) return cmd_eval_evict(evict_opts);
        if (app.got_subcommand("gap-stats")) return cmd_gap_stats(gap_opts);
        if (app.got_subcommand("report")) return cmd_report(report_in, report_out, report_format);
    } catch (const asymtok::ConfigError& e) {
        std::cerr << error_record("config", e.what()).dump() << "\n";
        return 2;
    } catch (const asymtok::InputError& e) {
        std::cerr << error_record("input", e.what()).dump() << "\n";
        return 3;
    } catch (const asymtok::InfeasibleError& e) {
        std::cerr << error_record("infeasible", e.what()).dump() << "\n";
        return 4;
    } catch (const asymtok::IoError& e) {
        std::cerr << error_record("io", e.what()).dump() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << error_record("internal", e.what()).dump() << "\n";
        return 1;
    }
    return 1;
}
