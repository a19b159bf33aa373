#include "asymtok/budget.hpp"

#include <algorithm>
#include <cmath>

namespace asymtok {

void ThresholdSweepPolicy::validate() const {
    if (!(g_lo < g_hi)) throw ConfigError("ThresholdSweepPolicy: g_lo must be < g_hi");
    auto ok_ratio = [](double r) { return r > 0.0 && r <= 1.0; };
    if (!ok_ratio(r_conservative) || !ok_ratio(r_moderate) || !ok_ratio(r_aggressive))
        throw ConfigError("ThresholdSweepPolicy: ratios must lie in (0, 1]");
    if (!(r_conservative > r_moderate && r_moderate > r_aggressive))
        throw ConfigError("ThresholdSweepPolicy: ratios must be strictly decreasing");
}

void LinearMapPolicy::validate() const {
    auto ok_ratio = [](double r) { return r > 0.0 && r <= 1.0; };
    if (!ok_ratio(r_min) || !ok_ratio(r_max) || !ok_ratio(r_target))
        throw ConfigError("LinearMapPolicy: ratios must lie in (0, 1]");
    if (!(r_min <= r_target && r_target <= r_max))
        throw ConfigError("LinearMapPolicy: need r_min <= r_target <= r_max");
}

double keep_ratio_threshold(double gap, const ThresholdSweepPolicy& policy) {
    policy.validate();
    if (gap < policy.g_lo) return policy.r_conservative;
    if (gap < policy.g_hi) return policy.r_moderate;
    return policy.r_aggressive;
}

double keep_ratio_linear(double gap, const LinearMapPolicy& policy) {
    policy.validate();
    const double raw = policy.r_target + policy.slope * (gap - policy.g_bar);
    return std::clamp(raw, policy.r_min, policy.r_max);
}

TokenSequence prune_vision(const TokenSequence& seq, const ImportanceScores& scores,
                           double keep_ratio) {
    if (scores.size() != seq.vision_count())
        throw InputError("prune_vision: scores length must equal vision token count");
    const std::vector<size_t> keep = select_top_k(scores, keep_ratio);
    std::vector<bool> keep_flag(scores.size(), false);
    for (size_t k : keep) keep_flag[k] = true;
    TokenSequence out;
    size_t vis = 0;
    for (const Token& t : seq.entries) {
        if (t.modality == Modality::Vision) {
            if (keep_flag[vis]) out.entries.push_back(t);
            ++vis;
        } else {
            out.entries.push_back(t);
        }
    }
    return out;
}

CalibrationSample::CalibrationSample(const ToyVLM& model, TokenSequence seq,
                                     ImportanceScores scores)
    : model_(&model), seq_(std::move(seq)), scores_(std::move(scores)) {
    if (scores_.size() != seq_.vision_count())
        throw InputError("CalibrationSample: scores/sequence mismatch");
    gap_ = importance_gap(scores_);
    const ForwardTrace trace =
        forward_prefill_trace(*model_, seq_, MaskAddends::none(seq_.size()));
    baseline_text_ = text_hidden_states(trace, seq_);
}

double CalibrationSample::mse_at(double keep_ratio) const {
    const size_t kept = select_top_k(scores_, keep_ratio).size();
    const auto it = mse_by_kept_.find(kept);
    if (it != mse_by_kept_.end()) return it->second;
    const TokenSequence pruned = prune_vision(seq_, scores_, keep_ratio);
    const ForwardTrace trace =
        forward_prefill_trace(*model_, pruned, MaskAddends::none(pruned.size()));
    const double mse = hidden_state_mse(text_hidden_states(trace, pruned), baseline_text_);
    mse_by_kept_[kept] = mse;
    return mse;
}

namespace {

double gap_quantile(std::vector<double> sorted_gaps, double q) {
    const auto n = sorted_gaps.size();
    const auto idx = static_cast<size_t>(std::lround(q * static_cast<double>(n - 1)));
    return sorted_gaps[idx];
}

}  // namespace

ThresholdCalibration calibrate_threshold(const std::vector<CalibrationSample>& calibration,
                                         double target_avg) {
    if (calibration.empty()) throw InputError("calibrate_threshold: empty calibration set");
    std::vector<double> gaps;
    gaps.reserve(calibration.size());
    for (const auto& s : calibration) gaps.push_back(s.gap());
    std::sort(gaps.begin(), gaps.end());

    std::vector<double> quantiles;
    for (double q : kBudgetGapQuantiles) quantiles.push_back(gap_quantile(gaps, q));

    ThresholdCalibration result;
    bool found = false;
    for (size_t lo = 0; lo < quantiles.size(); ++lo) {
        for (size_t hi = lo + 1; hi < quantiles.size(); ++hi) {
            double g_lo = quantiles[lo];
            double g_hi = quantiles[hi];
            if (!(g_lo < g_hi)) g_hi = g_lo + 1e-9;  // degenerate gap distribution
            for (double rc : kBudgetRatioGrid) {
                for (double rm : kBudgetRatioGrid) {
                    if (!(rc > rm)) continue;
                    for (double ra : kBudgetRatioGrid) {
                        if (!(rm > ra)) continue;
                        ThresholdSweepPolicy policy{g_lo, g_hi, rc, rm, ra};
                        double avg = 0.0, mse = 0.0;
                        for (const auto& s : calibration) {
                            const double r = keep_ratio_threshold(s.gap(), policy);
                            avg += r;
                            mse += s.mse_at(r);
                        }
                        avg /= static_cast<double>(calibration.size());
                        mse /= static_cast<double>(calibration.size());
                        const bool feasible = std::abs(avg - target_avg) <= kBudgetAvgTolerance;
                        result.log.push_back({policy, 0.0, avg, mse, feasible});
                        if (feasible && (!found || mse < result.mean_mse)) {
                            found = true;
                            result.policy = policy;
                            result.realized_avg = avg;
                            result.mean_mse = mse;
                        }
                    }
                }
            }
        }
    }
    if (!found)
        throw InfeasibleError(
            "calibrate_threshold: no grid policy lands within the average-budget tolerance");
    return result;
}

LinearCalibration calibrate_linear(const std::vector<CalibrationSample>& calibration,
                                   double target_avg, double r_min, double r_max) {
    if (calibration.empty()) throw InputError("calibrate_linear: empty calibration set");
    double g_bar = 0.0;
    for (const auto& s : calibration) g_bar += s.gap();
    g_bar /= static_cast<double>(calibration.size());

    LinearCalibration result;
    bool found = false;
    // Slopes from -5.0 to 0.0 in 0.1 steps; a = 0 reproduces uniform pruning
    // at r_target, so the feasible set is never empty when r_target fits.
    for (int step = -50; step <= 0; ++step) {
        LinearMapPolicy policy;
        policy.r_target = target_avg;
        policy.slope = static_cast<double>(step) / 10.0;
        policy.g_bar = g_bar;
        policy.r_min = r_min;
        policy.r_max = r_max;
        policy.validate();
        double avg = 0.0, mse = 0.0;
        for (const auto& s : calibration) {
            const double r = keep_ratio_linear(s.gap(), policy);
            avg += r;
            mse += s.mse_at(r);
        }
        avg /= static_cast<double>(calibration.size());
        mse /= static_cast<double>(calibration.size());
        const bool feasible = std::abs(avg - target_avg) <= kBudgetAvgTolerance;
        CalibrationGridPoint point;
        point.slope = policy.slope;
        point.realized_avg = avg;
        point.mean_mse = mse;
        point.feasible = feasible;
        result.log.push_back(point);
        if (feasible && (!found || mse < result.mean_mse)) {
            found = true;
            result.policy = policy;
            result.realized_avg = avg;
            result.mean_mse = mse;
        }
    }
    if (!found)
        throw InfeasibleError(
            "calibrate_linear: no slope lands within the average-budget tolerance");
    return result;
}

}  // namespace asymtok
