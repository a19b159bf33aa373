#pragma once

#include <map>
#include <vector>

#include "asymtok/model.hpp"
#include "asymtok/scorer.hpp"
#include "asymtok/token.hpp"

namespace asymtok {

// Method A: three difficulty tiers split by two gap thresholds.
struct ThresholdSweepPolicy {
    double g_lo = 0.0;
    double g_hi = 0.0;
    double r_conservative = 0.0;
    double r_moderate = 0.0;
    double r_aggressive = 0.0;

    void validate() const;
};

// Method B: clamped affine map from gap to keep ratio.
struct LinearMapPolicy {
    double r_target = 0.0;
    double slope = 0.0;  // a, expected <= 0
    double g_bar = 0.0;  // mean calibration gap
    double r_min = 0.0;
    double r_max = 0.0;

    void validate() const;
};

double keep_ratio_threshold(double gap, const ThresholdSweepPolicy& policy);
double keep_ratio_linear(double gap, const LinearMapPolicy& policy);

// Physically removes vision tokens outside the top-k keep set. Retained
// tokens keep their original position ids and relative order.
TokenSequence prune_vision(const TokenSequence& seq, const ImportanceScores& scores,
                           double keep_ratio);

// Ratio grid searched by Method A calibration (filtered by the ordering
// constraint r_conservative > r_moderate > r_aggressive).
inline constexpr double kBudgetRatioGrid[] = {0.9, 0.8, 0.75, 0.65, 0.5, 0.4};

// Gap quantiles providing the candidate (g_lo, g_hi) pairs.
inline constexpr double kBudgetGapQuantiles[] = {0.2, 0.4, 0.6, 0.8};

inline constexpr double kBudgetAvgTolerance = 0.02;

// One calibration sample: the gap plus a pruned-output MSE oracle memoized by
// kept-token count, so repeated grid points cost one forward each.
class CalibrationSample {
public:
    CalibrationSample(const ToyVLM& model, TokenSequence seq, ImportanceScores scores);

    double gap() const { return gap_; }
    double mse_at(double keep_ratio) const;

private:
    const ToyVLM* model_;
    TokenSequence seq_;
    ImportanceScores scores_;
    double gap_ = 0.0;
    Mat baseline_text_;
    mutable std::map<size_t, double> mse_by_kept_;
};

struct CalibrationGridPoint {
    ThresholdSweepPolicy threshold;  // valid for Method A points
    double slope = 0.0;              // valid for Method B points
    double realized_avg = 0.0;
    double mean_mse = 0.0;
    bool feasible = false;
};

struct ThresholdCalibration {
    ThresholdSweepPolicy policy;
    double realized_avg = 0.0;
    double mean_mse = 0.0;
    std::vector<CalibrationGridPoint> log;
};

struct LinearCalibration {
    LinearMapPolicy policy;
    double realized_avg = 0.0;
    double mean_mse = 0.0;
    std::vector<CalibrationGridPoint> log;
};

// Grid search over quantile-derived thresholds and the ratio grid. Among
// policies whose realized average keep ratio lands within the tolerance of
// target_avg, picks the one with the lowest mean pruned-output MSE
// (first-in-grid-order wins ties). Throws InfeasibleError when nothing fits.
ThresholdCalibration calibrate_threshold(const std::vector<CalibrationSample>& calibration,
                                         double target_avg);

// One-dimensional slope search over [-5, 0] (step 0.1) with the same
// feasibility rule; g_bar is the mean calibration gap.
LinearCalibration calibrate_linear(const std::vector<CalibrationSample>& calibration,
                                   double target_avg, double r_min, double r_max);

}  // namespace asymtok
