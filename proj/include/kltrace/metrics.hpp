#pragma once

// Point-tracking metrics in the TAP-Vid style. Distance metrics use only
// queries whose ground truth is visible; Jaccard and occlusion accuracy use
// every query.

#include <span>
#include <string>
#include <vector>

#include "kltrace/image.hpp"

namespace kltrace::metrics {

struct EvalRecord {
    std::string id;
    Point pred;
    bool pred_occluded = false;
    Point gt;
    bool gt_occluded = false;

    double error() const;
};

inline const std::vector<double> kDefaultThresholds{1, 2, 4, 8, 16};

/// Mean endpoint error over gt-visible records; NaN when none are visible.
/// Throws Error(data) on empty input.
double average_distance(std::span<const EvalRecord> r);

/// Mean over thresholds of the share of gt-visible records within the
/// threshold; NaN when none are visible.
double delta_avg(std::span<const EvalRecord> r, std::span<const double> thresholds);

/// Mean over thresholds of TP / (TP + FP + FN), 1 when the denominator is 0.
double average_jaccard(std::span<const EvalRecord> r, std::span<const double> thresholds);

double occlusion_accuracy(std::span<const EvalRecord> r);

struct ThresholdRow {
    double threshold = 0.0;
    double within = 0.0;   // share of visible records within the threshold
    double jaccard = 0.0;
};

struct Report {
    double ad = 0.0;
    double aj = 0.0;
    double delta_avg = 0.0;
    double oa = 0.0;
    int count = 0;
    int visible = 0;
    std::vector<ThresholdRow> per_threshold;
};

Report evaluate(std::span<const EvalRecord> r, std::span<const double> thresholds);

/// Compact JSON object; NaN metrics are written as null.
std::string report_json(const Report& rep);
std::string csv_header();
/// One CSV row; `label` is written first and quoted when needed.
std::string csv_row(const std::string& label, const Report& rep);

}  // namespace kltrace::metrics
