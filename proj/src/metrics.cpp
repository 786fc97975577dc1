#include "kltrace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "kltrace/common.hpp"

namespace kltrace::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_nonempty(std::span<const EvalRecord> r) {
    if (r.empty()) fail_data("metrics need at least one record");
    for (const auto& e : r) {
        if (!std::isfinite(e.pred.x) || !std::isfinite(e.pred.y) || !std::isfinite(e.gt.x) || !std::isfinite(e.gt.y)) {
            fail_data("record '" + e.id + "' has a non-finite point");
        }
    }
}

void check_thresholds(std::span<const double> t) {
    if (t.empty()) fail_config("threshold list is empty");
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(t[i] > 0.0) || (i > 0 && t[i] < t[i - 1])) fail_config("thresholds must be positive and ascending");
    }
}

/// Sorted so the sum, and hence the mean, is independent of record order.
std::vector<double> visible_errors(std::span<const EvalRecord> r) {
    std::vector<double> e;
    for (const auto& x : r) {
        if (!x.gt_occluded) e.push_back(x.error());
    }
    std::sort(e.begin(), e.end());
    return e;
}

double within_share(const std::vector<double>& errs, double t) {
    if (errs.empty()) return kNaN;
    const auto n = std::upper_bound(errs.begin(), errs.end(), t) - errs.begin();
    return static_cast<double>(n) / static_cast<double>(errs.size());
}

double jaccard_at(std::span<const EvalRecord> r, double t) {
    long tp = 0, fp = 0, fn = 0;
    for (const auto& x : r) {
        const bool close = x.error() <= t;
        const bool pv = !x.pred_occluded, gv = !x.gt_occluded;
        if (pv && gv && close) ++tp;
        if (pv && (!gv || !close)) ++fp;
        if (gv && (!pv || !close)) ++fn;
    }
    const long den = tp + fp + fn;
    return den == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(den);
}

}  // namespace

double EvalRecord::error() const { return std::hypot(pred.x - gt.x, pred.y - gt.y); }

double average_distance(std::span<const EvalRecord> r) {
    check_nonempty(r);
    const auto e = visible_errors(r);
    if (e.empty()) return kNaN;
    double s = 0.0;
    for (double v : e) s += v;
    return s / static_cast<double>(e.size());
}

double delta_avg(std::span<const EvalRecord> r, std::span<const double> thresholds) {
    check_nonempty(r);
    check_thresholds(thresholds);
    const auto e = visible_errors(r);
    if (e.empty()) return kNaN;
    double s = 0.0;
    for (double t : thresholds) s += within_share(e, t);
    return s / static_cast<double>(thresholds.size());
}

double average_jaccard(std::span<const EvalRecord> r, std::span<const double> thresholds) {
    check_nonempty(r);
    check_thresholds(thresholds);
    double s = 0.0;
    for (double t : thresholds) s += jaccard_at(r, t);
    return s / static_cast<double>(thresholds.size());
}

double occlusion_accuracy(std::span<const EvalRecord> r) {
    check_nonempty(r);
    long ok = 0;
    for (const auto& x : r) ok += x.pred_occluded == x.gt_occluded;
    return static_cast<double>(ok) / static_cast<double>(r.size());
}

Report evaluate(std::span<const EvalRecord> r, std::span<const double> thresholds) {
    Report rep;
    rep.ad = average_distance(r);
    rep.delta_avg = delta_avg(r, thresholds);
    rep.aj = average_jaccard(r, thresholds);
    rep.oa = occlusion_accuracy(r);
    rep.count = static_cast<int>(r.size());
    const auto e = visible_errors(r);
    rep.visible = static_cast<int>(e.size());
    for (double t : thresholds) rep.per_threshold.push_back({t, within_share(e, t), jaccard_at(r, t)});
    return rep;
}

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string fmt(double v) {
    if (!std::isfinite(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

std::string report_json(const Report& rep) {
    nlohmann::json j{{"AD", num(rep.ad)},           {"AJ", num(rep.aj)},     {"delta_avg", num(rep.delta_avg)},
                     {"OA", num(rep.oa)},           {"count", rep.count},    {"visible", rep.visible}};
    j["per_threshold"] = nlohmann::json::array();
    for (const auto& t : rep.per_threshold) {
        j["per_threshold"].push_back({{"threshold", t.threshold}, {"within", num(t.within)}, {"jaccard", num(t.jaccard)}});
    }
    return j.dump();
}

std::string csv_header() { return "config,AD,AJ,delta_avg,OA,count,visible"; }

std::string csv_row(const std::string& label, const Report& rep) {
    std::string l = label;
    if (l.find_first_of(",\"\n") != std::string::npos) {
        std::string q = "\"";
        for (char c : l) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        l = q + "\"";
    }
    return l + "," + fmt(rep.ad) + "," + fmt(rep.aj) + "," + fmt(rep.delta_avg) + "," + fmt(rep.oa) + "," +
           std::to_string(rep.count) + "," + std::to_string(rep.visible);
}

}  // namespace kltrace::metrics
