#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/metrics.hpp"

using namespace kltrace;
using namespace kltrace::metrics;

namespace {

EvalRecord rec(double ex, double ey, bool pred_occ = false, bool gt_occ = false) {
    return {"q", {10.0 + ex, 20.0 + ey}, pred_occ, {10.0, 20.0}, gt_occ};
}

const std::vector<double> T = kDefaultThresholds;

// Independent enumeration straight from the definitions: one pass per
// threshold, no shared helpers with the library.
struct Oracle {
    double ad, delta, aj, oa;
};

Oracle oracle(const std::vector<EvalRecord>& r, const std::vector<double>& th) {
    Oracle o{};
    std::vector<double> errs;
    int ok = 0;
    for (const auto& x : r) {
        const double e = std::sqrt((x.pred.x - x.gt.x) * (x.pred.x - x.gt.x) + (x.pred.y - x.gt.y) * (x.pred.y - x.gt.y));
        if (!x.gt_occluded) errs.push_back(e);
        ok += x.pred_occluded == x.gt_occluded ? 1 : 0;
    }
    o.oa = static_cast<double>(ok) / static_cast<double>(r.size());
    std::sort(errs.begin(), errs.end());
    double s = 0;
    for (double e : errs) s += e;
    o.ad = errs.empty() ? NAN : s / static_cast<double>(errs.size());
    double ds = 0, js = 0;
    for (double t : th) {
        int in = 0;
        for (double e : errs) in += e <= t ? 1 : 0;
        ds += errs.empty() ? NAN : static_cast<double>(in) / static_cast<double>(errs.size());
        int tp = 0, fp = 0, fn = 0;
        for (const auto& x : r) {
            const double e = std::sqrt((x.pred.x - x.gt.x) * (x.pred.x - x.gt.x) + (x.pred.y - x.gt.y) * (x.pred.y - x.gt.y));
            if (!x.pred_occluded && !x.gt_occluded && e <= t) ++tp;
            else if (!x.pred_occluded) ++fp;
            if (!x.gt_occluded && (x.pred_occluded || e > t)) ++fn;
        }
        js += (tp + fp + fn) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp + fn);
    }
    o.delta = ds / static_cast<double>(th.size());
    o.aj = js / static_cast<double>(th.size());
    return o;
}

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

TEST_CASE("hand cases") {
    const std::vector<EvalRecord> r{rec(1.5, 0), rec(0, 3)};
    CHECK(average_distance(r) == 2.25);
    CHECK(delta_avg(r, T) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(average_jaccard(r, T) == doctest::Approx((0 + 1.0 / 3 + 1 + 1 + 1) / 5).epsilon(1e-15));
    CHECK(average_jaccard(r, T) == doctest::Approx(0.6667).epsilon(1e-4));

    const std::vector<EvalRecord> exact{rec(0, 0), rec(0, 0, true, true)};
    CHECK(average_distance(exact) == 0.0);
    CHECK(delta_avg(exact, T) == 1.0);
    CHECK(average_jaccard(exact, T) == 1.0);
    CHECK(occlusion_accuracy(exact) == 1.0);
}

TEST_CASE("occluded ground truth does not enter AD") {
    std::vector<EvalRecord> r{rec(1.5, 0), rec(0, 3)};
    const double before = average_distance(r);
    r.push_back(rec(40, 40, false, true));
    CHECK(average_distance(r) == before);
}

TEST_CASE("occlusion accuracy") {
    const std::vector<EvalRecord> r{rec(0, 0), rec(0, 0, true, true), rec(0, 0, true, false), rec(0, 0, false, false)};
    CHECK(occlusion_accuracy(r) == 0.75);
    std::vector<EvalRecord> base;
    for (int i = 0; i < 100; ++i) base.push_back(rec(0, 0, false, i < 10));
    CHECK(occlusion_accuracy(base) == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("all occluded and predicted occluded: vacuous Jaccard") {
    const std::vector<EvalRecord> r{rec(5, 5, true, true), rec(1, 1, true, true)};
    CHECK(average_jaccard(r, T) == 1.0);
    CHECK(std::isnan(average_distance(r)));
}

TEST_CASE("errors") {
    CHECK_THROWS_AS(average_distance({}), Error);
    CHECK_THROWS_AS(occlusion_accuracy({}), Error);
    const std::vector<EvalRecord> r{rec(1, 1)};
    CHECK_THROWS_AS(delta_avg(r, std::vector<double>{}), Error);
    CHECK_THROWS_AS(delta_avg(r, std::vector<double>{4, 2}), Error);
}

TEST_CASE("brute-force oracle agrees on random fixtures, and metrics are order-free") {
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(1, 20));
        std::vector<EvalRecord> r;
        for (int i = 0; i < n; ++i) {
            // Half-pixel grid keeps some errors exactly on thresholds.
            const double ex = 0.5 * static_cast<double>(rng.uniform_int(-24, 24));
            const double ey = rng.uniform() < 0.5 ? 0.0 : 0.5 * static_cast<double>(rng.uniform_int(-24, 24));
            r.push_back(rec(ex, ey, rng.uniform() < 0.2, rng.uniform() < 0.2));
        }
        const Oracle o = oracle(r, T);
        const Report rep = evaluate(r, T);
        CHECK(same(rep.ad, o.ad));
        CHECK(same(rep.delta_avg, o.delta));
        CHECK(same(rep.aj, o.aj));
        CHECK(rep.oa == o.oa);
        CHECK(rep.aj >= 0.0);
        CHECK(rep.aj <= 1.0);

        auto shuffled = r;
        rng.shuffle(shuffled.begin(), shuffled.end());
        const Report rep2 = evaluate(shuffled, T);
        CHECK(same(rep2.ad, rep.ad));
        CHECK(same(rep2.delta_avg, rep.delta_avg));
        CHECK(rep2.aj == rep.aj);
        CHECK(rep2.oa == rep.oa);
    }
}

TEST_CASE("delta_avg never drops when a threshold grows") {
    Rng rng(4);
    std::vector<EvalRecord> r;
    for (int i = 0; i < 15; ++i) r.push_back(rec(rng.uniform(-10, 10), rng.uniform(-10, 10)));
    std::vector<double> t = T;
    double prev = delta_avg(r, t);
    for (int k = 0; k < 40; ++k) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, 4));
        t[i] += rng.uniform(0, 2);
        std::sort(t.begin(), t.end());
        const double now = delta_avg(r, t);
        CHECK(now >= prev);
        prev = now;
    }
}

TEST_CASE("AJ does not exceed delta_avg when every query is visible and flagged visible") {
    Rng rng(5);
    std::vector<EvalRecord> r;
    for (int i = 0; i < 12; ++i) r.push_back(rec(rng.uniform(-10, 10), rng.uniform(-10, 10)));
    CHECK(average_jaccard(r, T) <= delta_avg(r, T));
}

TEST_CASE("report serialization") {
    const std::vector<EvalRecord> r{rec(1.5, 0), rec(0, 3)};
    const Report rep = evaluate(r, T);
    const std::string j = report_json(rep);
    CHECK(j.find("\"AD\":2.25") != std::string::npos);
    CHECK(j.find("per_threshold") != std::string::npos);
    CHECK(csv_row("a,b", rep).rfind("\"a,b\",2.250000,", 0) == 0);
}
