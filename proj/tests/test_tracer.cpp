#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/tracer.hpp"

using namespace kltrace;
using namespace kltrace::trace;

namespace {

Frame noise_frame(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Frame f(w, h);
    for (auto& p : f.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return f;
}

seq::LogitsGrid grid(int cells, int dim, std::vector<float> values) {
    seq::LogitsGrid g;
    g.gh = 1;
    g.gw = cells;
    g.dim = dim;
    g.values = std::move(values);
    g.valid.assign(static_cast<std::size_t>(cells), 1);
    return g;
}

// 16x16 frames, 4x4 patches, 4x4 grid, scrambled weights: small enough to
// run many rollouts, large enough for zoom windows to matter.
struct Rig {
    tok::Codebook cb;
    seq::Model<float> model;
    TraceInputs in() const { return {&model, &cb}; }
};

Rig rig(seq::Variant v = seq::Variant::distributional_random_access, std::uint64_t seed = 1) {
    seq::ModelConfig c;
    c.layers = 1;
    c.model_dim = 16;
    c.heads = 2;
    c.mlp_dim = 16;
    c.K = 16;
    c.gh = 4;
    c.gw = 4;
    c.variant = v;
    c.rng_seed = seed;
    Rig r{{}, seq::init_model<float>(c)};
    Rng rng(seed);
    for (auto& w : r.model.w) w = static_cast<float>(w + 0.5 * rng.normal());
    std::vector<Frame> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(noise_frame(16, 16, seed * 10 + static_cast<std::uint64_t>(i)));
    r.cb = tok::fit_codebook(frames, {16, 3, seed, 4});
    return r;
}

TraceSettings settings(Mode mode, int masks, std::vector<double> scales) {
    TraceSettings s;
    s.mode = mode;
    s.num_masks = masks;
    s.scales = std::move(scales);
    s.reveal_fraction = 0.25;
    s.rng_seed = 3;
    return s;
}

}  // namespace

TEST_CASE("white bump hand values") {
    Frame f(9, 9);
    const Frame out = inject_perturbation(f, {{4, 4}, 2.0, 255.0});
    for (int ch = 0; ch < 3; ++ch) CHECK(out.at(4, 4)[ch] == 255);
    // 255 * exp(-0.5) = 154.67 -> 155 after rounding.
    CHECK(out.at(6, 4)[0] == 155);
    CHECK(out.at(4, 2)[1] == 155);
    CHECK(f.at(4, 4)[0] == 0);

    Frame grey(9, 9);
    std::fill(grey.pixels.begin(), grey.pixels.end(), std::uint8_t{200});
    CHECK(inject_perturbation(grey, {{4, 4}, 2.0, 255.0}).at(4, 4)[2] == 255);
    CHECK(inject_perturbation(grey, {{4, 4}, 2.0, 0.0}) == grey);
    const Frame n = noise_frame(9, 9, 4);
    CHECK(inject_perturbation(n, {{1.5, 7.25}, 2.0, 0.0}) == n);
}

TEST_CASE("bump rejects bad specs") {
    const Frame f(8, 8);
    CHECK_THROWS_AS(inject_perturbation(f, {{8, 0}, 2.0, 255.0}), Error);
    CHECK_THROWS_AS(inject_perturbation(f, {{-0.5, 0}, 2.0, 255.0}), Error);
    CHECK_THROWS_AS(inject_perturbation(f, {{1, 1}, 0.0, 255.0}), Error);
}

TEST_CASE("KL map hand value, identity and non-negativity") {
    const auto clean = grid(1, 2, {0.0f, 0.0f});
    const auto pert = grid(1, 2, {std::log(3.0f), 0.0f});
    const double want = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    CHECK(want == doctest::Approx(0.14384).epsilon(1e-4));
    CHECK(kl_map(clean, pert).values[0] == doctest::Approx(want).epsilon(1e-6));
    CHECK(kl_map(clean, clean).values[0] == 0.0);

    Rng rng(2);
    std::vector<float> a(40 * 33), b(40 * 33);
    for (auto& v : a) v = static_cast<float>(3 * rng.normal());
    for (auto& v : b) v = static_cast<float>(3 * rng.normal());
    const auto m = kl_map(grid(40, 33, a), grid(40, 33, b));
    for (double v : m.values) CHECK(v >= 0.0);
    for (double v : kl_map(grid(40, 33, a), grid(40, 33, a)).values) CHECK(v == 0.0);
}

TEST_CASE("KL map is unchanged by a constant shift of a cell's logits in both grids") {
    Rng rng(3);
    std::vector<float> a(10 * 8), b(10 * 8);
    for (auto& v : a) v = static_cast<float>(rng.normal());
    for (auto& v : b) v = static_cast<float>(rng.normal());
    const auto base = kl_map(grid(10, 8, a), grid(10, 8, b));
    for (int cell = 0; cell < 10; ++cell) {
        const float s = static_cast<float>(rng.uniform(-4, 4)), t = static_cast<float>(rng.uniform(-4, 4));
        for (int k = 0; k < 8; ++k) {
            a[static_cast<std::size_t>(cell * 8 + k)] += s;
            b[static_cast<std::size_t>(cell * 8 + k)] += t;
        }
    }
    const auto shifted = kl_map(grid(10, 8, a), grid(10, 8, b));
    for (std::size_t i = 0; i < base.values.size(); ++i) CHECK(shifted.values[i] == doctest::Approx(base.values[i]).epsilon(1e-5));
    const auto argmax = [](const DivergenceMap& m) { return std::max_element(m.values.begin(), m.values.end()) - m.values.begin(); };
    CHECK(argmax(base) == argmax(shifted));
    const Point a0 = readout(base, 4, {0, 0}, nullptr), a1 = readout(shifted, 4, {0, 0}, nullptr);
    CHECK(a0.x == doctest::Approx(a1.x).epsilon(1e-4));
    CHECK(a0.y == doctest::Approx(a1.y).epsilon(1e-4));
}

TEST_CASE("KL map rejects mismatched grids") {
    auto a = grid(2, 3, std::vector<float>(6, 0.0f));
    auto b = grid(2, 3, std::vector<float>(6, 0.0f));
    b.valid[1] = 0;
    CHECK_THROWS_AS(kl_map(a, b), Error);
    CHECK_THROWS_AS(kl_map(a, grid(3, 2, std::vector<float>(6, 0.0f))), Error);
    a.valid[1] = 0;
    const auto m = kl_map(a, b);
    CHECK(m.valid[0] == 1);
    CHECK(m.valid[1] == 0);
}

TEST_CASE("RGB difference map") {
    const Frame a = noise_frame(8, 8, 1);
    Frame b = a;
    for (int y = 4; y < 8; ++y) {
        for (int x = 0; x < 4; ++x) b.at(x, y)[1] = static_cast<std::uint8_t>(a.at(x, y)[1] < 128 ? a.at(x, y)[1] + 30 : a.at(x, y)[1] - 30);
    }
    const auto m = rgb_diff_map(a, b, 4);
    CHECK(m.values == std::vector<double>{0, 0, 10, 0});
    CHECK(rgb_diff_map(b, a, 4).values == m.values);
    for (double v : rgb_diff_map(a, a, 4).values) CHECK(v == 0.0);
    CHECK_THROWS_AS(rgb_diff_map(a, Frame(8, 4), 4), Error);
}

TEST_CASE("readout: argmax, tie to lowest index, centroid, zero fallback") {
    DivergenceMap m(4, 4);
    double peak = -1;
    CHECK(readout(m, 4, {7.5, 2}, &peak) == Point{7.5, 2});
    CHECK(peak == 0.0);

    m.values[5] = 2.0;  // cell (1, 1)
    m.values[10] = 2.0;
    const Point p = readout(m, 4, {}, &peak);
    CHECK(peak == 2.0);
    // Neighbourhood of (1, 1) also holds (2, 2), so the centroid sits halfway.
    CHECK(p.x == doctest::Approx(0.5 * (5.5 + 9.5)));
    CHECK(p.y == doctest::Approx(0.5 * (5.5 + 9.5)));

    DivergenceMap single(4, 4);
    single.values[15] = 1.0;
    CHECK(readout(single, 4, {}, nullptr) == Point{13.5, 13.5});
}

TEST_CASE("occlusion calibration") {
    const std::vector<double> peaks{0.5, 0.7, 1.0, 3.0};
    const std::vector<std::uint8_t> none(4, 0);
    const auto all_visible = calibrate_occlusion_threshold(peaks, none);
    CHECK(all_visible.accuracy == 1.0);
    CHECK(all_visible.threshold < 0.5);

    const std::vector<std::uint8_t> sep{1, 1, 0, 0};
    const auto c = calibrate_occlusion_threshold(peaks, sep);
    CHECK(c.accuracy == 1.0);
    CHECK(c.threshold == doctest::Approx(0.85));
    std::size_t ok = 0;
    for (std::size_t i = 0; i < peaks.size(); ++i) ok += (peaks[i] < c.threshold) == (sep[i] != 0);
    CHECK(static_cast<double>(ok) / 4 == c.accuracy);

    const std::vector<std::uint8_t> all{1, 1, 1, 1};
    CHECK(calibrate_occlusion_threshold(peaks, all).threshold > 3.0);
    CHECK_THROWS_AS(calibrate_occlusion_threshold({}, {}), Error);
}

TEST_CASE("zoom windows stay inside the frame") {
    for (double s : {0.25, 0.5, 1.0}) {
        for (Point q : {Point{0, 0}, Point{63, 63}, Point{10, 50}, Point{31.5, 31.5}}) {
            const Window w = zoom_window(q, s, 64, 64);
            const Point lo = w.to_source({-0.5, -0.5}), hi = w.to_source({63.5, 63.5});
            CHECK(lo.x >= -0.5 - 1e-9);
            CHECK(lo.y >= -0.5 - 1e-9);
            CHECK(hi.x <= 63.5 + 1e-9);
            CHECK(hi.y <= 63.5 + 1e-9);
            CHECK(hi.x - lo.x == doctest::Approx(64 * s));
        }
    }
}

TEST_CASE("null perturbation gives an exactly zero map") {
    for (Mode mode : {Mode::kl, Mode::rgb}) {
        const Rig r = rig();
        const Frame f1 = noise_frame(16, 16, 7), f2 = noise_frame(16, 16, 8);
        const auto mask = seq::make_mask(seq::RevealMode::random_subset, 0.25, 16, 1);
        const auto order = seq::make_order(mask, 16, true, 2);
        const auto m = trace_once(r.in(), f1, f2, {{5, 6}, 2.0, 0.0}, mask, order, 9, mode);
        for (double v : m.values) CHECK(v == 0.0);

        TraceSettings s = settings(mode, 2, {1.0, 0.5});
        s.amplitude = 0.0;
        const std::vector<Point> qs{{3, 3}, {12.5, 9}};
        for (const Trace& t : trace_queries(r.in(), f1, f2, qs, s, 4)) {
            CHECK(t.peak == 0.0);
            CHECK(t.target == t.query);
        }
    }
}

TEST_CASE("a real bump produces a non-zero map") {
    const Rig r = rig();
    const Frame f1 = noise_frame(16, 16, 7), f2 = noise_frame(16, 16, 8);
    const auto mask = seq::make_mask(seq::RevealMode::random_subset, 0.25, 16, 1);
    const auto order = seq::make_order(mask, 16, true, 2);
    const auto m = trace_once(r.in(), f1, f2, {{5, 6}, 2.0, 255.0}, mask, order, 9, Mode::kl);
    double mx = 0;
    for (double v : m.values) mx = std::max(mx, v);
    CHECK(mx > 0.0);
}

TEST_CASE("trace_queries is deterministic and batching queries changes nothing") {
    const Rig r = rig();
    const Frame f1 = noise_frame(16, 16, 11), f2 = noise_frame(16, 16, 12);
    const std::vector<Point> qs{{2, 3}, {9, 9}, {15, 0}};
    for (Mode mode : {Mode::kl, Mode::rgb}) {
        const TraceSettings s = settings(mode, 3, {1.0, 0.5});
        const auto a = trace_queries(r.in(), f1, f2, qs, s, 5);
        const auto b = trace_queries(r.in(), f1, f2, qs, s, 5);
        REQUIRE(a.size() == 3);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].map.values == b[i].map.values);
            CHECK(a[i].target == b[i].target);
            CHECK(a[i].cell_size == 2.0);
            CHECK(a[i].map.gw == 8);
            const auto one = trace_queries(r.in(), f1, f2, std::span<const Point>(&qs[i], 1), s, 5);
            CHECK(one[0].map.values == a[i].map.values);
        }
        const auto other = trace_queries(r.in(), f1, f2, qs, s, 6);
        CHECK(other[0].map.values != a[0].map.values);
    }
}

TEST_CASE("reading several modes from shared rollouts matches single-mode tracing") {
    const Rig r = rig();
    const Frame f1 = noise_frame(16, 16, 15), f2 = noise_frame(16, 16, 16);
    const std::vector<Point> qs{{1, 14}, {8, 8}};
    const std::vector<Mode> modes{Mode::rgb, Mode::kl};
    const auto both = trace_queries_modes(r.in(), f1, f2, qs, settings(Mode::kl, 2, {1.0, 0.5}), 9, modes);
    for (std::size_t md = 0; md < modes.size(); ++md) {
        const auto one = trace_queries(r.in(), f1, f2, qs, settings(modes[md], 2, {1.0, 0.5}), 9);
        for (std::size_t k = 0; k < qs.size(); ++k) {
            CHECK(both[md][k].map.values == one[k].map.values);
            CHECK(both[md][k].target == one[k].target);
        }
    }
}

TEST_CASE("one mask at one scale reproduces trace_once") {
    const Rig r = rig();
    const Frame f1 = noise_frame(16, 16, 13), f2 = noise_frame(16, 16, 14);
    const TraceSettings s = settings(Mode::kl, 1, {1.0});
    const Point q{6, 10};
    const auto t = trace_queries(r.in(), f1, f2, std::span<const Point>(&q, 1), s, 2);
    const std::uint64_t ms = derive_seed(s.rng_seed, 2, 0, 0);
    const auto mask = seq::make_mask(s.reveal_mode, s.reveal_fraction, 16, derive_seed(ms, 1));
    const auto order = seq::make_order(mask, 16, true, derive_seed(ms, 2));
    const auto m = trace_once(r.in(), f1, f2, {q, s.sigma, s.amplitude}, mask, order, derive_seed(ms, 3), Mode::kl);
    for (std::size_t i = 0; i < m.values.size(); ++i) CHECK(t[0].map.values[i] == m.values[i]);
}

TEST_CASE("variant and settings checks") {
    const Rig raster = rig(seq::Variant::distributional_raster);
    const Frame f = noise_frame(16, 16, 1);
    const Point q{4, 4};
    CHECK_THROWS_AS(trace_queries(raster.in(), f, f, std::span<const Point>(&q, 1), settings(Mode::kl, 1, {1.0}), 0), Error);
    TraceSettings ok = settings(Mode::kl, 1, {1.0});
    ok.reveal_mode = seq::RevealMode::raster_prefix;
    CHECK_NOTHROW(trace_queries(raster.in(), f, f, std::span<const Point>(&q, 1), ok, 0));

    const Rig l2 = rig(seq::Variant::deterministic_l2);
    CHECK_THROWS_AS(trace_queries(l2.in(), f, f, std::span<const Point>(&q, 1), settings(Mode::kl, 1, {1.0}), 0), Error);
    CHECK_NOTHROW(trace_queries(l2.in(), f, f, std::span<const Point>(&q, 1), settings(Mode::rgb, 1, {1.0}), 0));

    TraceSettings bad = settings(Mode::kl, 0, {1.0});
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = settings(Mode::kl, 1, {});
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = settings(Mode::kl, 1, {1.0});
    bad.reveal_fraction = 1.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK_THROWS_AS(to_estimate(Trace{}, settings(Mode::kl, 1, {1.0})), Error);
    CHECK(settings(Mode::kl, 1, {1.0}).digest() != settings(Mode::rgb, 1, {1.0}).digest());
}

TEST_CASE("occlusion flag follows the threshold") {
    Trace t;
    t.peak = 0.3;
    TraceSettings s;
    s.occlusion_threshold = 0.5;
    CHECK(to_estimate(t, s).occluded);
    s.occlusion_threshold = 0.3;
    CHECK_FALSE(to_estimate(t, s).occluded);
    CHECK(to_estimate(t, s).confidence == 0.3);
}

TEST_CASE("heatmap and overlay images") {
    DivergenceMap m(4, 4);
    m.values[0] = 1.0;
    const Frame h = heatmap(m, 4, 16, 16);
    CHECK(h.width == 16);
    CHECK(h.height == 16);
    const auto top = ramp(1.0), bottom = ramp(0.0);
    CHECK(std::equal(top.begin(), top.end(), h.at(0, 0)));
    CHECK(std::equal(bottom.begin(), bottom.end(), h.at(15, 15)));
    CHECK(heatmap(m, 4, 16, 16) == h);
    const Frame o = overlay(Frame(16, 16), {2, 2}, {12, 12}, false);
    CHECK(o.at(7, 7)[0] == 255);
    CHECK(o.at(12, 12)[1] == 255);
}
