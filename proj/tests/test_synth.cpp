#include <doctest.h>

#include <cmath>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/synth.hpp"

using namespace kltrace;
using namespace kltrace::synth;

namespace {

SceneSpec translate_spec(int dx, int dy) {
    SceneSpec s;
    s.scenario = Scenario::translate;
    s.sprite.size = 16;
    s.sprite.texture_seed = 42;
    s.center_x = 30;
    s.center_y = 30;
    s.dx = dx;
    s.dy = dy;
    s.background_seed = 7;
    return s;
}

// Independent footprint test for rect sprites with integer centers.
bool in_rect(int x, int y, int cx, int cy, int size) {
    const int lo = -(size / 2);
    return x - cx >= lo && x - cx < lo + size && y - cy >= lo && y - cy < lo + size;
}

}  // namespace

TEST_CASE("static scene has zero flow and no occlusion") {
    const Clip c = generate_clip(translate_spec(0, 0));
    REQUIRE(c.flows.size() == 1);
    for (float v : c.flows[0].uv) CHECK(v == 0.0f);
    CHECK(c.occlusions[0].count() == 0);
    CHECK(c.frames[0] == c.frames[1]);
}

TEST_CASE("translated sprite carries its displacement, background stays put") {
    const SceneSpec s = translate_spec(3, -2);
    const Clip c = generate_clip(s);
    const FlowField& f = c.flows[0];
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            if (in_rect(x, y, s.center_x, s.center_y, s.sprite.size)) {
                CHECK(f.u(x, y) == 3.0f);
                CHECK(f.v(x, y) == -2.0f);
            } else {
                CHECK(f.u(x, y) == 0.0f);
                CHECK(f.v(x, y) == 0.0f);
            }
        }
    }
}

TEST_CASE("warp identity holds for every visible pixel with integer flow") {
    for (Scenario sc : kAllScenarios) {
        for (std::uint64_t seed = 1; seed <= 12; ++seed) {
            const Clip c = generate_clip(random_scene(sc, seed));
            const Frame& a = c.frames[0];
            const Frame& b = c.frames[1];
            const FlowField& f = c.flows[0];
            for (int y = 0; y < a.height; ++y) {
                for (int x = 0; x < a.width; ++x) {
                    if (c.occlusions[0].at(x, y)) continue;
                    const float u = f.u(x, y), v = f.v(x, y);
                    if (u != std::round(u) || v != std::round(v)) continue;
                    const int tx = x + static_cast<int>(u), ty = y + static_cast<int>(v);
                    REQUIRE(b.contains(tx, ty));
                    for (int ch = 0; ch < 3; ++ch) REQUIRE(b.at(tx, ty)[ch] == a.at(x, y)[ch]);
                }
            }
        }
    }
}

TEST_CASE("occluder_pass occlusion equals a brute-force z-order check") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SceneSpec s = random_scene(Scenario::occluder_pass, seed);
        s.sprite.shape = Shape::rect;
        const Clip c = generate_clip(s);
        const int pole_lo1 = s.occluder_x + s.occluder_shift;
        const int pole_hi1 = pole_lo1 + s.occluder_width;
        auto pole0 = [&](int x) { return x >= s.occluder_x && x < s.occluder_x + s.occluder_width; };
        auto pole1 = [&](int x) { return x >= pole_lo1 && x < pole_hi1; };
        auto sprite1 = [&](int x, int y) { return in_rect(x, y, s.center_x + s.dx, s.center_y + s.dy, s.sprite.size); };
        for (int y = 0; y < s.height; ++y) {
            for (int x = 0; x < s.width; ++x) {
                bool want;
                if (pole0(x)) {
                    want = !(x + s.occluder_shift >= 0 && x + s.occluder_shift < s.width);
                } else if (in_rect(x, y, s.center_x, s.center_y, s.sprite.size)) {
                    const int tx = x + s.dx, ty = y + s.dy;
                    want = tx < 0 || ty < 0 || tx >= s.width || ty >= s.height || pole1(tx);
                } else {
                    want = pole1(x) || sprite1(x, y);
                }
                REQUIRE(c.occlusions[0].at(x, y) == want);
            }
        }
    }
}

TEST_CASE("generation is deterministic and seeds matter") {
    const Clip a = generate_clip(random_scene(Scenario::camera_pan, 77));
    const Clip b = generate_clip(random_scene(Scenario::camera_pan, 77));
    CHECK(a.frames == b.frames);
    CHECK(a.flows == b.flows);
    CHECK(a.occlusions == b.occlusions);
    const Clip c = generate_clip(random_scene(Scenario::camera_pan, 78));
    CHECK_FALSE(a.frames == c.frames);
}

TEST_CASE("flow magnitude is bounded by the scene's motion and finite") {
    for (Scenario sc : kAllScenarios) {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            const SceneSpec s = random_scene(sc, seed);
            const Clip c = generate_clip(s);
            const double bound = s.motion_magnitude();
            const FlowField& f = c.flows[0];
            for (int y = 0; y < f.height; ++y) {
                for (int x = 0; x < f.width; ++x) {
                    REQUIRE(std::isfinite(f.u(x, y)));
                    REQUIRE(std::hypot(f.u(x, y), f.v(x, y)) <= bound + 1e-6);
                    if (!c.occlusions[0].at(x, y)) {
                        const double tx = x + f.u(x, y), ty = y + f.v(x, y);
                        REQUIRE(tx > -0.5);
                        REQUIRE(ty > -0.5);
                        REQUIRE(tx < f.width - 0.5);
                        REQUIRE(ty < f.height - 0.5);
                    }
                }
            }
        }
    }
}

TEST_CASE("visible pixels with integer flow land on distinct targets") {
    // If two visible pixels shared a target, at least one of them would have
    // to be hidden behind the other in frame b.
    for (Scenario sc : kAllScenarios) {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            const Clip c = generate_clip(random_scene(sc, seed));
            const FlowField& f = c.flows[0];
            std::vector<int> hits(static_cast<std::size_t>(f.width) * f.height, 0);
            for (int y = 0; y < f.height; ++y) {
                for (int x = 0; x < f.width; ++x) {
                    if (c.occlusions[0].at(x, y)) continue;
                    const float u = f.u(x, y), v = f.v(x, y);
                    if (u != std::round(u) || v != std::round(v)) continue;
                    const int tx = x + static_cast<int>(u), ty = y + static_cast<int>(v);
                    REQUIRE(++hits[static_cast<std::size_t>(ty) * f.width + tx] == 1);
                }
            }
        }
    }
}

TEST_CASE("invalid scenes are rejected") {
    SceneSpec s = translate_spec(1, 1);
    s.sprite.size = 80;
    CHECK_THROWS_AS(generate_clip(s), Error);
    s = translate_spec(30, 0);
    s.center_x = 60;
    s.sprite.size = 8;
    // Moves the sprite fully off the right edge.
    CHECK_THROWS_AS(generate_clip(s), Error);
    s = translate_spec(40, 0);
    CHECK_THROWS_AS(generate_clip(s), Error);
}

TEST_CASE("sample_queries honours counts and visibility classes") {
    const Clip still = generate_clip(translate_spec(0, 0));
    CHECK(sample_queries(still, {0, 1.0, 0.5, 1}).empty());
    const auto vis = sample_queries(still, {10, 1.0, 0.5, 1});
    CHECK(vis.size() == 10);
    for (const auto& q : vis) CHECK_FALSE(q.occluded);

    const Clip occ = generate_clip(random_scene(Scenario::occluder_pass, 3));
    const auto mixed = sample_queries(occ, {10, 0.8, 0.5, 2});
    REQUIRE(mixed.size() == 10);
    int n_occ = 0;
    for (const auto& q : mixed) {
        const int x = static_cast<int>(q.query.x), y = static_cast<int>(q.query.y);
        CHECK(q.occluded == occ.occlusions[0].at(x, y));
        CHECK(q.target.x == doctest::Approx(x + occ.flows[0].u(x, y)));
        n_occ += q.occluded ? 1 : 0;
    }
    CHECK(n_occ == 2);

    CHECK_THROWS_AS(sample_queries(still, {10, 0.5, 0.5, 1}), Error);
}

TEST_CASE("dataset generation is independent of worker count") {
    DatasetConfig cfg;
    cfg.num_clips = 12;
    cfg.seed = 5;
    const Dataset a = generate_dataset(cfg, 1);
    const Dataset b = generate_dataset(cfg, 3);
    REQUIRE(a.clips.size() == 12);
    CHECK(a.queries == b.queries);
    for (std::size_t i = 0; i < a.clips.size(); ++i) CHECK(a.clips[i].frames == b.clips[i].frames);
    int counts[6] = {};
    for (const auto& c : a.clips) counts[static_cast<int>(c.spec.scenario)] += 1;
    for (int n : counts) CHECK(n == 2);
}
