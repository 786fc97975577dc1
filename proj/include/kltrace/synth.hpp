#pragma once

// Synthetic two-frame (or short multi-frame) clips with exact dense flow and
// occlusion ground truth. Rendering is nearest-neighbour so that integer
// motion satisfies the warp identity F_b[p + flow(p)] == F_a[p] exactly.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kltrace/image.hpp"

namespace kltrace::synth {

enum class Scenario { translate, rotate_inplace, occluder_pass, textureless_region, twin_swap, camera_pan };
inline constexpr std::array<Scenario, 6> kAllScenarios = {
    Scenario::translate,          Scenario::rotate_inplace, Scenario::occluder_pass,
    Scenario::textureless_region, Scenario::twin_swap,      Scenario::camera_pan};

std::string_view scenario_name(Scenario s);
Scenario parse_scenario(std::string_view name);

enum class Shape { rect, disc };

struct SpriteParams {
    Shape shape = Shape::rect;
    int size = 16;                 // side length / diameter in pixels
    std::uint64_t texture_seed = 0;
    bool textured = true;          // false -> one flat colour
};

struct SceneSpec {
    Scenario scenario = Scenario::translate;
    int width = 64;
    int height = 64;
    int num_frames = 2;
    SpriteParams sprite;
    int center_x = 32;  // sprite center in frame 0 (pixels)
    int center_y = 32;
    int dx = 0;  // per-frame displacement of the primary motion (pixels)
    int dy = 0;
    double rotation_deg = 0.0;  // per-frame in-place rotation
    int second_x = 0;           // twin_swap: partner center in frame 0
    int second_y = 0;
    int occluder_x = 0;      // occluder_pass: pole left edge in frame 0
    int occluder_width = 6;
    int occluder_shift = 0;  // per-frame horizontal pole motion
    std::uint64_t background_seed = 0;
    std::uint64_t rng_seed = 0;

    /// Largest displacement any surface undergoes between consecutive frames.
    double motion_magnitude() const;
};

struct Clip {
    std::string id;
    SceneSpec spec;
    std::vector<Frame> frames;
    std::vector<FlowField> flows;           // consecutive pairs (t, t+1)
    std::vector<OcclusionMask> occlusions;  // consecutive pairs (t, t+1)
};

struct QueryRecord {
    std::string clip;
    int frame_a = 0;
    int frame_b = 1;
    Point query;
    Point target;
    bool occluded = false;
    bool operator==(const QueryRecord&) const = default;
};

/// Parameters for drawing a random scene of a given scenario.
struct SceneOptions {
    int width = 64;
    int height = 64;
    int num_frames = 2;
    int max_displacement = 8;
    int min_sprite = 14;
    int max_sprite = 24;
};

/// Deterministic random scene drawn from `seed` (all randomness flows from it).
SceneSpec random_scene(Scenario scenario, std::uint64_t seed, const SceneOptions& opts = {});

/// Throws Error(config) when the spec violates its invariants.
void validate(const SceneSpec& spec);

/// Pure function of `spec`.
Clip generate_clip(const SceneSpec& spec, std::string id = "clip");

/// Renders frame t of the scene (frame 0 is the reference pose).
Frame render_frame(const SceneSpec& spec, int t);

struct QuerySampling {
    int count = 10;
    double visible_fraction = 1.0;
    /// Of the visible queries, the share drawn from pixels with nonzero flow
    /// (when any exist). Keeps static background from dominating the suite.
    double moving_fraction = 0.5;
    std::uint64_t seed = 0;
};

/// Queries for the (0, 1) frame pair. Throws Error(data) when the clip lacks
/// enough pixels of a requested visibility class.
std::vector<QueryRecord> sample_queries(const Clip& clip, const QuerySampling& q);

/// Dataset-level generation: clip i uses scenario mix[i % mix.size()] and seed
/// derive_seed(master_seed, i).
struct DatasetConfig {
    int num_clips = 200;
    std::vector<Scenario> mix{kAllScenarios.begin(), kAllScenarios.end()};
    SceneOptions scene;
    int queries_per_clip = 10;
    double visible_fraction = 0.9;
    double moving_fraction = 0.5;
    std::uint64_t seed = 1;
};

struct Dataset {
    std::uint64_t seed = 0;
    std::vector<Clip> clips;
    std::vector<QueryRecord> queries;
};

/// Clips are generated independently (optionally across `workers` threads)
/// and assembled in index order, so the result does not depend on workers.
Dataset generate_dataset(const DatasetConfig& cfg, int workers = 1);

}  // namespace kltrace::synth
