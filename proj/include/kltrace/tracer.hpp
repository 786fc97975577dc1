#pragma once

// Perturb-and-track flow readout. A white Gaussian bump is added to frame 1
// at the query; clean and perturbed frame 1 are rolled out against the same
// partially revealed frame 2 (same mask, decode order and sampling seed), and
// the cell where the two predictions differ most is the bump's destination.
// The difference is either the per-cell KL divergence of the predicted code
// distributions or the RGB difference of the decoded predictions.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kltrace/image.hpp"
#include "kltrace/seqmodel.hpp"
#include "kltrace/synth.hpp"
#include "kltrace/tokenizer.hpp"

namespace kltrace::trace {

struct PerturbSpec {
    Point center;
    double sigma = 2.0;
    double amplitude = 255.0;
};

/// out = clamp(in + amplitude * exp(-|x - center|^2 / (2 sigma^2))) per channel,
/// rounded to the nearest integer. Throws Error(config) on a bad spec.
Frame inject_perturbation(const Frame& frame, const PerturbSpec& p);

enum class Mode { kl, rgb };
std::string_view mode_name(Mode m);
Mode parse_mode(std::string_view s);

/// Per-cell divergence with a validity mask (cells that received a prediction).
struct DivergenceMap {
    int gh = 0;
    int gw = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> valid;

    DivergenceMap() = default;
    DivergenceMap(int w, int h)
        : gh(h), gw(w), values(static_cast<std::size_t>(w) * h, 0.0), valid(static_cast<std::size_t>(w) * h, 0) {}
    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * gw + x]; }
};

/// KL(softmax(clean) || softmax(pert)) in nats on every valid cell. Throws
/// Error(config) on shape or validity mismatch.
DivergenceMap kl_map(const seq::LogitsGrid& clean, const seq::LogitsGrid& pert);

/// Mean absolute channel difference per patch; every cell valid.
DivergenceMap rgb_diff_map(const Frame& clean_pred, const Frame& pert_pred, int patch);

struct TraceSettings {
    int num_masks = 5;
    std::vector<double> scales{1.0, 0.5};
    double reveal_fraction = 0.1;
    seq::RevealMode reveal_mode = seq::RevealMode::random_subset;
    std::optional<double> occlusion_threshold;  // nats (kl) or intensity (rgb)
    Mode mode = Mode::kl;
    std::uint64_t rng_seed = 0;
    double sigma = 2.0;
    double amplitude = 255.0;
    seq::SamplingOptions sampling;

    /// Throws Error(config) on invalid settings.
    void validate() const;
    /// Stable digest of every field; recorded with each prediction.
    std::uint64_t digest() const;
};

/// Everything a single rollout pair depends on besides the model.
struct TraceInputs {
    const seq::Model<float>* model = nullptr;
    const tok::Codebook* codebook = nullptr;
};

/// Predicted frame for a rollout: decoded codes for distributional models,
/// the pixel head's output for the deterministic one.
Frame predicted_frame(const seq::Rollout& r, const seq::ModelConfig& cfg, const tok::Codebook& cb);

/// Clean vs perturbed rollout for a single query with an explicit mask and
/// order; returns the KL or RGB map on the model grid.
DivergenceMap trace_once(const TraceInputs& in, const Frame& f1, const Frame& f2, const PerturbSpec& p,
                         const seq::MaskSpec& mask, const seq::DecodeOrder& order, std::uint64_t sampling_seed,
                         Mode mode, const seq::SamplingOptions& sampling = {});

/// Aggregated map and readout for one query, before occlusion thresholding.
struct Trace {
    Point query;
    Point target;
    double peak = 0.0;     // aggregated divergence at the argmax cell
    DivergenceMap map;     // on the common grid
    double cell_size = 0;  // common-grid cell size in source pixels
};

/// Traces several queries of one frame pair. Each mask (and scale) is drawn
/// from (settings.rng_seed, stream, mask index, scale index), so results
/// depend only on the inputs. At scale 1 all queries share the clean rollout.
std::vector<Trace> trace_queries(const TraceInputs& in, const Frame& f1, const Frame& f2, std::span<const Point> queries,
                                 const TraceSettings& s, std::uint64_t stream);

/// Same rollouts read out in several modes at once, indexed [mode][query];
/// settings.mode is ignored. Each mode's result equals trace_queries with
/// that mode.
std::vector<std::vector<Trace>> trace_queries_modes(const TraceInputs& in, const Frame& f1, const Frame& f2,
                                                    std::span<const Point> queries, const TraceSettings& s,
                                                    std::uint64_t stream, std::span<const Mode> modes);

struct FlowEstimate {
    Point query;
    Point target;
    bool occluded = false;
    double confidence = 0.0;
};

/// Applies the occlusion threshold (which must be set).
FlowEstimate to_estimate(const Trace& t, const TraceSettings& s);

std::vector<FlowEstimate> extract_flow(const TraceInputs& in, const Frame& f1, const Frame& f2,
                                       std::span<const Point> queries, const TraceSettings& s, std::uint64_t stream);

/// Readout on a map: argmax (ties to the lowest index) refined by the
/// divergence-weighted centroid of the 3x3 neighbourhood, in source pixels.
/// Returns the fallback point when the map is identically zero.
Point readout(const DivergenceMap& map, double cell_size, Point fallback, double* peak);

struct Calibration {
    double threshold = 0.0;
    double accuracy = 0.0;
};

/// Sweeps thresholds below the smallest peak, at midpoints between distinct
/// sorted peaks and above the largest; predicted occluded = peak < threshold.
/// Maximizes accuracy, ties to the lowest threshold. Throws on empty input.
Calibration calibrate_occlusion_threshold(std::span<const double> peaks, std::span<const std::uint8_t> occluded);

/// Window used at zoom `scale` around `center`, kept inside the frame.
Window zoom_window(Point center, double scale, int width, int height);

/// Viridis-like colour ramp over [0, 1].
std::array<std::uint8_t, 3> ramp(double t);

/// Map resampled to width x height pixels (nearest cell), normalized to its
/// maximum and coloured with ramp().
Frame heatmap(const DivergenceMap& map, double cell_size, int width, int height);

/// Frame with a line from query to target and markers at both ends.
Frame overlay(const Frame& f, Point query, Point target, bool occluded);

}  // namespace kltrace::trace
