#pragma once

// Pipeline shared by the command-line tool and the acceptance suite: run
// configuration, tokenizer fitting, training, extraction over a dataset,
// occlusion calibration and evaluation.
//
// Every seed in a run is derived from the master seed, so a stored config
// plus its seed reproduces the run exactly.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kltrace/metrics.hpp"
#include "kltrace/seqmodel.hpp"
#include "kltrace/synth.hpp"
#include "kltrace/tokenizer.hpp"
#include "kltrace/tracer.hpp"

namespace kltrace::harness {

using json = nlohmann::json;

inline constexpr int kConfigVersion = 1;

struct TokenizerConfig {
    int k = 512;
    int iters = 20;
    int patch = 4;
    int scenes = 200;          // random scenes rendered for fitting (both frames each)
    double zoom_share = 0.25;  // share of scenes also added as a half-extent zoom
};

/// Held-out split the occlusion threshold is calibrated on.
struct CalibrationConfig {
    int num_clips = 30;
    std::vector<synth::Scenario> mix{synth::Scenario::occluder_pass};
    int queries_per_clip = 6;
    double visible_fraction = 0.5;
};

struct AblationConfig {
    std::vector<trace::Mode> modes{trace::Mode::kl, trace::Mode::rgb};
    std::vector<seq::Variant> variants{seq::Variant::distributional_random_access};
    std::vector<seq::RevealMode> reveal_modes{seq::RevealMode::random_subset};
    std::vector<int> num_masks{1, 5};
    std::vector<int> num_scales{1, 2};  // first n entries of trace.scales
    std::vector<double> reveal_fractions{0.1};
};

struct RunConfig {
    std::uint64_t seed = 1;
    synth::DatasetConfig dataset;
    TokenizerConfig tokenizer;
    seq::ModelConfig model;
    seq::TrainOptions train;
    double zoom_prob = 0.25;
    int heldout_examples = 32;
    trace::TraceSettings trace;
    std::vector<double> thresholds = metrics::kDefaultThresholds;
    CalibrationConfig calibration;
    AblationConfig ablate;

    /// Fills every derived seed from `seed`.
    void resolve();
    std::uint64_t digest() const;
};

json to_json(const RunConfig& c);
/// Throws Error(config) on unknown keys, wrong types or an unsupported version.
RunConfig config_from_json(const json& j);
/// Applies "a.b.c=value"; value is parsed as JSON when possible, else taken
/// as a string. Throws Error(config) on a malformed override.
void apply_override(json& j, const std::string& assignment);
RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides);

using Logger = std::function<void(const json&)>;

synth::Dataset make_dataset(const RunConfig& c, int workers = 1);
synth::Dataset make_calibration_split(const RunConfig& c, int workers = 1);

tok::Codebook fit_tokenizer(const RunConfig& c, tok::FitReport* report = nullptr);

/// Trains `ckpt` (fresh or resumed) up to c.train.steps. Held-out loss is
/// measured on a stream disjoint from the training stream.
void train_model(const RunConfig& c, const tok::Codebook& cb, seq::Checkpoint& ckpt, const Logger& log = {},
                 int workers = 1);
seq::ExampleSource training_stream(const RunConfig& c, const tok::Codebook& cb);
seq::ExampleSource heldout_stream(const RunConfig& c, const tok::Codebook& cb);

/// One traced query, as written to records.jsonl.
struct Record {
    std::string clip;
    int frame_a = 0;
    int frame_b = 1;
    Point query;
    Point prediction;
    bool occluded = false;
    double confidence = 0.0;
    std::uint64_t settings_digest = 0;
};

std::string record_to_json_line(const Record& r);
void write_records(const std::filesystem::path& path, std::span<const Record> records);
/// Throws Error(data) naming the file and line on malformed input.
std::vector<Record> read_records(const std::filesystem::path& path);

/// Queries of one frame pair traced together; the stream id is a digest of
/// (clip, frame_a, frame_b), so results do not depend on dataset order.
struct QueryGroup {
    std::size_t clip_index = 0;
    int frame_a = 0;
    int frame_b = 1;
    std::vector<std::size_t> queries;  // indices into Dataset::queries
    std::uint64_t stream = 0;
};
std::vector<QueryGroup> group_queries(const synth::Dataset& ds);

/// Traces every query for each requested mode, indexed [mode][query] in
/// dataset order. Groups run on `workers` threads; output order is fixed.
std::vector<std::vector<trace::Trace>> trace_dataset(const trace::TraceInputs& in, const synth::Dataset& ds,
                                                     const trace::TraceSettings& s, std::span<const trace::Mode> modes,
                                                     int workers = 1, const Logger& log = {});

/// Records for traces made with `s`; the occlusion threshold must be set.
std::vector<Record> make_records(const synth::Dataset& ds, std::span<const trace::Trace> traces,
                                 const trace::TraceSettings& s);

/// Calibrates the threshold for `s` on `split` (its own labels).
trace::Calibration calibrate(const trace::TraceInputs& in, const synth::Dataset& split, const trace::TraceSettings& s,
                             int workers = 1);

/// Pairs records with the dataset's ground truth by (clip, frames, query point).
std::vector<metrics::EvalRecord> join(std::span<const Record> records, const synth::Dataset& ds);

/// report.json contents: metrics plus provenance of the run.
json report_document(const metrics::Report& rep, std::uint64_t config_digest, std::uint64_t settings_digest,
                     const synth::Dataset& ds, const seq::ModelConfig& model, int patch);

}  // namespace kltrace::harness
