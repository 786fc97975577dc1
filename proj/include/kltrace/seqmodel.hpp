#pragma once

// Autoregressive next-frame model over (location, token) pairs.
//
// Sequence layout for one training example or rollout:
//   [F1 tokens, raster order] [revealed F2 tokens] [START] [decoded F2 tokens]
// Every token carries additive token, location and frame embeddings. START and
// each decoded token also carry a query embedding for the location decoded
// next, so the output at that position is the distribution for that location.
// The prefix (F1 + revealed) attends bidirectionally within itself; from START
// on, attention is causal.
//
// Positional structure: 2D rotary phases on part of every query/key head
// (queries use the target location, keys their own location), and optionally
// the same phases on values for "value-rotary" heads, whose outputs are rotated
// back by the query location. A value-rotary head therefore mixes relative
// offsets rather than absolute positions.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/image.hpp"
#include "kltrace/synth.hpp"
#include "kltrace/tokenizer.hpp"

namespace kltrace::seq {

enum class Variant { distributional_random_access, distributional_raster, deterministic_l2 };
enum class RevealMode { random_subset, raster_prefix, overwrite_during_rollout, full };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view s);
std::string_view reveal_mode_name(RevealMode m);
RevealMode parse_reveal_mode(std::string_view s);

struct ModelConfig {
    int layers = 4;
    int model_dim = 128;
    int heads = 4;
    int mlp_dim = 256;
    int K = 512;
    int gh = 16;
    int gw = 16;
    int patch_dim = 48;  // pixel outputs of the deterministic head
    Variant variant = Variant::distributional_random_access;
    int rope_pairs = 2;          // rotary frequency pairs per axis per head (0 disables)
    int value_rotary_heads = 0;  // trailing heads whose values are rotated too
    bool final_norm = true;      // false with layers == 0 gives a purely linear model
    std::uint64_t rng_seed = 0;

    int cells() const { return gh * gw; }
    int head_dim() const { return model_dim / heads; }
    bool distributional() const { return variant != Variant::deterministic_l2; }
    int out_dim() const { return distributional() ? K : patch_dim; }
    /// Throws Error(config) on inconsistent dimensions.
    void validate() const;
};

struct TensorInfo {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// All weights of a model in one flat buffer, with named views. Gradients and
/// optimizer moments reuse the same layout.
struct Layout {
    std::vector<TensorInfo> tensors;
    std::size_t total = 0;
    const TensorInfo& find(std::string_view name) const;
};
Layout make_layout(const ModelConfig& cfg);

template <class T>
struct Model {
    ModelConfig cfg;
    Layout layout;
    std::vector<T> w;

    const T* p(std::string_view name) const { return w.data() + layout.find(name).offset; }
    T* p(std::string_view name) { return w.data() + layout.find(name).offset; }
};

/// Deterministic in cfg.rng_seed. Output projection starts at zero so the
/// initial prediction is uniform over codes (or mid-gray for the pixel head).
template <class T>
Model<T> init_model(const ModelConfig& cfg);

template <class To, class From>
Model<To> convert(const Model<From>& m);

/// Teacher-forced sequence for loss computation.
struct Sequence {
    std::vector<int> tok;    // code index, K = START
    std::vector<int> loc;    // cell index or -1
    std::vector<int> frame;  // 0 = F1, 1 = F2
    std::vector<int> qloc;   // target cell for START / decoded tokens, else -1
    std::vector<int> target;  // target code per position or -1
    std::vector<float> target_pixels;  // patch_dim per position with a target (l2 only), scaled to [-0.5, 0.5]
    int prefix = 0;
    int size() const { return static_cast<int>(tok.size()); }
};

/// Builds the layout above. `order` lists the hidden cells in decode order;
/// `f2_frame` (optional) supplies per-cell pixel targets for the l2 head.
Sequence make_sequence(const ModelConfig& cfg, const tok::TokenGrid& f1, const tok::TokenGrid& f2,
                       std::span<const int> revealed, std::span<const int> order, const Frame* f2_frame = nullptr);

/// Mean loss over target positions (cross-entropy in nats, or mean squared
/// error per pixel channel on the [-0.5, 0.5] scale). Accumulates gradients
/// scaled by `grad_scale` into `grad` when given.
template <class T>
double loss_and_grad(const Model<T>& m, const Sequence& s, std::vector<T>* grad, double grad_scale = 1.0);

/// Teacher-forced logits for every target position (rows in suffix order).
std::vector<float> forward_targets(const Model<float>& m, const Sequence& s);

// ----------------------------------------------------------------- rollout

struct MaskSpec {
    RevealMode mode = RevealMode::random_subset;
    std::vector<int> revealed;   // cells given as ground truth before decoding
    std::vector<int> overwrite;  // overwrite_during_rollout: cells replaced by ground truth after sampling
};

struct DecodeOrder {
    std::vector<int> cells;
    std::uint64_t seed = 0;
};

/// random_subset draws round(fraction * cells) cells; raster_prefix takes the
/// first ceil(fraction * cells) raster cells; overwrite_during_rollout reveals
/// nothing and pre-draws round(fraction * cells) cells to overwrite; full
/// reveals everything.
MaskSpec make_mask(RevealMode mode, double fraction, int cells, std::uint64_t seed);
/// Hidden cells in raster order, or shuffled with `seed` when `random`.
DecodeOrder make_order(const MaskSpec& mask, int cells, bool random, std::uint64_t seed);

struct LogitsGrid {
    int gh = 0;
    int gw = 0;
    int dim = 0;
    std::vector<float> values;      // cells x dim
    std::vector<std::uint8_t> valid;

    const float* row(int cell) const { return values.data() + static_cast<std::size_t>(cell) * dim; }
    int valid_count() const;
};

struct Rollout {
    LogitsGrid logits;      // distributional: code logits; l2: predicted pixels in [0, 255]
    tok::TokenGrid tokens;  // revealed cells hold ground truth
};

struct SamplingOptions {
    float temperature = 1.0f;
    int top_k = 50;      // <= 0 means the full vocabulary
    bool parallel = false;  // one pass, every hidden cell queried from the prefix alone
};

/// Checks the mask/order pair against the variant and grid. Throws Error(config).
void check_rollout_inputs(const ModelConfig& cfg, const MaskSpec& mask, const DecodeOrder& order);

/// Rolls out several F1 variants against the same F2 conditioning, mask, order
/// and sampling seed. Each rollout owns an identical RNG stream, so rows that
/// share F1 produce bit-identical results.
std::vector<Rollout> rollout_batch(const Model<float>& m, std::span<const tok::TokenGrid> f1s,
                                   const tok::TokenGrid& f2, const MaskSpec& mask, const DecodeOrder& order,
                                   std::uint64_t sampling_seed, const SamplingOptions& opts,
                                   const tok::Codebook* codebook = nullptr);

Rollout forward_logits(const Model<float>& m, const tok::TokenGrid& f1, const tok::TokenGrid& f2,
                       const MaskSpec& mask, const DecodeOrder& order, std::uint64_t sampling_seed,
                       const SamplingOptions& opts, const tok::Codebook* codebook = nullptr);

/// Draws a code from logits with temperature and top-k by Gumbel-max, the
/// per-code noise hashed from one draw of `rng` (exactly one per call). Ties
/// in the top-k cut go to the lower index.
int sample_code(const float* logits, int n, float temperature, int top_k, Rng& rng);

// ---------------------------------------------------------------- training

struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t t = 0;
};

struct Checkpoint {
    ModelConfig cfg;
    Model<float> model;
    AdamState adam;
    std::int64_t step = 0;
    std::uint64_t codebook_digest = 0;
};

/// "KLTM" | u32 version | u64 header length | JSON header | f32 tensors.
std::vector<std::uint8_t> serialize(const Checkpoint& c);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin);
void save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& path);

struct Example {
    tok::TokenGrid f1;
    tok::TokenGrid f2;
    Frame f2_frame;
};

/// Example i of a stream. Must be a pure function of the index.
using ExampleSource = std::function<Example(std::uint64_t index)>;

/// Synthetic training stream: random scenes of every scenario, optionally
/// zoomed to a random window (half extent) with probability `zoom_prob`.
ExampleSource synthetic_source(const tok::Codebook& cb, std::uint64_t seed, double zoom_prob = 0.25,
                               const synth::SceneOptions& scene = {});

struct TrainOptions {
    int steps = 1000;
    int batch = 8;
    double lr = 3e-4;
    int warmup = 0;
    double clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double reveal_max = 0.5;
    std::uint64_t seed = 0;
    int log_every = 50;
    int eval_every = 0;     // held-out loss interval (0 = never)
    int eval_examples = 16;
};

struct TrainLog {
    std::int64_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double heldout = -1.0;  // < 0 when not evaluated at this step
};

/// Fresh checkpoint at step 0 holding init_model(cfg).
Checkpoint new_checkpoint(const ModelConfig& cfg, std::uint64_t codebook_digest);

/// Continues from c.step up to opts.steps total. Batch slots may run on
/// `workers` threads; the trajectory does not depend on the worker count.
/// Throws Error(numerical) on a non-finite loss.
void train(Checkpoint& c, const ExampleSource& train_src, const ExampleSource& heldout_src, const TrainOptions& opts,
           const std::function<void(const TrainLog&)>& on_log = {}, int workers = 1);

/// Masks and orders for example i of a stream as used during training and
/// held-out evaluation; reveal fraction is drawn from [0, reveal_max].
void draw_conditioning(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t index, double reveal_max,
                       std::vector<int>& revealed, std::vector<int>& order);

/// Mean hidden-token cross-entropy (or pixel MSE) over `n` examples with a
/// fixed reveal fraction and mode.
double heldout_loss(const Model<float>& m, const ExampleSource& src, int n, RevealMode mode, double fraction,
                    std::uint64_t seed);

// ------------------------------------------------------------ grad check

struct GradCheckReport {
    double max_rel_error = 0.0;
    int checked = 0;
    std::string worst;
};

/// Central differences on a deterministic sample of weights. Relative error is
/// |a - n| / max(|a| + |n|, 1e-6).
GradCheckReport grad_check(const Model<double>& m, std::span<const Sequence> batch, double epsilon, int samples,
                           std::uint64_t seed);

}  // namespace kltrace::seq
