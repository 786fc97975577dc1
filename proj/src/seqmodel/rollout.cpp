#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "kltrace/common.hpp"
#include "kltrace/seqmodel.hpp"
#include "kltrace/simd/kernels.hpp"
#include "seqmodel/ops.hpp"

namespace kltrace::seq {

int LogitsGrid::valid_count() const {
    return static_cast<int>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

// ------------------------------------------------------------ masks/orders

MaskSpec make_mask(RevealMode mode, double fraction, int cells, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) fail_config("reveal fraction must lie in [0, 1]");
    if (cells <= 0) fail_config("mask needs a non-empty grid");
    MaskSpec m;
    m.mode = mode;
    std::vector<int> all(static_cast<std::size_t>(cells));
    std::iota(all.begin(), all.end(), 0);
    const int rounded = static_cast<int>(std::lround(fraction * cells));
    switch (mode) {
        case RevealMode::random_subset: {
            Rng rng(seed);
            rng.shuffle(all.begin(), all.end());
            m.revealed.assign(all.begin(), all.begin() + rounded);
            std::sort(m.revealed.begin(), m.revealed.end());
            break;
        }
        case RevealMode::raster_prefix: {
            // Small slack so 0.1 * 256 = 25.6 does not become 27 through rounding noise.
            const int n = std::min(cells, static_cast<int>(std::ceil(fraction * cells - 1e-9)));
            m.revealed.assign(all.begin(), all.begin() + n);
            break;
        }
        case RevealMode::overwrite_during_rollout: {
            Rng rng(seed);
            rng.shuffle(all.begin(), all.end());
            m.overwrite.assign(all.begin(), all.begin() + rounded);
            std::sort(m.overwrite.begin(), m.overwrite.end());
            break;
        }
        case RevealMode::full:
            m.revealed = all;
            break;
    }
    return m;
}

DecodeOrder make_order(const MaskSpec& mask, int cells, bool random, std::uint64_t seed) {
    std::vector<std::uint8_t> shown(static_cast<std::size_t>(cells), 0);
    for (int c : mask.revealed) {
        if (c < 0 || c >= cells) fail_config("revealed cell out of range");
        shown[static_cast<std::size_t>(c)] = 1;
    }
    DecodeOrder o;
    o.seed = seed;
    for (int c = 0; c < cells; ++c) {
        if (!shown[static_cast<std::size_t>(c)]) o.cells.push_back(c);
    }
    if (random) {
        Rng rng(seed);
        rng.shuffle(o.cells.begin(), o.cells.end());
    }
    return o;
}

void check_rollout_inputs(const ModelConfig& cfg, const MaskSpec& mask, const DecodeOrder& order) {
    const int g = cfg.cells();
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(g), 0);
    for (int c : mask.revealed) {
        if (c < 0 || c >= g) fail_config("revealed cell " + std::to_string(c) + " outside the grid");
        if (seen[static_cast<std::size_t>(c)]++) fail_config("revealed cell " + std::to_string(c) + " listed twice");
    }
    for (int c : order.cells) {
        if (c < 0 || c >= g) fail_config("decode order cell " + std::to_string(c) + " outside the grid");
        if (seen[static_cast<std::size_t>(c)] == 1) fail_config("decode order touches revealed cell " + std::to_string(c));
        if (seen[static_cast<std::size_t>(c)]) fail_config("decode order repeats cell " + std::to_string(c));
        seen[static_cast<std::size_t>(c)] = 2;
    }
    if (std::count(seen.begin(), seen.end(), std::uint8_t{0}) != 0) fail_config("decode order must cover every hidden cell");
    for (int c : mask.overwrite) {
        if (c < 0 || c >= g) fail_config("overwrite cell outside the grid");
    }
    switch (mask.mode) {
        case RevealMode::full:
            if (static_cast<int>(mask.revealed.size()) != g) fail_config("full mask must reveal every cell");
            break;
        case RevealMode::overwrite_during_rollout:
            if (!mask.revealed.empty()) fail_config("overwrite mode reveals nothing up front");
            break;
        case RevealMode::raster_prefix:
            for (std::size_t i = 0; i < mask.revealed.size(); ++i) {
                if (mask.revealed[i] != static_cast<int>(i)) fail_config("raster_prefix mask is not a raster prefix");
            }
            break;
        case RevealMode::random_subset:
            break;
    }
    if (mask.mode != RevealMode::overwrite_during_rollout && !mask.overwrite.empty()) {
        fail_config("overwrite cells given outside overwrite mode");
    }
    if (cfg.variant == Variant::distributional_raster) {
        if (mask.mode == RevealMode::random_subset) {
            fail_config("raster-order model accepts raster_prefix, overwrite_during_rollout or full masks only");
        }
        if (!std::is_sorted(order.cells.begin(), order.cells.end())) fail_config("raster-order model decodes in raster order");
    }
}

// ----------------------------------------------------------------- sampling

int sample_code(const float* logits, int n, float temperature, int top_k, Rng& rng) {
    const std::uint64_t draw = rng.next_u64();
    if (n <= 0) fail_config("cannot sample from an empty distribution");
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    const int k = (top_k <= 0 || top_k > n) ? n : top_k;
    auto better = [&](int a, int b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    if (!(temperature > 0.0f)) return idx[0];
    // Gumbel-max with noise keyed by code id: an exact sample, and two calls
    // with the same draw on nearby logits almost always pick the same code.
    int best = idx[0];
    double best_score = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
        const int c = idx[static_cast<std::size_t>(i)];
        const double u = (static_cast<double>(derive_seed(draw, static_cast<std::uint64_t>(c)) >> 11) + 0.5) * 0x1.0p-53;
        const double score = static_cast<double>(logits[c]) / temperature - std::log(-std::log(u));
        if (score > best_score) {
            best_score = score;
            best = c;
        }
    }
    return best;
}

// ------------------------------------------------------- cached inference

namespace {

struct LayerW {
    const float *ln1g, *ln1b, *qkvw, *qkvb, *projw, *projb, *ln2g, *ln2b, *fc1w, *fc1b, *fc2w, *fc2b;
};

/// Keys/values of one sequence, rotated, per layer: [cap x d] each.
struct Cache {
    int cap = 0;
    int len = 0;
    std::vector<std::vector<float>> k, v;
};

enum class Attn { bidirectional, self_only };

class Engine {
public:
    explicit Engine(const Model<float>& m) : m_(m), c_(m.cfg) {
        d_ = c_.model_dim;
        hd_ = c_.head_dim();
        heads_ = c_.heads;
        vr_ = c_.value_rotary_heads;
        mlp_ = c_.mlp_dim;
        V_ = c_.out_dim();
        scale_ = 1.0f / std::sqrt(static_cast<float>(hd_));
        for (int li = 0; li < c_.layers; ++li) {
            const std::string p = "l" + std::to_string(li) + ".";
            layers_.push_back({m.p(p + "ln1.g"), m.p(p + "ln1.b"), m.p(p + "qkv.w"), m.p(p + "qkv.b"), m.p(p + "proj.w"),
                               m.p(p + "proj.b"), m.p(p + "ln2.g"), m.p(p + "ln2.b"), m.p(p + "fc1.w"), m.p(p + "fc1.b"),
                               m.p(p + "fc2.w"), m.p(p + "fc2.b")});
        }
        tok_ = m.p("tok_emb");
        loc_ = m.p("loc_emb");
        frm_ = m.p("frame_emb");
        qry_ = m.p("qry_emb");
        if (c_.final_norm) {
            lnfg_ = m.p("lnf.g");
            lnfb_ = m.p("lnf.b");
        }
        outw_ = m.p("out.w");
        outb_ = m.p("out.b");
    }

    Cache new_cache(int cap) const {
        Cache c;
        c.cap = cap;
        c.k.assign(static_cast<std::size_t>(c_.layers), std::vector<float>(static_cast<std::size_t>(cap) * d_));
        c.v = c.k;
        return c;
    }

    /// Adds token/location/frame/query embeddings into x (d floats, zeroed).
    void embed(int tok, int loc, int frame, int qloc, float* x) const {
        std::fill(x, x + d_, 0.0f);
        add_row(x, tok_ + static_cast<std::size_t>(tok) * d_, d_);
        add_row(x, loc_ + static_cast<std::size_t>(loc >= 0 ? loc : c_.cells()) * d_, d_);
        add_row(x, frm_ + static_cast<std::size_t>(frame) * d_, d_);
        if (qloc >= 0) add_row(x, qry_ + static_cast<std::size_t>(qloc) * d_, d_);
    }

    /// Runs n rows belonging to one cache. bidirectional appends them and lets
    /// every row see the whole cache; self_only lets each row see the cache
    /// plus itself without appending.
    void block(Cache& cache, float* X, int n, const std::vector<int>& qpos, const std::vector<int>& kpos, Attn mode) {
        const Rotary<float> rq = make_rotary<float>(qpos, c_.gw, c_.rope_pairs);
        const Rotary<float> rk = make_rotary<float>(kpos, c_.gw, c_.rope_pairs);
        const int base = cache.len;
        if (mode == Attn::bidirectional && base + n > cache.cap) fail_config("rollout cache overflow");
        if (mode == Attn::self_only && base + 1 > cache.cap) fail_config("rollout cache overflow");
        for (int li = 0; li < c_.layers; ++li) {
            pre_attention(li, X, n, rq, rk);
            att_.assign(static_cast<std::size_t>(n) * d_, 0.0f);
            float* K = cache.k[static_cast<std::size_t>(li)].data();
            float* Vc = cache.v[static_cast<std::size_t>(li)].data();
            if (mode == Attn::bidirectional) {
                for (int r = 0; r < n; ++r) store_kv(r, K, Vc, base + r);
                const int lim = base + n;
                probs_.resize(static_cast<std::size_t>(n) * lim);
                for (int h = 0; h < heads_; ++h) {
                    mm<float>(false, true, n, lim, hd_, scale_, qkv_.data() + h * hd_, 3 * d_, K + h * hd_, d_, 0.0f,
                              probs_.data(), lim);
                    for (int r = 0; r < n; ++r) simd::kernels().softmax(probs_.data() + static_cast<std::size_t>(r) * lim, static_cast<std::size_t>(lim), 1.0f);
                    mm<float>(false, false, n, hd_, lim, 1.0f, probs_.data(), lim, Vc + h * hd_, d_, 0.0f,
                              att_.data() + h * hd_, d_);
                }
            } else {
                for (int r = 0; r < n; ++r) {
                    store_kv(r, K, Vc, base);
                    attend_row(r, K, Vc, base + 1);
                }
            }
            post_attention(li, X, n, rq);
        }
        if (mode == Attn::bidirectional) cache.len = base + n;
    }

    /// One new token per cache, causal: each row sees its cache plus itself.
    void step(std::vector<Cache>& caches, float* X, int qpos, int kpos) {
        const int n = static_cast<int>(caches.size());
        const Rotary<float> rq = make_rotary<float>(std::vector<int>(static_cast<std::size_t>(n), qpos), c_.gw, c_.rope_pairs);
        const Rotary<float> rk = make_rotary<float>(std::vector<int>(static_cast<std::size_t>(n), kpos), c_.gw, c_.rope_pairs);
        for (auto& c : caches) {
            if (c.len + 1 > c.cap) fail_config("rollout cache overflow");
        }
        for (int li = 0; li < c_.layers; ++li) {
            pre_attention(li, X, n, rq, rk);
            att_.assign(static_cast<std::size_t>(n) * d_, 0.0f);
            for (int r = 0; r < n; ++r) {
                Cache& c = caches[static_cast<std::size_t>(r)];
                float* K = c.k[static_cast<std::size_t>(li)].data();
                float* Vc = c.v[static_cast<std::size_t>(li)].data();
                store_kv(r, K, Vc, c.len);
                attend_row(r, K, Vc, c.len + 1);
            }
            post_attention(li, X, n, rq);
        }
        for (auto& c : caches) c.len += 1;
    }

    /// Final norm + output projection: out is n x V.
    void head(const float* X, int n, std::vector<float>& out) {
        const float* a = X;
        if (c_.final_norm) {
            layer_norm_rows(X, n, d_, lnfg_, lnfb_, a_, mu_, rs_);
            a = a_.data();
        }
        out.resize(static_cast<std::size_t>(n) * V_);
        linear(a, n, d_, outw_, outb_, V_, out.data());
    }

    int d() const { return d_; }

private:
    void pre_attention(int li, const float* X, int n, const Rotary<float>& rq, const Rotary<float>& rk) {
        const LayerW& w = layers_[static_cast<std::size_t>(li)];
        layer_norm_rows(X, n, d_, w.ln1g, w.ln1b, a_, mu_, rs_);
        qkv_.resize(static_cast<std::size_t>(n) * 3 * d_);
        linear(a_.data(), n, d_, w.qkvw, w.qkvb, 3 * d_, qkv_.data());
        rotate_qkv(qkv_.data(), n, d_, hd_, heads_, vr_, rq, rk, +1);
    }

    void store_kv(int r, float* K, float* Vc, int slot) const {
        const float* row = qkv_.data() + static_cast<std::size_t>(r) * 3 * d_;
        std::copy(row + d_, row + 2 * d_, K + static_cast<std::size_t>(slot) * d_);
        std::copy(row + 2 * d_, row + 3 * d_, Vc + static_cast<std::size_t>(slot) * d_);
    }

    void attend_row(int r, const float* K, const float* Vc, int lim) {
        const auto& kt = simd::kernels();
        scores_.resize(static_cast<std::size_t>(lim));
        const float* q = qkv_.data() + static_cast<std::size_t>(r) * 3 * d_;
        float* o = att_.data() + static_cast<std::size_t>(r) * d_;
        for (int h = 0; h < heads_; ++h) {
            for (int j = 0; j < lim; ++j) {
                scores_[static_cast<std::size_t>(j)] =
                    scale_ * kt.dot(q + h * hd_, K + static_cast<std::size_t>(j) * d_ + h * hd_, static_cast<std::size_t>(hd_));
            }
            kt.softmax(scores_.data(), static_cast<std::size_t>(lim), 1.0f);
            for (int j = 0; j < lim; ++j) {
                kt.axpy(scores_[static_cast<std::size_t>(j)], Vc + static_cast<std::size_t>(j) * d_ + h * hd_, o + h * hd_,
                        static_cast<std::size_t>(hd_));
            }
        }
    }

    void post_attention(int li, float* X, int n, const Rotary<float>& rq) {
        const LayerW& w = layers_[static_cast<std::size_t>(li)];
        derotate_values(att_.data(), n, d_, hd_, heads_, vr_, rq, +1);
        tmp_.resize(static_cast<std::size_t>(n) * d_);
        linear(att_.data(), n, d_, w.projw, w.projb, d_, tmp_.data());
        for (std::size_t i = 0; i < tmp_.size(); ++i) X[i] += tmp_[i];
        layer_norm_rows(X, n, d_, w.ln2g, w.ln2b, a_, mu_, rs_);
        h_.resize(static_cast<std::size_t>(n) * mlp_);
        linear(a_.data(), n, d_, w.fc1w, w.fc1b, mlp_, h_.data());
        for (auto& v : h_) v = gelu(v);
        linear(h_.data(), n, mlp_, w.fc2w, w.fc2b, d_, tmp_.data());
        for (std::size_t i = 0; i < tmp_.size(); ++i) X[i] += tmp_[i];
    }

    const Model<float>& m_;
    const ModelConfig& c_;
    int d_ = 0, hd_ = 0, heads_ = 0, vr_ = 0, mlp_ = 0, V_ = 0;
    float scale_ = 1.0f;
    std::vector<LayerW> layers_;
    const float *tok_ = nullptr, *loc_ = nullptr, *frm_ = nullptr, *qry_ = nullptr;
    const float *lnfg_ = nullptr, *lnfb_ = nullptr, *outw_ = nullptr, *outb_ = nullptr;
    std::vector<float> a_, mu_, rs_, qkv_, att_, probs_, scores_, tmp_, h_;
};

/// Pixel prediction rows ([-0.5, 0.5] scale) -> [0, 255], clamped.
void to_pixel_scale(float* row, int n) {
    for (int i = 0; i < n; ++i) row[i] = std::clamp((row[i] + 0.5f) * 255.0f, 0.0f, 255.0f);
}

}  // namespace

std::vector<Rollout> rollout_batch(const Model<float>& m, std::span<const tok::TokenGrid> f1s, const tok::TokenGrid& f2,
                                   const MaskSpec& mask, const DecodeOrder& order, std::uint64_t sampling_seed,
                                   const SamplingOptions& opts, const tok::Codebook* codebook) {
    const ModelConfig& c = m.cfg;
    const int g = c.cells();
    check_rollout_inputs(c, mask, order);
    if (f2.gw != c.gw || f2.gh != c.gh) fail_config("frame-2 token grid does not match the model grid");
    for (const auto& f1 : f1s) {
        if (f1.gw != c.gw || f1.gh != c.gh) fail_config("frame-1 token grid does not match the model grid");
    }
    const bool dist = c.distributional();
    if (!dist && !codebook && !order.cells.empty() && !opts.parallel) {
        fail_config("the deterministic variant needs a codebook to feed predictions back");
    }
    if (codebook && codebook->k != c.K) fail_config("codebook size does not match the model vocabulary");
    if (!dist && codebook && codebook->patch_dim() != c.patch_dim) fail_config("codebook patch size does not match the model");

    const int B = static_cast<int>(f1s.size());
    const int V = c.out_dim();
    const int R = static_cast<int>(mask.revealed.size());
    const int H = static_cast<int>(order.cells.size());
    const int P = g + R;

    std::vector<Rollout> out(static_cast<std::size_t>(B));
    for (auto& r : out) {
        r.logits.gh = c.gh;
        r.logits.gw = c.gw;
        r.logits.dim = V;
        r.logits.values.assign(static_cast<std::size_t>(g) * V, 0.0f);
        r.logits.valid.assign(static_cast<std::size_t>(g), 0);
        r.tokens = tok::TokenGrid(c.gw, c.gh);
        for (int cell : mask.revealed) r.tokens.cells[static_cast<std::size_t>(cell)] = f2.cells[static_cast<std::size_t>(cell)];
    }
    if (B == 0 || H == 0) return out;

    std::vector<std::uint8_t> overwrite(static_cast<std::size_t>(g), 0);
    for (int cell : mask.overwrite) overwrite[static_cast<std::size_t>(cell)] = 1;

    Engine eng(m);
    const int d = eng.d();
    const int cap = opts.parallel ? P + 1 : P + H;
    std::vector<Cache> caches;
    caches.reserve(static_cast<std::size_t>(B));

    // Prefix: frame 1 in raster order, then the revealed frame-2 cells.
    std::vector<int> ppos(static_cast<std::size_t>(P));
    for (int i = 0; i < g; ++i) ppos[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < R; ++i) ppos[static_cast<std::size_t>(g + i)] = mask.revealed[static_cast<std::size_t>(i)];
    std::vector<float> X(static_cast<std::size_t>(std::max({P, H, B})) * d);
    for (int b = 0; b < B; ++b) {
        const auto& f1 = f1s[static_cast<std::size_t>(b)];
        for (int i = 0; i < g; ++i) eng.embed(f1.cells[static_cast<std::size_t>(i)], i, 0, -1, X.data() + static_cast<std::size_t>(i) * d);
        for (int i = 0; i < R; ++i) {
            const int cell = mask.revealed[static_cast<std::size_t>(i)];
            eng.embed(f2.cells[static_cast<std::size_t>(cell)], cell, 1, -1, X.data() + static_cast<std::size_t>(g + i) * d);
        }
        caches.push_back(eng.new_cache(cap));
        eng.block(caches.back(), X.data(), P, ppos, ppos, Attn::bidirectional);
    }

    std::vector<Rng> rngs(static_cast<std::size_t>(B), Rng(sampling_seed));
    std::vector<float> logits;
    // Records the prediction for `cell` of rollout b and returns the token to feed back.
    auto emit = [&](int b, int cell, float* row) -> int {
        auto& r = out[static_cast<std::size_t>(b)];
        int code = 0;
        if (dist) {
            code = sample_code(row, V, opts.temperature, opts.top_k, rngs[static_cast<std::size_t>(b)]);
        } else {
            to_pixel_scale(row, V);
            if (codebook) {
                code = tok::nearest_code(std::span<const float>(row, static_cast<std::size_t>(V)), *codebook);
            }
        }
        std::copy(row, row + V, r.logits.values.begin() + static_cast<std::ptrdiff_t>(cell) * V);
        r.logits.valid[static_cast<std::size_t>(cell)] = 1;
        if (overwrite[static_cast<std::size_t>(cell)]) code = f2.cells[static_cast<std::size_t>(cell)];
        r.tokens.cells[static_cast<std::size_t>(cell)] = code;
        return code;
    };

    if (opts.parallel) {
        // Every hidden cell is queried like the first decode step: a START
        // token addressed at that cell, seeing only the prefix.
        std::vector<int> qpos(order.cells.begin(), order.cells.end());
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < H; ++t) {
                eng.embed(c.K, -1, 1, qpos[static_cast<std::size_t>(t)], X.data() + static_cast<std::size_t>(t) * d);
            }
            eng.block(caches[static_cast<std::size_t>(b)], X.data(), H, qpos, qpos, Attn::self_only);
            eng.head(X.data(), H, logits);
            for (int t = 0; t < H; ++t) emit(b, qpos[static_cast<std::size_t>(t)], logits.data() + static_cast<std::size_t>(t) * V);
        }
        return out;
    }

    std::vector<int> fed(static_cast<std::size_t>(B), c.K);
    for (int t = 0; t < H; ++t) {
        const int cell = order.cells[static_cast<std::size_t>(t)];
        const int prev = t == 0 ? -1 : order.cells[static_cast<std::size_t>(t - 1)];
        for (int b = 0; b < B; ++b) eng.embed(fed[static_cast<std::size_t>(b)], prev, 1, cell, X.data() + static_cast<std::size_t>(b) * d);
        eng.step(caches, X.data(), cell, prev >= 0 ? prev : cell);
        eng.head(X.data(), B, logits);
        for (int b = 0; b < B; ++b) fed[static_cast<std::size_t>(b)] = emit(b, cell, logits.data() + static_cast<std::size_t>(b) * V);
    }
    return out;
}

Rollout forward_logits(const Model<float>& m, const tok::TokenGrid& f1, const tok::TokenGrid& f2, const MaskSpec& mask,
                       const DecodeOrder& order, std::uint64_t sampling_seed, const SamplingOptions& opts,
                       const tok::Codebook* codebook) {
    return std::move(rollout_batch(m, std::span<const tok::TokenGrid>(&f1, 1), f2, mask, order, sampling_seed, opts,
                                   codebook)[0]);
}

}  // namespace kltrace::seq
