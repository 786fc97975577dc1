#include "kltrace/tracer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "kltrace/common.hpp"
#include "kltrace/simd/kernels.hpp"

namespace kltrace::trace {

Frame inject_perturbation(const Frame& frame, const PerturbSpec& p) {
    if (!(p.sigma > 0.0) || !std::isfinite(p.sigma)) fail_config("perturbation sigma must be positive");
    if (!std::isfinite(p.amplitude)) fail_config("perturbation amplitude must be finite");
    if (!(p.center.x >= 0.0 && p.center.y >= 0.0 && p.center.x <= frame.width - 1 && p.center.y <= frame.height - 1)) {
        fail_config("perturbation center outside the frame");
    }
    Frame out = frame;
    if (p.amplitude == 0.0) return out;
    const double inv = 1.0 / (2.0 * p.sigma * p.sigma);
    for (int y = 0; y < frame.height; ++y) {
        for (int x = 0; x < frame.width; ++x) {
            const double dx = x - p.center.x, dy = y - p.center.y;
            const double add = p.amplitude * std::exp(-(dx * dx + dy * dy) * inv);
            std::uint8_t* px = out.at(x, y);
            for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(px[ch] + add), 0L, 255L));
        }
    }
    return out;
}

std::string_view mode_name(Mode m) { return m == Mode::kl ? "kl" : "rgb"; }

Mode parse_mode(std::string_view s) {
    if (s == "kl") return Mode::kl;
    if (s == "rgb") return Mode::rgb;
    fail_config("unknown trace mode '" + std::string(s) + "' (expected kl or rgb)");
}

DivergenceMap kl_map(const seq::LogitsGrid& clean, const seq::LogitsGrid& pert) {
    if (clean.gh != pert.gh || clean.gw != pert.gw || clean.dim != pert.dim) fail_config("logit grids differ in shape");
    if (clean.valid != pert.valid) fail_config("logit grids differ in validity");
    DivergenceMap m(clean.gw, clean.gh);
    const auto& k = simd::kernels();
    for (std::size_t c = 0; c < m.values.size(); ++c) {
        if (!clean.valid[c]) continue;
        m.valid[c] = 1;
        m.values[c] = std::max(0.0, k.kl_from_logits(clean.row(static_cast<int>(c)), pert.row(static_cast<int>(c)),
                                                     static_cast<std::size_t>(clean.dim)));
    }
    return m;
}

DivergenceMap rgb_diff_map(const Frame& a, const Frame& b, int patch) {
    if (a.width != b.width || a.height != b.height) fail_config("frames differ in size");
    if (patch <= 0 || a.width % patch || a.height % patch) fail_config("frame size is not a multiple of the patch");
    DivergenceMap m(a.width / patch, a.height / patch);
    std::fill(m.valid.begin(), m.valid.end(), std::uint8_t{1});
    const double n = patch * patch * 3.0;
    for (int cy = 0; cy < m.gh; ++cy) {
        for (int cx = 0; cx < m.gw; ++cx) {
            long sum = 0;
            for (int y = 0; y < patch; ++y) {
                const std::uint8_t* pa = a.at(cx * patch, cy * patch + y);
                const std::uint8_t* pb = b.at(cx * patch, cy * patch + y);
                for (int i = 0; i < patch * 3; ++i) sum += std::abs(static_cast<int>(pa[i]) - static_cast<int>(pb[i]));
            }
            m.values[static_cast<std::size_t>(cy) * m.gw + cx] = static_cast<double>(sum) / n;
        }
    }
    return m;
}

void TraceSettings::validate() const {
    if (num_masks < 1) fail_config("trace.num_masks must be at least 1");
    if (scales.empty()) fail_config("trace.scales must not be empty");
    for (double s : scales) {
        if (!(s > 0.0 && s <= 1.0)) fail_config("trace.scales entries must lie in (0, 1]");
    }
    if (!(reveal_fraction >= 0.0 && reveal_fraction < 1.0)) fail_config("trace.reveal_fraction must lie in [0, 1)");
    if (!(sigma > 0.0)) fail_config("trace.sigma must be positive");
    if (occlusion_threshold && !std::isfinite(*occlusion_threshold)) fail_config("trace.occlusion_threshold must be finite");
}

std::uint64_t TraceSettings::digest() const {
    Fnv1a h;
    h.update_pod(num_masks);
    for (double s : scales) h.update_pod(s);
    h.update_pod(reveal_fraction);
    h.update(seq::reveal_mode_name(reveal_mode));
    const bool has = occlusion_threshold.has_value();
    h.update_pod(has);
    if (has) h.update_pod(*occlusion_threshold);
    h.update(mode_name(mode));
    h.update_pod(rng_seed);
    h.update_pod(sigma);
    h.update_pod(amplitude);
    h.update_pod(sampling.temperature);
    h.update_pod(sampling.top_k);
    h.update_pod(sampling.parallel);
    return h.value();
}

Frame predicted_frame(const seq::Rollout& r, const seq::ModelConfig& cfg, const tok::Codebook& cb) {
    Frame f = tok::decode(r.tokens, cb);
    if (cfg.distributional()) return f;
    // Pixel head: hidden cells show the regression output directly.
    const int pw = cb.patch_w, ph = cb.patch_h;
    for (int cell = 0; cell < cfg.cells(); ++cell) {
        if (!r.logits.valid[static_cast<std::size_t>(cell)]) continue;
        const float* row = r.logits.row(cell);
        const int x0 = (cell % cfg.gw) * pw, y0 = (cell / cfg.gw) * ph;
        for (int y = 0; y < ph; ++y) {
            std::uint8_t* px = f.at(x0, y0 + y);
            for (int i = 0; i < pw * 3; ++i) {
                px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(row[y * pw * 3 + i]), 0L, 255L));
            }
        }
    }
    return f;
}

namespace {

void check_inputs(const TraceInputs& in, const Frame& f1, const Frame& f2, Mode mode) {
    if (!in.model || !in.codebook) fail_config("tracing needs a model and a codebook");
    const auto& c = in.model->cfg;
    if (in.codebook->k != c.K) fail_config("codebook does not match the model vocabulary");
    if (f1.width != f2.width || f1.height != f2.height) fail_config("frame pair differs in size");
    if (f1.width != c.gw * in.codebook->patch_w || f1.height != c.gh * in.codebook->patch_h) {
        fail_config("frame size does not match model grid times patch size");
    }
    if (mode == Mode::kl && !c.distributional()) fail_config("KL tracing needs a distributional model");
}

DivergenceMap pair_map(const TraceInputs& in, const seq::Rollout& clean, const seq::Rollout& pert, Mode mode,
                       const Frame& clean_pred) {
    if (mode == Mode::kl) return kl_map(clean.logits, pert.logits);
    const auto& cfg = in.model->cfg;
    DivergenceMap m = rgb_diff_map(clean_pred, predicted_frame(pert, cfg, *in.codebook), in.codebook->patch_w);
    m.valid = clean.logits.valid;
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        if (!m.valid[i]) m.values[i] = 0.0;
    }
    return m;
}

/// Adds a model-grid map seen through `win` onto the common grid.
void accumulate(const DivergenceMap& m, const Window& win, int patch, double cell, std::vector<double>& sum,
                std::vector<int>& cnt, int cw, int ch) {
    for (int cy = 0; cy < ch; ++cy) {
        for (int cx = 0; cx < cw; ++cx) {
            const Point src{(cx + 0.5) * cell - 0.5, (cy + 0.5) * cell - 0.5};
            const Point w = win.to_window(src);
            const int px = static_cast<int>(std::floor(w.x + 0.5)), py = static_cast<int>(std::floor(w.y + 0.5));
            const std::size_t ci = static_cast<std::size_t>(cy) * cw + cx;
            if (px < 0 || py < 0 || px >= m.gw * patch || py >= m.gh * patch) {
                cnt[ci] += 1;  // outside the zoom window: counts as zero divergence
                continue;
            }
            const std::size_t mi = static_cast<std::size_t>(py / patch) * m.gw + px / patch;
            if (!m.valid[mi]) continue;
            sum[ci] += m.values[mi];
            cnt[ci] += 1;
        }
    }
}

}  // namespace

DivergenceMap trace_once(const TraceInputs& in, const Frame& f1, const Frame& f2, const PerturbSpec& p,
                         const seq::MaskSpec& mask, const seq::DecodeOrder& order, std::uint64_t sampling_seed, Mode mode,
                         const seq::SamplingOptions& sampling) {
    check_inputs(in, f1, f2, mode);
    const std::vector<tok::TokenGrid> f1s{tok::encode(f1, *in.codebook), tok::encode(inject_perturbation(f1, p), *in.codebook)};
    const auto r = seq::rollout_batch(*in.model, f1s, tok::encode(f2, *in.codebook), mask, order, sampling_seed, sampling,
                                      in.codebook);
    const Frame clean_pred = mode == Mode::rgb ? predicted_frame(r[0], in.model->cfg, *in.codebook) : Frame{};
    return pair_map(in, r[0], r[1], mode, clean_pred);
}

Window zoom_window(Point center, double scale, int width, int height) {
    const double hx = 0.5 * scale * width, hy = 0.5 * scale * height;
    const Point c{std::clamp(center.x, hx - 0.5, width - hx - 0.5), std::clamp(center.y, hy - 0.5, height - hy - 0.5)};
    return Window::centered(c, scale, width, height, width, height);
}

Point readout(const DivergenceMap& map, double cell, Point fallback, double* peak) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < map.values.size(); ++i) {
        if (map.values[i] > map.values[best]) best = i;
    }
    const double top = map.values.empty() ? 0.0 : map.values[best];
    if (peak) *peak = top;
    if (!(top > 0.0)) return fallback;
    const int bx = static_cast<int>(best) % map.gw, by = static_cast<int>(best) / map.gw;
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (int y = std::max(by - 1, 0); y <= std::min(by + 1, map.gh - 1); ++y) {
        for (int x = std::max(bx - 1, 0); x <= std::min(bx + 1, map.gw - 1); ++x) {
            const double v = map.at(x, y);
            sw += v;
            sx += v * ((x + 0.5) * cell - 0.5);
            sy += v * ((y + 0.5) * cell - 0.5);
        }
    }
    return {sx / sw, sy / sw};
}

std::vector<std::vector<Trace>> trace_queries_modes(const TraceInputs& in, const Frame& f1, const Frame& f2,
                                                    std::span<const Point> queries, const TraceSettings& s,
                                                    std::uint64_t stream, std::span<const Mode> modes) {
    s.validate();
    if (modes.empty()) fail_config("no trace modes requested");
    for (Mode m : modes) check_inputs(in, f1, f2, m);
    const bool want_rgb = std::find(modes.begin(), modes.end(), Mode::rgb) != modes.end();
    const auto& cfg = in.model->cfg;
    const tok::Codebook& cb = *in.codebook;
    const int W = f1.width, H = f1.height, patch = cb.patch_w;
    if (cb.patch_w != cb.patch_h) fail_config("tracing expects square patches");
    for (const Point& q : queries) {
        if (!(q.x >= 0 && q.y >= 0 && q.x <= W - 1 && q.y <= H - 1)) fail_config("query point outside the frame");
    }
    const double min_scale = *std::min_element(s.scales.begin(), s.scales.end());
    const double cell = patch * min_scale;
    const int cw = static_cast<int>(std::lround(W / cell)), ch = static_cast<int>(std::lround(H / cell));
    if (std::abs(cw * cell - W) > 1e-9 || std::abs(ch * cell - H) > 1e-9) {
        fail_config("smallest scale times patch size must tile the frame");
    }
    const std::size_t nq = queries.size(), nm = modes.size(), cells = static_cast<std::size_t>(cw) * ch;
    // Accumulators indexed [mode * nq + query].
    std::vector<std::vector<double>> sum(nm * nq, std::vector<double>(cells, 0.0));
    std::vector<std::vector<int>> cnt(nm * nq, std::vector<int>(cells, 0));
    const bool random_order = cfg.variant != seq::Variant::distributional_raster;
    const Window identity = Window::centered({W / 2.0 - 0.5, H / 2.0 - 0.5}, 1.0, W, H, W, H);

    for (int mi = 0; mi < s.num_masks; ++mi) {
        for (std::size_t si = 0; si < s.scales.size(); ++si) {
            const std::uint64_t ms = derive_seed(s.rng_seed, stream, static_cast<std::uint64_t>(mi), si);
            const auto mask = seq::make_mask(s.reveal_mode, s.reveal_fraction, cfg.cells(), derive_seed(ms, 1));
            const auto order = seq::make_order(mask, cfg.cells(), random_order, derive_seed(ms, 2));
            const std::uint64_t sampling_seed = derive_seed(ms, 3);
            const double scale = s.scales[si];
            auto run = [&](const Frame& a, const Frame& b, std::span<const Point> qs, const Window& win,
                           std::size_t q0) {
                std::vector<tok::TokenGrid> f1s{tok::encode(a, cb)};
                for (const Point& q : qs) {
                    f1s.push_back(tok::encode(inject_perturbation(a, {win.to_window(q), s.sigma, s.amplitude}), cb));
                }
                const auto r = seq::rollout_batch(*in.model, f1s, tok::encode(b, cb), mask, order, sampling_seed,
                                                  s.sampling, &cb);
                const Frame clean_pred = want_rgb ? predicted_frame(r[0], cfg, cb) : Frame{};
                for (std::size_t k = 0; k < qs.size(); ++k) {
                    for (std::size_t md = 0; md < nm; ++md) {
                        const DivergenceMap m = pair_map(in, r[0], r[k + 1], modes[md], clean_pred);
                        accumulate(m, win, patch, cell, sum[md * nq + q0 + k], cnt[md * nq + q0 + k], cw, ch);
                    }
                }
            };
            if (scale == 1.0) {
                run(f1, f2, queries, identity, 0);
            } else {
                for (std::size_t k = 0; k < nq; ++k) {
                    const Window win = zoom_window(queries[k], scale, W, H);
                    run(resample(f1, win, W, H), resample(f2, win, W, H), queries.subspan(k, 1), win, k);
                }
            }
        }
    }

    std::vector<std::vector<Trace>> out(nm, std::vector<Trace>(nq));
    for (std::size_t md = 0; md < nm; ++md) {
        for (std::size_t k = 0; k < nq; ++k) {
            Trace& t = out[md][k];
            const std::size_t a = md * nq + k;
            t.query = queries[k];
            t.cell_size = cell;
            t.map = DivergenceMap(cw, ch);
            for (std::size_t i = 0; i < cells; ++i) {
                if (cnt[a][i] == 0) continue;
                t.map.valid[i] = 1;
                t.map.values[i] = sum[a][i] / cnt[a][i];
            }
            t.target = readout(t.map, cell, t.query, &t.peak);
        }
    }
    return out;
}

std::vector<Trace> trace_queries(const TraceInputs& in, const Frame& f1, const Frame& f2, std::span<const Point> queries,
                                 const TraceSettings& s, std::uint64_t stream) {
    const Mode m = s.mode;
    return std::move(trace_queries_modes(in, f1, f2, queries, s, stream, std::span<const Mode>(&m, 1))[0]);
}

FlowEstimate to_estimate(const Trace& t, const TraceSettings& s) {
    if (!s.occlusion_threshold) fail_config("occlusion threshold is not set; run calibrate-occlusion first");
    FlowEstimate e;
    e.query = t.query;
    e.target = t.target;
    e.confidence = t.peak;
    e.occluded = t.peak < *s.occlusion_threshold;
    return e;
}

std::vector<FlowEstimate> extract_flow(const TraceInputs& in, const Frame& f1, const Frame& f2,
                                       std::span<const Point> queries, const TraceSettings& s, std::uint64_t stream) {
    if (!s.occlusion_threshold) fail_config("occlusion threshold is not set; run calibrate-occlusion first");
    std::vector<FlowEstimate> out;
    for (const Trace& t : trace_queries(in, f1, f2, queries, s, stream)) out.push_back(to_estimate(t, s));
    return out;
}

Calibration calibrate_occlusion_threshold(std::span<const double> peaks, std::span<const std::uint8_t> occluded) {
    if (peaks.empty()) fail_data("calibration split is empty");
    if (peaks.size() != occluded.size()) fail_config("calibration peaks and labels differ in length");
    std::vector<double> v(peaks.begin(), peaks.end());
    for (double p : v) {
        if (!std::isfinite(p)) fail_numeric("non-finite peak in calibration split");
    }
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    std::vector<double> cand;
    cand.push_back(v.front() > 0 ? v.front() / 2 : v.front() - 1.0);
    for (std::size_t i = 0; i + 1 < v.size(); ++i) cand.push_back(0.5 * (v[i] + v[i + 1]));
    cand.push_back(v.back() > 0 ? v.back() * 2 : v.back() + 1.0);
    Calibration best{cand.front(), -1.0};
    for (double t : cand) {
        std::size_t ok = 0;
        for (std::size_t i = 0; i < peaks.size(); ++i) ok += (peaks[i] < t) == (occluded[i] != 0);
        const double acc = static_cast<double>(ok) / static_cast<double>(peaks.size());
        if (acc > best.accuracy) best = {t, acc};
    }
    return best;
}

std::array<std::uint8_t, 3> ramp(double t) {
    // Control points sampled from the viridis map.
    static constexpr std::array<std::array<double, 3>, 5> stops{{{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * (stops.size() - 1);
    const auto i = std::min(static_cast<std::size_t>(t), stops.size() - 2);
    const double f = t - static_cast<double>(i);
    std::array<std::uint8_t, 3> c{};
    for (int k = 0; k < 3; ++k) {
        c[static_cast<std::size_t>(k)] =
            static_cast<std::uint8_t>(std::lround(stops[i][static_cast<std::size_t>(k)] * (1 - f) + stops[i + 1][static_cast<std::size_t>(k)] * f));
    }
    return c;
}

Frame heatmap(const DivergenceMap& map, double cell, int width, int height) {
    double mx = 0.0;
    for (double v : map.values) mx = std::max(mx, v);
    Frame f(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const int cx = std::clamp(static_cast<int>(x / cell), 0, map.gw - 1);
            const int cy = std::clamp(static_cast<int>(y / cell), 0, map.gh - 1);
            const auto c = ramp(mx > 0 ? map.at(cx, cy) / mx : 0.0);
            std::copy(c.begin(), c.end(), f.at(x, y));
        }
    }
    return f;
}

Frame overlay(const Frame& src, Point query, Point target, bool occluded) {
    Frame f = src;
    auto put = [&](int x, int y, std::array<std::uint8_t, 3> c) {
        if (f.contains(x, y)) std::copy(c.begin(), c.end(), f.at(x, y));
    };
    const std::array<std::uint8_t, 3> line{255, 255, 0}, qc{255, 0, 0}, tc = occluded ? std::array<std::uint8_t, 3>{128, 128, 128} : std::array<std::uint8_t, 3>{0, 255, 0};
    const double dx = target.x - query.x, dy = target.y - query.y;
    const int steps = std::max(1, static_cast<int>(std::ceil(std::max(std::abs(dx), std::abs(dy)))));
    for (int i = 0; i <= steps; ++i) {
        put(static_cast<int>(std::lround(query.x + dx * i / steps)), static_cast<int>(std::lround(query.y + dy * i / steps)), line);
    }
    for (int k = -1; k <= 1; ++k) {
        put(static_cast<int>(std::lround(query.x)) + k, static_cast<int>(std::lround(query.y)), qc);
        put(static_cast<int>(std::lround(query.x)), static_cast<int>(std::lround(query.y)) + k, qc);
        put(static_cast<int>(std::lround(target.x)) + k, static_cast<int>(std::lround(target.y)) + k, tc);
        put(static_cast<int>(std::lround(target.x)) + k, static_cast<int>(std::lround(target.y)) - k, tc);
    }
    return f;
}

}  // namespace kltrace::trace
