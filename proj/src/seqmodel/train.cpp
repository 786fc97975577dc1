#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "kltrace/common.hpp"
#include "kltrace/config_json.hpp"
#include "kltrace/io.hpp"
#include "kltrace/seqmodel.hpp"
#include "kltrace/synth.hpp"

namespace kltrace::seq {

// ------------------------------------------------------------- data stream

ExampleSource synthetic_source(const tok::Codebook& cb, std::uint64_t seed, double zoom_prob,
                               const synth::SceneOptions& scene) {
    return [cb, seed, zoom_prob, scene](std::uint64_t index) {
        Rng rng(derive_seed(seed, index, 0x5eed));
        const auto sc = synth::kAllScenarios[static_cast<std::size_t>(rng.uniform_int(0, synth::kAllScenarios.size() - 1))];
        const auto spec = synth::random_scene(sc, rng.next_u64(), scene);
        Frame a = synth::render_frame(spec, 0);
        Frame b = synth::render_frame(spec, 1);
        if (rng.uniform() < zoom_prob) {
            // Half-extent window placed on whole pixels so every source pixel
            // becomes a 2x2 block.
            const int hw = spec.width / 2, hh = spec.height / 2;
            const double ox = static_cast<double>(rng.uniform_int(0, spec.width - hw));
            const double oy = static_cast<double>(rng.uniform_int(0, spec.height - hh));
            const Window win = Window::centered({ox + hw / 2.0 - 0.5, oy + hh / 2.0 - 0.5}, 0.5, spec.width,
                                                spec.height, spec.width, spec.height);
            a = resample(a, win, spec.width, spec.height);
            b = resample(b, win, spec.width, spec.height);
        }
        Example ex;
        ex.f1 = tok::encode(a, cb);
        ex.f2 = tok::encode(b, cb);
        ex.f2_frame = std::move(b);
        return ex;
    };
}

void draw_conditioning(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t index, double reveal_max,
                       std::vector<int>& revealed, std::vector<int>& order) {
    Rng rng(derive_seed(seed, index, 0xc0d));
    const int g = cfg.cells();
    const int n = std::clamp(static_cast<int>(std::lround(rng.uniform(0.0, reveal_max) * g)), 0, g - 1);
    std::vector<int> cells(static_cast<std::size_t>(g));
    std::iota(cells.begin(), cells.end(), 0);
    if (cfg.variant != Variant::distributional_raster) rng.shuffle(cells.begin(), cells.end());
    revealed.assign(cells.begin(), cells.begin() + n);
    order.assign(cells.begin() + n, cells.end());
}

double heldout_loss(const Model<float>& m, const ExampleSource& src, int n, RevealMode mode, double fraction,
                    std::uint64_t seed) {
    if (n <= 0) fail_config("held-out evaluation needs at least one example");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const Example ex = src(static_cast<std::uint64_t>(i));
        const MaskSpec mask = make_mask(mode, fraction, m.cfg.cells(), derive_seed(seed, static_cast<std::uint64_t>(i)));
        const DecodeOrder order = make_order(mask, m.cfg.cells(), mode == RevealMode::random_subset,
                                             derive_seed(seed, static_cast<std::uint64_t>(i), 1));
        const Sequence s = make_sequence(m.cfg, ex.f1, ex.f2, mask.revealed, order.cells, &ex.f2_frame);
        total += loss_and_grad<float>(m, s, nullptr);
    }
    return total / n;
}

// ---------------------------------------------------------------- training

namespace {

double mean_heldout(const Model<float>& m, const ExampleSource& src, const TrainOptions& o) {
    double total = 0.0;
    std::vector<int> revealed, order;
    for (int i = 0; i < o.eval_examples; ++i) {
        const Example ex = src(static_cast<std::uint64_t>(i));
        draw_conditioning(m.cfg, derive_seed(o.seed, 0xe7a1), static_cast<std::uint64_t>(i), o.reveal_max, revealed,
                          order);
        total += loss_and_grad<float>(m, make_sequence(m.cfg, ex.f1, ex.f2, revealed, order, &ex.f2_frame), nullptr);
    }
    return total / std::max(o.eval_examples, 1);
}

}  // namespace

void train(Checkpoint& c, const ExampleSource& train_src, const ExampleSource& heldout_src, const TrainOptions& o,
           const std::function<void(const TrainLog&)>& on_log, int workers) {
    if (o.batch < 1 || o.steps < 0 || !(o.lr > 0) || o.reveal_max < 0 || o.reveal_max >= 1) {
        fail_config("invalid training options");
    }
    Model<float>& m = c.model;
    const std::size_t n = m.w.size();
    if (c.adam.m.size() != n) c.adam.m.assign(n, 0.0f);
    if (c.adam.v.size() != n) c.adam.v.assign(n, 0.0f);
    workers = std::clamp(workers, 1, o.batch);

    // One gradient buffer per batch slot, summed in slot order, so results do
    // not depend on the worker count.
    std::vector<std::vector<float>> grads(static_cast<std::size_t>(o.batch));
    std::vector<double> losses(static_cast<std::size_t>(o.batch));
    std::vector<float> grad(n);

    while (c.step < o.steps) {
        const std::int64_t step = c.step;
        auto work = [&](int wi) {
            std::vector<int> revealed, order;
            for (int b = wi; b < o.batch; b += workers) {
                const auto index = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(o.batch) +
                                   static_cast<std::uint64_t>(b);
                const Example ex = train_src(index);
                draw_conditioning(m.cfg, o.seed, index, o.reveal_max, revealed, order);
                const Sequence s = make_sequence(m.cfg, ex.f1, ex.f2, revealed, order, &ex.f2_frame);
                auto& g = grads[static_cast<std::size_t>(b)];
                g.assign(n, 0.0f);
                losses[static_cast<std::size_t>(b)] = loss_and_grad<float>(m, s, &g, 1.0 / o.batch);
            }
        };
        if (workers == 1) {
            work(0);
        } else {
            std::vector<std::thread> pool;
            for (int wi = 0; wi < workers; ++wi) pool.emplace_back(work, wi);
            for (auto& t : pool) t.join();
        }
        double loss = 0.0;
        std::fill(grad.begin(), grad.end(), 0.0f);
        for (int b = 0; b < o.batch; ++b) {
            loss += losses[static_cast<std::size_t>(b)] / o.batch;
            const auto& g = grads[static_cast<std::size_t>(b)];
            for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
        }
        if (!std::isfinite(loss)) {
            fail_numeric("non-finite training loss at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                         ")");
        }
        double sq = 0.0;
        for (float g : grad) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) fail_numeric("non-finite gradient norm at step " + std::to_string(step));
        const double clip = (o.clip > 0 && norm > o.clip) ? o.clip / norm : 1.0;

        c.adam.t += 1;
        const double t = static_cast<double>(c.adam.t);
        double lr = o.lr;
        if (o.warmup > 0 && step < o.warmup) lr *= static_cast<double>(step + 1) / o.warmup;
        const double bc1 = 1.0 - std::pow(o.beta1, t);
        const double bc2 = 1.0 - std::pow(o.beta2, t);
        const auto b1 = static_cast<float>(o.beta1), b2 = static_cast<float>(o.beta2);
        const auto step_size = static_cast<float>(lr / bc1);
        const auto inv_bc2 = static_cast<float>(1.0 / bc2);
        const auto eps = static_cast<float>(o.eps);
        const auto cs = static_cast<float>(clip);
        for (std::size_t i = 0; i < n; ++i) {
            const float g = grad[i] * cs;
            float& mi = c.adam.m[i];
            float& vi = c.adam.v[i];
            mi = b1 * mi + (1.0f - b1) * g;
            vi = b2 * vi + (1.0f - b2) * g * g;
            m.w[i] -= step_size * mi / (std::sqrt(vi * inv_bc2) + eps);
        }
        c.step += 1;

        TrainLog log{c.step, loss, norm, -1.0};
        const bool eval = o.eval_every > 0 && (c.step % o.eval_every == 0 || c.step == o.steps);
        if (eval && heldout_src) log.heldout = mean_heldout(m, heldout_src, o);
        if (on_log && (eval || (o.log_every > 0 && c.step % o.log_every == 0) || c.step == o.steps)) on_log(log);
    }
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[4] = {'K', 'L', 'T', 'M'};
constexpr std::uint32_t kVersion = 1;

template <class V>
void put_le(std::vector<std::uint8_t>& out, V v) {
    for (std::size_t i = 0; i < sizeof(V); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
}

template <class V>
V get_le(const std::vector<std::uint8_t>& b, std::size_t at) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(V); ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
    return static_cast<V>(v);
}

void put_floats(std::vector<std::uint8_t>& out, const float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u;
        std::memcpy(&u, p + i, 4);
        put_le(out, u);
    }
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
    const Layout& lay = c.model.layout;
    json tensors = json::array();
    std::size_t off = 0;
    auto add = [&](const std::string& name, const TensorInfo& t) {
        tensors.push_back({{"name", name}, {"shape", {t.rows, t.cols}}, {"offset", off}, {"nbytes", t.size() * 4}});
        off += t.size() * 4;
    };
    const bool has_adam = c.adam.m.size() == c.model.w.size();
    for (const auto& t : lay.tensors) add(t.name, t);
    if (has_adam) {
        for (const auto& t : lay.tensors) add("adam.m/" + t.name, t);
        for (const auto& t : lay.tensors) add("adam.v/" + t.name, t);
    }
    json header{{"config", c.cfg},
                {"codebook_digest", hex64(c.codebook_digest)},
                {"step", c.step},
                {"adam_t", c.adam.t},
                {"tensors", tensors}};
    const std::string hs = header.dump();

    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_le(out, kVersion);
    put_le(out, static_cast<std::uint64_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    out.reserve(out.size() + off);
    put_floats(out, c.model.w.data(), c.model.w.size());
    if (has_adam) {
        put_floats(out, c.adam.m.data(), c.adam.m.size());
        put_floats(out, c.adam.v.data(), c.adam.v.size());
    }
    return out;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& b, const std::string& origin) {
    auto bad = [&](std::size_t at, const std::string& what) {
        fail_data(origin + ": " + what + " at byte offset " + std::to_string(at));
    };
    if (b.size() < 16) bad(b.size(), "truncated checkpoint header");
    if (std::memcmp(b.data(), kMagic, 4) != 0) bad(0, "bad magic (expected KLTM)");
    if (get_le<std::uint32_t>(b, 4) != kVersion) bad(4, "unsupported checkpoint version");
    const auto hlen = get_le<std::uint64_t>(b, 8);
    if (hlen > b.size() - 16) bad(8, "header length exceeds file size");
    json h;
    try {
        h = json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        bad(16, std::string("malformed JSON header: ") + e.what());
    }
    Checkpoint c;
    try {
        c.cfg = h.at("config").get<ModelConfig>();
        c.codebook_digest = std::stoull(h.at("codebook_digest").get<std::string>(), nullptr, 16);
        c.step = h.at("step").get<std::int64_t>();
        c.adam.t = h.at("adam_t").get<std::int64_t>();
    } catch (const Error& e) {
        bad(16, e.what());
    } catch (const std::exception& e) {
        bad(16, std::string("malformed header field: ") + e.what());
    }
    c.cfg.validate();
    c.model.cfg = c.cfg;
    c.model.layout = make_layout(c.cfg);
    const std::size_t n = c.model.layout.total;
    const std::size_t data = 16 + hlen;
    const auto& tensors = h.at("tensors");
    const bool has_adam = tensors.size() == 3 * c.model.layout.tensors.size();
    if (!has_adam && tensors.size() != c.model.layout.tensors.size()) bad(16, "tensor table does not match config");
    // The table must describe exactly the layout we would write.
    std::size_t off = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = c.model.layout.tensors[i % c.model.layout.tensors.size()];
        const std::size_t part = i / c.model.layout.tensors.size();
        const std::string want = (part == 0 ? "" : part == 1 ? "adam.m/" : "adam.v/") + t.name;
        const auto& e = tensors[i];
        if (e.at("name") != want || e.at("shape") != json{t.rows, t.cols} || e.at("offset") != off ||
            e.at("nbytes") != t.size() * 4) {
            bad(16, "tensor entry " + std::to_string(i) + " does not match the model layout");
        }
        off += t.size() * 4;
    }
    if (b.size() != data + off) bad(std::min(b.size(), data + off), "tensor data size mismatch");
    auto read = [&](std::vector<float>& dst, std::size_t at) {
        dst.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto u = get_le<std::uint32_t>(b, at + 4 * i);
            std::memcpy(&dst[i], &u, 4);
            if (!std::isfinite(dst[i])) bad(at + 4 * i, "non-finite weight");
        }
    };
    read(c.model.w, data);
    if (has_adam) {
        read(c.adam.m, data + 4 * n);
        read(c.adam.v, data + 8 * n);
    }
    return c;
}

void save(const std::filesystem::path& path, const Checkpoint& c) { io::write_file(path, serialize(c)); }

Checkpoint load(const std::filesystem::path& path) { return deserialize(io::read_file(path), path.string()); }

Checkpoint new_checkpoint(const ModelConfig& cfg, std::uint64_t codebook_digest) {
    cfg.validate();
    Checkpoint c;
    c.cfg = cfg;
    c.model = init_model<float>(cfg);
    c.codebook_digest = codebook_digest;
    return c;
}

}  // namespace kltrace::seq
