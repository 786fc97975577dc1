#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/seqmodel.hpp"

using namespace kltrace;
using namespace kltrace::seq;

namespace {

ModelConfig tiny(int layers, Variant v = Variant::distributional_random_access) {
    ModelConfig c;
    c.layers = layers;
    c.model_dim = 8;
    c.heads = 2;
    c.mlp_dim = 12;
    c.K = 7;
    c.gh = 3;
    c.gw = 3;
    c.patch_dim = 6;
    c.rope_pairs = 1;
    c.value_rotary_heads = 1;
    c.variant = v;
    c.rng_seed = 17;
    return c;
}

tok::TokenGrid random_grid(const ModelConfig& c, Rng& rng) {
    tok::TokenGrid g(c.gw, c.gh);
    for (auto& v : g.cells) v = static_cast<std::int32_t>(rng.uniform_int(0, c.K - 1));
    return g;
}

Frame random_frame(int w, int h, Rng& rng) {
    Frame f(w, h);
    for (auto& p : f.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return f;
}

std::vector<Sequence> random_batch(const ModelConfig& c, int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sequence> out;
    for (int i = 0; i < n; ++i) {
        const auto f1 = random_grid(c, rng);
        const auto f2 = random_grid(c, rng);
        std::vector<int> cells(static_cast<std::size_t>(c.cells()));
        std::iota(cells.begin(), cells.end(), 0);
        rng.shuffle(cells.begin(), cells.end());
        const int r = static_cast<int>(rng.uniform_int(0, 3));
        std::vector<int> revealed(cells.begin(), cells.begin() + r);
        std::vector<int> order(cells.begin() + r, cells.end());
        // 2x1 patches of RGB -> 6 pixel outputs on a 3x3 grid.
        const Frame f = random_frame(c.gw * 2, c.gh, rng);
        out.push_back(make_sequence(c, f1, f2, revealed, order, &f));
    }
    return out;
}

// Fills every weight (including the zero-initialized head) with noise so all
// paths carry gradient.
template <class T>
void scramble(Model<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& w : m.w) w = static_cast<T>(w + 0.3 * rng.normal());
}

}  // namespace

TEST_CASE("initial cross-entropy is ln K") {
    ModelConfig c = tiny(2);
    c.K = 512;
    const auto m = init_model<float>(c);
    for (const auto& s : random_batch(c, 3, 5)) CHECK(loss_and_grad<float>(m, s, nullptr) == doctest::Approx(std::log(512.0)).epsilon(1e-6));
}

TEST_CASE("initialization is a pure function of the seed") {
    const auto a = init_model<float>(tiny(2));
    const auto b = init_model<float>(tiny(2));
    CHECK(a.w == b.w);
    ModelConfig c = tiny(2);
    c.rng_seed = 18;
    CHECK(init_model<float>(c).w != a.w);
}

TEST_CASE("linear-only model gradients match finite differences to 1e-8") {
    ModelConfig c = tiny(0, Variant::deterministic_l2);
    c.final_norm = false;
    auto m = init_model<double>(c);
    scramble(m, 3);
    const auto batch = random_batch(c, 3, 9);
    const auto rep = grad_check(m, batch, 1e-3, 200, 1);
    INFO(rep.worst);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_error < 1e-8);
}

TEST_CASE("attention model gradients match finite differences to 1e-4") {
    for (Variant v : {Variant::distributional_random_access, Variant::deterministic_l2}) {
        auto m = init_model<double>(tiny(1, v));
        scramble(m, 4);
        const auto batch = random_batch(m.cfg, 2, 11);
        const auto rep = grad_check(m, batch, 1e-5, 400, 2);
        INFO(rep.worst);
        CHECK(rep.max_rel_error < 1e-4);
    }
    auto m2 = init_model<double>(tiny(2));
    scramble(m2, 5);
    const auto rep2 = grad_check(m2, random_batch(m2.cfg, 2, 12), 1e-5, 400, 3);
    INFO(rep2.worst);
    CHECK(rep2.max_rel_error < 1e-4);
}

TEST_CASE("zero output layer: bias gradient is softmax(0) minus the mean one-hot") {
    const ModelConfig c = tiny(1);
    const auto m = init_model<double>(c);
    const auto batch = random_batch(c, 1, 21);
    std::vector<double> grad;
    loss_and_grad(m, batch[0], &grad);
    const auto& t = m.layout.find("out.b");
    std::vector<double> want(static_cast<std::size_t>(c.K), 1.0 / c.K);
    const auto& s = batch[0];
    const int n = s.size() - s.prefix;
    for (int i = s.prefix; i < s.size(); ++i) want[static_cast<std::size_t>(s.target[static_cast<std::size_t>(i)])] -= 1.0 / n;
    for (int k = 0; k < c.K; ++k) CHECK(grad[t.offset + static_cast<std::size_t>(k)] == doctest::Approx(want[static_cast<std::size_t>(k)]).epsilon(1e-12));
}

namespace {

struct RolloutCase {
    Model<float> m;
    tok::TokenGrid f1, f2;
    MaskSpec mask;
    DecodeOrder order;
};

RolloutCase rollout_case(std::uint64_t seed, RevealMode mode = RevealMode::random_subset, double fraction = 0.3) {
    Rng rng(seed);
    RolloutCase rc{init_model<float>(tiny(2)), {}, {}, {}, {}};
    scramble(rc.m, seed);
    rc.f1 = random_grid(rc.m.cfg, rng);
    rc.f2 = random_grid(rc.m.cfg, rng);
    rc.mask = make_mask(mode, fraction, rc.m.cfg.cells(), seed + 1);
    rc.order = make_order(rc.mask, rc.m.cfg.cells(), true, seed + 2);
    return rc;
}

}  // namespace

TEST_CASE("rollout logits equal teacher-forced logits on the sampled tokens") {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto rc = rollout_case(seed);
        const SamplingOptions opts;
        const Rollout r = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 77, opts);
        for (int c : rc.mask.revealed) CHECK(r.tokens.cells[static_cast<std::size_t>(c)] == rc.f2.cells[static_cast<std::size_t>(c)]);
        const Sequence s = make_sequence(rc.m.cfg, rc.f1, r.tokens, rc.mask.revealed, rc.order.cells);
        const auto tf = forward_targets(rc.m, s);
        const int K = rc.m.cfg.K;
        REQUIRE(tf.size() == rc.order.cells.size() * static_cast<std::size_t>(K));
        for (std::size_t t = 0; t < rc.order.cells.size(); ++t) {
            const float* row = r.logits.row(rc.order.cells[t]);
            for (int k = 0; k < K; ++k) CHECK(row[k] == doctest::Approx(tf[t * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)]).epsilon(1e-4));
        }
    }
}

TEST_CASE("logits of a decoded cell ignore tokens decoded after it") {
    const auto rc = rollout_case(4);
    const Rollout r = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 5, {});
    const Sequence s = make_sequence(rc.m.cfg, rc.f1, r.tokens, rc.mask.revealed, rc.order.cells);
    const auto base = forward_targets(rc.m, s);
    const std::size_t n = rc.order.cells.size(), K = static_cast<std::size_t>(rc.m.cfg.K);
    for (std::size_t cut : {std::size_t{0}, n / 2, n - 1}) {
        auto mutated = r.tokens;
        for (std::size_t t = cut; t < n; ++t) {
            auto& v = mutated.cells[static_cast<std::size_t>(rc.order.cells[t])];
            v = (v + 3) % rc.m.cfg.K;
        }
        const auto out = forward_targets(rc.m, make_sequence(rc.m.cfg, rc.f1, mutated, rc.mask.revealed, rc.order.cells));
        // Row t is predicted before token t is appended, so rows up to `cut` are unchanged.
        for (std::size_t i = 0; i < (cut + 1) * K; ++i) CHECK(out[i] == base[i]);
        if (cut + 1 < n) {
            bool changed = false;
            for (std::size_t i = (cut + 1) * K; i < n * K; ++i) changed |= out[i] != base[i];
            CHECK(changed);
        }
    }
}

TEST_CASE("rollouts are deterministic and rows sharing F1 agree bit for bit") {
    const auto rc = rollout_case(6);
    const SamplingOptions opts;
    const auto a = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 9, opts);
    const auto b = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 9, opts);
    CHECK(a.logits.values == b.logits.values);
    CHECK(a.tokens == b.tokens);

    Rng rng(8);
    const std::vector<tok::TokenGrid> f1s{rc.f1, random_grid(rc.m.cfg, rng), rc.f1};
    const auto batch = rollout_batch(rc.m, f1s, rc.f2, rc.mask, rc.order, 9, opts);
    CHECK(batch[0].logits.values == batch[2].logits.values);
    CHECK(batch[0].tokens == batch[2].tokens);
    CHECK(batch[0].logits.values == a.logits.values);
    CHECK(batch[1].logits.values != a.logits.values);
}

TEST_CASE("valid logit rows are finite and softmax rows sum to one") {
    const auto rc = rollout_case(7);
    const auto r = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 1, {});
    CHECK(r.logits.valid_count() == static_cast<int>(rc.order.cells.size()));
    for (int c = 0; c < rc.m.cfg.cells(); ++c) {
        if (!r.logits.valid[static_cast<std::size_t>(c)]) continue;
        const float* row = r.logits.row(c);
        double mx = row[0];
        for (int k = 0; k < r.logits.dim; ++k) {
            REQUIRE(std::isfinite(row[k]));
            mx = std::max(mx, static_cast<double>(row[k]));
        }
        double z = 0.0;
        for (int k = 0; k < r.logits.dim; ++k) z += std::exp(row[k] - mx);
        double s = 0.0;
        for (int k = 0; k < r.logits.dim; ++k) s += std::exp(row[k] - mx) / z;
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("full mask predicts nothing and returns the ground truth") {
    const auto rc = rollout_case(8, RevealMode::full, 0.0);
    const auto r = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 1, {});
    CHECK(r.logits.valid_count() == 0);
    CHECK(r.tokens == rc.f2);
}

TEST_CASE("overwrite mode decodes every cell and restores the pre-drawn ones") {
    const auto rc = rollout_case(9, RevealMode::overwrite_during_rollout, 0.3);
    CHECK(rc.mask.revealed.empty());
    CHECK(rc.mask.overwrite.size() == 3);
    const auto r = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 2, {});
    CHECK(r.logits.valid_count() == rc.m.cfg.cells());
    for (int c : rc.mask.overwrite) CHECK(r.tokens.cells[static_cast<std::size_t>(c)] == rc.f2.cells[static_cast<std::size_t>(c)]);
}

TEST_CASE("parallel mode matches the first decode step for every cell") {
    const auto rc = rollout_case(10);
    SamplingOptions par;
    par.parallel = true;
    const auto p = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, rc.order, 3, par);
    CHECK(p.logits.valid_count() == static_cast<int>(rc.order.cells.size()));
    for (int c : rc.order.cells) {
        // Each parallel row equals a sequential rollout that decodes c first.
        DecodeOrder first = rc.order;
        std::swap(first.cells[0], *std::find(first.cells.begin(), first.cells.end(), c));
        const auto s = forward_logits(rc.m, rc.f1, rc.f2, rc.mask, first, 3, {});
        for (int k = 0; k < rc.m.cfg.K; ++k) CHECK(p.logits.row(c)[k] == doctest::Approx(s.logits.row(c)[k]).epsilon(1e-5));
    }
}

TEST_CASE("mask and order construction") {
    const auto m = make_mask(RevealMode::raster_prefix, 0.1, 256, 1);
    REQUIRE(m.revealed.size() == 26);
    for (int i = 0; i < 26; ++i) CHECK(m.revealed[static_cast<std::size_t>(i)] == i);
    const auto r = make_mask(RevealMode::random_subset, 0.1, 256, 1);
    CHECK(r.revealed.size() == 26);
    CHECK(make_mask(RevealMode::random_subset, 0.1, 256, 1).revealed == r.revealed);
    CHECK(make_mask(RevealMode::random_subset, 0.1, 256, 2).revealed != r.revealed);
    const auto o = make_order(r, 256, true, 4);
    std::vector<int> all(o.cells.begin(), o.cells.end());
    all.insert(all.end(), r.revealed.begin(), r.revealed.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 256; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
    const auto raster = make_order(m, 256, false, 0);
    CHECK(std::is_sorted(raster.cells.begin(), raster.cells.end()));
}

TEST_CASE("rollout input checks") {
    const ModelConfig c = tiny(1);
    auto mask = make_mask(RevealMode::random_subset, 0.3, 9, 1);
    auto order = make_order(mask, 9, true, 2);
    CHECK_NOTHROW(check_rollout_inputs(c, mask, order));
    auto bad = order;
    bad.cells.push_back(mask.revealed[0]);
    CHECK_THROWS_AS(check_rollout_inputs(c, mask, bad), Error);
    bad = order;
    bad.cells.pop_back();
    CHECK_THROWS_AS(check_rollout_inputs(c, mask, bad), Error);
    bad = order;
    bad.cells[0] = 9;
    CHECK_THROWS_AS(check_rollout_inputs(c, mask, bad), Error);

    const ModelConfig raster = tiny(1, Variant::distributional_raster);
    CHECK_THROWS_AS(check_rollout_inputs(raster, mask, order), Error);
    const auto rm = make_mask(RevealMode::raster_prefix, 0.3, 9, 1);
    CHECK_NOTHROW(check_rollout_inputs(raster, rm, make_order(rm, 9, false, 0)));
    CHECK_THROWS_AS(check_rollout_inputs(raster, rm, make_order(rm, 9, true, 5)), Error);
    const auto full = make_mask(RevealMode::full, 0.0, 9, 1);
    CHECK_NOTHROW(check_rollout_inputs(raster, full, make_order(full, 9, false, 0)));
}

TEST_CASE("deterministic variant ignores the sampling seed") {
    Rng rng(3);
    auto m = init_model<float>(tiny(2, Variant::deterministic_l2));
    scramble(m, 3);
    tok::Codebook cb;
    cb.k = m.cfg.K;
    cb.patch_w = 2;
    cb.patch_h = 1;
    for (int i = 0; i < cb.k * cb.patch_dim(); ++i) cb.codes.push_back(static_cast<float>(rng.uniform_int(0, 255)));
    const auto f1 = random_grid(m.cfg, rng), f2 = random_grid(m.cfg, rng);
    const auto mask = make_mask(RevealMode::random_subset, 0.3, 9, 1);
    const auto order = make_order(mask, 9, true, 2);
    const auto a = forward_logits(m, f1, f2, mask, order, 1, {}, &cb);
    const auto b = forward_logits(m, f1, f2, mask, order, 999, {}, &cb);
    CHECK(a.logits.values == b.logits.values);
    CHECK(a.tokens == b.tokens);
    for (int c : order.cells) {
        for (int i = 0; i < m.cfg.patch_dim; ++i) {
            const float v = a.logits.row(c)[i];
            CHECK(v >= 0.0f);
            CHECK(v <= 255.0f);
        }
    }
}

TEST_CASE("sample_code") {
    Rng rng(1);
    const std::vector<float> l{0.0f, 5.0f, 5.0f, -1.0f};
    CHECK(sample_code(l.data(), 4, 0.0f, 0, rng) == 1);
    for (int i = 0; i < 200; ++i) CHECK(sample_code(l.data(), 4, 1.0f, 1, rng) == 1);
    for (int i = 0; i < 200; ++i) {
        const int c = sample_code(l.data(), 4, 1.0f, 2, rng);
        CHECK((c == 1 || c == 2));
    }
    // One uniform per call: two generators stay in lockstep whatever the logits.
    Rng a(5), b(5);
    sample_code(l.data(), 4, 1.0f, 0, a);
    b.uniform();
    CHECK(a.next_u64() == b.next_u64());
    // Frequencies follow the softmax.
    const std::vector<float> two{0.0f, std::log(3.0f)};
    int ones = 0;
    for (int i = 0; i < 20000; ++i) ones += sample_code(two.data(), 2, 1.0f, 0, rng);
    CHECK(ones / 20000.0 == doctest::Approx(0.75).epsilon(0.02));
}

TEST_CASE("sample_code keeps the same code under a small logit change") {
    // Sixty near-tied codes: rank order flips constantly under the nudge, yet
    // a shared draw should almost always land on the same code.
    Rng gen(3);
    std::vector<float> l(60), nudged(60);
    int same = 0;
    const int n = 2000;
    for (int t = 0; t < n; ++t) {
        for (std::size_t i = 0; i < l.size(); ++i) {
            l[i] = static_cast<float>(0.1 * gen.normal());
            nudged[i] = l[i] + static_cast<float>(0.002 * gen.normal());
        }
        Rng a(static_cast<std::uint64_t>(t)), b(static_cast<std::uint64_t>(t));
        same += sample_code(l.data(), 60, 1.0f, 0, a) == sample_code(nudged.data(), 60, 1.0f, 0, b);
    }
    CHECK(same >= n * 98 / 100);
}

TEST_CASE("checkpoint round trip is byte identical and corruption is caught") {
    Checkpoint c = new_checkpoint(tiny(2), 0xabcdef);
    scramble(c.model, 2);
    c.adam.m.assign(c.model.w.size(), 0.25f);
    c.adam.v.assign(c.model.w.size(), 0.5f);
    c.adam.t = 7;
    c.step = 7;
    const auto bytes = serialize(c);
    CHECK(bytes[0] == 'K');
    CHECK(bytes[3] == 'M');
    const Checkpoint back = deserialize(bytes, "mem");
    CHECK(back.model.w == c.model.w);
    CHECK(back.step == 7);
    CHECK(back.codebook_digest == 0xabcdef);
    CHECK(serialize(back) == bytes);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 4);
    CHECK_THROWS_AS(deserialize(truncated, "mem"), Error);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(deserialize(magic, "mem"), Error);
}

TEST_CASE("zero training steps leave the initialization untouched") {
    const ModelConfig cfg = tiny(1);
    Checkpoint c = new_checkpoint(cfg, 1);
    ExampleSource src = [&](std::uint64_t i) {
        Rng rng(i);
        return Example{random_grid(cfg, rng), random_grid(cfg, rng), Frame(cfg.gw * 2, cfg.gh)};
    };
    TrainOptions o;
    o.steps = 0;
    train(c, src, src, o);
    CHECK(c.model.w == init_model<float>(cfg).w);
    CHECK(c.step == 0);
}

TEST_CASE("training is independent of the worker count and lowers the loss") {
    const ModelConfig cfg = tiny(1);
    ExampleSource src = [&](std::uint64_t i) {
        // Frame 2 copies frame 1: learnable from the prefix alone.
        Rng rng(i);
        const auto g = random_grid(cfg, rng);
        return Example{g, g, Frame(cfg.gw * 2, cfg.gh)};
    };
    TrainOptions o;
    o.steps = 30;
    o.batch = 4;
    o.lr = 1e-2;
    o.log_every = 1;
    Checkpoint a = new_checkpoint(cfg, 1), b = new_checkpoint(cfg, 1);
    std::vector<double> losses;
    train(a, src, src, o, [&](const TrainLog& l) { losses.push_back(l.loss); }, 1);
    train(b, src, src, o, {}, 3);
    CHECK(a.model.w == b.model.w);
    CHECK(a.adam.m == b.adam.m);
    REQUIRE(losses.size() >= 2);
    CHECK(losses.front() == doctest::Approx(std::log(7.0)).epsilon(1e-3));
    CHECK(losses.back() < losses.front());

    // Resuming from a saved midpoint reproduces the straight run.
    Checkpoint c = new_checkpoint(cfg, 1);
    TrainOptions half = o;
    half.steps = 15;
    train(c, src, src, half);
    Checkpoint resumed = deserialize(serialize(c), "mem");
    train(resumed, src, src, o);
    CHECK(resumed.model.w == a.model.w);
}
