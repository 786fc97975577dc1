#include <algorithm>
#include <cmath>
#include <numbers>
#include <type_traits>

#include "kltrace/common.hpp"
#include "kltrace/seqmodel.hpp"
#include "kltrace/simd/kernels.hpp"
#include "kltrace/simd/kernels_scalar.hpp"
#include "seqmodel/ops.hpp"

namespace kltrace::seq {

std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::distributional_random_access:
            return "distributional_random_access";
        case Variant::distributional_raster:
            return "distributional_raster";
        case Variant::deterministic_l2:
            return "deterministic_l2";
    }
    return "unknown";
}

Variant parse_variant(std::string_view s) {
    for (Variant v : {Variant::distributional_random_access, Variant::distributional_raster,
                      Variant::deterministic_l2}) {
        if (variant_name(v) == s) return v;
    }
    fail_config("unknown model variant '" + std::string(s) + "'");
}

std::string_view reveal_mode_name(RevealMode m) {
    switch (m) {
        case RevealMode::random_subset:
            return "random_subset";
        case RevealMode::raster_prefix:
            return "raster_prefix";
        case RevealMode::overwrite_during_rollout:
            return "overwrite_during_rollout";
        case RevealMode::full:
            return "full";
    }
    return "unknown";
}

RevealMode parse_reveal_mode(std::string_view s) {
    for (RevealMode m : {RevealMode::random_subset, RevealMode::raster_prefix, RevealMode::overwrite_during_rollout,
                         RevealMode::full}) {
        if (reveal_mode_name(m) == s) return m;
    }
    fail_config("unknown reveal mode '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
    if (layers < 0) fail_config("layers must be >= 0");
    if (model_dim <= 0 || heads <= 0) fail_config("model_dim and heads must be positive");
    if (model_dim % heads != 0) fail_config("model_dim must be divisible by heads");
    if (mlp_dim <= 0) fail_config("mlp_dim must be positive");
    if (K < 1) fail_config("K must be >= 1");
    if (gh <= 0 || gw <= 0) fail_config("grid must be positive");
    if (patch_dim <= 0) fail_config("patch_dim must be positive");
    if (rope_pairs < 0 || 4 * rope_pairs > head_dim()) fail_config("rope_pairs does not fit the head dimension");
    if (value_rotary_heads < 0 || value_rotary_heads > heads) fail_config("value_rotary_heads out of range");
    if (value_rotary_heads > 0 && rope_pairs == 0) fail_config("value rotary heads need rope_pairs > 0");
}

const TensorInfo& Layout::find(std::string_view name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t;
    }
    fail_config("no tensor named '" + std::string(name) + "'");
}

Layout make_layout(const ModelConfig& cfg) {
    cfg.validate();
    Layout l;
    auto add = [&](std::string name, int rows, int cols) {
        l.tensors.push_back({std::move(name), rows, cols, l.total});
        l.total += static_cast<std::size_t>(rows) * cols;
    };
    const int d = cfg.model_dim;
    const int g = cfg.cells();
    add("tok_emb", cfg.K + 1, d);
    add("loc_emb", g + 1, d);
    add("frame_emb", 2, d);
    add("qry_emb", g, d);
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string p = "l" + std::to_string(i) + ".";
        add(p + "ln1.g", 1, d);
        add(p + "ln1.b", 1, d);
        add(p + "qkv.w", d, 3 * d);
        add(p + "qkv.b", 1, 3 * d);
        add(p + "proj.w", d, d);
        add(p + "proj.b", 1, d);
        add(p + "ln2.g", 1, d);
        add(p + "ln2.b", 1, d);
        add(p + "fc1.w", d, cfg.mlp_dim);
        add(p + "fc1.b", 1, cfg.mlp_dim);
        add(p + "fc2.w", cfg.mlp_dim, d);
        add(p + "fc2.b", 1, d);
    }
    if (cfg.final_norm) {
        add("lnf.g", 1, d);
        add("lnf.b", 1, d);
    }
    add("out.w", d, cfg.out_dim());
    add("out.b", 1, cfg.out_dim());
    return l;
}

template <class T>
Model<T> init_model(const ModelConfig& cfg) {
    Model<T> m;
    m.cfg = cfg;
    m.layout = make_layout(cfg);
    m.w.assign(m.layout.total, T(0));
    Rng rng(derive_seed(cfg.rng_seed, 0x1417));
    const double depth_scale = 1.0 / std::sqrt(2.0 * std::max(1, cfg.layers));
    auto ends_with = [](const std::string& s, std::string_view suf) {
        return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
    };
    for (const auto& t : m.layout.tensors) {
        T* p = m.w.data() + t.offset;
        double std = 0.0;
        if (t.name.starts_with("out.")) {
            std = 0.0;
        } else if (ends_with(t.name, "_emb")) {
            std = 0.1;
        } else if (ends_with(t.name, ".g")) {
            std::fill(p, p + t.size(), T(1));
            continue;
        } else if (ends_with(t.name, ".b")) {
            continue;
        } else if (ends_with(t.name, "proj.w") || ends_with(t.name, "fc2.w")) {
            std = depth_scale / std::sqrt(static_cast<double>(t.rows));
        } else {
            std = 1.0 / std::sqrt(static_cast<double>(t.rows));
        }
        for (std::size_t i = 0; i < t.size(); ++i) p[i] = static_cast<T>(rng.normal() * std);
    }
    return m;
}

template <class To, class From>
Model<To> convert(const Model<From>& m) {
    Model<To> out;
    out.cfg = m.cfg;
    out.layout = m.layout;
    out.w.assign(m.w.begin(), m.w.end());
    return out;
}

template Model<float> init_model<float>(const ModelConfig&);
template Model<double> init_model<double>(const ModelConfig&);
template Model<double> convert<double, float>(const Model<float>&);
template Model<float> convert<float, double>(const Model<double>&);

Sequence make_sequence(const ModelConfig& cfg, const tok::TokenGrid& f1, const tok::TokenGrid& f2,
                       std::span<const int> revealed, std::span<const int> order, const Frame* f2_frame) {
    const int g = cfg.cells();
    if (f1.size() != g || f2.size() != g) fail_config("token grid does not match the model grid");
    Sequence s;
    auto push = [&](int tk, int loc, int frame, int qloc, int target) {
        s.tok.push_back(tk);
        s.loc.push_back(loc);
        s.frame.push_back(frame);
        s.qloc.push_back(qloc);
        s.target.push_back(target);
    };
    for (int c = 0; c < g; ++c) push(f1.cells[static_cast<std::size_t>(c)], c, 0, -1, -1);
    for (int c : revealed) push(f2.cells[static_cast<std::size_t>(c)], c, 1, -1, -1);
    s.prefix = s.size();
    for (std::size_t t = 0; t < order.size(); ++t) {
        const int cell = order[t];
        const int target = f2.cells[static_cast<std::size_t>(cell)];
        if (t == 0) {
            push(cfg.K, -1, 1, cell, target);
        } else {
            const int prev = order[t - 1];
            push(f2.cells[static_cast<std::size_t>(prev)], prev, 1, cell, target);
        }
    }
    if (!cfg.distributional()) {
        if (!f2_frame) fail_config("pixel targets required for the deterministic variant");
        const int pw = f2_frame->width / cfg.gw;
        const int ph = f2_frame->height / cfg.gh;
        if (pw * ph * 3 != cfg.patch_dim) fail_config("frame does not match the model patch size");
        for (int cell : order) {
            const int px = (cell % cfg.gw) * pw;
            const int py = (cell / cfg.gw) * ph;
            for (int y = 0; y < ph; ++y) {
                const std::uint8_t* row = f2_frame->at(px, py + y);
                for (int i = 0; i < pw * 3; ++i) s.target_pixels.push_back(row[i] / 255.0f - 0.5f);
            }
        }
    }
    return s;
}

// ------------------------------------------------------------------ forward

namespace {

template <class T>
struct LayerCache {
    std::vector<T> xin, a1, mu1, rs1, qkv, probs, att_raw, att, xmid, a2, mu2, rs2, h, g;
};

template <class T>
struct Pass {
    int L = 0, d = 0, mlp = 0, heads = 0, hd = 0, prefix = 0, S = 0, V = 0, pairs = 0, vr = 0;
    std::vector<T> x0;
    std::vector<LayerCache<T>> layers;
    std::vector<T> xf;            // suffix rows of the residual stream
    std::vector<T> af, muf, rsf;  // suffix rows after final norm (or copy)
    std::vector<T> out;           // S x V
    Rotary<T> rq, rk;
};

template <class T>
void forward(const Model<T>& m, const Sequence& s, Pass<T>& ps) {
    const ModelConfig& c = m.cfg;
    const int L = s.size();
    const int d = c.model_dim;
    ps.L = L;
    ps.d = d;
    ps.mlp = c.mlp_dim;
    ps.heads = c.heads;
    ps.hd = c.head_dim();
    ps.prefix = s.prefix;
    ps.S = L - s.prefix;
    ps.V = c.out_dim();
    ps.pairs = c.rope_pairs;
    ps.vr = c.value_rotary_heads;
    const int g = c.cells();

    // Embeddings.
    ps.x0.assign(static_cast<std::size_t>(L) * d, T(0));
    const T* tok = m.p("tok_emb");
    const T* loc = m.p("loc_emb");
    const T* frm = m.p("frame_emb");
    const T* qry = m.p("qry_emb");
    std::vector<int> qpos(static_cast<std::size_t>(L)), kpos(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
        T* x = ps.x0.data() + static_cast<std::size_t>(i) * d;
        const int li = s.loc[static_cast<std::size_t>(i)];
        const int qi = s.qloc[static_cast<std::size_t>(i)];
        add_row(x, tok + static_cast<std::size_t>(s.tok[static_cast<std::size_t>(i)]) * d, d);
        add_row(x, loc + static_cast<std::size_t>(li >= 0 ? li : g) * d, d);
        add_row(x, frm + static_cast<std::size_t>(s.frame[static_cast<std::size_t>(i)]) * d, d);
        if (qi >= 0) add_row(x, qry + static_cast<std::size_t>(qi) * d, d);
        kpos[static_cast<std::size_t>(i)] = li >= 0 ? li : std::max(qi, 0);
        qpos[static_cast<std::size_t>(i)] = qi >= 0 ? qi : std::max(li, 0);
    }
    ps.rq = make_rotary<T>(qpos, c.gw, c.rope_pairs);
    ps.rk = make_rotary<T>(kpos, c.gw, c.rope_pairs);

    const T scale = T(1) / std::sqrt(static_cast<T>(ps.hd));
    std::vector<T> x = ps.x0;
    ps.layers.resize(static_cast<std::size_t>(c.layers));
    std::vector<T> tmp;
    for (int li = 0; li < c.layers; ++li) {
        auto& lc = ps.layers[static_cast<std::size_t>(li)];
        const std::string pre = "l" + std::to_string(li) + ".";
        lc.xin = x;
        layer_norm_rows(x.data(), L, d, m.p(pre + "ln1.g"), m.p(pre + "ln1.b"), lc.a1, lc.mu1, lc.rs1);
        lc.qkv.assign(static_cast<std::size_t>(L) * 3 * d, T(0));
        linear(lc.a1.data(), L, d, m.p(pre + "qkv.w"), m.p(pre + "qkv.b"), 3 * d, lc.qkv.data());
        rotate_qkv(lc.qkv.data(), L, d, ps.hd, ps.heads, ps.vr, ps.rq, ps.rk, +1);
        lc.probs.assign(static_cast<std::size_t>(ps.heads) * L * L, T(0));
        lc.att_raw.assign(static_cast<std::size_t>(L) * d, T(0));
        for (int h = 0; h < ps.heads; ++h) {
            T* P = lc.probs.data() + static_cast<std::size_t>(h) * L * L;
            const T* Q = lc.qkv.data() + h * ps.hd;
            const T* K = lc.qkv.data() + d + h * ps.hd;
            const T* Vv = lc.qkv.data() + 2 * d + h * ps.hd;
            mm<T>(false, true, L, L, ps.hd, scale, Q, 3 * d, K, 3 * d, T(0), P, L);
            masked_softmax_rows(P, L, s.prefix);
            mm<T>(false, false, L, ps.hd, L, T(1), P, L, Vv, 3 * d, T(0), lc.att_raw.data() + h * ps.hd, d);
        }
        lc.att = lc.att_raw;
        derotate_values(lc.att.data(), L, d, ps.hd, ps.heads, ps.vr, ps.rq, +1);
        tmp.assign(static_cast<std::size_t>(L) * d, T(0));
        linear(lc.att.data(), L, d, m.p(pre + "proj.w"), m.p(pre + "proj.b"), d, tmp.data());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
        lc.xmid = x;
        layer_norm_rows(x.data(), L, d, m.p(pre + "ln2.g"), m.p(pre + "ln2.b"), lc.a2, lc.mu2, lc.rs2);
        lc.h.assign(static_cast<std::size_t>(L) * ps.mlp, T(0));
        linear(lc.a2.data(), L, d, m.p(pre + "fc1.w"), m.p(pre + "fc1.b"), ps.mlp, lc.h.data());
        lc.g.resize(lc.h.size());
        for (std::size_t i = 0; i < lc.h.size(); ++i) lc.g[i] = gelu(lc.h[i]);
        tmp.assign(static_cast<std::size_t>(L) * d, T(0));
        linear(lc.g.data(), L, ps.mlp, m.p(pre + "fc2.w"), m.p(pre + "fc2.b"), d, tmp.data());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
    }

    const int S = ps.S;
    const T* xs = x.data() + static_cast<std::size_t>(s.prefix) * d;
    ps.xf.assign(xs, xs + static_cast<std::size_t>(S) * d);
    if (c.final_norm) {
        layer_norm_rows(xs, S, d, m.p("lnf.g"), m.p("lnf.b"), ps.af, ps.muf, ps.rsf);
    } else {
        ps.af.assign(xs, xs + static_cast<std::size_t>(S) * d);
    }
    ps.out.assign(static_cast<std::size_t>(S) * ps.V, T(0));
    if (S > 0) linear(ps.af.data(), S, d, m.p("out.w"), m.p("out.b"), ps.V, ps.out.data());
}

template <class T>
void backward(const Model<T>& m, const Sequence& s, Pass<T>& ps, std::vector<T>& dout, std::vector<T>& grad) {
    const ModelConfig& c = m.cfg;
    const int L = ps.L, d = ps.d, S = ps.S, V = ps.V, hd = ps.hd;
    auto G = [&](std::string_view name) { return grad.data() + m.layout.find(name).offset; };
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    // Output head.
    std::vector<T> daf(static_cast<std::size_t>(S) * d, T(0));
    if (S > 0) linear_backward(ps.af.data(), S, d, m.p("out.w"), V, dout.data(), G("out.w"), G("out.b"), daf.data());
    std::vector<T> dx(static_cast<std::size_t>(L) * d, T(0));
    T* dxs = dx.data() + static_cast<std::size_t>(ps.prefix) * d;
    if (c.final_norm) {
        layer_norm_backward(ps.xf.data(), S, d, m.p("lnf.g"), ps.muf, ps.rsf, daf.data(), G("lnf.g"), G("lnf.b"), dxs);
    } else {
        std::copy(daf.begin(), daf.end(), dxs);
    }

    std::vector<T> da, dqkv, datt, dP, dT;
    for (int li = c.layers - 1; li >= 0; --li) {
        auto& lc = ps.layers[static_cast<std::size_t>(li)];
        const std::string pre = "l" + std::to_string(li) + ".";
        // MLP branch: x_out = xmid + fc2(gelu(fc1(ln2(xmid)))).
        std::vector<T> dg(static_cast<std::size_t>(L) * ps.mlp, T(0));
        linear_backward(lc.g.data(), L, ps.mlp, m.p(pre + "fc2.w"), d, dx.data(), G(pre + "fc2.w"), G(pre + "fc2.b"),
                        dg.data());
        for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= gelu_grad(lc.h[i]);
        da.assign(static_cast<std::size_t>(L) * d, T(0));
        linear_backward(lc.a2.data(), L, d, m.p(pre + "fc1.w"), ps.mlp, dg.data(), G(pre + "fc1.w"), G(pre + "fc1.b"),
                        da.data());
        layer_norm_backward(lc.xmid.data(), L, d, m.p(pre + "ln2.g"), lc.mu2, lc.rs2, da.data(), G(pre + "ln2.g"),
                            G(pre + "ln2.b"), dx.data());  // accumulates into the residual gradient

        // Attention branch: xmid = xin + proj(att).
        datt.assign(static_cast<std::size_t>(L) * d, T(0));
        linear_backward(lc.att.data(), L, d, m.p(pre + "proj.w"), d, dx.data(), G(pre + "proj.w"), G(pre + "proj.b"),
                        datt.data());
        derotate_values(datt.data(), L, d, hd, ps.heads, ps.vr, ps.rq, -1);
        dqkv.assign(static_cast<std::size_t>(L) * 3 * d, T(0));
        dP.resize(static_cast<std::size_t>(L) * L);
        dT.resize(static_cast<std::size_t>(hd) * L);
        for (int h = 0; h < ps.heads; ++h) {
            const T* P = lc.probs.data() + static_cast<std::size_t>(h) * L * L;
            const T* Q = lc.qkv.data() + h * hd;
            const T* K = lc.qkv.data() + d + h * hd;
            const T* Vv = lc.qkv.data() + 2 * d + h * hd;
            const T* dO = datt.data() + h * hd;
            mm<T>(false, true, L, L, hd, T(1), dO, d, Vv, 3 * d, T(0), dP.data(), L);
            // dV^T = dO^T P and dK^T = Q^T dS keep the L x L operand untransposed.
            mm<T>(true, false, hd, L, L, T(1), dO, d, P, L, T(0), dT.data(), L);
            scatter_transposed(dT.data(), hd, L, dqkv.data() + 2 * d + h * hd, 3 * d);
            softmax_backward_rows(P, dP.data(), L);
            mm<T>(false, false, L, hd, L, scale, dP.data(), L, K, 3 * d, T(0), dqkv.data() + h * hd, 3 * d);
            mm<T>(true, false, hd, L, L, scale, Q, 3 * d, dP.data(), L, T(0), dT.data(), L);
            scatter_transposed(dT.data(), hd, L, dqkv.data() + d + h * hd, 3 * d);
        }
        rotate_qkv(dqkv.data(), L, d, hd, ps.heads, ps.vr, ps.rq, ps.rk, -1);
        da.assign(static_cast<std::size_t>(L) * d, T(0));
        linear_backward(lc.a1.data(), L, d, m.p(pre + "qkv.w"), 3 * d, dqkv.data(), G(pre + "qkv.w"),
                        G(pre + "qkv.b"), da.data());
        layer_norm_backward(lc.xin.data(), L, d, m.p(pre + "ln1.g"), lc.mu1, lc.rs1, da.data(), G(pre + "ln1.g"),
                            G(pre + "ln1.b"), dx.data());
    }

    // Embeddings.
    const int g = c.cells();
    T* gt = G("tok_emb");
    T* gl = G("loc_emb");
    T* gf = G("frame_emb");
    T* gq = G("qry_emb");
    for (int i = 0; i < L; ++i) {
        const T* r = dx.data() + static_cast<std::size_t>(i) * d;
        const int li = s.loc[static_cast<std::size_t>(i)];
        const int qi = s.qloc[static_cast<std::size_t>(i)];
        add_row(gt + static_cast<std::size_t>(s.tok[static_cast<std::size_t>(i)]) * d, r, d);
        add_row(gl + static_cast<std::size_t>(li >= 0 ? li : g) * d, r, d);
        add_row(gf + static_cast<std::size_t>(s.frame[static_cast<std::size_t>(i)]) * d, r, d);
        if (qi >= 0) add_row(gq + static_cast<std::size_t>(qi) * d, r, d);
    }
}

template <class T>
double head_loss(const ModelConfig& c, const Sequence& s, const Pass<T>& ps, std::vector<T>* dout, double scale) {
    const int S = ps.S, V = ps.V;
    if (S == 0) return 0.0;
    if (dout) dout->assign(static_cast<std::size_t>(S) * V, T(0));
    double loss = 0.0;
    if (c.distributional()) {
        std::vector<T> p(static_cast<std::size_t>(V));
        for (int r = 0; r < S; ++r) {
            const T* z = ps.out.data() + static_cast<std::size_t>(r) * V;
            const int t = s.target[static_cast<std::size_t>(ps.prefix + r)];
            const double lse = simd::scalar::log_sum_exp(z, static_cast<std::size_t>(V));
            loss += lse - static_cast<double>(z[t]);
            if (dout) {
                T* dz = dout->data() + static_cast<std::size_t>(r) * V;
                for (int k = 0; k < V; ++k) dz[k] = static_cast<T>(std::exp(static_cast<double>(z[k]) - lse) * scale / S);
                dz[t] -= static_cast<T>(scale / S);
            }
        }
        return loss / S;
    }
    const double n = static_cast<double>(S) * V;
    for (int r = 0; r < S; ++r) {
        for (int k = 0; k < V; ++k) {
            const std::size_t i = static_cast<std::size_t>(r) * V + k;
            const double e = static_cast<double>(ps.out[i]) - s.target_pixels[i];
            loss += e * e;
            if (dout) (*dout)[i] = static_cast<T>(2.0 * e * scale / n);
        }
    }
    return loss / n;
}

}  // namespace

template <class T>
double loss_and_grad(const Model<T>& m, const Sequence& s, std::vector<T>* grad, double grad_scale) {
    Pass<T> ps;
    forward(m, s, ps);
    std::vector<T> dout;
    const double loss = head_loss(m.cfg, s, ps, grad ? &dout : nullptr, grad_scale);
    if (grad && ps.S > 0) {
        if (grad->size() != m.w.size()) grad->assign(m.w.size(), T(0));
        backward(m, s, ps, dout, *grad);
    }
    return loss;
}

template double loss_and_grad<float>(const Model<float>&, const Sequence&, std::vector<float>*, double);
template double loss_and_grad<double>(const Model<double>&, const Sequence&, std::vector<double>*, double);

std::vector<float> forward_targets(const Model<float>& m, const Sequence& s) {
    Pass<float> ps;
    forward(m, s, ps);
    return ps.out;
}

GradCheckReport grad_check(const Model<double>& m, std::span<const Sequence> batch, double epsilon, int samples,
                           std::uint64_t seed) {
    GradCheckReport rep;
    if (batch.empty() || samples <= 0) return rep;
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::vector<double> grad(m.w.size(), 0.0);
    for (const auto& s : batch) loss_and_grad(m, s, &grad, inv);
    auto total_loss = [&](const Model<double>& mm_) {
        double l = 0.0;
        for (const auto& s : batch) l += loss_and_grad<double>(mm_, s, nullptr) * inv;
        return l;
    };
    Model<double> probe = m;
    Rng rng(seed);
    const int per_tensor = std::max(1, samples / static_cast<int>(m.layout.tensors.size()));
    for (const auto& t : m.layout.tensors) {
        for (int k = 0; k < per_tensor; ++k) {
            const std::size_t idx = t.offset + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(t.size()) - 1));
            const double w0 = probe.w[idx];
            probe.w[idx] = w0 + epsilon;
            const double lp = total_loss(probe);
            probe.w[idx] = w0 - epsilon;
            const double lm = total_loss(probe);
            probe.w[idx] = w0;
            const double numeric = (lp - lm) / (2.0 * epsilon);
            const double analytic = grad[idx];
            const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
            ++rep.checked;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst = t.name + "[" + std::to_string(idx - t.offset) + "]";
            }
        }
    }
    return rep;
}

}  // namespace kltrace::seq
