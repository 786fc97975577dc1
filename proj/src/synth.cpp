#include "kltrace/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <optional>
#include <numbers>

#include "kltrace/common.hpp"

namespace kltrace::synth {

std::string_view scenario_name(Scenario s) {
    switch (s) {
        case Scenario::translate:
            return "translate";
        case Scenario::rotate_inplace:
            return "rotate_inplace";
        case Scenario::occluder_pass:
            return "occluder_pass";
        case Scenario::textureless_region:
            return "textureless_region";
        case Scenario::twin_swap:
            return "twin_swap";
        case Scenario::camera_pan:
            return "camera_pan";
    }
    return "unknown";
}

Scenario parse_scenario(std::string_view name) {
    for (Scenario s : kAllScenarios) {
        if (scenario_name(s) == name) return s;
    }
    fail_config("unknown scenario '" + std::string(name) + "'");
}

double SceneSpec::motion_magnitude() const {
    const double d = std::hypot(dx, dy);
    switch (scenario) {
        case Scenario::rotate_inplace: {
            // Farthest texel sits at the sprite corner for rects, rim for discs.
            const double r = sprite.shape == Shape::disc ? sprite.size / 2.0 : sprite.size / std::numbers::sqrt2;
            return 2.0 * r * std::abs(std::sin(rotation_deg * std::numbers::pi / 360.0)) + 1e-9;
        }
        case Scenario::occluder_pass:
            return std::max(d, static_cast<double>(std::abs(occluder_shift)));
        case Scenario::twin_swap:
            return std::hypot(second_x - center_x, second_y - center_y);
        default:
            return d;
    }
}

namespace {

using Rgb = std::array<std::uint8_t, 3>;

std::uint64_t hash3(std::uint64_t seed, std::int64_t i, std::int64_t j) {
    return derive_seed(seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
}

constexpr std::array<Rgb, 12> kColours{{{200, 60, 50},  {60, 170, 70},  {50, 90, 200},  {220, 200, 60},
                                         {160, 70, 180}, {60, 180, 190}, {230, 140, 40}, {120, 120, 120},
                                         {90, 60, 40},   {190, 190, 200}, {40, 110, 60}, {150, 40, 80}}};

struct Texture {
    std::uint64_t seed = 0;
    int cell = 8;
    std::vector<Rgb> palette;
    bool flat = false;
    bool blocky = false;  // nearest lattice node instead of bilinear blend

    // Colours come from a small shared set so a finite codebook can cover
    // every scene; `contrast` < 1 pulls them toward mid-gray.
    static Texture make(std::uint64_t seed, int cell, int palette_size, double contrast) {
        Texture t;
        t.seed = seed;
        t.cell = cell;
        Rng rng(derive_seed(seed, 0x7a11e7));
        for (int i = 0; i < palette_size; ++i) {
            const Rgb& c = kColours[static_cast<std::size_t>(rng.uniform_int(0, kColours.size() - 1))];
            Rgb out{};
            for (int ch = 0; ch < 3; ++ch) {
                out[static_cast<std::size_t>(ch)] =
                    static_cast<std::uint8_t>(std::lround(128.0 + contrast * (c[static_cast<std::size_t>(ch)] - 128.0)));
            }
            t.palette.push_back(out);
        }
        return t;
    }

    const Rgb& node(std::int64_t i, std::int64_t j) const {
        return palette[hash3(seed, i, j) % palette.size()];
    }

    // Bilinear value noise over a lattice of palette colours; integer texel
    // coordinates in, deterministic bytes out.
    Rgb sample(std::int64_t x, std::int64_t y) const {
        if (flat) return palette[0];
        const auto fdiv = [](std::int64_t a, std::int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
        const std::int64_t i = fdiv(x, cell);
        const std::int64_t j = fdiv(y, cell);
        const std::int64_t fx = x - i * cell;
        const std::int64_t fy = y - j * cell;
        if (blocky) return node(i, j);
        const Rgb& c00 = node(i, j);
        const Rgb& c10 = node(i + 1, j);
        const Rgb& c01 = node(i, j + 1);
        const Rgb& c11 = node(i + 1, j + 1);
        Rgb out{};
        const std::int64_t w = cell;
        for (int ch = 0; ch < 3; ++ch) {
            const std::int64_t top = c00[ch] * (w - fx) + c10[ch] * fx;
            const std::int64_t bot = c01[ch] * (w - fx) + c11[ch] * fx;
            const std::int64_t v = top * (w - fy) + bot * fy;
            out[ch] = static_cast<std::uint8_t>((v + w * w / 2) / (w * w));
        }
        return out;
    }
};

enum class Kind { rect, disc, bar };

struct Surface {
    int id = 0;
    Kind kind = Kind::rect;
    int size = 0;       // rect side / disc diameter / bar width
    double cx0 = 0.0;   // frame-0 anchor (center; bar: left edge)
    double cy0 = 0.0;
    double vx = 0.0;    // per-frame motion
    double vy = 0.0;
    double omega = 0.0;  // per-frame rotation, radians
    Texture texture;

    double cx(int t) const { return cx0 + t * vx; }
    double cy(int t) const { return cy0 + t * vy; }

    // Surface-local coordinates of pixel (x, y) at frame t if covered.
    std::optional<Point> local(int x, int y, int t, int height) const {
        const double px = x - cx(t);
        const double py = y - cy(t);
        switch (kind) {
            case Kind::bar:
                if (px >= 0 && px < size && y >= 0 && y < height) return Point{px, py};
                return std::nullopt;
            case Kind::rect: {
                const double th = -omega * t;
                const double lx = std::cos(th) * px - std::sin(th) * py;
                const double ly = std::sin(th) * px + std::cos(th) * py;
                const double rx = std::floor(lx + 0.5);
                const double ry = std::floor(ly + 0.5);
                const double lo = -std::floor(size / 2.0);
                if (rx >= lo && rx < lo + size && ry >= lo && ry < lo + size) return Point{lx, ly};
                return std::nullopt;
            }
            case Kind::disc: {
                const double th = -omega * t;
                const double lx = std::cos(th) * px - std::sin(th) * py;
                const double ly = std::sin(th) * px + std::cos(th) * py;
                const double r = size / 2.0;
                if (lx * lx + ly * ly <= r * r) return Point{lx, ly};
                return std::nullopt;
            }
        }
        return std::nullopt;
    }

    Point to_frame(Point l, int t) const {
        const double th = omega * t;
        return {cx(t) + std::cos(th) * l.x - std::sin(th) * l.y, cy(t) + std::sin(th) * l.x + std::cos(th) * l.y};
    }

    Rgb color(Point l) const {
        return texture.sample(static_cast<std::int64_t>(std::floor(l.x + 0.5)),
                              static_cast<std::int64_t>(std::floor(l.y + 0.5)));
    }
};

struct Scene {
    int width = 0;
    int height = 0;
    Texture background;
    double cam_vx = 0.0;
    double cam_vy = 0.0;
    std::vector<Surface> sprites;  // ascending z

    struct Hit {
        int surface = 0;  // 0 = background, else sprite id
        Point local;
    };

    Hit top(int x, int y, int t) const {
        for (auto it = sprites.rbegin(); it != sprites.rend(); ++it) {
            if (auto l = it->local(x, y, t, height)) return {it->id, *l};
        }
        return {0, Point{x - t * cam_vx, y - t * cam_vy}};
    }

    const Surface& sprite(int id) const { return sprites[static_cast<std::size_t>(id - 1)]; }

    Rgb color(const Hit& h) const {
        if (h.surface == 0) {
            return background.sample(static_cast<std::int64_t>(std::floor(h.local.x + 0.5)),
                                     static_cast<std::int64_t>(std::floor(h.local.y + 0.5)));
        }
        return sprite(h.surface).color(h.local);
    }

    Point to_frame(const Hit& h, int t) const {
        if (h.surface == 0) return {h.local.x + t * cam_vx, h.local.y + t * cam_vy};
        return sprite(h.surface).to_frame(h.local, t);
    }
};

Texture sprite_texture(const SpriteParams& p) {
    Texture t = Texture::make(p.texture_seed, 5, 4, 1.0);
    t.flat = !p.textured;
    return t;
}

Scene build_scene(const SceneSpec& s) {
    Scene sc;
    sc.width = s.width;
    sc.height = s.height;
    sc.background = Texture::make(s.background_seed, 16, 4, 0.6);
    sc.background.blocky = true;
    const Kind kind = s.sprite.shape == Shape::disc ? Kind::disc : Kind::rect;
    auto add = [&](Kind k, int size, double cx, double cy, double vx, double vy, double omega, Texture tex) {
        Surface surf;
        surf.id = static_cast<int>(sc.sprites.size()) + 1;
        surf.kind = k;
        surf.size = size;
        surf.cx0 = cx;
        surf.cy0 = cy;
        surf.vx = vx;
        surf.vy = vy;
        surf.omega = omega;
        surf.texture = std::move(tex);
        sc.sprites.push_back(std::move(surf));
    };
    const Texture tex = sprite_texture(s.sprite);
    switch (s.scenario) {
        case Scenario::translate:
        case Scenario::textureless_region:
            add(kind, s.sprite.size, s.center_x, s.center_y, s.dx, s.dy, 0.0, tex);
            break;
        case Scenario::rotate_inplace:
            add(kind, s.sprite.size, s.center_x, s.center_y, 0, 0, s.rotation_deg * std::numbers::pi / 180.0, tex);
            break;
        case Scenario::occluder_pass: {
            add(kind, s.sprite.size, s.center_x, s.center_y, s.dx, s.dy, 0.0, tex);
            Texture pole;  // flat near-black
            pole.palette = {Rgb{30, 30, 36}};
            pole.flat = true;
            add(Kind::bar, s.occluder_width, s.occluder_x, 0, s.occluder_shift, 0, 0.0, pole);
            break;
        }
        case Scenario::twin_swap: {
            const double vx = s.second_x - s.center_x;
            const double vy = s.second_y - s.center_y;
            add(kind, s.sprite.size, s.center_x, s.center_y, vx, vy, 0.0, tex);
            add(kind, s.sprite.size, s.second_x, s.second_y, -vx, -vy, 0.0, tex);
            break;
        }
        case Scenario::camera_pan:
            sc.cam_vx = s.dx;
            sc.cam_vy = s.dy;
            add(kind, s.sprite.size, s.center_x, s.center_y, s.dx, s.dy, 0.0, tex);
            break;
    }
    return sc;
}

bool sprite_visible_in_frame(const Scene& sc, const Surface& surf, int t) {
    for (int y = 0; y < sc.height; ++y) {
        for (int x = 0; x < sc.width; ++x) {
            if (surf.local(x, y, t, sc.height)) return true;
        }
    }
    return false;
}

}  // namespace

void validate(const SceneSpec& s) {
    if (s.width <= 0 || s.height <= 0) fail_config("frame dimensions must be positive");
    if (s.num_frames < 2) fail_config("a clip needs at least two frames");
    if (s.sprite.size <= 0) fail_config("sprite size must be positive");
    if (s.sprite.size > std::min(s.width, s.height)) fail_config("sprite larger than frame");
    if (std::abs(s.dx) * 2 > s.width || std::abs(s.dy) * 2 > s.height) {
        fail_config("displacement exceeds half the frame extent");
    }
    if (s.scenario == Scenario::occluder_pass) {
        if (s.occluder_width <= 0 || s.occluder_width > s.width) fail_config("bad occluder width");
        if (std::abs(s.occluder_shift) * 2 > s.width) fail_config("occluder shift exceeds half the frame extent");
    }
    if (s.scenario == Scenario::twin_swap) {
        if (std::abs(s.second_x - s.center_x) * 2 > s.width || std::abs(s.second_y - s.center_y) * 2 > s.height) {
            fail_config("twin separation exceeds half the frame extent");
        }
        if (std::abs(s.second_x - s.center_x) < s.sprite.size && std::abs(s.second_y - s.center_y) < s.sprite.size) {
            fail_config("twin sprites overlap");
        }
    }
    const Scene sc = build_scene(s);
    const bool needs_visibility = s.scenario != Scenario::camera_pan;
    if (needs_visibility) {
        for (int t = 0; t < s.num_frames; ++t) {
            if (!sprite_visible_in_frame(sc, sc.sprites.front(), t)) {
                fail_config("motion moves the sprite fully out of the frame");
            }
        }
    }
}

Frame render_frame(const SceneSpec& spec, int t) {
    const Scene sc = build_scene(spec);
    Frame f(spec.width, spec.height);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const Rgb c = sc.color(sc.top(x, y, t));
            std::copy(c.begin(), c.end(), f.at(x, y));
        }
    }
    return f;
}

Clip generate_clip(const SceneSpec& spec, std::string id) {
    validate(spec);
    const Scene sc = build_scene(spec);
    Clip clip;
    clip.id = std::move(id);
    clip.spec = spec;
    for (int t = 0; t < spec.num_frames; ++t) clip.frames.push_back(render_frame(spec, t));

    for (int a = 0; a + 1 < spec.num_frames; ++a) {
        const int b = a + 1;
        FlowField flow(spec.width, spec.height);
        OcclusionMask occ(spec.width, spec.height);
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                const Scene::Hit h = sc.top(x, y, a);
                const Point target = sc.to_frame(h, b);
                double u = target.x - x;
                double v = target.y - y;
                // Integer motion keeps exact integers; snap rotation round-off.
                if (std::abs(u - std::round(u)) < 1e-9) u = std::round(u);
                if (std::abs(v - std::round(v)) < 1e-9) v = std::round(v);
                flow.set(x, y, static_cast<float>(u), static_cast<float>(v));
                const int tx = static_cast<int>(std::floor(target.x + 0.5));
                const int ty = static_cast<int>(std::floor(target.y + 0.5));
                bool hidden = tx < 0 || ty < 0 || tx >= spec.width || ty >= spec.height;
                if (!hidden) hidden = sc.top(tx, ty, b).surface != h.surface;
                occ.set(x, y, hidden);
            }
        }
        clip.flows.push_back(std::move(flow));
        clip.occlusions.push_back(std::move(occ));
    }
    return clip;
}

SceneSpec random_scene(Scenario scenario, std::uint64_t seed, const SceneOptions& o) {
    Rng rng(derive_seed(seed, 0x5ce9e));
    SceneSpec s;
    s.scenario = scenario;
    s.width = o.width;
    s.height = o.height;
    s.num_frames = o.num_frames;
    s.rng_seed = seed;
    s.background_seed = derive_seed(seed, 0xb6);
    s.sprite.texture_seed = derive_seed(seed, 0x7e);
    s.sprite.shape = rng.uniform() < 0.5 ? Shape::rect : Shape::disc;
    s.sprite.size = static_cast<int>(rng.uniform_int(o.min_sprite, o.max_sprite));
    s.sprite.textured = scenario != Scenario::textureless_region;

    const int md = o.max_displacement;
    auto draw_motion = [&](int lo_mag) {
        for (;;) {
            s.dx = static_cast<int>(rng.uniform_int(-md, md));
            s.dy = static_cast<int>(rng.uniform_int(-md, md));
            if (std::max(std::abs(s.dx), std::abs(s.dy)) >= lo_mag) return;
        }
    };
    const int half = s.sprite.size / 2;
    auto place = [&](int margin) {
        s.center_x = static_cast<int>(rng.uniform_int(half + margin, o.width - 1 - half - margin));
        s.center_y = static_cast<int>(rng.uniform_int(half + margin, o.height - 1 - half - margin));
    };

    switch (scenario) {
        case Scenario::translate:
        case Scenario::textureless_region:
            draw_motion(2);
            // Keep the sprite inside the frame in both poses.
            s.center_x = static_cast<int>(rng.uniform_int(half + std::max(0, -s.dx),
                                                          o.width - 1 - half - std::max(0, s.dx)));
            s.center_y = static_cast<int>(rng.uniform_int(half + std::max(0, -s.dy),
                                                          o.height - 1 - half - std::max(0, s.dy)));
            break;
        case Scenario::rotate_inplace:
            s.sprite.shape = Shape::disc;
            s.sprite.size = std::max(s.sprite.size, 20);
            place(0);
            s.rotation_deg = rng.uniform(8.0, 20.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
            break;
        case Scenario::occluder_pass: {
            s.dx = static_cast<int>(rng.uniform_int(-md / 2, md / 2));
            s.dy = static_cast<int>(rng.uniform_int(-md / 2, md / 2));
            s.center_x = static_cast<int>(rng.uniform_int(half + std::max(0, -s.dx),
                                                          o.width - 1 - half - std::max(0, s.dx)));
            s.center_y = static_cast<int>(rng.uniform_int(half + std::max(0, -s.dy),
                                                          o.height - 1 - half - std::max(0, s.dy)));
            s.occluder_width = static_cast<int>(rng.uniform_int(6, 10));
            const int shift_mag = static_cast<int>(rng.uniform_int(std::max(3, md / 2), md));
            s.occluder_shift = rng.uniform() < 0.5 ? -shift_mag : shift_mag;
            // Pole lands on the sprite in frame 1 so there is something to hide.
            const int land = s.center_x + s.dx + static_cast<int>(rng.uniform_int(-half / 2, half / 2));
            s.occluder_x = land - s.occluder_width / 2 - s.occluder_shift;
            break;
        }
        case Scenario::twin_swap: {
            // Two identical sprites exchanging positions.
            s.sprite.size = std::min(s.sprite.size, 16);
            const int h2 = s.sprite.size / 2;
            for (;;) {
                s.center_x = static_cast<int>(rng.uniform_int(h2, o.width - 1 - h2));
                s.center_y = static_cast<int>(rng.uniform_int(h2, o.height - 1 - h2));
                s.second_x = static_cast<int>(rng.uniform_int(h2, o.width - 1 - h2));
                s.second_y = static_cast<int>(rng.uniform_int(h2, o.height - 1 - h2));
                const int sx = std::abs(s.second_x - s.center_x);
                const int sy = std::abs(s.second_y - s.center_y);
                const bool apart = sx >= s.sprite.size + 1 || sy >= s.sprite.size + 1;
                if (apart && sx * 2 <= o.width && sy * 2 <= o.height) break;
            }
            break;
        }
        case Scenario::camera_pan:
            draw_motion(2);
            place(0);
            break;
    }
    return s;
}

std::vector<QueryRecord> sample_queries(const Clip& clip, const QuerySampling& q) {
    if (q.count < 0) fail_config("query count must be non-negative");
    if (!(q.visible_fraction >= 0.0 && q.visible_fraction <= 1.0)) fail_config("visible_fraction must lie in [0,1]");
    std::vector<QueryRecord> out;
    if (q.count == 0) return out;
    if (clip.flows.empty()) fail_data("clip '" + clip.id + "' has no ground truth");
    const FlowField& flow = clip.flows[0];
    const OcclusionMask& occ = clip.occlusions[0];

    std::vector<int> moving, still, hidden;
    for (int y = 0; y < flow.height; ++y) {
        for (int x = 0; x < flow.width; ++x) {
            const int idx = y * flow.width + x;
            if (occ.at(x, y)) {
                hidden.push_back(idx);
            } else if (flow.u(x, y) != 0.0f || flow.v(x, y) != 0.0f) {
                moving.push_back(idx);
            } else {
                still.push_back(idx);
            }
        }
    }
    const int n_vis = static_cast<int>(std::lround(q.count * q.visible_fraction));
    const int n_occ = q.count - n_vis;
    if (static_cast<int>(hidden.size()) < n_occ) {
        fail_data("clip '" + clip.id + "' has " + std::to_string(hidden.size()) + " occluded pixels, " +
                  std::to_string(n_occ) + " requested");
    }
    if (static_cast<int>(moving.size() + still.size()) < n_vis) {
        fail_data("clip '" + clip.id + "' lacks visible pixels for " + std::to_string(n_vis) + " queries");
    }
    Rng rng(q.seed);
    rng.shuffle(moving.begin(), moving.end());
    rng.shuffle(still.begin(), still.end());
    rng.shuffle(hidden.begin(), hidden.end());

    int n_moving = std::min<int>(static_cast<int>(moving.size()), static_cast<int>(std::lround(n_vis * q.moving_fraction)));
    int n_still = n_vis - n_moving;
    if (n_still > static_cast<int>(still.size())) {
        n_still = static_cast<int>(still.size());
        n_moving = n_vis - n_still;
    }
    std::vector<int> picks;
    picks.insert(picks.end(), moving.begin(), moving.begin() + n_moving);
    picks.insert(picks.end(), still.begin(), still.begin() + n_still);
    picks.insert(picks.end(), hidden.begin(), hidden.begin() + n_occ);
    std::sort(picks.begin(), picks.end());
    for (int idx : picks) {
        const int x = idx % flow.width;
        const int y = idx / flow.width;
        QueryRecord r;
        r.clip = clip.id;
        r.frame_a = 0;
        r.frame_b = 1;
        r.query = {static_cast<double>(x), static_cast<double>(y)};
        r.target = {x + static_cast<double>(flow.u(x, y)), y + static_cast<double>(flow.v(x, y))};
        r.occluded = occ.at(x, y);
        out.push_back(r);
    }
    return out;
}

Dataset generate_dataset(const DatasetConfig& cfg, int workers) {
    if (cfg.num_clips < 0) fail_config("num_clips must be non-negative");
    if (cfg.mix.empty()) fail_config("scenario mix is empty");
    Dataset ds;
    ds.seed = cfg.seed;
    ds.clips.resize(static_cast<std::size_t>(cfg.num_clips));
    std::vector<std::vector<QueryRecord>> per_clip(static_cast<std::size_t>(cfg.num_clips));

    auto make = [&](int i) {
        const Scenario sc = cfg.mix[static_cast<std::size_t>(i) % cfg.mix.size()];
        const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
        char id[32];
        std::snprintf(id, sizeof(id), "clip_%04d", i);
        // Redraw (with a bumped counter) until the clip can supply the queries.
        for (std::uint64_t attempt = 0;; ++attempt) {
            const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, 0xa77e, attempt);
            Clip clip = generate_clip(random_scene(sc, s, cfg.scene), id);
            QuerySampling qs;
            qs.count = cfg.queries_per_clip;
            // Scenes without any occluded pixel (pure rotation, swaps) get visible-only queries.
            qs.visible_fraction = clip.occlusions[0].count() == 0 ? 1.0 : cfg.visible_fraction;
            qs.moving_fraction = cfg.moving_fraction;
            qs.seed = derive_seed(s, 0x9e7);
            try {
                per_clip[static_cast<std::size_t>(i)] = sample_queries(clip, qs);
            } catch (const Error&) {
                if (attempt > 64) throw;
                continue;
            }
            ds.clips[static_cast<std::size_t>(i)] = std::move(clip);
            return;
        }
    };

    workers = std::max(1, workers);
    if (workers == 1) {
        for (int i = 0; i < cfg.num_clips; ++i) make(i);
    } else {
        std::vector<std::future<void>> jobs;
        for (int w = 0; w < workers; ++w) {
            jobs.push_back(std::async(std::launch::async, [&, w] {
                for (int i = w; i < cfg.num_clips; i += workers) make(i);
            }));
        }
        for (auto& j : jobs) j.get();
    }
    for (auto& q : per_clip) ds.queries.insert(ds.queries.end(), q.begin(), q.end());
    return ds;
}

}  // namespace kltrace::synth
