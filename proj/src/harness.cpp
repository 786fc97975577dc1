#include "kltrace/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "kltrace/common.hpp"
#include "kltrace/config_json.hpp"
#include "kltrace/io.hpp"

namespace kltrace::harness {

namespace fs = std::filesystem;

namespace {

// Tags for seeds derived from the master seed.
enum SeedTag : std::uint64_t {
    kDataset = 1,
    kModel,
    kTrain,
    kTrace,
    kTokenizer,
    kTrainStream,
    kHeldoutStream,
    kCalibration,
    kTokenizerScenes,
};

template <class E, class F>
std::vector<std::string> names(const std::vector<E>& v, F f) {
    std::vector<std::string> out;
    for (const auto& e : v) out.emplace_back(f(e));
    return out;
}

template <class E, class F>
std::vector<E> parse_list(const json& j, const char* key, std::string_view where, F f) {
    std::vector<std::string> raw;
    read_opt(j, key, raw, where);
    std::vector<E> out;
    for (const auto& s : raw) out.push_back(f(s));
    return out;
}

json trace_to_json(const trace::TraceSettings& s) {
    return json{{"num_masks", s.num_masks},
                {"scales", s.scales},
                {"reveal_fraction", s.reveal_fraction},
                {"reveal_mode", std::string(seq::reveal_mode_name(s.reveal_mode))},
                {"occlusion_threshold", s.occlusion_threshold ? json(*s.occlusion_threshold) : json(nullptr)},
                {"mode", std::string(trace::mode_name(s.mode))},
                {"sigma", s.sigma},
                {"amplitude", s.amplitude},
                {"sampling", s.sampling}};
}

void trace_from_json(const json& j, trace::TraceSettings& s) {
    constexpr std::string_view w = "trace";
    reject_unknown_keys(j, {"num_masks", "scales", "reveal_fraction", "reveal_mode", "occlusion_threshold", "mode",
                            "sigma", "amplitude", "sampling"},
                        w);
    read_opt(j, "num_masks", s.num_masks, w);
    read_opt(j, "scales", s.scales, w);
    read_opt(j, "reveal_fraction", s.reveal_fraction, w);
    std::string rm(seq::reveal_mode_name(s.reveal_mode));
    read_opt(j, "reveal_mode", rm, w);
    s.reveal_mode = seq::parse_reveal_mode(rm);
    if (auto it = j.find("occlusion_threshold"); it != j.end()) {
        if (it->is_null()) {
            s.occlusion_threshold.reset();
        } else {
            double t = 0;
            read_opt(j, "occlusion_threshold", t, w);
            s.occlusion_threshold = t;
        }
    }
    std::string m(trace::mode_name(s.mode));
    read_opt(j, "mode", m, w);
    s.mode = trace::parse_mode(m);
    read_opt(j, "sigma", s.sigma, w);
    read_opt(j, "amplitude", s.amplitude, w);
    read_opt(j, "sampling", s.sampling, w);
}

/// Drops keys that are derived rather than configured.
json strip(json j, std::initializer_list<const char*> keys) {
    for (const char* k : keys) j.erase(k);
    return j;
}

void reject_derived(const json& j, std::initializer_list<const char*> keys, std::string_view where) {
    for (const char* k : keys) {
        if (j.contains(k)) {
            throw Error(ErrorKind::config, std::string(where) + "." + k + " is derived from the run config and cannot be set");
        }
    }
}

}  // namespace

void RunConfig::resolve() {
    const int p = tokenizer.patch;
    if (p <= 0 || dataset.scene.width % p || dataset.scene.height % p) {
        fail_config("frame size must be a multiple of tokenizer.patch");
    }
    dataset.seed = derive_seed(seed, kDataset);
    model.rng_seed = derive_seed(seed, kModel);
    model.K = tokenizer.k;
    model.gw = dataset.scene.width / p;
    model.gh = dataset.scene.height / p;
    model.patch_dim = p * p * 3;
    train.seed = derive_seed(seed, kTrain);
    trace.rng_seed = derive_seed(seed, kTrace);
}

std::uint64_t RunConfig::digest() const { return fnv1a64(to_json(*this).dump()); }

json to_json(const RunConfig& c) {
    json j;
    j["version"] = kConfigVersion;
    j["seed"] = c.seed;
    j["dataset"] = strip(json(c.dataset), {"seed"});
    j["tokenizer"] = {{"k", c.tokenizer.k},
                      {"iters", c.tokenizer.iters},
                      {"patch", c.tokenizer.patch},
                      {"scenes", c.tokenizer.scenes},
                      {"zoom_share", c.tokenizer.zoom_share}};
    j["model"] = strip(json(c.model), {"K", "gh", "gw", "patch_dim", "rng_seed"});
    j["train"] = strip(json(c.train), {"seed"});
    j["train"]["zoom_prob"] = c.zoom_prob;
    j["train"]["heldout_examples"] = c.heldout_examples;
    j["trace"] = trace_to_json(c.trace);
    j["metrics"] = {{"thresholds", c.thresholds}};
    j["calibration"] = {{"num_clips", c.calibration.num_clips},
                        {"mix", names(c.calibration.mix, synth::scenario_name)},
                        {"queries_per_clip", c.calibration.queries_per_clip},
                        {"visible_fraction", c.calibration.visible_fraction}};
    j["ablate"] = {{"modes", names(c.ablate.modes, trace::mode_name)},
                   {"variants", names(c.ablate.variants, seq::variant_name)},
                   {"reveal_modes", names(c.ablate.reveal_modes, seq::reveal_mode_name)},
                   {"num_masks", c.ablate.num_masks},
                   {"num_scales", c.ablate.num_scales},
                   {"reveal_fractions", c.ablate.reveal_fractions}};
    return j;
}

RunConfig config_from_json(const json& j) {
    reject_unknown_keys(j, {"version", "seed", "dataset", "tokenizer", "model", "train", "trace", "metrics",
                            "calibration", "ablate"},
                        "config");
    RunConfig c;
    int version = kConfigVersion;
    read_opt(j, "version", version, "config");
    if (version != kConfigVersion) fail_config("config: unsupported version " + std::to_string(version));
    read_opt(j, "seed", c.seed, "config");
    if (auto it = j.find("dataset"); it != j.end()) {
        reject_derived(*it, {"seed"}, "dataset");
        read_opt(j, "dataset", c.dataset, "config");
    }
    if (auto it = j.find("tokenizer"); it != j.end()) {
        constexpr std::string_view w = "tokenizer";
        reject_unknown_keys(*it, {"k", "iters", "patch", "scenes", "zoom_share"}, w);
        read_opt(*it, "k", c.tokenizer.k, w);
        read_opt(*it, "iters", c.tokenizer.iters, w);
        read_opt(*it, "patch", c.tokenizer.patch, w);
        read_opt(*it, "scenes", c.tokenizer.scenes, w);
        read_opt(*it, "zoom_share", c.tokenizer.zoom_share, w);
    }
    if (auto it = j.find("model"); it != j.end()) {
        reject_derived(*it, {"K", "gh", "gw", "patch_dim", "rng_seed"}, "model");
        read_opt(j, "model", c.model, "config");
    }
    if (auto it = j.find("train"); it != j.end()) {
        reject_derived(*it, {"seed"}, "train");
        json t = *it;
        read_opt(t, "zoom_prob", c.zoom_prob, "train");
        read_opt(t, "heldout_examples", c.heldout_examples, "train");
        t.erase("zoom_prob");
        t.erase("heldout_examples");
        try {
            c.train = t.get<seq::TrainOptions>();
        } catch (const json::exception& e) {
            fail_config(std::string("train: ") + e.what());
        }
    }
    if (auto it = j.find("trace"); it != j.end()) trace_from_json(*it, c.trace);
    if (auto it = j.find("metrics"); it != j.end()) {
        reject_unknown_keys(*it, {"thresholds"}, "metrics");
        read_opt(*it, "thresholds", c.thresholds, "metrics");
    }
    if (auto it = j.find("calibration"); it != j.end()) {
        constexpr std::string_view w = "calibration";
        reject_unknown_keys(*it, {"num_clips", "mix", "queries_per_clip", "visible_fraction"}, w);
        read_opt(*it, "num_clips", c.calibration.num_clips, w);
        if (it->contains("mix")) c.calibration.mix = parse_list<synth::Scenario>(*it, "mix", w, synth::parse_scenario);
        read_opt(*it, "queries_per_clip", c.calibration.queries_per_clip, w);
        read_opt(*it, "visible_fraction", c.calibration.visible_fraction, w);
    }
    if (auto it = j.find("ablate"); it != j.end()) {
        constexpr std::string_view w = "ablate";
        reject_unknown_keys(*it, {"modes", "variants", "reveal_modes", "num_masks", "num_scales", "reveal_fractions"}, w);
        auto& a = c.ablate;
        if (it->contains("modes")) a.modes = parse_list<trace::Mode>(*it, "modes", w, trace::parse_mode);
        if (it->contains("variants")) a.variants = parse_list<seq::Variant>(*it, "variants", w, seq::parse_variant);
        if (it->contains("reveal_modes")) {
            a.reveal_modes = parse_list<seq::RevealMode>(*it, "reveal_modes", w, seq::parse_reveal_mode);
        }
        read_opt(*it, "num_masks", a.num_masks, w);
        read_opt(*it, "num_scales", a.num_scales, w);
        read_opt(*it, "reveal_fractions", a.reveal_fractions, w);
    }
    if (c.calibration.num_clips < 1) fail_config("calibration.num_clips must be at least 1");
    if (c.calibration.mix.empty()) fail_config("calibration.mix is empty");
    if (c.heldout_examples < 1) fail_config("train.heldout_examples must be at least 1");
    if (c.tokenizer.scenes < 1) fail_config("tokenizer.scenes must be at least 1");
    c.resolve();
    c.model.validate();
    c.trace.validate();
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) fail_config("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) fail_config("override '" + assignment + "' has an empty key");
        if (!node->is_object()) fail_config("override '" + assignment + "': '" + key + "' is not inside an object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load_config(const fs::path& path, std::span<const std::string> overrides) {
    json j = json::object();
    if (!path.empty()) {
        const auto bytes = io::read_file(path);
        try {
            j = json::parse(bytes.begin(), bytes.end());
        } catch (const json::parse_error& e) {
            fail_config(path.string() + ": malformed JSON at byte offset " + std::to_string(e.byte));
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

synth::Dataset make_dataset(const RunConfig& c, int workers) { return synth::generate_dataset(c.dataset, workers); }

synth::Dataset make_calibration_split(const RunConfig& c, int workers) {
    synth::DatasetConfig d;
    d.num_clips = c.calibration.num_clips;
    d.mix = c.calibration.mix;
    d.scene = c.dataset.scene;
    d.queries_per_clip = c.calibration.queries_per_clip;
    d.visible_fraction = c.calibration.visible_fraction;
    d.moving_fraction = c.dataset.moving_fraction;
    d.seed = derive_seed(c.seed, kCalibration);
    return synth::generate_dataset(d, workers);
}

tok::Codebook fit_tokenizer(const RunConfig& c, tok::FitReport* report) {
    const std::uint64_t base = derive_seed(c.seed, kTokenizerScenes);
    const auto& sc = c.dataset.scene;
    std::vector<Frame> frames;
    for (int i = 0; i < c.tokenizer.scenes; ++i) {
        const auto scen = synth::kAllScenarios[static_cast<std::size_t>(i) % synth::kAllScenarios.size()];
        const auto spec = synth::random_scene(scen, derive_seed(base, static_cast<std::uint64_t>(i)), sc);
        frames.push_back(synth::render_frame(spec, 0));
        frames.push_back(synth::render_frame(spec, 1));
        Rng rng(derive_seed(base, static_cast<std::uint64_t>(i), 1));
        if (rng.uniform() < c.tokenizer.zoom_share) {
            // Same whole-pixel half-extent zoom the training stream uses.
            const int hw = sc.width / 2, hh = sc.height / 2;
            const double ox = static_cast<double>(rng.uniform_int(0, sc.width - hw));
            const double oy = static_cast<double>(rng.uniform_int(0, sc.height - hh));
            const Window win = Window::centered({ox + hw / 2.0 - 0.5, oy + hh / 2.0 - 0.5}, 0.5, sc.width, sc.height,
                                                sc.width, sc.height);
            frames.push_back(resample(frames.back(), win, sc.width, sc.height));
        }
    }
    return tok::fit_codebook(frames, {c.tokenizer.k, c.tokenizer.iters, derive_seed(c.seed, kTokenizer), c.tokenizer.patch},
                             report);
}

seq::ExampleSource training_stream(const RunConfig& c, const tok::Codebook& cb) {
    return seq::synthetic_source(cb, derive_seed(c.seed, kTrainStream), c.zoom_prob, c.dataset.scene);
}

seq::ExampleSource heldout_stream(const RunConfig& c, const tok::Codebook& cb) {
    return seq::synthetic_source(cb, derive_seed(c.seed, kHeldoutStream), 0.0, c.dataset.scene);
}

void train_model(const RunConfig& c, const tok::Codebook& cb, seq::Checkpoint& ckpt, const Logger& log, int workers) {
    if (ckpt.codebook_digest != cb.digest()) fail_config("checkpoint was trained against a different codebook");
    if (json(ckpt.cfg) != json(c.model)) fail_config("checkpoint model config differs from the run config");
    seq::TrainOptions o = c.train;
    o.eval_examples = c.heldout_examples;
    seq::train(
        ckpt, training_stream(c, cb), heldout_stream(c, cb), o,
        [&](const seq::TrainLog& l) {
            if (!log) return;
            json j{{"event", "train"}, {"step", l.step}, {"loss", l.loss}, {"grad_norm", l.grad_norm}};
            if (l.heldout >= 0) j["heldout"] = l.heldout;
            log(j);
        },
        workers);
}

// ---------------------------------------------------------------- records

std::string record_to_json_line(const Record& r) {
    const json j{{"clip", r.clip},
                 {"frame_a", r.frame_a},
                 {"frame_b", r.frame_b},
                 {"query", {r.query.x, r.query.y}},
                 {"prediction", {r.prediction.x, r.prediction.y}},
                 {"occluded", r.occluded},
                 {"confidence", r.confidence},
                 {"settings_digest", hex64(r.settings_digest)}};
    return j.dump();
}

void write_records(const fs::path& path, std::span<const Record> records) {
    std::string text;
    for (const auto& r : records) text += record_to_json_line(r) + "\n";
    io::write_text(path, text);
}

std::vector<Record> read_records(const fs::path& path) {
    const auto bytes = io::read_file(path);
    std::vector<Record> out;
    std::size_t pos = 0, line = 0;
    while (pos < bytes.size()) {
        std::size_t end = pos;
        while (end < bytes.size() && bytes[end] != '\n') ++end;
        ++line;
        if (end > pos) {
            const std::string where = path.string() + ":" + std::to_string(line) + " (byte offset " + std::to_string(pos) + ")";
            try {
                const json j = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                           bytes.begin() + static_cast<std::ptrdiff_t>(end));
                Record r;
                r.clip = j.at("clip").get<std::string>();
                r.frame_a = j.at("frame_a").get<int>();
                r.frame_b = j.at("frame_b").get<int>();
                r.query = {j.at("query").at(0).get<double>(), j.at("query").at(1).get<double>()};
                r.prediction = {j.at("prediction").at(0).get<double>(), j.at("prediction").at(1).get<double>()};
                r.occluded = j.at("occluded").get<bool>();
                r.confidence = j.at("confidence").get<double>();
                r.settings_digest = std::stoull(j.at("settings_digest").get<std::string>(), nullptr, 16);
                out.push_back(std::move(r));
            } catch (const json::exception& e) {
                fail_data(where + ": " + e.what());
            } catch (const std::logic_error& e) {
                fail_data(where + ": bad settings_digest");
            }
        }
        pos = end + 1;
    }
    return out;
}

// -------------------------------------------------------------- extraction

std::vector<QueryGroup> group_queries(const synth::Dataset& ds) {
    std::map<std::string, std::size_t> clip_index;
    for (std::size_t i = 0; i < ds.clips.size(); ++i) clip_index[ds.clips[i].id] = i;
    std::vector<QueryGroup> groups;
    std::map<std::tuple<std::size_t, int, int>, std::size_t> where;
    for (std::size_t qi = 0; qi < ds.queries.size(); ++qi) {
        const auto& q = ds.queries[qi];
        const auto it = clip_index.find(q.clip);
        if (it == clip_index.end()) fail_data("query references unknown clip '" + q.clip + "'");
        const auto& clip = ds.clips[it->second];
        if (q.frame_a < 0 || q.frame_b < 0 || q.frame_a >= static_cast<int>(clip.frames.size()) ||
            q.frame_b >= static_cast<int>(clip.frames.size())) {
            fail_data("query on clip '" + q.clip + "' references a missing frame");
        }
        const auto key = std::make_tuple(it->second, q.frame_a, q.frame_b);
        auto [g, fresh] = where.try_emplace(key, groups.size());
        if (fresh) {
            QueryGroup grp;
            grp.clip_index = it->second;
            grp.frame_a = q.frame_a;
            grp.frame_b = q.frame_b;
            grp.stream = fnv1a64(q.clip + "#" + std::to_string(q.frame_a) + "#" + std::to_string(q.frame_b));
            groups.push_back(std::move(grp));
        }
        groups[g->second].queries.push_back(qi);
    }
    return groups;
}

std::vector<std::vector<trace::Trace>> trace_dataset(const trace::TraceInputs& in, const synth::Dataset& ds,
                                                     const trace::TraceSettings& s, std::span<const trace::Mode> modes,
                                                     int workers, const Logger& log) {
    const auto groups = group_queries(ds);
    std::vector<std::vector<trace::Trace>> out(modes.size(), std::vector<trace::Trace>(ds.queries.size()));
    std::atomic<std::size_t> next{0};
    std::mutex log_mu;
    std::exception_ptr failure;
    auto work = [&] {
        for (;;) {
            const std::size_t gi = next.fetch_add(1);
            if (gi >= groups.size()) return;
            const auto& g = groups[gi];
            const auto& clip = ds.clips[g.clip_index];
            std::vector<Point> pts;
            for (std::size_t qi : g.queries) pts.push_back(ds.queries[qi].query);
            const auto t0 = std::chrono::steady_clock::now();
            try {
                auto tr = trace::trace_queries_modes(in, clip.frames[static_cast<std::size_t>(g.frame_a)],
                                                     clip.frames[static_cast<std::size_t>(g.frame_b)], pts, s, g.stream,
                                                     modes);
                for (std::size_t m = 0; m < modes.size(); ++m) {
                    for (std::size_t k = 0; k < g.queries.size(); ++k) out[m][g.queries[k]] = std::move(tr[m][k]);
                }
            } catch (...) {
                std::lock_guard lock(log_mu);
                if (!failure) failure = std::current_exception();
                next = groups.size();
                return;
            }
            if (log) {
                const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                std::lock_guard lock(log_mu);
                log({{"event", "trace"},
                     {"clip", clip.id},
                     {"queries", g.queries.size()},
                     {"ms_per_query", g.queries.empty() ? 0.0 : ms / static_cast<double>(g.queries.size())}});
            }
        }
    };
    workers = std::max(1, std::min<int>(workers, static_cast<int>(groups.size())));
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

std::vector<Record> make_records(const synth::Dataset& ds, std::span<const trace::Trace> traces,
                                 const trace::TraceSettings& s) {
    if (traces.size() != ds.queries.size()) fail_config("trace count differs from query count");
    const std::uint64_t digest = s.digest();
    std::vector<Record> out;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        const auto e = trace::to_estimate(traces[i], s);
        const auto& q = ds.queries[i];
        out.push_back({q.clip, q.frame_a, q.frame_b, q.query, e.target, e.occluded, e.confidence, digest});
    }
    return out;
}

trace::Calibration calibrate(const trace::TraceInputs& in, const synth::Dataset& split, const trace::TraceSettings& s,
                             int workers) {
    const trace::Mode m = s.mode;
    const auto traces = trace_dataset(in, split, s, std::span<const trace::Mode>(&m, 1), workers)[0];
    std::vector<double> peaks;
    std::vector<std::uint8_t> occ;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        peaks.push_back(traces[i].peak);
        occ.push_back(split.queries[i].occluded ? 1 : 0);
    }
    return trace::calibrate_occlusion_threshold(peaks, occ);
}

std::vector<metrics::EvalRecord> join(std::span<const Record> records, const synth::Dataset& ds) {
    using Key = std::tuple<std::string, int, int, double, double>;
    std::map<Key, const Record*> by_key;
    for (const auto& r : records) {
        if (!by_key.emplace(Key{r.clip, r.frame_a, r.frame_b, r.query.x, r.query.y}, &r).second) {
            fail_data("duplicate record for a query on clip '" + r.clip + "'");
        }
    }
    if (records.size() != ds.queries.size()) {
        fail_data("record count " + std::to_string(records.size()) + " differs from query count " +
                  std::to_string(ds.queries.size()));
    }
    std::vector<metrics::EvalRecord> out;
    for (const auto& q : ds.queries) {
        const auto it = by_key.find(Key{q.clip, q.frame_a, q.frame_b, q.query.x, q.query.y});
        if (it == by_key.end()) fail_data("no record for a query on clip '" + q.clip + "'");
        std::ostringstream id;
        id << q.clip << ":" << q.frame_a << "-" << q.frame_b << "@" << q.query.x << "," << q.query.y;
        out.push_back({id.str(), it->second->prediction, it->second->occluded, q.target, q.occluded});
    }
    return out;
}

json report_document(const metrics::Report& rep, std::uint64_t config_digest, std::uint64_t settings_digest,
                     const synth::Dataset& ds, const seq::ModelConfig& model, int patch) {
    json j = json::parse(metrics::report_json(rep));
    j["config_digest"] = hex64(config_digest);
    j["settings_digest"] = hex64(settings_digest);
    if (!ds.clips.empty() && !ds.clips[0].frames.empty()) {
        const Frame& f = ds.clips[0].frames[0];
        j["evaluation_resolution"] = {f.width, f.height};
        j["model_resolution"] = {model.gw * patch, model.gh * patch};
        j["resample_factor"] = {static_cast<double>(f.width) / (model.gw * patch),
                                static_cast<double>(f.height) / (model.gh * patch)};
    }
    return j;
}

}  // namespace kltrace::harness
