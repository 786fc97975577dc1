// Command-line front end: dataset generation, tokenizer fitting, training,
// flow extraction, calibration, evaluation, ablation sweeps and plots.
//
// Every command takes --config/--seed/--set to build the run config, --out
// for its output directory and --workers for parallel stages. Logs are JSON
// lines on stderr (and in <out>/log.jsonl); errors end the process with a
// JSON object on stderr and exit code 2 (config), 3 (data) or 4 (numerical).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/config_json.hpp"
#include "kltrace/harness.hpp"
#include "kltrace/io.hpp"

using namespace kltrace;
using harness::json;
namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int workers = 1;
    std::vector<std::string> sets;
    std::string data;
    std::string records;
    int limit = 10;
};

const auto t_start = std::chrono::steady_clock::now();
std::ofstream log_file;

void log_line(json j) {
    j["t"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    const std::string s = j.dump();
    std::cerr << s << "\n";
    if (log_file.is_open()) log_file << s << "\n" << std::flush;
}

std::string timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

/// Run config from --config (or <out>/config.json when present), then --seed and --set.
harness::RunConfig build_config(const Options& o) {
    std::vector<std::string> sets = o.sets;
    if (o.seed) sets.push_back("seed=" + std::to_string(*o.seed));
    fs::path path = o.config;
    if (path.empty() && !o.out.empty() && fs::exists(fs::path(o.out) / "config.json")) path = fs::path(o.out) / "config.json";
    return harness::load_config(path, sets);
}

/// Output directory: --out, or runs/<timestamp>-<digest> for a fresh run.
/// Refuses to mix configs inside one directory.
fs::path prepare_run_dir(const Options& o, const harness::RunConfig& c) {
    const fs::path dir = o.out.empty() ? fs::path("runs") / (timestamp() + "-" + hex64(c.digest()).substr(0, 8)) : fs::path(o.out);
    fs::create_directories(dir);
    const fs::path cfg = dir / "config.json";
    const std::string text = harness::to_json(c).dump(2) + "\n";
    if (fs::exists(cfg)) {
        const auto bytes = io::read_file(cfg);
        const harness::RunConfig stored = harness::config_from_json(json::parse(bytes.begin(), bytes.end()));
        if (stored.digest() != c.digest()) {
            fail_config(dir.string() + " holds a run with a different config; choose another --out");
        }
    } else {
        io::write_text(cfg, text);
    }
    log_file.open(dir / "log.jsonl", std::ios::app);
    return dir;
}

tok::Codebook codebook_for(const harness::RunConfig& c, const fs::path& dir) {
    const fs::path p = dir / "codebook.klcb";
    if (fs::exists(p)) return tok::load(p);
    log_line({{"event", "fit_tokenizer"}, {"scenes", c.tokenizer.scenes}, {"k", c.tokenizer.k}});
    tok::FitReport rep;
    tok::Codebook cb = harness::fit_tokenizer(c, &rep);
    tok::save(p, cb);
    log_line({{"event", "codebook"}, {"objective", rep.objective.back()}, {"reseeded", rep.reseeded}, {"digest", hex64(cb.digest())}});
    return cb;
}

/// Trains (or resumes) the checkpoint at `path` up to c.train.steps, saving
/// at regular intervals so an interrupted run can continue.
seq::Checkpoint checkpoint_for(const harness::RunConfig& c, const tok::Codebook& cb, const fs::path& path, int workers) {
    seq::Checkpoint ck = fs::exists(path) ? seq::load(path) : seq::new_checkpoint(c.model, cb.digest());
    if (ck.step >= c.train.steps) return ck;
    std::ofstream loss(path.parent_path() / "loss.jsonl", std::ios::app);
    const harness::Logger log = [&](const json& j) {
        loss << j.dump() << "\n" << std::flush;
        log_line(j);
    };
    constexpr int kSaveEvery = 200;
    while (ck.step < c.train.steps) {
        harness::RunConfig chunk = c;
        chunk.train.steps = static_cast<int>(std::min<std::int64_t>(c.train.steps, (ck.step / kSaveEvery + 1) * kSaveEvery));
        harness::train_model(chunk, cb, ck, log, workers);
        seq::save(path, ck);
    }
    return ck;
}

synth::Dataset dataset_for(const Options& o, const harness::RunConfig& c, const fs::path& dir, io::Manifest* m = nullptr) {
    if (!o.data.empty()) return io::read_dataset(o.data, m);
    const fs::path d = dir / "data";
    if (fs::exists(d / "manifest.json")) return io::read_dataset(d, m);
    synth::Dataset ds = harness::make_dataset(c, o.workers);
    const io::Manifest written = io::write_dataset(ds, d);
    if (m) *m = written;
    log_line({{"event", "gen_data"}, {"dir", d.string()}, {"clips", ds.clips.size()}, {"queries", ds.queries.size()}});
    return ds;
}

json calibration_json(const trace::Calibration& cal, const trace::TraceSettings& s, std::size_t n) {
    return {{"threshold", cal.threshold}, {"accuracy", cal.accuracy}, {"queries", n}, {"mode", trace::mode_name(s.mode)},
            {"settings_digest", hex64(s.digest())}};
}

/// Threshold from the config, a stored calibration matching the settings, or a fresh calibration.
double threshold_for(const Options& o, const harness::RunConfig& c, const trace::TraceInputs& in, const fs::path& dir) {
    if (c.trace.occlusion_threshold) return *c.trace.occlusion_threshold;
    const fs::path p = dir / "calibration.json";
    if (fs::exists(p)) {
        const auto b = io::read_file(p);
        const json j = json::parse(b.begin(), b.end());
        if (j.value("settings_digest", std::string()) == hex64(c.trace.digest())) return j.at("threshold").get<double>();
    }
    const synth::Dataset split = harness::make_calibration_split(c, o.workers);
    const auto cal = harness::calibrate(in, split, c.trace, o.workers);
    const json j = calibration_json(cal, c.trace, split.queries.size());
    io::write_text(p, j.dump(2) + "\n");
    log_line({{"event", "calibrated"}, {"threshold", cal.threshold}, {"accuracy", cal.accuracy}});
    return cal.threshold;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Options& o) {
    const auto c = build_config(o);
    const fs::path dir = o.out.empty() ? fs::path("data") / hex64(c.digest()).substr(0, 8) : fs::path(o.out);
    const synth::Dataset ds = harness::make_dataset(c, o.workers);
    const io::Manifest m = io::write_dataset(ds, dir);
    std::cout << json{{"dir", dir.string()}, {"clips", ds.clips.size()}, {"queries", ds.queries.size()}, {"seed", m.seed}}.dump() << "\n";
    return 0;
}

int cmd_fit_tokenizer(const Options& o) {
    const auto c = build_config(o);
    const fs::path dir = prepare_run_dir(o, c);
    const tok::Codebook cb = codebook_for(c, dir);
    // Reconstruction error on frames the tokenizer never saw.
    const synth::Dataset held = harness::make_calibration_split(c, o.workers);
    double mse = 0.0;
    std::size_t n = 0;
    for (const auto& clip : held.clips) {
        for (const auto& f : clip.frames) {
            mse += tok::reconstruction_mse(f, cb);
            ++n;
        }
    }
    std::cout << json{{"codebook", (dir / "codebook.klcb").string()}, {"K", cb.k}, {"digest", hex64(cb.digest())},
                      {"heldout_mse", n ? mse / static_cast<double>(n) : 0.0}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    const auto c = build_config(o);
    const fs::path dir = prepare_run_dir(o, c);
    const tok::Codebook cb = codebook_for(c, dir);
    const seq::Checkpoint ck = checkpoint_for(c, cb, dir / "checkpoint.kltm", o.workers);
    std::cout << json{{"checkpoint", (dir / "checkpoint.kltm").string()}, {"step", ck.step}}.dump() << "\n";
    return 0;
}

struct Loaded {
    harness::RunConfig cfg;
    fs::path dir;
    tok::Codebook cb;
    seq::Checkpoint ck;
    trace::TraceInputs in() const { return {&ck.model, &cb}; }
};

Loaded load_run(const Options& o) {
    Loaded l;
    l.cfg = build_config(o);
    l.dir = prepare_run_dir(o, l.cfg);
    l.cb = codebook_for(l.cfg, l.dir);
    l.ck = checkpoint_for(l.cfg, l.cb, l.dir / "checkpoint.kltm", o.workers);
    if (l.ck.codebook_digest != l.cb.digest()) fail_config("checkpoint and codebook digests differ");
    return l;
}

int cmd_calibrate(const Options& o) {
    const Loaded l = load_run(o);
    const synth::Dataset split = o.data.empty() ? harness::make_calibration_split(l.cfg, o.workers) : io::read_dataset(o.data);
    const auto cal = harness::calibrate(l.in(), split, l.cfg.trace, o.workers);
    const json j = calibration_json(cal, l.cfg.trace, split.queries.size());
    io::write_text(l.dir / "calibration.json", j.dump(2) + "\n");
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_extract(const Options& o) {
    const Loaded l = load_run(o);
    const synth::Dataset ds = dataset_for(o, l.cfg, l.dir);
    trace::TraceSettings s = l.cfg.trace;
    s.occlusion_threshold = threshold_for(o, l.cfg, l.in(), l.dir);
    const auto traces = harness::trace_dataset(l.in(), ds, s, std::span<const trace::Mode>(&s.mode, 1), o.workers, log_line)[0];
    const auto records = harness::make_records(ds, traces, s);
    const fs::path out = o.records.empty() ? l.dir / "records.jsonl" : fs::path(o.records);
    harness::write_records(out, records);
    std::cout << json{{"records", out.string()}, {"count", records.size()}}.dump() << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    const auto c = build_config(o);
    const fs::path dir = prepare_run_dir(o, c);
    const synth::Dataset ds = dataset_for(o, c, dir);
    const fs::path rpath = o.records.empty() ? dir / "records.jsonl" : fs::path(o.records);
    const auto records = harness::read_records(rpath);
    const auto rep = metrics::evaluate(harness::join(records, ds), c.thresholds);
    const std::uint64_t sd = records.empty() ? 0 : records.front().settings_digest;
    const json doc = harness::report_document(rep, c.digest(), sd, ds, c.model, c.tokenizer.patch);
    io::write_text(dir / "report.json", doc.dump(2) + "\n");
    io::write_text(dir / "report.csv", metrics::csv_header() + "\n" + metrics::csv_row(hex64(c.digest()), rep) + "\n");
    std::cout << doc.dump() << "\n";
    return 0;
}

int cmd_plot(const Options& o) {
    const Loaded l = load_run(o);
    const synth::Dataset ds = dataset_for(o, l.cfg, l.dir);
    const fs::path rpath = o.records.empty() ? l.dir / "records.jsonl" : fs::path(o.records);
    const auto records = harness::read_records(rpath);
    harness::join(records, ds);  // validates the pairing
    const fs::path pdir = l.dir / "plots";
    fs::create_directories(pdir);
    const auto groups = harness::group_queries(ds);
    int done = 0;
    for (const auto& g : groups) {
        const auto& clip = ds.clips[g.clip_index];
        const Frame& f1 = clip.frames[static_cast<std::size_t>(g.frame_a)];
        const Frame& f2 = clip.frames[static_cast<std::size_t>(g.frame_b)];
        std::vector<Point> pts;
        for (std::size_t qi : g.queries) pts.push_back(ds.queries[qi].query);
        const auto traces = trace::trace_queries(l.in(), f1, f2, pts, l.cfg.trace, g.stream);
        for (std::size_t k = 0; k < g.queries.size() && done < o.limit; ++k, ++done) {
            const auto& q = ds.queries[g.queries[k]];
            const auto rec = std::find_if(records.begin(), records.end(), [&](const harness::Record& r) {
                return r.clip == q.clip && r.frame_a == q.frame_a && r.frame_b == q.frame_b && r.query == q.query;
            });
            char stem[64];
            std::snprintf(stem, sizeof(stem), "q%04zu", g.queries[k]);
            io::write_png(pdir / (std::string(stem) + "_overlay.png"), trace::overlay(f1, q.query, rec->prediction, rec->occluded));
            io::write_png(pdir / (std::string(stem) + "_heatmap.png"),
                          trace::heatmap(traces[k].map, traces[k].cell_size, f1.width, f1.height));
            // Clean vs perturbed prediction from the first mask.
            const auto& s = l.cfg.trace;
            const std::uint64_t ms = derive_seed(s.rng_seed, g.stream, 0, 0);
            const auto mask = seq::make_mask(s.reveal_mode, s.reveal_fraction, l.cfg.model.cells(), derive_seed(ms, 1));
            const auto order = seq::make_order(mask, l.cfg.model.cells(), l.cfg.model.variant != seq::Variant::distributional_raster,
                                               derive_seed(ms, 2));
            const Frame pert = trace::inject_perturbation(f1, {q.query, s.sigma, s.amplitude});
            const std::vector<tok::TokenGrid> f1s{tok::encode(f1, l.cb), tok::encode(pert, l.cb)};
            const auto r = seq::rollout_batch(l.ck.model, f1s, tok::encode(f2, l.cb), mask, order, derive_seed(ms, 3), s.sampling, &l.cb);
            const Frame panels[4] = {f1, pert, trace::predicted_frame(r[0], l.cfg.model, l.cb), trace::predicted_frame(r[1], l.cfg.model, l.cb)};
            Frame strip(f1.width * 4, f1.height);
            for (int p = 0; p < 4; ++p) {
                for (int y = 0; y < f1.height; ++y) std::copy(panels[p].at(0, y), panels[p].at(0, y) + f1.width * 3, strip.at(p * f1.width, y));
            }
            io::write_png(pdir / (std::string(stem) + "_panel.png"), strip);
        }
        if (done >= o.limit) break;
    }
    std::cout << json{{"plots", pdir.string()}, {"queries", done}}.dump() << "\n";
    return 0;
}

int cmd_ablate(const Options& o) {
    const Loaded base = load_run(o);
    const auto& c = base.cfg;
    const synth::Dataset ds = dataset_for(o, c, base.dir);
    const synth::Dataset split = harness::make_calibration_split(c, o.workers);
    const auto& a = c.ablate;

    std::vector<json> rows, invalid;
    for (seq::Variant v : a.variants) {
        harness::RunConfig vc = c;
        vc.model.variant = v;
        seq::Checkpoint owned;
        const seq::Checkpoint* ck = &base.ck;
        if (v != c.model.variant) {
            const fs::path vdir = base.dir / "ablate" / std::string(seq::variant_name(v));
            fs::create_directories(vdir);
            owned = checkpoint_for(vc, base.cb, vdir / "checkpoint.kltm", o.workers);
            ck = &owned;
        }
        const trace::TraceInputs in{&ck->model, &base.cb};
        for (seq::RevealMode rm : a.reveal_modes) {
            for (double frac : a.reveal_fractions) {
                const double held = seq::heldout_loss(ck->model, harness::heldout_stream(c, base.cb), c.heldout_examples, rm, frac,
                                                      derive_seed(c.seed, 0xab1a7e));
                for (int mm : a.num_masks) {
                    for (int ms : a.num_scales) {
                        json key{{"variant", seq::variant_name(v)}, {"reveal_mode", seq::reveal_mode_name(rm)},
                                 {"reveal_fraction", frac}, {"MM", mm}, {"MS", ms}};
                        trace::TraceSettings s = c.trace;
                        s.reveal_mode = rm;
                        s.reveal_fraction = frac;
                        s.num_masks = mm;
                        std::vector<trace::Mode> modes;
                        std::string why;
                        if (ms < 1 || ms > static_cast<int>(c.trace.scales.size())) {
                            why = "trace.scales has fewer than MS entries";
                        } else {
                            s.scales.assign(c.trace.scales.begin(), c.trace.scales.begin() + ms);
                            try {
                                const auto probe = seq::make_mask(rm, frac, ck->cfg.cells(), 0);
                                seq::check_rollout_inputs(ck->cfg, probe,
                                                          seq::make_order(probe, ck->cfg.cells(), v != seq::Variant::distributional_raster, 0));
                            } catch (const Error& e) {
                                why = e.what();
                            }
                        }
                        for (trace::Mode m : a.modes) {
                            if (why.empty() && m == trace::Mode::kl && !ck->cfg.distributional()) {
                                json r = key;
                                r["mode"] = trace::mode_name(m);
                                r["status"] = "invalid: KL tracing needs a distributional model";
                                invalid.push_back(r);
                            } else if (!why.empty()) {
                                json r = key;
                                r["mode"] = trace::mode_name(m);
                                r["status"] = "invalid: " + why;
                                invalid.push_back(r);
                            } else {
                                modes.push_back(m);
                            }
                        }
                        if (modes.empty()) continue;
                        log_line({{"event", "ablate_row"}, {"key", key}});
                        const auto traces = harness::trace_dataset(in, ds, s, modes, o.workers);
                        const auto cal_traces = harness::trace_dataset(in, split, s, modes, o.workers);
                        for (std::size_t mi = 0; mi < modes.size(); ++mi) {
                            std::vector<double> peaks;
                            std::vector<std::uint8_t> occ;
                            for (std::size_t i = 0; i < cal_traces[mi].size(); ++i) {
                                peaks.push_back(cal_traces[mi][i].peak);
                                occ.push_back(split.queries[i].occluded);
                            }
                            trace::TraceSettings sm = s;
                            sm.mode = modes[mi];
                            sm.occlusion_threshold = trace::calibrate_occlusion_threshold(peaks, occ).threshold;
                            const auto rep = metrics::evaluate(harness::join(harness::make_records(ds, traces[mi], sm), ds), c.thresholds);
                            json r = key;
                            r["mode"] = trace::mode_name(modes[mi]);
                            r["status"] = "ok";
                            const json m = json::parse(metrics::report_json(rep));
                            for (const char* f : {"AD", "AJ", "delta_avg", "OA"}) r[f] = m[f];
                            r["heldout_loss"] = held;
                            r["occlusion_threshold"] = *sm.occlusion_threshold;
                            rows.push_back(r);
                        }
                    }
                }
            }
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const json& x, const json& y) {
        const double ax = x["AD"].is_null() ? 1e300 : x["AD"].get<double>();
        const double ay = y["AD"].is_null() ? 1e300 : y["AD"].get<double>();
        return ax < ay;
    });
    rows.insert(rows.end(), invalid.begin(), invalid.end());
    auto cell = [](const json& v) {
        if (v.is_null()) return std::string();
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_float()) {
            char b[32];
            std::snprintf(b, sizeof(b), "%.6f", v.get<double>());
            return std::string(b);
        }
        return v.dump();
    };
    const std::vector<const char*> cols{"mode", "variant", "reveal_mode", "reveal_fraction", "MM", "MS", "status",
                                        "AD", "AJ", "delta_avg", "OA", "heldout_loss", "occlusion_threshold"};
    std::string csv;
    for (std::size_t i = 0; i < cols.size(); ++i) csv += std::string(i ? "," : "") + cols[i];
    csv += "\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < cols.size(); ++i) {
            std::string v = r.contains(cols[i]) ? cell(r[cols[i]]) : "";
            if (v.find_first_of(",\"") != std::string::npos) {
                std::string q = "\"";
                for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
                v = q + "\"";
            }
            csv += std::string(i ? "," : "") + v;
        }
        csv += "\n";
    }
    io::write_text(base.dir / "ablation.csv", csv);
    io::write_text(base.dir / "ablation.json", json(rows).dump(2) + "\n");
    std::cout << csv;
    return 0;
}

int fail(ErrorKind kind, const std::string& msg) {
    const json j{{"error", {{"kind", error_kind_name(kind)}, {"message", msg}}}};
    std::cerr << j.dump() << "\n";
    if (log_file.is_open()) log_file << j.dump() << "\n";
    return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KL-tracing laboratory"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON run config");
        sub->add_option("--seed", seed, "master seed (overrides the config)");
        sub->add_option("--out", o.out, "output directory");
        sub->add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
        sub->add_option("--set", o.sets, "override a config key, e.g. --set trace.num_masks=1")->take_all();
    };
    struct Cmd {
        const char* name;
        const char* help;
        int (*run)(const Options&);
        bool data, records, limit;
    };
    const std::vector<Cmd> cmds{
        {"gen-data", "generate a synthetic dataset", cmd_gen_data, false, false, false},
        {"fit-tokenizer", "fit the patch codebook", cmd_fit_tokenizer, false, false, false},
        {"train", "train (or resume) the sequence model", cmd_train, false, false, false},
        {"extract", "trace every query of a dataset", cmd_extract, true, true, false},
        {"eval", "score records against ground truth", cmd_eval, true, true, false},
        {"ablate", "sweep the ablation grid", cmd_ablate, true, false, false},
        {"plot", "overlays, heatmaps and prediction panels", cmd_plot, true, true, true},
        {"calibrate-occlusion", "calibrate the occlusion threshold", cmd_calibrate, true, false, false},
    };
    std::vector<CLI::App*> subs;
    for (const auto& c : cmds) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        common(sub);
        if (c.data) sub->add_option("--data", o.data, "dataset directory (default: <out>/data, generated if missing)");
        if (c.records) sub->add_option("--records", o.records, "records file (default: <out>/records.jsonl)");
        if (c.limit) sub->add_option("--limit", o.limit, "number of queries to plot");
        subs.push_back(sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(ErrorKind::config, e.what());
    }
    for (std::size_t i = 0; i < cmds.size(); ++i) {
        if (!subs[i]->parsed()) continue;
        if (subs[i]->count("--seed")) o.seed = seed;
        try {
            return cmds[i].run(o);
        } catch (const Error& e) {
            return fail(e.kind(), e.what());
        } catch (const json::exception& e) {
            return fail(ErrorKind::data, e.what());
        } catch (const std::filesystem::filesystem_error& e) {
            return fail(ErrorKind::data, e.what());
        }
    }
    return fail(ErrorKind::config, "no command given");
}
