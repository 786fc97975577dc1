#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/harness.hpp"
#include "kltrace/io.hpp"

using namespace kltrace;
using namespace kltrace::harness;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const auto& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::config;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kltrace_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

RunConfig small() {
    RunConfig c;
    c.seed = 9;
    c.dataset.num_clips = 3;
    c.dataset.queries_per_clip = 2;
    c.resolve();
    return c;
}

}  // namespace

TEST_CASE("config survives a json round trip") {
    RunConfig c = small();
    c.trace.occlusion_threshold = 0.25;
    c.trace.scales = {1.0, 0.5, 0.25};
    const json j = to_json(c);
    const RunConfig back = config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.digest() == c.digest());
}

TEST_CASE("derived fields follow the master seed") {
    RunConfig a = small(), b = small();
    CHECK(a.model.rng_seed == b.model.rng_seed);
    b.seed = 10;
    b.resolve();
    CHECK(a.model.rng_seed != b.model.rng_seed);
    CHECK(a.dataset.seed != b.dataset.seed);
    CHECK(a.trace.rng_seed != b.trace.rng_seed);
    CHECK(a.model.gw == 16);
    CHECK(a.model.K == a.tokenizer.k);
}

TEST_CASE("config rejects unknown keys, derived keys and bad versions") {
    json j = to_json(small());
    json bad = j;
    bad["model"]["depth"] = 4;
    CHECK(kind_of([&] { config_from_json(bad); }) == ErrorKind::config);
    bad = j;
    bad["model"]["rng_seed"] = 4;
    CHECK(kind_of([&] { config_from_json(bad); }) == ErrorKind::config);
    bad = j;
    bad["dataset"]["seed"] = 4;
    CHECK(kind_of([&] { config_from_json(bad); }) == ErrorKind::config);
    bad = j;
    bad["version"] = kConfigVersion + 1;
    CHECK(kind_of([&] { config_from_json(bad); }) == ErrorKind::config);
    bad = j;
    bad["train"]["steps"] = "many";
    CHECK(kind_of([&] { config_from_json(bad); }) == ErrorKind::config);
}

TEST_CASE("overrides parse json values and fall back to strings") {
    json j = to_json(small());
    apply_override(j, "train.steps=17");
    apply_override(j, "trace.mode=rgb");
    apply_override(j, "trace.scales=[1, 0.5]");
    const RunConfig c = config_from_json(j);
    CHECK(c.train.steps == 17);
    CHECK(c.trace.mode == trace::Mode::rgb);
    CHECK(c.trace.scales == std::vector<double>{1.0, 0.5});
    CHECK(kind_of([&] { apply_override(j, "no_equals_sign"); }) == ErrorKind::config);
    CHECK(kind_of([&] { apply_override(j, "=3"); }) == ErrorKind::config);
}

TEST_CASE("load_config applies overrides after the file") {
    const fs::path dir = scratch("load");
    io::write_text(dir / "c.json", R"({"seed": 3, "train": {"steps": 5}})");
    const std::vector<std::string> ov{"train.steps=8"};
    const RunConfig c = load_config(dir / "c.json", ov);
    CHECK(c.seed == 3);
    CHECK(c.train.steps == 8);
    io::write_text(dir / "broken.json", "{\"seed\": ");
    CHECK(kind_of([&] { load_config(dir / "broken.json", {}); }) == ErrorKind::config);
}

TEST_CASE("records round trip and malformed lines name their position") {
    const fs::path dir = scratch("records");
    std::vector<Record> rs{{"clip_0", 0, 1, {3.5, 4}, {7.25, 9}, false, 1.5, 0xabcdef0123456789ull},
                           {"clip_1", 0, 1, {10, 11}, {12, 13}, true, 0.0, 1}};
    write_records(dir / "r.jsonl", rs);
    const auto back = read_records(dir / "r.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].clip == "clip_0");
    CHECK(back[0].prediction.x == 7.25);
    CHECK(back[0].settings_digest == 0xabcdef0123456789ull);
    CHECK(back[1].occluded);

    io::write_text(dir / "bad.jsonl", record_to_json_line(rs[0]) + "\n{\"clip\": 1}\n");
    try {
        read_records(dir / "bad.jsonl");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::data);
        CHECK(std::string(e.what()).find(":2 ") != std::string::npos);
    }
}

TEST_CASE("join pairs records with ground truth and rejects mismatches") {
    const RunConfig c = small();
    const synth::Dataset ds = make_dataset(c);
    REQUIRE(ds.queries.size() == 6);
    std::vector<Record> rs;
    for (auto it = ds.queries.rbegin(); it != ds.queries.rend(); ++it) {
        rs.push_back({it->clip, it->frame_a, it->frame_b, it->query, it->target, it->occluded, 1.0, 0});
    }
    const auto joined = join(rs, ds);
    REQUIRE(joined.size() == ds.queries.size());
    for (std::size_t i = 0; i < joined.size(); ++i) {
        CHECK(joined[i].gt == ds.queries[i].target);
        CHECK(joined[i].pred == ds.queries[i].target);
    }
    auto missing = rs;
    missing.pop_back();
    CHECK(kind_of([&] { join(missing, ds); }) == ErrorKind::data);
    auto dup = rs;
    dup.back() = dup.front();
    CHECK(kind_of([&] { join(dup, ds); }) == ErrorKind::data);
}

TEST_CASE("query groups are keyed by frame pair, not by dataset order") {
    const RunConfig c = small();
    synth::Dataset ds = make_dataset(c);
    const auto g = group_queries(ds);
    REQUIRE(g.size() == 3);
    std::reverse(ds.queries.begin(), ds.queries.end());
    const auto r = group_queries(ds);
    REQUIRE(r.size() == 3);
    for (const auto& a : g) {
        bool found = false;
        for (const auto& b : r) found = found || (b.clip_index == a.clip_index && b.stream == a.stream);
        CHECK(found);
    }
}
