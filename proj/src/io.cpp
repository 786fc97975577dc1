#include "kltrace/io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <json.hpp>
#include <sstream>

#include "kltrace/common.hpp"

namespace kltrace::io {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_data("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        fail_data("short read on " + path.string());
    }
    return bytes;
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail_data("write failed on " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

namespace {

std::vector<std::uint8_t> encode_png(int width, int height, std::uint32_t format, const std::uint8_t* data,
                                     int channels) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = format;
    png_alloc_size_t size = 0;
    const png_int_32 stride = width * channels;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, data, stride, nullptr)) {
        fail_data(std::string("png encode failed: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, data, stride, nullptr)) {
        fail_data(std::string("png encode failed: ") + img.message);
    }
    out.resize(size);
    return out;
}

std::vector<std::uint8_t> decode_png(const std::vector<std::uint8_t>& bytes, const std::string& origin,
                                     std::uint32_t format, int channels, int& width, int& height) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        fail_data(origin + ": malformed PNG at byte offset 0: " + img.message);
    }
    img.format = format;
    width = static_cast<int>(img.width);
    height = static_cast<int>(img.height);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(width) * height * channels);
    if (!png_image_finish_read(&img, nullptr, out.data(), width * channels, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        fail_data(origin + ": malformed PNG payload (after 8-byte signature, offset 8+): " + msg);
    }
    return out;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_png_rgb(const Frame& f) {
    return encode_png(f.width, f.height, PNG_FORMAT_RGB, f.pixels.data(), 3);
}

std::vector<std::uint8_t> encode_png_gray(int width, int height, const std::vector<std::uint8_t>& gray) {
    return encode_png(width, height, PNG_FORMAT_GRAY, gray.data(), 1);
}

Frame decode_png_rgb(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    Frame f;
    f.pixels = decode_png(bytes, origin, PNG_FORMAT_RGB, 3, f.width, f.height);
    return f;
}

std::vector<std::uint8_t> decode_png_gray(const std::vector<std::uint8_t>& bytes, const std::string& origin,
                                          int& width, int& height) {
    return decode_png(bytes, origin, PNG_FORMAT_GRAY, 1, width, height);
}

void write_png(const fs::path& path, const Frame& f) { write_file(path, encode_png_rgb(f)); }

Frame read_png(const fs::path& path) { return decode_png_rgb(read_file(path), path.string()); }

std::vector<std::uint8_t> encode_flo(const FlowField& flow) {
    std::vector<std::uint8_t> out;
    out.reserve(12 + flow.uv.size() * 4);
    put_u32(out, std::bit_cast<std::uint32_t>(kFloMagic));
    put_u32(out, static_cast<std::uint32_t>(flow.width));
    put_u32(out, static_cast<std::uint32_t>(flow.height));
    for (float v : flow.uv) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

FlowField decode_flo(const std::vector<std::uint8_t>& b, const std::string& origin) {
    auto bad = [&](std::size_t off, const std::string& why) {
        fail_data(origin + ": malformed .flo at byte offset " + std::to_string(off) + ": " + why);
    };
    if (b.size() < 12) bad(b.size(), "truncated header");
    if (std::bit_cast<float>(get_u32(b, 0)) != kFloMagic) bad(0, "bad magic (expected PIEH)");
    const auto w = static_cast<std::int32_t>(get_u32(b, 4));
    const auto h = static_cast<std::int32_t>(get_u32(b, 8));
    if (w <= 0 || w > (1 << 16)) bad(4, "bad width " + std::to_string(w));
    if (h <= 0 || h > (1 << 16)) bad(8, "bad height " + std::to_string(h));
    const std::size_t need = 12 + static_cast<std::size_t>(w) * h * 8;
    if (b.size() < need) bad(b.size(), "payload truncated, expected " + std::to_string(need) + " bytes");
    if (b.size() > need) bad(need, "trailing bytes");
    FlowField f(w, h);
    for (std::size_t i = 0; i < f.uv.size(); ++i) {
        const float v = std::bit_cast<float>(get_u32(b, 12 + i * 4));
        if (!std::isfinite(v)) bad(12 + i * 4, "non-finite flow value");
        f.uv[i] = v;
    }
    return f;
}

void write_flo(const fs::path& path, const FlowField& flow) { write_file(path, encode_flo(flow)); }

FlowField read_flo(const fs::path& path) { return decode_flo(read_file(path), path.string()); }

std::vector<std::uint8_t> encode_occlusion_png(const OcclusionMask& occ) {
    std::vector<std::uint8_t> gray(occ.occluded.size());
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = occ.occluded[i] ? 255 : 0;
    return encode_png_gray(occ.width, occ.height, gray);
}

OcclusionMask read_occlusion_png(const fs::path& path) {
    int w = 0, h = 0;
    const auto gray = decode_png_gray(read_file(path), path.string(), w, h);
    OcclusionMask m(w, h);
    for (std::size_t i = 0; i < gray.size(); ++i) {
        if (gray[i] != 0 && gray[i] != 255) {
            fail_data(path.string() + ": occlusion sample " + std::to_string(i) + " is neither 0 nor 255");
        }
        m.occluded[i] = gray[i] ? 1 : 0;
    }
    return m;
}

std::string query_to_json_line(const synth::QueryRecord& q) {
    json j;
    j["clip"] = q.clip;
    j["frame_a"] = q.frame_a;
    j["frame_b"] = q.frame_b;
    j["x"] = q.query.x;
    j["y"] = q.query.y;
    j["gt_x"] = q.target.x;
    j["gt_y"] = q.target.y;
    j["occluded"] = q.occluded;
    return j.dump();
}

void write_queries(const fs::path& path, const std::vector<synth::QueryRecord>& queries) {
    std::string text;
    for (const auto& q : queries) {
        text += query_to_json_line(q);
        text += '\n';
    }
    write_text(path, text);
}

std::vector<synth::QueryRecord> read_queries(const fs::path& path) {
    const auto bytes = read_file(path);
    std::vector<synth::QueryRecord> out;
    std::size_t start = 0;
    while (start < bytes.size()) {
        std::size_t end = start;
        while (end < bytes.size() && bytes[end] != '\n') ++end;
        const std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                               bytes.begin() + static_cast<std::ptrdiff_t>(end));
        if (!line.empty()) {
            try {
                const json j = json::parse(line);
                synth::QueryRecord q;
                q.clip = j.at("clip").get<std::string>();
                q.frame_a = j.at("frame_a").get<int>();
                q.frame_b = j.at("frame_b").get<int>();
                q.query = {j.at("x").get<double>(), j.at("y").get<double>()};
                q.target = {j.at("gt_x").get<double>(), j.at("gt_y").get<double>()};
                q.occluded = j.at("occluded").get<bool>();
                out.push_back(std::move(q));
            } catch (const json::exception& e) {
                fail_data(path.string() + ": malformed query record at byte offset " + std::to_string(start) + ": " +
                          e.what());
            }
        }
        start = end + 1;
    }
    return out;
}

namespace {

json spec_to_json(const synth::SceneSpec& s) {
    return json{{"scenario", synth::scenario_name(s.scenario)},
                {"width", s.width},
                {"height", s.height},
                {"num_frames", s.num_frames},
                {"sprite",
                 {{"shape", s.sprite.shape == synth::Shape::disc ? "disc" : "rect"},
                  {"size", s.sprite.size},
                  {"texture_seed", s.sprite.texture_seed},
                  {"textured", s.sprite.textured}}},
                {"center", {s.center_x, s.center_y}},
                {"displacement", {s.dx, s.dy}},
                {"rotation_deg", s.rotation_deg},
                {"second", {s.second_x, s.second_y}},
                {"occluder", {{"x", s.occluder_x}, {"width", s.occluder_width}, {"shift", s.occluder_shift}}},
                {"background_seed", s.background_seed},
                {"rng_seed", s.rng_seed}};
}

synth::SceneSpec spec_from_json(const json& j) {
    synth::SceneSpec s;
    s.scenario = synth::parse_scenario(j.at("scenario").get<std::string>());
    s.width = j.at("width");
    s.height = j.at("height");
    s.num_frames = j.at("num_frames");
    const auto& sp = j.at("sprite");
    s.sprite.shape = sp.at("shape") == "disc" ? synth::Shape::disc : synth::Shape::rect;
    s.sprite.size = sp.at("size");
    s.sprite.texture_seed = sp.at("texture_seed");
    s.sprite.textured = sp.at("textured");
    s.center_x = j.at("center")[0];
    s.center_y = j.at("center")[1];
    s.dx = j.at("displacement")[0];
    s.dy = j.at("displacement")[1];
    s.rotation_deg = j.at("rotation_deg");
    s.second_x = j.at("second")[0];
    s.second_y = j.at("second")[1];
    s.occluder_x = j.at("occluder").at("x");
    s.occluder_width = j.at("occluder").at("width");
    s.occluder_shift = j.at("occluder").at("shift");
    s.background_seed = j.at("background_seed");
    s.rng_seed = j.at("rng_seed");
    return s;
}

std::string frame_name(int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.png", t);
    return buf;
}

std::string pair_name(const char* prefix, int a, int b, const char* ext) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s_%03d_%03d.%s", prefix, a, b, ext);
    return buf;
}

}  // namespace

std::string Manifest::to_json() const {
    json j;
    j["version"] = version;
    j["seed"] = seed;
    j["point_labeled"] = point_labeled;
    std::map<std::string, int> counts;
    for (const auto& s : scenarios) counts[s] += 1;
    j["scenario_counts"] = counts;
    j["clips"] = json::array();
    for (std::size_t i = 0; i < clip_ids.size(); ++i) {
        j["clips"].push_back({{"id", clip_ids[i]}, {"scenario", scenarios[i]}, {"digest", digests[i]}});
    }
    return j.dump(2) + "\n";
}

std::uint64_t clip_digest(const synth::Clip& clip) {
    Fnv1a h;
    h.update(clip.id);
    for (const auto& f : clip.frames) {
        h.update_pod(f.width);
        h.update_pod(f.height);
        h.update(f.pixels.data(), f.pixels.size());
    }
    for (const auto& fl : clip.flows) h.update(fl.uv.data(), fl.uv.size() * sizeof(float));
    for (const auto& o : clip.occlusions) h.update(o.occluded.data(), o.occluded.size());
    return h.value();
}

Manifest write_dataset(const synth::Dataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    Manifest m;
    m.seed = ds.seed;
    json specs = json::object();
    for (const auto& clip : ds.clips) {
        const fs::path cdir = dir / clip.id;
        fs::create_directories(cdir);
        for (std::size_t t = 0; t < clip.frames.size(); ++t) {
            write_png(cdir / frame_name(static_cast<int>(t)), clip.frames[t]);
        }
        for (std::size_t t = 0; t < clip.flows.size(); ++t) {
            const int a = static_cast<int>(t);
            write_flo(cdir / pair_name("flow", a, a + 1, "flo"), clip.flows[t]);
            write_file(cdir / pair_name("occ", a, a + 1, "png"), encode_occlusion_png(clip.occlusions[t]));
        }
        m.clip_ids.push_back(clip.id);
        m.scenarios.push_back(std::string(synth::scenario_name(clip.spec.scenario)));
        m.digests.push_back(hex64(clip_digest(clip)));
        specs[clip.id] = spec_to_json(clip.spec);
    }
    write_queries(dir / "queries.jsonl", ds.queries);
    write_text(dir / "scenes.json", specs.dump(2) + "\n");
    write_text(dir / "manifest.json", m.to_json());
    return m;
}

synth::Dataset read_dataset(const fs::path& dir, Manifest* out_manifest) {
    const fs::path mpath = dir / "manifest.json";
    const auto mbytes = read_file(mpath);
    json mj;
    try {
        mj = json::parse(mbytes.begin(), mbytes.end());
    } catch (const json::parse_error& e) {
        fail_data(mpath.string() + ": malformed JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
    }
    Manifest m;
    synth::Dataset ds;
    json specs = json::object();
    try {
        m.version = mj.at("version");
        if (m.version != kDatasetVersion) fail_data(mpath.string() + ": unsupported dataset version");
        m.seed = mj.at("seed");
        m.point_labeled = mj.value("point_labeled", false);
        for (const auto& c : mj.at("clips")) {
            m.clip_ids.push_back(c.at("id"));
            m.scenarios.push_back(c.value("scenario", std::string("unknown")));
            m.digests.push_back(c.value("digest", std::string()));
        }
        if (fs::exists(dir / "scenes.json")) {
            const auto sb = read_file(dir / "scenes.json");
            specs = json::parse(sb.begin(), sb.end());
        }
    } catch (const json::exception& e) {
        fail_data(mpath.string() + ": malformed manifest: " + e.what());
    }
    ds.seed = m.seed;
    for (const auto& id : m.clip_ids) {
        const fs::path cdir = dir / id;
        synth::Clip clip;
        clip.id = id;
        if (specs.contains(id)) clip.spec = spec_from_json(specs.at(id));
        for (int t = 0;; ++t) {
            const fs::path fp = cdir / frame_name(t);
            if (!fs::exists(fp)) break;
            clip.frames.push_back(read_png(fp));
        }
        if (clip.frames.empty()) fail_data(cdir.string() + ": clip has no frames");
        if (!m.point_labeled) {
            for (std::size_t t = 0; t + 1 < clip.frames.size(); ++t) {
                const int a = static_cast<int>(t);
                clip.flows.push_back(read_flo(cdir / pair_name("flow", a, a + 1, "flo")));
                clip.occlusions.push_back(read_occlusion_png(cdir / pair_name("occ", a, a + 1, "png")));
            }
        }
        ds.clips.push_back(std::move(clip));
    }
    ds.queries = read_queries(dir / "queries.jsonl");
    if (out_manifest) *out_manifest = m;
    return ds;
}

}  // namespace kltrace::io
