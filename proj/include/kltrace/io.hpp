#pragma once

// On-disk formats for clips and datasets:
//   frame_NNN.png          8-bit RGB
//   flow_NNN_MMM.flo       Middlebury: f32 202021.25 ("PIEH"), i32 w, i32 h, w*h*(u,v) f32, little-endian
//   occ_NNN_MMM.png        8-bit gray, 0 visible / 255 occluded
//   queries.jsonl          {clip, frame_a, frame_b, x, y, gt_x, gt_y, occluded}
//   manifest.json          version, seed, scenario counts, clip list

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kltrace/image.hpp"
#include "kltrace/synth.hpp"

namespace kltrace::io {

inline constexpr float kFloMagic = 202021.25f;
inline constexpr int kDatasetVersion = 1;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes atomically enough for our purposes: whole buffer, then close.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> encode_png_rgb(const Frame& f);
std::vector<std::uint8_t> encode_png_gray(int width, int height, const std::vector<std::uint8_t>& gray);
Frame decode_png_rgb(const std::vector<std::uint8_t>& bytes, const std::string& origin);
/// Returns width, height and gray samples.
std::vector<std::uint8_t> decode_png_gray(const std::vector<std::uint8_t>& bytes, const std::string& origin,
                                          int& width, int& height);

void write_png(const std::filesystem::path& path, const Frame& f);
Frame read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_flo(const FlowField& flow);
/// Throws Error(data) naming `origin` and the failing byte offset.
FlowField decode_flo(const std::vector<std::uint8_t>& bytes, const std::string& origin);
void write_flo(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flo(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_occlusion_png(const OcclusionMask& occ);
OcclusionMask read_occlusion_png(const std::filesystem::path& path);

std::string query_to_json_line(const synth::QueryRecord& q);
std::vector<synth::QueryRecord> read_queries(const std::filesystem::path& path);
void write_queries(const std::filesystem::path& path, const std::vector<synth::QueryRecord>& queries);

struct Manifest {
    int version = kDatasetVersion;
    std::uint64_t seed = 0;
    std::vector<std::string> clip_ids;
    std::vector<std::string> scenarios;  // parallel to clip_ids
    std::vector<std::string> digests;    // parallel to clip_ids
    bool point_labeled = false;          // true for datasets without dense flow
    std::string to_json() const;
};

/// Content digest over frames, flows and occlusion masks.
std::uint64_t clip_digest(const synth::Clip& clip);

/// Writes clip directories, queries.jsonl and manifest.json under `dir`.
/// Output bytes are a pure function of the inputs.
Manifest write_dataset(const synth::Dataset& ds, const std::filesystem::path& dir);
synth::Dataset read_dataset(const std::filesystem::path& dir, Manifest* manifest = nullptr);

}  // namespace kltrace::io
