#pragma once

// Local patch tokenizer: each patch is quantized on its own against a k-means
// codebook, so a code never depends on pixels outside its patch.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kltrace/image.hpp"

namespace kltrace::tok {

struct Codebook {
    int k = 0;
    int patch_h = 4;
    int patch_w = 4;
    std::vector<float> codes;  // k x patch_dim, RGB interleaved per pixel, [0, 255]

    int patch_dim() const { return patch_h * patch_w * 3; }
    const float* code(int i) const { return codes.data() + static_cast<std::size_t>(i) * patch_dim(); }
    std::uint64_t digest() const;
};

struct TokenGrid {
    int gw = 0;
    int gh = 0;
    std::vector<std::int32_t> cells;  // row-major gh x gw

    TokenGrid() = default;
    TokenGrid(int w, int h) : gw(w), gh(h), cells(static_cast<std::size_t>(w) * h, 0) {}
    std::int32_t at(int x, int y) const { return cells[static_cast<std::size_t>(y) * gw + x]; }
    int size() const { return gw * gh; }
    bool operator==(const TokenGrid&) const = default;
};

struct FitOptions {
    int k = 512;
    int iters = 20;
    std::uint64_t seed = 0;
    int patch = 4;
};

struct FitReport {
    std::vector<double> objective;  // mean squared patch distance after each iteration
    int reseeded = 0;               // empty clusters re-seeded from farthest points
};

/// Flattened patches (patch_dim floats each) of every frame in `frames`.
std::vector<float> extract_patches(std::span<const Frame> frames, int patch);

/// Lloyd's k-means over raw RGB patches. Initial centroids are distinct
/// patches sampled with `seed`; a cluster left empty is re-seeded with the
/// patch currently farthest from its centroid. Deterministic for a given seed.
Codebook fit_codebook(std::span<const Frame> frames, const FitOptions& opts, FitReport* report = nullptr);

/// Nearest centroid per patch (squared Euclidean), ties to the lowest index.
TokenGrid encode(const Frame& frame, const Codebook& cb);
/// Centroid per patch, rounded to the nearest integer and clamped to [0, 255].
Frame decode(const TokenGrid& tokens, const Codebook& cb);
/// Nearest code of one flattened patch.
std::int32_t nearest_code(std::span<const float> patch, const Codebook& cb);

/// Mean squared error per channel sample between frame and decode(encode(frame)).
double reconstruction_mse(const Frame& frame, const Codebook& cb);

/// "KLCB" | u32 version | u32 K | u32 patch bytes | K*patch_bytes f32 | u64 digest.
/// Patch geometry is square; the side is recovered from patch bytes.
std::vector<std::uint8_t> serialize(const Codebook& cb);
Codebook deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin);
void save(const std::filesystem::path& path, const Codebook& cb);
Codebook load(const std::filesystem::path& path);

}  // namespace kltrace::tok
