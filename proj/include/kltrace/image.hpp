#pragma once

#include <cstdint>
#include <vector>

namespace kltrace {

/// 8-bit RGB raster, row-major, interleaved channels.
struct Frame {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Frame() = default;
    Frame(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

    std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
    bool operator==(const Frame&) const = default;
};

/// Dense per-pixel displacement (u right, v down), frame a -> frame b.
struct FlowField {
    int width = 0;
    int height = 0;
    std::vector<float> uv;  // interleaved (u, v)

    FlowField() = default;
    FlowField(int w, int h) : width(w), height(h), uv(static_cast<std::size_t>(w) * h * 2, 0.0f) {}

    float u(int x, int y) const { return uv[(static_cast<std::size_t>(y) * width + x) * 2]; }
    float v(int x, int y) const { return uv[(static_cast<std::size_t>(y) * width + x) * 2 + 1]; }
    void set(int x, int y, float du, float dv) {
        const auto i = (static_cast<std::size_t>(y) * width + x) * 2;
        uv[i] = du;
        uv[i + 1] = dv;
    }
    bool operator==(const FlowField&) const = default;
};

/// true = frame-a pixel is not visible in frame b.
struct OcclusionMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> occluded;

    OcclusionMask() = default;
    OcclusionMask(int w, int h) : width(w), height(h), occluded(static_cast<std::size_t>(w) * h, 0) {}

    bool at(int x, int y) const { return occluded[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { occluded[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    std::size_t count() const;
    bool operator==(const OcclusionMask&) const = default;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const Point&) const = default;
};

/// Affine map between an output raster and a source raster, pixel-center
/// convention: source = origin + (out + 0.5) * scale - 0.5.
struct Window {
    double origin_x = 0.0;
    double origin_y = 0.0;
    double scale_x = 1.0;
    double scale_y = 1.0;

    /// Window of `zoom` x the source extent centered at `center`, mapped onto
    /// an out_w x out_h raster. zoom == 1 with a centered frame is identity.
    static Window centered(Point center, double zoom, int src_w, int src_h, int out_w, int out_h);

    Point to_source(Point out) const {
        return {origin_x + (out.x + 0.5) * scale_x - 0.5, origin_y + (out.y + 0.5) * scale_y - 0.5};
    }
    Point to_window(Point src) const {
        return {(src.x + 0.5 - origin_x) / scale_x - 0.5, (src.y + 0.5 - origin_y) / scale_y - 0.5};
    }
};

/// Nearest-neighbour resample through `win`; out-of-range samples are
/// edge-clamped.
Frame resample(const Frame& src, const Window& win, int out_w, int out_h);

}  // namespace kltrace
