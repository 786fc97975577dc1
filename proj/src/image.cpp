#include "kltrace/image.hpp"

#include <algorithm>
#include <cmath>

namespace kltrace {

std::size_t OcclusionMask::count() const {
    return static_cast<std::size_t>(std::count_if(occluded.begin(), occluded.end(), [](auto v) { return v != 0; }));
}

Window Window::centered(Point center, double zoom, int src_w, int src_h, int out_w, int out_h) {
    Window w;
    w.scale_x = zoom * src_w / out_w;
    w.scale_y = zoom * src_h / out_h;
    // Window extent zoom*src centered on the pixel center `center`.
    w.origin_x = center.x + 0.5 - 0.5 * zoom * src_w;
    w.origin_y = center.y + 0.5 - 0.5 * zoom * src_h;
    return w;
}

Frame resample(const Frame& src, const Window& win, int out_w, int out_h) {
    Frame out(out_w, out_h);
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const Point s = win.to_source({static_cast<double>(x), static_cast<double>(y)});
            const int sx = std::clamp(static_cast<int>(std::floor(s.x + 0.5)), 0, src.width - 1);
            const int sy = std::clamp(static_cast<int>(std::floor(s.y + 0.5)), 0, src.height - 1);
            std::copy_n(src.at(sx, sy), 3, out.at(x, y));
        }
    }
    return out;
}

}  // namespace kltrace
