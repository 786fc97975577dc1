#include "kltrace/tokenizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_set>

#include "kltrace/common.hpp"
#include "kltrace/io.hpp"
#include "kltrace/simd/kernels.hpp"

namespace kltrace::tok {

namespace {

constexpr std::uint32_t kCodebookVersion = 1;

void check_dims(const Frame& f, int ph, int pw) {
    if (f.width <= 0 || f.height <= 0 || f.width % pw != 0 || f.height % ph != 0) {
        fail_config("frame " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                    " is not divisible by the patch size " + std::to_string(pw));
    }
}

void gather_patch(const Frame& f, int px, int py, int ph, int pw, float* out) {
    for (int y = 0; y < ph; ++y) {
        const std::uint8_t* row = f.at(px * pw, py * ph + y);
        for (int i = 0; i < pw * 3; ++i) *out++ = static_cast<float>(row[i]);
    }
}

}  // namespace

std::uint64_t Codebook::digest() const {
    Fnv1a h;
    h.update_pod(k);
    h.update_pod(patch_h);
    h.update_pod(patch_w);
    for (float v : codes) h.update_pod(std::bit_cast<std::uint32_t>(v));
    return h.value();
}

std::vector<float> extract_patches(std::span<const Frame> frames, int patch) {
    std::vector<float> out;
    const int dim = patch * patch * 3;
    for (const Frame& f : frames) {
        check_dims(f, patch, patch);
        const int gw = f.width / patch;
        const int gh = f.height / patch;
        const std::size_t base = out.size();
        out.resize(base + static_cast<std::size_t>(gw) * gh * dim);
        float* dst = out.data() + base;
        for (int y = 0; y < gh; ++y) {
            for (int x = 0; x < gw; ++x, dst += dim) gather_patch(f, x, y, patch, patch, dst);
        }
    }
    return out;
}

Codebook fit_codebook(std::span<const Frame> frames, const FitOptions& opts, FitReport* report) {
    if (frames.empty()) fail_data("fit_codebook: empty frame sample");
    if (opts.k < 1) fail_config("fit_codebook: K must be >= 1");
    if (opts.iters < 1) fail_config("fit_codebook: iters must be >= 1");
    const std::vector<float> data = extract_patches(frames, opts.patch);
    const int dim = opts.patch * opts.patch * 3;
    const std::size_t n = data.size() / static_cast<std::size_t>(dim);
    const auto row = [&](std::size_t i) { return data.data() + i * static_cast<std::size_t>(dim); };

    // Seed with K distinct patches in a seeded random order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(opts.seed);
    rng.shuffle(order.begin(), order.end());
    Codebook cb;
    cb.k = opts.k;
    cb.patch_h = cb.patch_w = opts.patch;
    cb.codes.reserve(static_cast<std::size_t>(opts.k) * dim);
    std::unordered_set<std::uint64_t> seen;
    for (std::size_t i : order) {
        if (static_cast<int>(seen.size()) == opts.k) break;
        Fnv1a h;
        h.update(row(i), sizeof(float) * static_cast<std::size_t>(dim));
        if (!seen.insert(h.value()).second) continue;
        cb.codes.insert(cb.codes.end(), row(i), row(i) + dim);
    }
    if (static_cast<int>(seen.size()) < opts.k) {
        fail_data("fit_codebook: sample has " + std::to_string(seen.size()) + " distinct patches, K=" +
                  std::to_string(opts.k));
    }

    const auto& kern = simd::kernels();
    std::vector<std::int32_t> assign(n, 0);
    std::vector<float> dist(n, 0.0f);
    std::vector<double> sums(static_cast<std::size_t>(opts.k) * dim);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(opts.k));
    FitReport rep;
    for (int it = 0; it < opts.iters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            float d = 0.0f;
            assign[i] = static_cast<std::int32_t>(
                kern.nearest_row(row(i), cb.codes.data(), static_cast<std::size_t>(cb.k), static_cast<std::size_t>(dim), &d));
            dist[i] = d;
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<std::size_t>(assign[i]);
            counts[c] += 1;
            double* s = sums.data() + c * dim;
            const float* x = row(i);
            for (int j = 0; j < dim; ++j) s[j] += x[j];
        }
        // Empty clusters take the farthest remaining points (largest current distance first).
        std::vector<std::size_t> empty;
        for (int c = 0; c < cb.k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) empty.push_back(static_cast<std::size_t>(c));
        }
        if (!empty.empty()) {
            std::vector<std::size_t> far(n);
            std::iota(far.begin(), far.end(), std::size_t{0});
            std::stable_sort(far.begin(), far.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
            std::size_t next = 0;
            for (std::size_t c : empty) {
                // Skip points whose own cluster would be emptied by the move.
                while (next < n && counts[static_cast<std::size_t>(assign[far[next]])] <= 1) ++next;
                if (next >= n) break;
                const std::size_t p = far[next++];
                const auto old = static_cast<std::size_t>(assign[p]);
                counts[old] -= 1;
                double* so = sums.data() + old * dim;
                for (int j = 0; j < dim; ++j) so[j] -= row(p)[j];
                assign[p] = static_cast<std::int32_t>(c);
                counts[c] = 1;
                double* sc = sums.data() + c * dim;
                for (int j = 0; j < dim; ++j) sc[j] = row(p)[j];
                rep.reseeded += 1;
            }
        }
        for (int c = 0; c < cb.k; ++c) {
            const auto cc = static_cast<std::size_t>(c);
            if (counts[cc] == 0) continue;
            const double inv = 1.0 / static_cast<double>(counts[cc]);
            for (int j = 0; j < dim; ++j) {
                cb.codes[cc * dim + static_cast<std::size_t>(j)] = static_cast<float>(sums[cc * dim + j] * inv);
            }
        }
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const float* x = row(i);
            const float* c = cb.code(assign[i]);
            double d = 0.0;
            for (int j = 0; j < dim; ++j) {
                const double e = static_cast<double>(x[j]) - static_cast<double>(c[j]);
                d += e * e;
            }
            obj += d;
        }
        rep.objective.push_back(obj / static_cast<double>(n));
    }
    if (report) *report = rep;
    return cb;
}

std::int32_t nearest_code(std::span<const float> patch, const Codebook& cb) {
    if (static_cast<int>(patch.size()) != cb.patch_dim()) fail_config("nearest_code: patch size mismatch");
    return static_cast<std::int32_t>(simd::kernels().nearest_row(patch.data(), cb.codes.data(),
                                                                  static_cast<std::size_t>(cb.k),
                                                                  static_cast<std::size_t>(cb.patch_dim()), nullptr));
}

TokenGrid encode(const Frame& frame, const Codebook& cb) {
    check_dims(frame, cb.patch_h, cb.patch_w);
    TokenGrid g(frame.width / cb.patch_w, frame.height / cb.patch_h);
    std::vector<float> buf(static_cast<std::size_t>(cb.patch_dim()));
    const auto& kern = simd::kernels();
    for (int y = 0; y < g.gh; ++y) {
        for (int x = 0; x < g.gw; ++x) {
            gather_patch(frame, x, y, cb.patch_h, cb.patch_w, buf.data());
            g.cells[static_cast<std::size_t>(y) * g.gw + x] = static_cast<std::int32_t>(
                kern.nearest_row(buf.data(), cb.codes.data(), static_cast<std::size_t>(cb.k),
                                 static_cast<std::size_t>(cb.patch_dim()), nullptr));
        }
    }
    return g;
}

Frame decode(const TokenGrid& tokens, const Codebook& cb) {
    Frame f(tokens.gw * cb.patch_w, tokens.gh * cb.patch_h);
    for (int y = 0; y < tokens.gh; ++y) {
        for (int x = 0; x < tokens.gw; ++x) {
            const std::int32_t t = tokens.at(x, y);
            if (t < 0 || t >= cb.k) {
                fail_data("decode: token " + std::to_string(t) + " out of range [0," + std::to_string(cb.k) + ")");
            }
            const float* c = cb.code(t);
            for (int py = 0; py < cb.patch_h; ++py) {
                std::uint8_t* dst = f.at(x * cb.patch_w, y * cb.patch_h + py);
                for (int i = 0; i < cb.patch_w * 3; ++i) {
                    const float v = std::clamp(std::nearbyint(*c++), 0.0f, 255.0f);
                    dst[i] = static_cast<std::uint8_t>(v);
                }
            }
        }
    }
    return f;
}

double reconstruction_mse(const Frame& frame, const Codebook& cb) {
    const Frame rec = decode(encode(frame, cb), cb);
    double acc = 0.0;
    for (std::size_t i = 0; i < frame.pixels.size(); ++i) {
        const double d = static_cast<double>(frame.pixels[i]) - rec.pixels[i];
        acc += d * d;
    }
    return frame.pixels.empty() ? 0.0 : acc / static_cast<double>(frame.pixels.size());
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Codebook& cb) {
    std::vector<std::uint8_t> out{'K', 'L', 'C', 'B'};
    put_u32(out, kCodebookVersion);
    put_u32(out, static_cast<std::uint32_t>(cb.k));
    put_u32(out, static_cast<std::uint32_t>(cb.patch_dim()));
    for (float v : cb.codes) put_u32(out, std::bit_cast<std::uint32_t>(v));
    const std::uint64_t d = cb.digest();
    put_u32(out, static_cast<std::uint32_t>(d));
    put_u32(out, static_cast<std::uint32_t>(d >> 32));
    return out;
}

Codebook deserialize(const std::vector<std::uint8_t>& b, const std::string& origin) {
    auto bad = [&](std::size_t off, const std::string& why) {
        fail_data(origin + ": malformed codebook at byte offset " + std::to_string(off) + ": " + why);
    };
    if (b.size() < 16) bad(b.size(), "truncated header");
    if (std::memcmp(b.data(), "KLCB", 4) != 0) bad(0, "bad magic");
    if (get_u32(b, 4) != kCodebookVersion) bad(4, "unsupported version");
    Codebook cb;
    cb.k = static_cast<int>(get_u32(b, 8));
    const auto patch_bytes = get_u32(b, 12);
    if (cb.k < 1) bad(8, "K must be >= 1");
    const auto side = static_cast<int>(std::lround(std::sqrt(patch_bytes / 3.0)));
    if (side < 1 || static_cast<std::uint32_t>(side * side * 3) != patch_bytes) bad(12, "patch bytes not 3*s*s");
    cb.patch_h = cb.patch_w = side;
    const std::size_t count = static_cast<std::size_t>(cb.k) * patch_bytes;
    const std::size_t need = 16 + count * 4 + 8;
    if (b.size() != need) bad(std::min(b.size(), need), "expected " + std::to_string(need) + " bytes");
    cb.codes.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const float v = std::bit_cast<float>(get_u32(b, 16 + i * 4));
        if (!std::isfinite(v)) bad(16 + i * 4, "non-finite centroid");
        cb.codes[i] = v;
    }
    const std::uint64_t d = static_cast<std::uint64_t>(get_u32(b, need - 8)) |
                            (static_cast<std::uint64_t>(get_u32(b, need - 4)) << 32);
    if (d != cb.digest()) bad(need - 8, "digest mismatch");
    return cb;
}

void save(const std::filesystem::path& path, const Codebook& cb) { io::write_file(path, serialize(cb)); }

Codebook load(const std::filesystem::path& path) { return deserialize(io::read_file(path), path.string()); }

}  // namespace kltrace::tok
