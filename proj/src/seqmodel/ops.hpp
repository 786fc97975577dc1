#pragma once

// Row-wise building blocks shared by the teacher-forced pass and the cached
// rollout. Templated so the gradient checker runs them in double.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <type_traits>
#include <vector>

#include "kltrace/simd/kernels.hpp"
#include "kltrace/simd/kernels_scalar.hpp"

namespace kltrace::seq {

template <class T>
inline void mm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta, T* c,
               int ldc) {
    if (m == 0 || n == 0) return;
    if constexpr (std::is_same_v<T, float>) {
        simd::gemm({ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc});
    } else {
        simd::scalar::gemm<T>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    }
}

template <class T>
inline void add_row(T* dst, const T* src, int n) {
    for (int i = 0; i < n; ++i) dst[i] += src[i];
}

/// y[rows x out] = x[rows x in] * W[in x out] + b.
template <class T>
inline void linear(const T* x, int rows, int in, const T* W, const T* b, int out, T* y) {
    for (int r = 0; r < rows; ++r) std::copy(b, b + out, y + static_cast<std::size_t>(r) * out);
    mm<T>(false, false, rows, out, in, T(1), x, in, W, out, T(1), y, out);
}

/// dW += x^T dy, db += colsum(dy), dx += dy W^T.
template <class T>
inline void linear_backward(const T* x, int rows, int in, const T* W, int out, const T* dy, T* dW, T* db, T* dx) {
    mm<T>(true, false, in, out, rows, T(1), x, in, dy, out, T(1), dW, out);
    for (int r = 0; r < rows; ++r) add_row(db, dy + static_cast<std::size_t>(r) * out, out);
    mm<T>(false, true, rows, in, out, T(1), dy, out, W, out, T(1), dx, in);
}

/// dst[j][i] = src[i][j] for a rows x cols source; dst rows strided by ld.
template <class T>
inline void scatter_transposed(const T* src, int rows, int cols, T* dst, int ld) {
    for (int j = 0; j < cols; ++j) {
        T* out = dst + static_cast<std::size_t>(j) * ld;
        for (int i = 0; i < rows; ++i) out[i] = src[static_cast<std::size_t>(i) * cols + j];
    }
}

inline constexpr double kLnEps = 1e-5;

template <class T>
inline void layer_norm_rows(const T* x, int rows, int d, const T* g, const T* b, std::vector<T>& y,
                            std::vector<T>& mu, std::vector<T>& rs) {
    y.resize(static_cast<std::size_t>(rows) * d);
    mu.resize(static_cast<std::size_t>(rows));
    rs.resize(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<std::size_t>(r) * d;
        T* yr = y.data() + static_cast<std::size_t>(r) * d;
        T m = 0;
        for (int i = 0; i < d; ++i) m += xr[i];
        m /= static_cast<T>(d);
        T v = 0;
        for (int i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
        v /= static_cast<T>(d);
        const T s = T(1) / std::sqrt(v + static_cast<T>(kLnEps));
        for (int i = 0; i < d; ++i) yr[i] = (xr[i] - m) * s * g[i] + b[i];
        mu[static_cast<std::size_t>(r)] = m;
        rs[static_cast<std::size_t>(r)] = s;
    }
}

/// Accumulates the input gradient into dx.
template <class T>
inline void layer_norm_backward(const T* x, int rows, int d, const T* g, const std::vector<T>& mu,
                                const std::vector<T>& rs, const T* dy, T* dg, T* db, T* dx) {
    std::vector<T> xh(static_cast<std::size_t>(d)), dxh(static_cast<std::size_t>(d));
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<std::size_t>(r) * d;
        const T* dyr = dy + static_cast<std::size_t>(r) * d;
        T* dxr = dx + static_cast<std::size_t>(r) * d;
        const T m = mu[static_cast<std::size_t>(r)], s = rs[static_cast<std::size_t>(r)];
        T mean_d = 0, mean_dx = 0;
        for (int i = 0; i < d; ++i) {
            xh[static_cast<std::size_t>(i)] = (xr[i] - m) * s;
            dxh[static_cast<std::size_t>(i)] = dyr[i] * g[i];
            dg[i] += dyr[i] * xh[static_cast<std::size_t>(i)];
            db[i] += dyr[i];
            mean_d += dxh[static_cast<std::size_t>(i)];
            mean_dx += dxh[static_cast<std::size_t>(i)] * xh[static_cast<std::size_t>(i)];
        }
        mean_d /= static_cast<T>(d);
        mean_dx /= static_cast<T>(d);
        for (int i = 0; i < d; ++i) {
            dxr[i] += s * (dxh[static_cast<std::size_t>(i)] - mean_d - xh[static_cast<std::size_t>(i)] * mean_dx);
        }
    }
}

// tanh-approximated GELU.
template <class T>
inline T gelu(T x) {
    constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
inline T gelu_grad(T x) {
    constexpr T c = static_cast<T>(0.7978845608028654);
    const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

/// Row i may attend to columns [0, limit(i)): the whole prefix for prefix rows,
/// everything up to and including itself afterwards.
inline int attend_limit(int i, int prefix) { return i < prefix ? prefix : i + 1; }

template <class T>
inline void masked_softmax_rows(T* s, int L, int prefix) {
    for (int i = 0; i < L; ++i) {
        T* row = s + static_cast<std::size_t>(i) * L;
        const int lim = attend_limit(i, prefix);
        if constexpr (std::is_same_v<T, float>) {
            simd::kernels().softmax(row, static_cast<std::size_t>(lim), 1.0f);
        } else {
            simd::scalar::softmax<T>(row, static_cast<std::size_t>(lim), T(1));
        }
        std::fill(row + lim, row + L, T(0));
    }
}

/// dP -> dS in place: dS = P * (dP - rowsum(P * dP)).
template <class T>
inline void softmax_backward_rows(const T* P, T* dP, int L) {
    for (int i = 0; i < L; ++i) {
        const T* p = P + static_cast<std::size_t>(i) * L;
        T* dp = dP + static_cast<std::size_t>(i) * L;
        T s = 0;
        for (int j = 0; j < L; ++j) s += p[j] * dp[j];
        for (int j = 0; j < L; ++j) dp[j] = p[j] * (dp[j] - s);
    }
}

/// Per-token rotation angles: `pairs` frequencies along x, then along y.
template <class T>
struct Rotary {
    int pairs = 0;
    std::vector<T> cs;  // tokens x (2*pairs) cosines
    std::vector<T> sn;  // tokens x (2*pairs) sines
};

inline double rotary_frequency(int k) { return (std::numbers::pi / 2.0) / std::pow(4.0, k); }

template <class T>
inline void rotary_angles(int cell, int gw, int pairs, T* cs, T* sn) {
    const double cx = cell % gw;
    const double cy = cell / gw;
    for (int k = 0; k < pairs; ++k) {
        const double w = rotary_frequency(k);
        cs[k] = static_cast<T>(std::cos(cx * w));
        sn[k] = static_cast<T>(std::sin(cx * w));
        cs[pairs + k] = static_cast<T>(std::cos(cy * w));
        sn[pairs + k] = static_cast<T>(std::sin(cy * w));
    }
}

template <class T>
inline Rotary<T> make_rotary(const std::vector<int>& cells, int gw, int pairs) {
    Rotary<T> r;
    r.pairs = pairs;
    r.cs.resize(cells.size() * 2 * static_cast<std::size_t>(pairs));
    r.sn.resize(r.cs.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        rotary_angles(cells[i], gw, pairs, r.cs.data() + i * 2 * pairs, r.sn.data() + i * 2 * pairs);
    }
    return r;
}

/// Rotates the first 4*pairs dims of a head slice; sign -1 applies the inverse.
template <class T>
inline void rotate_head(T* v, const T* cs, const T* sn, int pairs, int sign) {
    for (int j = 0; j < 2 * pairs; ++j) {
        const T c = cs[j];
        const T s = sign > 0 ? sn[j] : -sn[j];
        const T a = v[2 * j], b = v[2 * j + 1];
        v[2 * j] = a * c - b * s;
        v[2 * j + 1] = a * s + b * c;
    }
}

/// Applies (sign +1) or undoes (sign -1) the rotary phases on a row block of
/// fused q|k|v projections. Values are rotated only on value-rotary heads.
template <class T>
inline void rotate_qkv(T* qkv, int rows, int d, int hd, int heads, int vr, const Rotary<T>& rq, const Rotary<T>& rk,
                       int sign, int row0 = 0) {
    const int pairs = rq.pairs;
    if (pairs == 0) return;
    for (int r = 0; r < rows; ++r) {
        T* row = qkv + static_cast<std::size_t>(r) * 3 * d;
        const std::size_t a = static_cast<std::size_t>(r + row0) * 2 * pairs;
        for (int h = 0; h < heads; ++h) {
            rotate_head(row + h * hd, rq.cs.data() + a, rq.sn.data() + a, pairs, sign);
            rotate_head(row + d + h * hd, rk.cs.data() + a, rk.sn.data() + a, pairs, sign);
            if (h >= heads - vr) rotate_head(row + 2 * d + h * hd, rk.cs.data() + a, rk.sn.data() + a, pairs, sign);
        }
    }
}

/// Forward (sign +1): rotate value-rotary head outputs back by the query
/// phase. Backward (sign -1): the transpose.
template <class T>
inline void derotate_values(T* att, int rows, int d, int hd, int heads, int vr, const Rotary<T>& rq, int sign,
                            int row0 = 0) {
    const int pairs = rq.pairs;
    if (pairs == 0 || vr == 0) return;
    for (int r = 0; r < rows; ++r) {
        T* row = att + static_cast<std::size_t>(r) * d;
        const std::size_t a = static_cast<std::size_t>(r + row0) * 2 * pairs;
        for (int h = heads - vr; h < heads; ++h) rotate_head(row + h * hd, rq.cs.data() + a, rq.sn.data() + a, pairs, -sign);
    }
}

}  // namespace kltrace::seq
