#pragma once

// Portable reference kernels. Templated so the double-precision gradient
// checker runs the exact same code paths as the float model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

namespace kltrace::simd::scalar {

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (beta == T(0)) {
            std::fill(crow, crow + n, T(0));
        } else if (beta != T(1)) {
            for (int j = 0; j < n; ++j) crow[j] *= beta;
        }
        for (int p = 0; p < k; ++p) {
            const T av = trans_a ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
                                 : a[static_cast<std::ptrdiff_t>(i) * lda + p];
            if (av == T(0)) continue;
            const T s = alpha * av;
            if (!trans_b) {
                const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += s * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
            }
        }
    }
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
T squared_distance(const T* x, const T* y, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = x[i] - y[i];
        acc += d * d;
    }
    return acc;
}

template <class T>
std::size_t nearest_row(const T* x, const T* rows, std::size_t count, std::size_t dim, T* best_distance) {
    std::size_t best = 0;
    T best_d = std::numeric_limits<T>::infinity();
    for (std::size_t r = 0; r < count; ++r) {
        const T d = squared_distance(x, rows + r * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = r;
        }
    }
    if (best_distance) *best_distance = best_d;
    return best;
}

template <class T>
void softmax(T* row, std::size_t n, T temperature) {
    if (n == 0) return;
    const T inv_t = T(1) / temperature;
    T mx = row[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    T sum = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        row[i] = std::exp((row[i] - mx) * inv_t);
        sum += row[i];
    }
    const T inv = T(1) / sum;
    for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

template <class T>
double log_sum_exp(const T* z, std::size_t n) {
    double mx = static_cast<double>(z[0]);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(z[i]));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(z[i]) - mx);
    return mx + std::log(s);
}

// KL(softmax(p) || softmax(q)) = sum_i P_i * ((p_i - lse_p) - (q_i - lse_q)).
// Bit-identical inputs give exactly 0; tiny negative round-off is clamped.
template <class T>
double kl_from_logits(const T* p, const T* q, std::size_t n) {
    if (n == 0) return 0.0;
    const double lp = log_sum_exp(p, n);
    const double lq = log_sum_exp(q, n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double log_pi = static_cast<double>(p[i]) - lp;
        const double log_qi = static_cast<double>(q[i]) - lq;
        acc += std::exp(log_pi) * (log_pi - log_qi);
    }
    return std::max(acc, 0.0);
}

}  // namespace kltrace::simd::scalar
