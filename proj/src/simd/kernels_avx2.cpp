// AVX2 + FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma and only entered after a CPUID check in dispatch.cpp.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "kltrace/simd/kernels.hpp"
#include "kltrace/simd/kernels_scalar.hpp"

namespace kltrace::simd::avx2 {
namespace {

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
}

inline float hmax(__m256 v) {
    __m128 m = _mm_max_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
    m = _mm_max_ps(m, _mm_movehl_ps(m, m));
    m = _mm_max_ss(m, _mm_movehdup_ps(m));
    return _mm_cvtss_f32(m);
}

// Cephes-style exp, relative error ~2 ulp over the clamped range.
inline __m256 exp256(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-87.3365447504f);
    x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    __m256 fx = _mm256_round_ps(_mm256_mul_ps(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
    __m256 y = _mm256_set1_ps(1.9875691500E-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507E-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073E-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894E-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459E-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201E-1f));
    const __m256 x2 = _mm256_mul_ps(x, x);
    y = _mm256_fmadd_ps(y, x2, _mm256_add_ps(x, _mm256_set1_ps(1.0f)));
    __m256i e = _mm256_cvtps_epi32(fx);
    e = _mm256_slli_epi32(_mm256_add_epi32(e, _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(e));
}

thread_local std::vector<float> pack_a;
thread_local std::vector<float> pack_b;

void transpose_into(std::vector<float>& dst, const float* src, int rows, int cols, int ld) {
    // src is rows x cols with leading dim ld; dst becomes cols x rows, dense.
    dst.resize(static_cast<std::size_t>(rows) * cols);
    constexpr int tile = 16;
    for (int r0 = 0; r0 < rows; r0 += tile) {
        const int r1 = std::min(rows, r0 + tile);
        for (int c0 = 0; c0 < cols; c0 += tile) {
            const int c1 = std::min(cols, c0 + tile);
            for (int r = r0; r < r1; ++r) {
                for (int c = c0; c < c1; ++c) {
                    dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::ptrdiff_t>(r) * ld + c];
                }
            }
        }
    }
}

// C[m x n] += alpha * A[m x k] * B[k x n], all row-major.
void gemm_nn_accumulate(int m, int n, int k, float alpha, const float* a, int lda, const float* b, int ldb,
                        float* c, int ldc) {
    const int n16 = n - n % 16;
    const int n8 = n - n % 8;
    for (int j = 0; j < n16; j += 16) {
        int i = 0;
        for (; i + 4 <= m; i += 4) {
            __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
            __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
            __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
            __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
            const float* a0 = a + static_cast<std::ptrdiff_t>(i) * lda;
            const float* a1 = a0 + lda;
            const float* a2 = a1 + lda;
            const float* a3 = a2 + lda;
            const float* bp = b + j;
            for (int p = 0; p < k; ++p, bp += ldb) {
                const __m256 b0 = _mm256_loadu_ps(bp);
                const __m256 b1 = _mm256_loadu_ps(bp + 8);
                __m256 av = _mm256_broadcast_ss(a0 + p);
                c00 = _mm256_fmadd_ps(av, b0, c00);
                c01 = _mm256_fmadd_ps(av, b1, c01);
                av = _mm256_broadcast_ss(a1 + p);
                c10 = _mm256_fmadd_ps(av, b0, c10);
                c11 = _mm256_fmadd_ps(av, b1, c11);
                av = _mm256_broadcast_ss(a2 + p);
                c20 = _mm256_fmadd_ps(av, b0, c20);
                c21 = _mm256_fmadd_ps(av, b1, c21);
                av = _mm256_broadcast_ss(a3 + p);
                c30 = _mm256_fmadd_ps(av, b0, c30);
                c31 = _mm256_fmadd_ps(av, b1, c31);
            }
            const __m256 al = _mm256_set1_ps(alpha);
            float* cr = c + static_cast<std::ptrdiff_t>(i) * ldc + j;
            auto store = [&](float* dst, __m256 v0, __m256 v1) {
                _mm256_storeu_ps(dst, _mm256_fmadd_ps(al, v0, _mm256_loadu_ps(dst)));
                _mm256_storeu_ps(dst + 8, _mm256_fmadd_ps(al, v1, _mm256_loadu_ps(dst + 8)));
            };
            store(cr, c00, c01);
            store(cr + ldc, c10, c11);
            store(cr + 2 * ldc, c20, c21);
            store(cr + 3 * ldc, c30, c31);
        }
        for (; i < m; ++i) {
            __m256 c0 = _mm256_setzero_ps(), c1 = _mm256_setzero_ps();
            const float* ar = a + static_cast<std::ptrdiff_t>(i) * lda;
            const float* bp = b + j;
            for (int p = 0; p < k; ++p, bp += ldb) {
                const __m256 av = _mm256_broadcast_ss(ar + p);
                c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp), c0);
                c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp + 8), c1);
            }
            const __m256 al = _mm256_set1_ps(alpha);
            float* cr = c + static_cast<std::ptrdiff_t>(i) * ldc + j;
            _mm256_storeu_ps(cr, _mm256_fmadd_ps(al, c0, _mm256_loadu_ps(cr)));
            _mm256_storeu_ps(cr + 8, _mm256_fmadd_ps(al, c1, _mm256_loadu_ps(cr + 8)));
        }
    }
    if (n16 < n8) {
        const int j = n16;
        for (int i = 0; i < m; ++i) {
            __m256 c0 = _mm256_setzero_ps();
            const float* ar = a + static_cast<std::ptrdiff_t>(i) * lda;
            const float* bp = b + j;
            for (int p = 0; p < k; ++p, bp += ldb) {
                c0 = _mm256_fmadd_ps(_mm256_broadcast_ss(ar + p), _mm256_loadu_ps(bp), c0);
            }
            float* cr = c + static_cast<std::ptrdiff_t>(i) * ldc + j;
            _mm256_storeu_ps(cr, _mm256_fmadd_ps(_mm256_set1_ps(alpha), c0, _mm256_loadu_ps(cr)));
        }
    }
    if (n8 < n) {
        for (int i = 0; i < m; ++i) {
            const float* ar = a + static_cast<std::ptrdiff_t>(i) * lda;
            float* cr = c + static_cast<std::ptrdiff_t>(i) * ldc;
            for (int j = n8; j < n; ++j) {
                float acc = 0.0f;
                for (int p = 0; p < k; ++p) acc += ar[p] * b[static_cast<std::ptrdiff_t>(p) * ldb + j];
                cr[j] += alpha * acc;
            }
        }
    }
}

// C[m x n] += alpha * A[m x k] * B^T where B is n x k: row dot products.
void gemm_nt_accumulate(int m, int n, int k, float alpha, const float* a, int lda, const float* b, int ldb,
                        float* c, int ldc);

float dot(const float* x, const float* y, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8) acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    float s = hsum(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void gemm_nt_accumulate(int m, int n, int k, float alpha, const float* a, int lda, const float* b, int ldb,
                        float* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        const float* ar = a + static_cast<std::ptrdiff_t>(i) * lda;
        float* cr = c + static_cast<std::ptrdiff_t>(i) * ldc;
        for (int j = 0; j < n; ++j) cr[j] += alpha * dot(ar, b + static_cast<std::ptrdiff_t>(j) * ldb, k);
    }
}

void gemm(const GemmArgs& g) {
    if (g.m <= 0 || g.n <= 0) return;
    for (int i = 0; i < g.m; ++i) {
        float* crow = g.c + static_cast<std::ptrdiff_t>(i) * g.ldc;
        if (g.beta == 0.0f) {
            std::memset(crow, 0, sizeof(float) * static_cast<std::size_t>(g.n));
        } else if (g.beta != 1.0f) {
            for (int j = 0; j < g.n; ++j) crow[j] *= g.beta;
        }
    }
    if (g.k <= 0 || g.alpha == 0.0f) return;

    const float* a = g.a;
    int lda = g.lda;
    if (g.trans_a) {
        // stored k x m
        transpose_into(pack_a, g.a, g.k, g.m, g.lda);
        a = pack_a.data();
        lda = g.k;
    }
    if (g.trans_b) {
        // Small n with long k: row dot products beat a transpose.
        if (g.n < 16) {
            gemm_nt_accumulate(g.m, g.n, g.k, g.alpha, a, lda, g.b, g.ldb, g.c, g.ldc);
            return;
        }
        transpose_into(pack_b, g.b, g.n, g.k, g.ldb);
        gemm_nn_accumulate(g.m, g.n, g.k, g.alpha, a, lda, pack_b.data(), g.n, g.c, g.ldc);
        return;
    }
    gemm_nn_accumulate(g.m, g.n, g.k, g.alpha, a, lda, g.b, g.ldb, g.c, g.ldc);
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

float squared_distance(const float* x, const float* y, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i));
        acc = _mm256_fmadd_ps(d, d, acc);
    }
    float s = hsum(acc);
    for (; i < n; ++i) {
        const float d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

std::size_t nearest_row(const float* x, const float* rows, std::size_t count, std::size_t dim, float* best_distance) {
    std::size_t best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (std::size_t r = 0; r < count; ++r) {
        const float d = squared_distance(x, rows + r * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = r;
        }
    }
    if (best_distance) *best_distance = best_d;
    return best;
}

void softmax(float* row, std::size_t n, float temperature) {
    if (n == 0) return;
    const float inv_t = 1.0f / temperature;
    __m256 mv = _mm256_set1_ps(-std::numeric_limits<float>::infinity());
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(row + i));
    float mx = hmax(mv);
    for (; i < n; ++i) mx = std::max(mx, row[i]);

    const __m256 mxv = _mm256_set1_ps(mx);
    const __m256 itv = _mm256_set1_ps(inv_t);
    __m256 sv = _mm256_setzero_ps();
    i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 e = exp256(_mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(row + i), mxv), itv));
        _mm256_storeu_ps(row + i, e);
        sv = _mm256_add_ps(sv, e);
    }
    float sum = hsum(sv);
    for (; i < n; ++i) {
        row[i] = std::exp((row[i] - mx) * inv_t);
        sum += row[i];
    }
    const __m256 inv = _mm256_set1_ps(1.0f / sum);
    i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(row + i, _mm256_mul_ps(_mm256_loadu_ps(row + i), inv));
    const float invs = 1.0f / sum;
    for (; i < n; ++i) row[i] *= invs;
}

// Log-sum-exp in float lanes for the max and exp, double for the final sum.
double log_sum_exp(const float* z, std::size_t n, float mx) {
    const __m256 mxv = _mm256_set1_ps(mx);
    __m256 sv = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) sv = _mm256_add_ps(sv, exp256(_mm256_sub_ps(_mm256_loadu_ps(z + i), mxv)));
    double s = hsum(sv);
    for (; i < n; ++i) s += std::exp(static_cast<double>(z[i] - mx));
    return static_cast<double>(mx) + std::log(s);
}

float max_of(const float* z, std::size_t n) {
    __m256 mv = _mm256_set1_ps(-std::numeric_limits<float>::infinity());
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(z + i));
    float mx = hmax(mv);
    for (; i < n; ++i) mx = std::max(mx, z[i]);
    return mx;
}

double kl_from_logits(const float* p, const float* q, std::size_t n) {
    if (n == 0) return 0.0;
    const float mp = max_of(p, n);
    const float mq = max_of(q, n);
    const double lp = log_sum_exp(p, n, mp);
    const double lq = log_sum_exp(q, n, mq);
    // sum_i P_i (p_i - q_i) - (lp - lq), with P_i = exp(p_i - lp).
    const __m256 shift = _mm256_set1_ps(static_cast<float>(lp));
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 pv = _mm256_loadu_ps(p + i);
        const __m256 prob = exp256(_mm256_sub_ps(pv, shift));
        acc = _mm256_fmadd_ps(prob, _mm256_sub_ps(pv, _mm256_loadu_ps(q + i)), acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        s += std::exp(static_cast<double>(p[i]) - lp) * (static_cast<double>(p[i]) - static_cast<double>(q[i]));
    }
    return std::max(s - (lp - lq), 0.0);
}

}  // namespace

const KernelTable& table() {
    static const KernelTable t{Isa::avx2, &gemm, &dot, &axpy, &squared_distance, &nearest_row, &softmax,
                               &kl_from_logits};
    return t;
}

}  // namespace kltrace::simd::avx2
