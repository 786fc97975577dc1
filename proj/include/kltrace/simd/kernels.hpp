#pragma once

// Data-parallel inner loops used by the tokenizer, the sequence model and the
// tracer. Every kernel has a portable scalar reference (kernels_scalar.hpp) and
// an AVX2/FMA variant; the active table is chosen once at runtime from CPUID
// and can be pinned with KLTRACE_ISA=scalar|avx2 or force_isa().

#include <cstddef>
#include <string_view>

namespace kltrace::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

/// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, where op(A) is M x K
/// and op(B) is K x N. beta == 0 overwrites C without reading it.
struct GemmArgs {
    bool trans_a = false;
    bool trans_b = false;
    int m = 0;
    int n = 0;
    int k = 0;
    float alpha = 1.0f;
    const float* a = nullptr;
    int lda = 0;
    const float* b = nullptr;
    int ldb = 0;
    float beta = 0.0f;
    float* c = nullptr;
    int ldc = 0;
};

struct KernelTable {
    Isa isa;
    void (*gemm)(const GemmArgs& g);
    float (*dot)(const float* x, const float* y, std::size_t n);
    void (*axpy)(float a, const float* x, float* y, std::size_t n);
    float (*squared_distance)(const float* x, const float* y, std::size_t n);
    // Index of the row of `rows` (count x dim) nearest to `x`; ties -> lowest.
    std::size_t (*nearest_row)(const float* x, const float* rows, std::size_t count, std::size_t dim,
                               float* best_distance);
    // In-place softmax over n logits scaled by 1/temperature.
    void (*softmax)(float* row, std::size_t n, float temperature);
    // KL(softmax(p) || softmax(q)) in nats, accumulated in double.
    double (*kl_from_logits)(const float* p, const float* q, std::size_t n);
};

const KernelTable& kernels();
const KernelTable& kernels_for(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
/// Pins the dispatch table; intended for tests and benchmarks.
void force_isa(Isa isa);

// Convenience wrappers over the active table.
inline void gemm(const GemmArgs& g) { kernels().gemm(g); }

}  // namespace kltrace::simd
