#include <atomic>
#include <cstdlib>
#include <string>

#include "kltrace/simd/kernels.hpp"
#include "kltrace/simd/kernels_scalar.hpp"

namespace kltrace::simd {

#if defined(KLTRACE_HAVE_AVX2)
namespace avx2 {
const KernelTable& table();
}
#endif

namespace {

void scalar_gemm(const GemmArgs& g) {
    scalar::gemm<float>(g.trans_a, g.trans_b, g.m, g.n, g.k, g.alpha, g.a, g.lda, g.b, g.ldb, g.beta, g.c, g.ldc);
}

const KernelTable& scalar_table() {
    static const KernelTable t{Isa::scalar,
                               &scalar_gemm,
                               &scalar::dot<float>,
                               &scalar::axpy<float>,
                               &scalar::squared_distance<float>,
                               &scalar::nearest_row<float>,
                               &scalar::softmax<float>,
                               &scalar::kl_from_logits<float>};
    return t;
}

Isa detect() {
    if (const char* env = std::getenv("KLTRACE_ISA")) {
        const std::string v(env);
        if (v == "scalar") return Isa::scalar;
        if (v == "avx2" && isa_supported(Isa::avx2)) return Isa::avx2;
    }
    return isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

std::atomic<const KernelTable*>& active_slot() {
    static std::atomic<const KernelTable*> slot{&kernels_for(detect())};
    return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
    }
    return "unknown";
}

bool isa_supported(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(KLTRACE_HAVE_AVX2)
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
    }
    return false;
}

const KernelTable& kernels_for(Isa isa) {
#if defined(KLTRACE_HAVE_AVX2)
    if (isa == Isa::avx2 && isa_supported(Isa::avx2)) return avx2::table();
#endif
    (void)isa;
    return scalar_table();
}

const KernelTable& kernels() { return *active_slot().load(std::memory_order_relaxed); }

Isa active_isa() { return kernels().isa; }

void force_isa(Isa isa) { active_slot().store(&kernels_for(isa), std::memory_order_relaxed); }

}  // namespace kltrace::simd
