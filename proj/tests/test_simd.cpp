#include <doctest.h>

#include <cmath>
#include <vector>

#include "kltrace/common.hpp"
#include "kltrace/simd/kernels.hpp"
#include "kltrace/simd/kernels_scalar.hpp"

using namespace kltrace;
using simd::Isa;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
    return v;
}

// Naive triple loop in double; independent of both kernel paths.
std::vector<double> reference_gemm(bool ta, bool tb, int m, int n, int k, const std::vector<float>& a, int lda,
                                   const std::vector<float>& b, int ldb) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) {
                const double av = ta ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p];
                const double bv = tb ? b[static_cast<std::size_t>(j) * ldb + p] : b[static_cast<std::size_t>(p) * ldb + j];
                s += av * bv;
            }
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    }
    return c;
}

std::vector<Isa> available_isas() {
    std::vector<Isa> out{Isa::scalar};
    if (simd::isa_supported(Isa::avx2)) out.push_back(Isa::avx2);
    return out;
}

}  // namespace

TEST_CASE("gemm matches a double-precision reference for every transpose combination") {
    Rng rng(11);
    const int shapes[][3] = {{1, 1, 1}, {4, 16, 8}, {7, 19, 13}, {33, 40, 65}, {5, 3, 100}, {64, 48, 32}};
    for (Isa isa : available_isas()) {
        const auto& kt = simd::kernels_for(isa);
        for (const auto& s : shapes) {
            const int m = s[0], n = s[1], k = s[2];
            for (int ta = 0; ta < 2; ++ta) {
                for (int tb = 0; tb < 2; ++tb) {
                    const int lda = ta ? m + 3 : k + 2;
                    const int ldb = tb ? k + 1 : n + 5;
                    const auto a = random_vec(rng, static_cast<std::size_t>(ta ? k : m) * lda);
                    const auto b = random_vec(rng, static_cast<std::size_t>(tb ? n : k) * ldb);
                    const int ldc = n + 4;
                    std::vector<float> c(static_cast<std::size_t>(m) * ldc, 1.0f);
                    simd::GemmArgs g{ta != 0, tb != 0, m, n, k, 0.5f, a.data(), lda, b.data(), ldb, 2.0f, c.data(), ldc};
                    kt.gemm(g);
                    const auto ref = reference_gemm(ta, tb, m, n, k, a, lda, b, ldb);
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < n; ++j) {
                            const double want = 0.5 * ref[static_cast<std::size_t>(i) * n + j] + 2.0;
                            CHECK(c[static_cast<std::size_t>(i) * ldc + j] ==
                                  doctest::Approx(want).epsilon(1e-4).scale(std::sqrt(k)));
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("beta zero ignores NaN garbage in the output") {
    for (Isa isa : available_isas()) {
        std::vector<float> a{1, 2}, b{3, 4};
        std::vector<float> c{std::nanf("")};
        simd::GemmArgs g{false, false, 1, 1, 2, 1.0f, a.data(), 2, b.data(), 1, 0.0f, c.data(), 1};
        simd::kernels_for(isa).gemm(g);
        CHECK(c[0] == 11.0f);
    }
}

TEST_CASE("vector kernels agree between scalar and SIMD paths") {
    if (!simd::isa_supported(Isa::avx2)) return;
    const auto& s = simd::kernels_for(Isa::scalar);
    const auto& v = simd::kernels_for(Isa::avx2);
    Rng rng(5);
    for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 48u, 512u, 1000u}) {
        const auto x = random_vec(rng, n, 3.0);
        const auto y = random_vec(rng, n, 3.0);
        CHECK(v.dot(x.data(), y.data(), n) == doctest::Approx(s.dot(x.data(), y.data(), n)).epsilon(1e-5).scale(n));
        CHECK(v.squared_distance(x.data(), y.data(), n) ==
              doctest::Approx(s.squared_distance(x.data(), y.data(), n)).epsilon(1e-5));

        auto y1 = y, y2 = y;
        s.axpy(0.75f, x.data(), y1.data(), n);
        v.axpy(0.75f, x.data(), y2.data(), n);
        for (std::size_t i = 0; i < n; ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-6));

        auto p1 = x, p2 = x;
        s.softmax(p1.data(), n, 1.0f);
        v.softmax(p2.data(), n, 1.0f);
        for (std::size_t i = 0; i < n; ++i) CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-5).scale(1e-7));

        const double k1 = s.kl_from_logits(x.data(), y.data(), n);
        const double k2 = v.kl_from_logits(x.data(), y.data(), n);
        CHECK(k2 == doctest::Approx(k1).epsilon(1e-4).scale(1e-6));
    }
}

TEST_CASE("nearest_row picks the lowest index on exact ties") {
    const std::vector<float> rows{1, 1, 5, 5, 1, 1};
    const std::vector<float> x{1, 1};
    for (Isa isa : available_isas()) {
        float d = -1.0f;
        CHECK(simd::kernels_for(isa).nearest_row(x.data(), rows.data(), 3, 2, &d) == 0);
        CHECK(d == 0.0f);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(9);
    for (Isa isa : available_isas()) {
        auto z = random_vec(rng, 512, 4.0);
        simd::kernels_for(isa).softmax(z.data(), z.size(), 1.0f);
        double s = 0.0;
        for (float p : z) s += p;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("kl_from_logits: hand value, identity and non-negativity") {
    // P = (0.5, 0.5), Q = (0.75, 0.25).
    const float p[] = {0.0f, 0.0f};
    const float q[] = {static_cast<float>(std::log(3.0)), 0.0f};
    const double want = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    CHECK(want == doctest::Approx(0.14384).epsilon(1e-4));
    Rng rng(3);
    for (Isa isa : available_isas()) {
        const auto& kt = simd::kernels_for(isa);
        CHECK(kt.kl_from_logits(p, q, 2) == doctest::Approx(want).epsilon(1e-6));
        for (int trial = 0; trial < 50; ++trial) {
            const auto a = random_vec(rng, 64, 2.0);
            const auto b = random_vec(rng, 64, 2.0);
            CHECK(kt.kl_from_logits(a.data(), a.data(), 64) == 0.0);
            CHECK(kt.kl_from_logits(a.data(), b.data(), 64) >= 0.0);
        }
    }
}

TEST_CASE("dispatch can be pinned") {
    const Isa before = simd::active_isa();
    simd::force_isa(Isa::scalar);
    CHECK(simd::active_isa() == Isa::scalar);
    simd::force_isa(before);
    CHECK(simd::active_isa() == before);
}
