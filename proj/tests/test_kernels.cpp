#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "dyllm/error.hpp"
#include "dyllm/kernels.hpp"
#include "dyllm/numerics.hpp"

using namespace dyllm;
namespace k = dyllm::kernels;

namespace {

std::vector<double> rand_vec(std::size_t n, std::uint64_t seed, double sd = 1.0) {
    Rng rng(seed);
    return rng_normal_fill(rng, 1, n, sd).values();
}

std::vector<const k::KernelTable*> tables() {
    std::vector<const k::KernelTable*> out = {&k::scalar_table()};
    for (auto* t : {k::avx2_table(), k::avx512_table(), k::neon_table()})
        if (t != nullptr) out.push_back(t);
    return out;
}

std::vector<double> run_gemm(const k::KernelTable& t, std::size_t m, std::size_t n, std::size_t kk,
                             const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> c(m * n, 123.0);
    t.gemm(m, n, kk, a.data(), kk, b.data(), n, c.data(), n);
    return c;
}

// Restores the active backend on scope exit.
struct BackendGuard {
    k::Backend saved = k::active().backend;
    ~BackendGuard() { k::set_backend(saved); }
};

}  // namespace

TEST_CASE("backend parsing and availability") {
    CHECK(k::parse_backend("scalar") == k::Backend::kScalar);
    CHECK(k::parse_backend("avx2") == k::Backend::kAvx2);
    CHECK(k::parse_backend("auto") == k::best_backend());
    CHECK_THROWS_AS(k::parse_backend("sse9"), Error);
    const auto avail = k::available_backends();
    REQUIRE(!avail.empty());
    CHECK(avail.front() == k::Backend::kScalar);
    BackendGuard guard;
    for (auto b : avail) {
        k::set_backend(b);
        CHECK(k::active().backend == b);
    }
    for (auto b : {k::Backend::kAvx2, k::Backend::kAvx512, k::Backend::kNeon}) {
        if (std::find(avail.begin(), avail.end(), b) == avail.end()) {
            CHECK_THROWS_AS(k::set_backend(b), Error);
        }
    }
}

TEST_CASE("gemm variants agree with the scalar reference") {
    const auto& ref = k::scalar_table();
    const std::size_t shapes[][3] = {{1, 1, 1}, {1, 7, 3}, {6, 16, 8}, {7, 9, 5}, {13, 33, 17},
                                     {64, 128, 128}, {5, 200, 31}, {3, 4, 0}};
    for (const auto* t : tables()) {
        CAPTURE(k::backend_name(t->backend));
        for (const auto& s : shapes) {
            const auto a = rand_vec(s[0] * s[2], s[0] + s[2]);
            const auto b = rand_vec(s[2] * s[1], s[1] * 3 + 1);
            const auto c0 = run_gemm(ref, s[0], s[1], s[2], a, b);
            const auto c1 = run_gemm(*t, s[0], s[1], s[2], a, b);
            double worst = 0.0;
            for (std::size_t i = 0; i < c0.size(); ++i) worst = std::max(worst, std::abs(c0[i] - c1[i]));
            CHECK(worst < 1e-12);
        }
    }
}

TEST_CASE("fma gemm variants are bit-identical to each other") {
    std::vector<const k::KernelTable*> fma;
    for (auto* t : {k::avx2_table(), k::avx512_table()})
        if (t != nullptr) fma.push_back(t);
    if (fma.size() < 2) return;
    for (std::size_t m : {1u, 5u, 12u, 64u})
        for (std::size_t n : {3u, 16u, 23u, 128u}) {
            const auto a = rand_vec(m * 37, m);
            const auto b = rand_vec(37 * n, n);
            CHECK(run_gemm(*fma[0], m, n, 37, a, b) == run_gemm(*fma[1], m, n, 37, a, b));
        }
}

TEST_CASE("gemm rows are independent of the row subset") {
    for (const auto* t : tables()) {
        CAPTURE(k::backend_name(t->backend));
        const std::size_t m = 19, n = 45, kk = 64;
        const auto a = rand_vec(m * kk, 1);
        const auto b = rand_vec(kk * n, 2);
        const auto full = run_gemm(*t, m, n, kk, a, b);
        for (std::size_t r0 : {0u, 4u, 13u}) {
            const std::size_t rows = std::min<std::size_t>(5, m - r0);
            std::vector<double> sub(a.begin() + static_cast<long>(r0 * kk),
                                    a.begin() + static_cast<long>((r0 + rows) * kk));
            const auto part = run_gemm(*t, rows, n, kk, sub, b);
            for (std::size_t i = 0; i < rows * n; ++i) CHECK(part[i] == full[r0 * n + i]);
        }
    }
}

TEST_CASE("gemm respects leading dimensions") {
    for (const auto* t : tables()) {
        const std::size_t m = 3, n = 5, kk = 4, lda = 7, ldb = 9, ldc = 11;
        const auto a = rand_vec(m * lda, 3);
        const auto b = rand_vec(kk * ldb, 4);
        std::vector<double> c(m * ldc, -7.0);
        t->gemm(m, n, kk, a.data(), lda, b.data(), ldb, c.data(), ldc);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < kk; ++p) acc += a[i * lda + p] * b[p * ldb + j];
                CHECK(std::abs(c[i * ldc + j] - acc) < 1e-13);
            }
            for (std::size_t j = n; j < ldc; ++j) CHECK(c[i * ldc + j] == -7.0);
        }
    }
}

TEST_CASE("dot and softmax variants agree with the scalar reference") {
    const auto& ref = k::scalar_table();
    for (const auto* t : tables()) {
        CAPTURE(k::backend_name(t->backend));
        for (std::size_t n : {1u, 2u, 3u, 7u, 8u, 15u, 64u, 131u}) {
            const auto x = rand_vec(n, n);
            const auto y = rand_vec(n, n + 99);
            CHECK(std::abs(ref.dot(x.data(), y.data(), n) - t->dot(x.data(), y.data(), n)) < 1e-12);

            auto s0 = rand_vec(n, n * 5, 30.0);
            auto s1 = s0;
            ref.softmax(s0.data(), n, 0.125);
            t->softmax(s1.data(), n, 0.125);
            for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(s0[i] - s1[i]) < 1e-14);
        }
        // underflow region of the exp approximation
        std::vector<double> e = {0.0, -700.0, -708.5, -745.0, -1e5, -0.5};
        auto e0 = e;
        ref.softmax(e0.data(), e.size(), 1.0);
        t->softmax(e.data(), e.size(), 1.0);
        for (std::size_t i = 0; i < e.size(); ++i) CHECK(std::abs(e0[i] - e[i]) < 1e-300 + 1e-15 * e0[i]);
    }
}
