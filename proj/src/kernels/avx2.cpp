#include "dyllm/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>

#include <algorithm>
#include <vector>

#include "exp_poly.hpp"

namespace dyllm::kernels {
namespace {

// Lanes [0, count) active, count in [1, 3].
inline __m256i tail_mask(std::size_t count) {
    alignas(32) static const long long lut[8] = {-1, -1, -1, -1, 0, 0, 0, 0};
    return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(lut + 4 - count));
}

// R rows x 8 columns, every element a sequential fma chain over k.
template <int R>
inline void micro_8(std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    __m256d acc0[R];
    __m256d acc1[R];
    for (int r = 0; r < R; ++r) {
        acc0[r] = _mm256_setzero_pd();
        acc1[r] = _mm256_setzero_pd();
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
        const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
        for (int r = 0; r < R; ++r) {
            const __m256d av = _mm256_broadcast_sd(a + r * lda + p);
            acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
            acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
        }
    }
    for (int r = 0; r < R; ++r) {
        _mm256_storeu_pd(c + r * ldc, acc0[r]);
        _mm256_storeu_pd(c + r * ldc + 4, acc1[r]);
    }
}

template <int R>
inline void micro_4(std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    __m256d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d bv = _mm256_loadu_pd(b + p * ldb);
        for (int r = 0; r < R; ++r) {
            acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * lda + p), bv, acc[r]);
        }
    }
    for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + r * ldc, acc[r]);
}

template <int R>
inline void micro_tail(std::size_t k, std::size_t cols, const double* a, std::size_t lda,
                       const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    const __m256i mask = tail_mask(cols);
    __m256d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d bv = _mm256_maskload_pd(b + p * ldb, mask);
        for (int r = 0; r < R; ++r) {
            acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * lda + p), bv, acc[r]);
        }
    }
    for (int r = 0; r < R; ++r) _mm256_maskstore_pd(c + r * ldc, mask, acc[r]);
}

// Packs an 8-column strip of B into a contiguous k x 8 panel. Power-of-two
// row strides otherwise alias to the same L1 sets.
inline void pack_strip(std::size_t k, const double* b, std::size_t ldb, double* panel) {
    for (std::size_t p = 0; p < k; ++p) {
        _mm256_storeu_pd(panel + p * 8, _mm256_loadu_pd(b + p * ldb));
        _mm256_storeu_pd(panel + p * 8 + 4, _mm256_loadu_pd(b + p * ldb + 4));
    }
}

template <int R>
inline void strip_8(std::size_t k, const double* a, std::size_t lda, const double* panel,
                    double* c, std::size_t ldc) {
    micro_8<R>(k, a, lda, panel, 8, c, ldc);
}

template <int R>
inline void narrow_panel(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                         const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) micro_4<R>(k, a, lda, b + j, ldb, c + j, ldc);
    if (j < n) micro_tail<R>(k, n - j, a, lda, b + j, ldb, c + j, ldc);
}

template <template <int> class Op, typename... Args>
inline void over_rows(std::size_t m, std::size_t lda, std::size_t ldc, const double* a, double* c,
                      Args... args) {
    std::size_t i = 0;
    for (; i + 6 <= m; i += 6) Op<6>::run(a + i * lda, c + i * ldc, args...);
    switch (m - i) {
        case 5: Op<5>::run(a + i * lda, c + i * ldc, args...); break;
        case 4: Op<4>::run(a + i * lda, c + i * ldc, args...); break;
        case 3: Op<3>::run(a + i * lda, c + i * ldc, args...); break;
        case 2: Op<2>::run(a + i * lda, c + i * ldc, args...); break;
        case 1: Op<1>::run(a + i * lda, c + i * ldc, args...); break;
        default: break;
    }
}

template <int R>
struct StripOp {
    static void run(const double* a, double* c, std::size_t k, std::size_t lda,
                    const double* panel, std::size_t ldc) {
        strip_8<R>(k, a, lda, panel, c, ldc);
    }
};

template <int R>
struct NarrowOp {
    static void run(const double* a, double* c, std::size_t n, std::size_t k, std::size_t lda,
                    const double* b, std::size_t ldb, std::size_t ldc) {
        narrow_panel<R>(n, k, a, lda, b, ldb, c, ldc);
    }
};

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda,
               const double* b, std::size_t ldb,
               double* c, std::size_t ldc) {
    if (n == 0 || m == 0) return;
    thread_local std::vector<double> panel;
    panel.resize(k * 8);
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        pack_strip(k, b + j, ldb, panel.data());
        over_rows<StripOp>(m, lda, ldc, a, c + j, k, lda, panel.data(), ldc);
    }
    if (j < n) over_rows<NarrowOp>(m, lda, ldc, a, c + j, n - j, k, lda, b + j, ldb, ldc);
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
    __m256d s0 = _mm256_setzero_pd();
    __m256d s1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
        s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
    }
    for (; i + 4 <= n; i += 4) {
        s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(s0, s1));
    double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

inline __m256d exp_avx2(__m256d x) {
    using namespace detail;
    const __m256d underflow = _mm256_cmp_pd(x, _mm256_set1_pd(kExpMin), _CMP_LT_OQ);
    x = _mm256_min_pd(x, _mm256_set1_pd(kExpMax));
    x = _mm256_max_pd(x, _mm256_set1_pd(kExpMin));
    const __m256d n = _mm256_round_pd(_mm256_mul_pd(x, _mm256_set1_pd(kLog2e)),
                                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(n, _mm256_set1_pd(kLn2Hi), x);
    r = _mm256_fnmadd_pd(n, _mm256_set1_pd(kLn2Lo), r);
    __m256d p = _mm256_set1_pd(kInvFact[13]);
    for (int i = 12; i >= 0; --i) p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(kInvFact[i]));
    const __m256i bits =
        _mm256_slli_epi64(_mm256_castpd_si256(_mm256_add_pd(n, _mm256_set1_pd(kExpBiasMagic))), 52);
    const __m256d out = _mm256_mul_pd(p, _mm256_castsi256_pd(bits));
    return _mm256_andnot_pd(underflow, out);
}

void softmax_avx2(double* x, std::size_t n, double scale) {
    if (n == 0) return;
    std::size_t i = 0;
    __m256d mv = _mm256_set1_pd(x[0]);
    for (; i + 4 <= n; i += 4) mv = _mm256_max_pd(mv, _mm256_loadu_pd(x + i));
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, mv);
    double mx = std::max(std::max(lanes[0], lanes[1]), std::max(lanes[2], lanes[3]));
    for (; i < n; ++i) mx = std::max(mx, x[i]);

    const __m256d vmax = _mm256_set1_pd(mx);
    const __m256d vscale = _mm256_set1_pd(scale);
    __m256d vsum = _mm256_setzero_pd();
    i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d e = exp_avx2(_mm256_mul_pd(vscale, _mm256_sub_pd(_mm256_loadu_pd(x + i), vmax)));
        _mm256_storeu_pd(x + i, e);
        vsum = _mm256_add_pd(vsum, e);
    }
    _mm256_store_pd(lanes, vsum);
    double sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) {
        x[i] = detail::exp_poly(scale * (x[i] - mx));
        sum += x[i];
    }
    const __m256d inv = _mm256_set1_pd(1.0 / sum);
    i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(x + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), inv));
    for (; i < n; ++i) x[i] *= 1.0 / sum;
}

}  // namespace

const KernelTable* avx2_table() {
    static const KernelTable table{Backend::kAvx2, &gemm_avx2, &dot_avx2, &softmax_avx2};
    static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return supported ? &table : nullptr;
}

}  // namespace dyllm::kernels

#else

namespace dyllm::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace dyllm::kernels

#endif
