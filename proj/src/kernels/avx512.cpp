#include "dyllm/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>

#include <algorithm>
#include <vector>

#include "exp_poly.hpp"

namespace dyllm::kernels {
namespace {

// R rows x 16 columns from a packed k x 16 panel.
template <int R>
inline void micro_16(std::size_t k, const double* a, std::size_t lda, const double* panel,
                     double* c, std::size_t ldc) {
    __m512d acc0[R];
    __m512d acc1[R];
    for (int r = 0; r < R; ++r) {
        acc0[r] = _mm512_setzero_pd();
        acc1[r] = _mm512_setzero_pd();
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m512d b0 = _mm512_loadu_pd(panel + p * 16);
        const __m512d b1 = _mm512_loadu_pd(panel + p * 16 + 8);
        for (int r = 0; r < R; ++r) {
            const __m512d av = _mm512_set1_pd(a[r * lda + p]);
            acc0[r] = _mm512_fmadd_pd(av, b0, acc0[r]);
            acc1[r] = _mm512_fmadd_pd(av, b1, acc1[r]);
        }
    }
    for (int r = 0; r < R; ++r) {
        _mm512_storeu_pd(c + r * ldc, acc0[r]);
        _mm512_storeu_pd(c + r * ldc + 8, acc1[r]);
    }
}

// R rows x up to 8 columns straight from B, masked.
template <int R>
inline void micro_masked(std::size_t k, __mmask8 mask, const double* a, std::size_t lda,
                         const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    __m512d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm512_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
        const __m512d bv = _mm512_maskz_loadu_pd(mask, b + p * ldb);
        for (int r = 0; r < R; ++r) {
            acc[r] = _mm512_fmadd_pd(_mm512_set1_pd(a[r * lda + p]), bv, acc[r]);
        }
    }
    for (int r = 0; r < R; ++r) _mm512_mask_storeu_pd(c + r * ldc, mask, acc[r]);
}

inline void pack_strip(std::size_t k, const double* b, std::size_t ldb, double* panel) {
    for (std::size_t p = 0; p < k; ++p) {
        _mm512_storeu_pd(panel + p * 16, _mm512_loadu_pd(b + p * ldb));
        _mm512_storeu_pd(panel + p * 16 + 8, _mm512_loadu_pd(b + p * ldb + 8));
    }
}

template <int R>
inline void narrow(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                   const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    for (std::size_t j = 0; j < n; j += 8) {
        const std::size_t w = std::min<std::size_t>(8, n - j);
        const auto mask = static_cast<__mmask8>((1u << w) - 1u);
        micro_masked<R>(k, mask, a, lda, b + j, ldb, c + j, ldc);
    }
}

template <int R>
inline void block(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, const double* panels, double* c,
                  std::size_t ldc) {
    std::size_t j = 0;
    for (std::size_t s = 0; j + 16 <= n; j += 16, ++s) {
        micro_16<R>(k, a, lda, panels + s * k * 16, c + j, ldc);
    }
    if (j < n) narrow<R>(n - j, k, a, lda, b + j, ldb, c + j, ldc);
}

void gemm_avx512(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda,
                 const double* b, std::size_t ldb,
                 double* c, std::size_t ldc) {
    if (n == 0 || m == 0) return;
    thread_local std::vector<double> panels;
    const std::size_t strips = n / 16;
    panels.resize(strips * k * 16);
    for (std::size_t s = 0; s < strips; ++s) pack_strip(k, b + s * 16, ldb, panels.data() + s * k * 16);
    std::size_t i = 0;
    for (; i + 6 <= m; i += 6) block<6>(n, k, a + i * lda, lda, b, ldb, panels.data(), c + i * ldc, ldc);
    const double* ar = a + i * lda;
    double* cr = c + i * ldc;
    switch (m - i) {
        case 5: block<5>(n, k, ar, lda, b, ldb, panels.data(), cr, ldc); break;
        case 4: block<4>(n, k, ar, lda, b, ldb, panels.data(), cr, ldc); break;
        case 3: block<3>(n, k, ar, lda, b, ldb, panels.data(), cr, ldc); break;
        case 2: block<2>(n, k, ar, lda, b, ldb, panels.data(), cr, ldc); break;
        case 1: block<1>(n, k, ar, lda, b, ldb, panels.data(), cr, ldc); break;
        default: break;
    }
}

double dot_avx512(const double* x, const double* y, std::size_t n) {
    __m512d s0 = _mm512_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) s0 = _mm512_fmadd_pd(_mm512_loadu_pd(x + i), _mm512_loadu_pd(y + i), s0);
    double s = _mm512_reduce_add_pd(s0);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

inline __m512d exp_avx512(__m512d x) {
    using namespace detail;
    const __mmask8 keep = _mm512_cmp_pd_mask(x, _mm512_set1_pd(kExpMin), _CMP_GE_OQ);
    x = _mm512_min_pd(x, _mm512_set1_pd(kExpMax));
    x = _mm512_max_pd(x, _mm512_set1_pd(kExpMin));
    const __m512d n = _mm512_roundscale_pd(_mm512_mul_pd(x, _mm512_set1_pd(kLog2e)),
                                           _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m512d r = _mm512_fnmadd_pd(n, _mm512_set1_pd(kLn2Hi), x);
    r = _mm512_fnmadd_pd(n, _mm512_set1_pd(kLn2Lo), r);
    __m512d p = _mm512_set1_pd(kInvFact[13]);
    for (int i = 12; i >= 0; --i) p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(kInvFact[i]));
    const __m512i bits =
        _mm512_slli_epi64(_mm512_castpd_si512(_mm512_add_pd(n, _mm512_set1_pd(kExpBiasMagic))), 52);
    return _mm512_maskz_mul_pd(keep, p, _mm512_castsi512_pd(bits));
}

void softmax_avx512(double* x, std::size_t n, double scale) {
    if (n == 0) return;
    std::size_t i = 0;
    __m512d mv = _mm512_set1_pd(x[0]);
    for (; i + 8 <= n; i += 8) mv = _mm512_max_pd(mv, _mm512_loadu_pd(x + i));
    double mx = _mm512_reduce_max_pd(mv);
    for (; i < n; ++i) mx = std::max(mx, x[i]);

    const __m512d vmax = _mm512_set1_pd(mx);
    const __m512d vscale = _mm512_set1_pd(scale);
    __m512d vsum = _mm512_setzero_pd();
    i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m512d e = exp_avx512(_mm512_mul_pd(vscale, _mm512_sub_pd(_mm512_loadu_pd(x + i), vmax)));
        _mm512_storeu_pd(x + i, e);
        vsum = _mm512_add_pd(vsum, e);
    }
    double sum = _mm512_reduce_add_pd(vsum);
    for (; i < n; ++i) {
        x[i] = detail::exp_poly(scale * (x[i] - mx));
        sum += x[i];
    }
    const double inv_s = 1.0 / sum;
    const __m512d inv = _mm512_set1_pd(inv_s);
    i = 0;
    for (; i + 8 <= n; i += 8) _mm512_storeu_pd(x + i, _mm512_mul_pd(_mm512_loadu_pd(x + i), inv));
    for (; i < n; ++i) x[i] *= inv_s;
}

}  // namespace

const KernelTable* avx512_table() {
    static const KernelTable table{Backend::kAvx512, &gemm_avx512, &dot_avx512, &softmax_avx512};
    static const bool supported = __builtin_cpu_supports("avx512f");
    return supported ? &table : nullptr;
}

}  // namespace dyllm::kernels

#else

namespace dyllm::kernels {
const KernelTable* avx512_table() { return nullptr; }
}  // namespace dyllm::kernels

#endif
