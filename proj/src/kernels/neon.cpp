#include "dyllm/kernels.hpp"

#if defined(__aarch64__)
#include <arm_neon.h>

#include <cmath>

namespace dyllm::kernels {
namespace {

// R rows x 4 columns, two float64x2 lanes per row.
template <int R>
inline void micro_4(std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    float64x2_t acc0[R];
    float64x2_t acc1[R];
    for (int r = 0; r < R; ++r) {
        acc0[r] = vdupq_n_f64(0.0);
        acc1[r] = vdupq_n_f64(0.0);
    }
    for (std::size_t p = 0; p < k; ++p) {
        const float64x2_t b0 = vld1q_f64(b + p * ldb);
        const float64x2_t b1 = vld1q_f64(b + p * ldb + 2);
        for (int r = 0; r < R; ++r) {
            const float64x2_t av = vdupq_n_f64(a[r * lda + p]);
            acc0[r] = vfmaq_f64(acc0[r], av, b0);
            acc1[r] = vfmaq_f64(acc1[r], av, b1);
        }
    }
    for (int r = 0; r < R; ++r) {
        vst1q_f64(c + r * ldc, acc0[r]);
        vst1q_f64(c + r * ldc + 2, acc1[r]);
    }
}

// Remaining columns use scalar fused multiply-add so the rounding matches the
// vector lanes.
template <int R>
inline void micro_tail(std::size_t k, std::size_t cols, const double* a, std::size_t lda,
                       const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    for (int r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[r * lda + p], b[p * ldb + j], acc);
            c[r * ldc + j] = acc;
        }
    }
}

template <int R>
inline void row_panel(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                      const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) micro_4<R>(k, a, lda, b + j, ldb, c + j, ldc);
    if (j < n) micro_tail<R>(k, n - j, a, lda, b + j, ldb, c + j, ldc);
}

void gemm_neon(std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda,
               const double* b, std::size_t ldb,
               double* c, std::size_t ldc) {
    if (n == 0) return;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) row_panel<4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
    for (; i < m; ++i) row_panel<1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
}

double dot_neon(const double* x, const double* y, std::size_t n) {
    float64x2_t s0 = vdupq_n_f64(0.0);
    float64x2_t s1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 = vfmaq_f64(s0, vld1q_f64(x + i), vld1q_f64(y + i));
        s1 = vfmaq_f64(s1, vld1q_f64(x + i + 2), vld1q_f64(y + i + 2));
    }
    double s = vaddvq_f64(vaddq_f64(s0, s1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

}  // namespace

const KernelTable* neon_table() {
    // Softmax stays on the scalar reference; libm exp dominates either way.
    static const KernelTable table{Backend::kNeon, &gemm_neon, &dot_neon,
                                   scalar_table().softmax};
    return &table;
}

}  // namespace dyllm::kernels

#else

namespace dyllm::kernels {
const KernelTable* neon_table() { return nullptr; }
}  // namespace dyllm::kernels

#endif
