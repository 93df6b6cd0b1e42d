#include "dyllm/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace dyllm::kernels {
namespace {

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda,
                 const double* b, std::size_t ldb,
                 double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        const double* arow = a + i * lda;
        // i-k-j order keeps the per-element accumulation sequential in k.
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double dot_scalar(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void softmax_scalar(double* x, std::size_t n, double scale) {
    if (n == 0) return;
    const double mx = *std::max_element(x, x + n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(scale * (x[i] - mx));
        sum += x[i];
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{Backend::kScalar, &gemm_scalar, &dot_scalar, &softmax_scalar};
    return table;
}

}  // namespace dyllm::kernels
