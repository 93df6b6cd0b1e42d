#pragma once

// Inner-loop kernels with a portable scalar reference and SIMD variants.
//
// Every gemm variant computes each output element as one sequential
// multiply-accumulate chain over k, starting from zero. The value of C(i, j)
// therefore depends only on row i of A and column j of B, never on the
// blocking, so running a subset of rows reproduces the full product bit for
// bit within one backend. The scalar reference rounds multiply and add
// separately; the SIMD variants use fused multiply-add, so AVX2 and AVX-512
// gemm agree with each other exactly. SIMD softmax uses a polynomial exp
// accurate to a few ulp.

#include <cstddef>
#include <string_view>
#include <vector>

namespace dyllm::kernels {

enum class Backend { kScalar, kAvx2, kAvx512, kNeon };

// C[m x n] = A[m x k] * B[k x n]; all row-major with explicit leading dims.
using GemmFn = void (*)(std::size_t m, std::size_t n, std::size_t k,
                        const double* a, std::size_t lda,
                        const double* b, std::size_t ldb,
                        double* c, std::size_t ldc);
using DotFn = double (*)(const double* x, const double* y, std::size_t n);
// x[i] <- exp(scale * (x[i] - max(x))) / sum, in place.
using SoftmaxFn = void (*)(double* x, std::size_t n, double scale);

struct KernelTable {
    Backend backend;
    GemmFn gemm;
    DotFn dot;
    SoftmaxFn softmax;
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in or the CPU lacks the features.
const KernelTable* avx2_table();
const KernelTable* avx512_table();
const KernelTable* neon_table();

std::vector<Backend> available_backends();
Backend best_backend();

// Currently dispatched table. Defaults to best_backend() on first use.
const KernelTable& active();
void set_backend(Backend backend);

std::string_view backend_name(Backend backend);
// Accepts "scalar", "avx2", "avx512", "neon", "auto".
Backend parse_backend(std::string_view name);

}  // namespace dyllm::kernels
