#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dyllm/matrix.hpp"

namespace dyllm {

inline constexpr double kRmsNormEpsilon = 1e-6;

Matrix matmul(const Matrix& a, const Matrix& b);

// Per-row softmax of scale * s, stabilised by subtracting the row max.
Matrix row_softmax(const Matrix& s, double scale);
void row_softmax_inplace(Matrix& s, double scale);

// y_i = x_i / sqrt(mean(x^2) + epsilon) * gain_i, row by row.
Matrix rms_norm(const Matrix& x, std::span<const double> gain,
                double epsilon = kRmsNormEpsilon);

// Rotary embedding applied independently to each head of width d_head.
// Pair (2k, 2k+1) of a head rotates by pos * theta_base^(-2k / d_head) where
// pos is the row's global sequence index.
Matrix rope_rotate(const Matrix& x, std::span<const std::size_t> positions,
                   double theta_base, std::size_t d_head);

// Per-row cosine similarity. Both norms below 1e-12 -> 1, exactly one -> 0.
std::vector<double> cosine_similarity_rows(const Matrix& a, const Matrix& b);

double gelu(double x);

// Singular values of a square matrix, descending, via one-sided Jacobi.
std::vector<double> singular_values(const Matrix& w);

// sigma_max / sigma_min; +infinity when sigma_min < 1e-14.
double condition_number(const Matrix& w);

// SplitMix64 stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    // Uniform in (0, 1]; never zero so it is safe under log().
    double next_open_unit();
    // Uniform in [0, 1).
    double next_unit();
    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

// Row-major fill with N(0, stddev^2). Values are produced in Box-Muller pairs:
// u1 = next_open_unit(), u2 = next_unit(), r = sqrt(-2 ln u1),
// z0 = r cos(2 pi u2), z1 = r sin(2 pi u2); z0 fills the next slot, then z1.
// An odd element count discards the trailing z1. Draws happen even when
// stddev is zero so the stream position only depends on the shape.
Matrix rng_normal_fill(Rng& rng, std::size_t rows, std::size_t cols, double stddev);

}  // namespace dyllm
