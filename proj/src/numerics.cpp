#include "dyllm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dyllm/error.hpp"
#include "dyllm/kernels.hpp"

namespace dyllm {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
    }
    Matrix c(a.rows(), b.cols());
    if (c.empty()) return c;
    kernels::active().gemm(a.rows(), b.cols(), a.cols(), a.data(), a.cols(), b.data(), b.cols(),
                           c.data(), c.cols());
    return c;
}

void row_softmax_inplace(Matrix& s, double scale) {
    const auto softmax = kernels::active().softmax;
    for (std::size_t r = 0; r < s.rows(); ++r) softmax(s.row(r).data(), s.cols(), scale);
}

Matrix row_softmax(const Matrix& s, double scale) {
    Matrix out = s;
    row_softmax_inplace(out, scale);
    return out;
}

Matrix rms_norm(const Matrix& x, std::span<const double> gain, double epsilon) {
    if (gain.size() != x.cols()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "rms_norm: gain length " + std::to_string(gain.size()) +
                        " does not match width of " + x.shape_string());
    }
    Matrix y(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double ss = 0.0;
        for (double v : in) ss += v * v;
        const double inv_rms = 1.0 / std::sqrt(ss / d + epsilon);
        auto out = y.row(r);
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * inv_rms * gain[i];
    }
    return y;
}

Matrix rope_rotate(const Matrix& x, std::span<const std::size_t> positions, double theta_base,
                   std::size_t d_head) {
    if (d_head == 0 || d_head % 2 != 0) {
        throw Error(ErrorCode::kInvalidArgument,
                    "rope_rotate: head width must be even and nonzero, got " +
                        std::to_string(d_head));
    }
    if (x.cols() % d_head != 0) {
        throw Error(ErrorCode::kShapeMismatch, "rope_rotate: width of " + x.shape_string() +
                                                   " is not a multiple of " +
                                                   std::to_string(d_head));
    }
    if (positions.size() != x.rows()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "rope_rotate: " + std::to_string(positions.size()) + " positions for " +
                        x.shape_string());
    }
    const std::size_t half = d_head / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t k = 0; k < half; ++k) {
        inv_freq[k] = std::pow(theta_base, -2.0 * static_cast<double>(k) /
                                               static_cast<double>(d_head));
    }
    Matrix y(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double pos = static_cast<double>(positions[r]);
        const auto in = x.row(r);
        auto out = y.row(r);
        for (std::size_t k = 0; k < half; ++k) {
            const double angle = pos * inv_freq[k];
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            for (std::size_t h = 0; h < x.cols(); h += d_head) {
                const double x0 = in[h + 2 * k];
                const double x1 = in[h + 2 * k + 1];
                out[h + 2 * k] = x0 * c - x1 * s;
                out[h + 2 * k + 1] = x0 * s + x1 * c;
            }
        }
    }
    return y;
}

std::vector<double> cosine_similarity_rows(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "cosine_similarity_rows: " + a.shape_string() + " vs " + b.shape_string());
    }
    constexpr double kZeroNorm = 1e-12;
    const auto& k = kernels::active();
    std::vector<double> out(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* x = a.row(r).data();
        const double* y = b.row(r).data();
        const double na = std::sqrt(k.dot(x, x, a.cols()));
        const double nb = std::sqrt(k.dot(y, y, a.cols()));
        const bool za = na < kZeroNorm;
        const bool zb = nb < kZeroNorm;
        if (za && zb) {
            out[r] = 1.0;
        } else if (za || zb) {
            out[r] = 0.0;
        } else {
            out[r] = k.dot(x, y, a.cols()) / (na * nb);
        }
    }
    return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

std::vector<double> singular_values(const Matrix& w) {
    if (w.rows() != w.cols()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "singular_values: expected a square matrix, got " + w.shape_string());
    }
    const std::size_t n = w.rows();
    // Orthogonalise the rows of W; the singular values of W and W^T coincide
    // and rows are contiguous.
    Matrix u = w;
    constexpr double kTolerance = 1e-12;
    constexpr int kMaxSweeps = 100;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                auto ui = u.row(i);
                auto uj = u.row(j);
                double alpha = 0.0;
                double beta = 0.0;
                double gamma = 0.0;
                for (std::size_t p = 0; p < n; ++p) {
                    alpha += ui[p] * ui[p];
                    beta += uj[p] * uj[p];
                    gamma += ui[p] * uj[p];
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
                off = std::max(off, rel);
                if (rel < kTolerance) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t p = 0; p < n; ++p) {
                    const double a = ui[p];
                    const double b = uj[p];
                    ui[p] = c * a - s * b;
                    uj[p] = s * a + c * b;
                }
            }
        }
        if (off < kTolerance) break;
    }
    std::vector<double> sigma(n);
    for (std::size_t i = 0; i < n; ++i) {
        double ss = 0.0;
        for (double v : u.row(i)) ss += v * v;
        sigma[i] = std::sqrt(ss);
    }
    std::sort(sigma.begin(), sigma.end(), std::greater<>());
    return sigma;
}

double condition_number(const Matrix& w) {
    if (w.rows() != w.cols()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "condition_number: expected a square matrix, got " + w.shape_string());
    }
    if (w.rows() == 0) return 1.0;
    const auto sigma = singular_values(w);
    const double smin = sigma.back();
    if (smin < 1e-14) return std::numeric_limits<double>::infinity();
    return sigma.front() / smin;
}

std::uint64_t Rng::next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::next_open_unit() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double Rng::next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

Matrix rng_normal_fill(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    if (!(stddev >= 0.0)) {
        throw Error(ErrorCode::kInvalidArgument, "rng_normal_fill: stddev must be >= 0");
    }
    Matrix m(rows, cols);
    const std::size_t n = m.size();
    double* out = m.data();
    for (std::size_t i = 0; i < n; i += 2) {
        const double u1 = rng.next_open_unit();
        const double u2 = rng.next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        out[i] = stddev * r * std::cos(theta);
        if (i + 1 < n) out[i + 1] = stddev * r * std::sin(theta);
    }
    return m;
}

}  // namespace dyllm
