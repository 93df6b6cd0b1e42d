#pragma once

// Shared constants for the vectorised exp used by the SIMD softmax kernels:
// x = n ln2 + r with |r| <= ln2 / 2, exp(r) from a degree-13 Taylor
// polynomial, then scaled by 2^n through the exponent bits.

#include <cmath>
#include <cstdint>
#include <cstring>

namespace dyllm::kernels::detail {

inline constexpr double kLog2e = 1.4426950408889634;
inline constexpr double kLn2Hi = 6.93147180369123816490e-01;
inline constexpr double kLn2Lo = 1.90821492927058770002e-10;
// Below this exp() is subnormal; the kernels flush to zero.
inline constexpr double kExpMin = -708.0;
inline constexpr double kExpMax = 709.0;
// 2^52 + 1023: adding a small integer-valued double leaves n + 1023 in the
// low mantissa bits.
inline constexpr double kExpBiasMagic = 4503599627371519.0;

inline constexpr double kInvFact[14] = {
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
    1.0 / 479001600.0,
    1.0 / 6227020800.0,
};

// Scalar twin of the vector path, used for loop tails so that every element
// of a row goes through identical arithmetic.
inline double exp_poly(double x) {
    if (x < kExpMin) return 0.0;
    if (x > kExpMax) x = kExpMax;
    const double n = std::nearbyint(x * kLog2e);
    double r = std::fma(-n, kLn2Hi, x);
    r = std::fma(-n, kLn2Lo, r);
    double p = kInvFact[13];
    for (int i = 12; i >= 0; --i) p = std::fma(p, r, kInvFact[i]);
    const double biased = n + kExpBiasMagic;
    std::uint64_t bits;
    std::memcpy(&bits, &biased, sizeof bits);
    bits <<= 52;
    double scale;
    std::memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}

}  // namespace dyllm::kernels::detail
