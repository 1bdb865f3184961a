#pragma once

// IEEE 754 binary16 emulation with round-to-nearest-even on every elementary
// operation. Storage is the raw bit pattern; arithmetic routes through a wider
// format and rounds back once, which is exact for single operations because the
// intermediate carries more than twice the target precision.

#include <bit>
#include <cstdint>
#include <cmath>
#include <limits>

#if defined(__F16C__)
#include <immintrin.h>
#endif

namespace bpxnn {

namespace detail {

// Direct binary64 -> binary16 rounding (round-to-nearest, ties to even).
inline std::uint16_t f64_to_half_bits_soft(double x) noexcept {
    const std::uint64_t b = std::bit_cast<std::uint64_t>(x);
    const auto sign = static_cast<std::uint16_t>((b >> 48) & 0x8000u);
    const int biased = static_cast<int>((b >> 52) & 0x7FFu);
    const std::uint64_t man = b & 0x000FFFFFFFFFFFFFull;

    if (biased == 0x7FF) {  // inf / nan
        return man ? static_cast<std::uint16_t>(sign | 0x7E00u)
                   : static_cast<std::uint16_t>(sign | 0x7C00u);
    }
    if (biased == 0) return sign;  // zero or double-subnormal (far below half range)

    const int e = biased - 1023;
    if (e >= 16) return static_cast<std::uint16_t>(sign | 0x7C00u);

    const std::uint64_t sig = man | (1ull << 52);  // 53-bit significand
    int shift;
    std::uint32_t out_exp;
    if (e >= -14) {
        shift = 42;  // keep 11 significand bits
        out_exp = static_cast<std::uint32_t>(e + 15);
    } else {
        shift = 42 + (-14 - e);  // subnormal result, unit 2^-24
        out_exp = 0;
        if (shift >= 54) return sign;  // below half the smallest subnormal
    }

    std::uint64_t kept = sig >> shift;
    const std::uint64_t rem = sig & ((1ull << shift) - 1);
    const std::uint64_t half_ulp = 1ull << (shift - 1);
    if (rem > half_ulp || (rem == half_ulp && (kept & 1))) ++kept;

    std::uint32_t res;
    if (out_exp == 0) {
        // Carry out of the subnormal range lands on exponent 1, mantissa 0,
        // which is exactly kept == 2^10.
        res = static_cast<std::uint32_t>(kept);
    } else {
        res = (out_exp << 10) + static_cast<std::uint32_t>(kept) - (1u << 10);
        if (res >= 0x7C00u) res = 0x7C00u;  // overflow to inf
    }
    return static_cast<std::uint16_t>(sign | res);
}

inline float half_bits_to_f32_soft(std::uint16_t h) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t man = h & 0x3FFu;

    std::uint32_t out;
    if (exp == 0) {
        if (man == 0) {
            out = sign;
        } else {
            // normalize subnormal
            int shift = 0;
            while ((man & 0x400u) == 0) {
                man <<= 1;
                ++shift;
            }
            man &= 0x3FFu;
            out = sign | ((127 - 15 - shift) << 23) | (man << 13);
        }
    } else if (exp == 31) {
        out = sign | 0x7F800000u | (man ? ((man << 13) | 0x400000u) : 0u);
    } else {
        out = sign | ((exp + 127 - 15) << 23) | (man << 13);
    }
    return std::bit_cast<float>(out);
}

inline std::uint16_t f64_to_half_bits(double x) noexcept { return f64_to_half_bits_soft(x); }

inline float half_bits_to_f32(std::uint16_t h) noexcept {
#if defined(__F16C__)
    return _mm_cvtss_f32(_mm_cvtph_ps(_mm_cvtsi32_si128(h)));
#else
    return half_bits_to_f32_soft(h);
#endif
}

#if defined(__F16C__)
inline std::uint16_t f32_to_half_bits_hw(float x) noexcept {
    return static_cast<std::uint16_t>(
        _mm_cvtsi128_si32(_mm_cvtps_ph(_mm_set_ss(x), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC)));
}
#endif

}  // namespace detail

// binary16 value type. Every arithmetic operator performs exactly one
// rounding into binary16. The float-intermediate fast path is correctly
// rounded since binary32 has >= 2*11+2 significand bits (double-rounding
// theorem), and agrees bit-for-bit with the binary64 software path.
class half {
public:
    half() = default;
    explicit half(double x) noexcept : bits_(detail::f64_to_half_bits(x)) {}

    static half from_bits(std::uint16_t b) noexcept {
        half h;
        h.bits_ = b;
        return h;
    }
    std::uint16_t bits() const noexcept { return bits_; }

    explicit operator float() const noexcept { return detail::half_bits_to_f32(bits_); }
    explicit operator double() const noexcept { return static_cast<double>(detail::half_bits_to_f32(bits_)); }

#if defined(__F16C__)
    friend half binop_add(half a, half b) noexcept { return from_f32(float(a) + float(b)); }
    friend half binop_sub(half a, half b) noexcept { return from_f32(float(a) - float(b)); }
    friend half binop_mul(half a, half b) noexcept { return from_f32(float(a) * float(b)); }
    friend half binop_div(half a, half b) noexcept { return from_f32(float(a) / float(b)); }
#else
    friend half binop_add(half a, half b) noexcept { return half(double(a) + double(b)); }
    friend half binop_sub(half a, half b) noexcept { return half(double(a) - double(b)); }
    friend half binop_mul(half a, half b) noexcept { return half(double(a) * double(b)); }
    friend half binop_div(half a, half b) noexcept { return half(double(a) / double(b)); }
#endif

    friend half operator+(half a, half b) noexcept { return binop_add(a, b); }
    friend half operator-(half a, half b) noexcept { return binop_sub(a, b); }
    friend half operator*(half a, half b) noexcept { return binop_mul(a, b); }
    friend half operator/(half a, half b) noexcept { return binop_div(a, b); }
    friend half operator-(half a) noexcept { return from_bits(static_cast<std::uint16_t>(a.bits_ ^ 0x8000u)); }

    half& operator+=(half o) noexcept { return *this = *this + o; }
    half& operator-=(half o) noexcept { return *this = *this - o; }
    half& operator*=(half o) noexcept { return *this = *this * o; }
    half& operator/=(half o) noexcept { return *this = *this / o; }

    friend bool operator==(half a, half b) noexcept { return float(a) == float(b); }
    friend bool operator!=(half a, half b) noexcept { return float(a) != float(b); }
    friend bool operator<(half a, half b) noexcept { return float(a) < float(b); }
    friend bool operator<=(half a, half b) noexcept { return float(a) <= float(b); }
    friend bool operator>(half a, half b) noexcept { return float(a) > float(b); }
    friend bool operator>=(half a, half b) noexcept { return float(a) >= float(b); }

private:
#if defined(__F16C__)
    static half from_f32(float x) noexcept { return from_bits(detail::f32_to_half_bits_hw(x)); }
#endif

    std::uint16_t bits_ = 0;
};

inline half sqrt(half x) noexcept { return half(std::sqrt(double(x))); }
inline half abs(half x) noexcept { return half::from_bits(static_cast<std::uint16_t>(x.bits() & 0x7FFFu)); }
inline bool isfinite(half x) noexcept { return (x.bits() & 0x7C00u) != 0x7C00u; }
inline bool isnan(half x) noexcept { return (x.bits() & 0x7C00u) == 0x7C00u && (x.bits() & 0x3FFu) != 0; }

}  // namespace bpxnn
