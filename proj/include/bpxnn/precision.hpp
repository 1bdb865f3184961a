#pragma once

// Scalar-precision abstraction over binary16 / binary32 / binary64. Numerical
// kernels are templated on the working scalar T; this header provides the
// runtime kind tag, per-kind constants, and the rounding / single-operation
// primitives used for precision emulation.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bpxnn/half.hpp"

namespace bpxnn {

enum class ScalarKind { binary16, binary32, binary64 };

inline std::string_view kind_name(ScalarKind k) {
    switch (k) {
        case ScalarKind::binary16: return "f16";
        case ScalarKind::binary32: return "f32";
        case ScalarKind::binary64: return "f64";
    }
    return "?";
}

inline ScalarKind parse_kind(std::string_view s) {
    if (s == "f16" || s == "binary16" || s == "half") return ScalarKind::binary16;
    if (s == "f32" || s == "binary32" || s == "float") return ScalarKind::binary32;
    if (s == "f64" || s == "binary64" || s == "double") return ScalarKind::binary64;
    throw std::invalid_argument("unknown precision: " + std::string(s));
}

template <class T>
struct scalar_traits;

template <>
struct scalar_traits<half> {
    static constexpr ScalarKind kind = ScalarKind::binary16;
    static constexpr double eps = 0x1p-10;
    static constexpr double max_finite = 65504.0;
    static constexpr double min_subnormal = 0x1p-24;
    static constexpr const char* name = "f16";
};

template <>
struct scalar_traits<float> {
    static constexpr ScalarKind kind = ScalarKind::binary32;
    static constexpr double eps = 0x1p-23;
    static constexpr double max_finite = 0x1.fffffep127;
    static constexpr double min_subnormal = 0x1p-149;
    static constexpr const char* name = "f32";
};

template <>
struct scalar_traits<double> {
    static constexpr ScalarKind kind = ScalarKind::binary64;
    static constexpr double eps = 0x1p-52;
    static constexpr double max_finite = std::numeric_limits<double>::max();
    static constexpr double min_subnormal = 0x1p-1074;
    static constexpr const char* name = "f64";
};

template <class T>
inline double to_f64(T x) {
    return static_cast<double>(x);
}

template <class T>
inline T from_f64(double x) {
    return static_cast<T>(x);
}
template <>
inline half from_f64<half>(double x) {
    return half(x);
}

template <class T>
inline std::vector<T> round_vector(const std::vector<double>& v) {
    std::vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = from_f64<T>(v[i]);
    return out;
}

template <class T>
inline std::vector<double> widen_vector(const std::vector<T>& v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = to_f64(v[i]);
    return out;
}

// IEEE round-to-nearest-even of a binary64 value into the target format,
// returned as the (exactly representable) binary64 value.
inline double round_to(ScalarKind kind, double x) {
    switch (kind) {
        case ScalarKind::binary16: return double(half(x));
        case ScalarKind::binary32: return static_cast<double>(static_cast<float>(x));
        case ScalarKind::binary64: return x;
    }
    return x;
}

// One correctly rounded elementary operation in the target format.
// Operands are expected to be representable in the format already; they are
// canonicalized by rounding, which is then a no-op.
inline double arith(ScalarKind kind, char op, double a, double b) {
    a = round_to(kind, a);
    b = round_to(kind, b);
    double exact;
    switch (op) {
        case '+': exact = a + b; break;
        case '-': exact = a - b; break;
        case '*': exact = a * b; break;
        case '/': exact = a / b; break;
        default: throw std::invalid_argument("arith: unknown op");
    }
    if (kind == ScalarKind::binary64) return exact;
    // binary64 carries more than twice the precision of both narrower targets,
    // so rounding its result once yields the correctly rounded result.
    if (kind == ScalarKind::binary32) return static_cast<double>(static_cast<float>(exact));
    return double(half(exact));
}

inline bool is_finite_value(double x) { return std::isfinite(x); }
inline bool is_finite_value(float x) { return std::isfinite(x); }
inline bool is_finite_value(half x) { return isfinite(x); }

// Fixed-shape adjacent-pair tree reduction in the working precision (plain
// summation, reordered; nothing compensated). The shape depends only on the
// length, so results are bit-for-bit reproducible. Consumes the buffer.
template <class T>
T pairwise_sum(std::vector<T>& buf) {
    std::size_t n = buf.size();
    if (n == 0) return T(0.0);
    while (n > 1) {
        const std::size_t m = n / 2;
        for (std::size_t i = 0; i < m; ++i) buf[i] = buf[2 * i] + buf[2 * i + 1];
        if (n & 1) {
            buf[m] = buf[n - 1];
            n = m + 1;
        } else {
            n = m;
        }
    }
    return buf[0];
}

}  // namespace bpxnn
