// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsep {

// Raised when an operation's preconditions are violated (shape mismatch,
// out-of-range time, bad label, ...).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a computation produces non-finite values. `layer_index` is -1
// when the failure is not tied to a transformer block.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg, int layer_index = -1)
        : std::runtime_error(msg), layer_index(layer_index) {}
    int layer_index;
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline bool all_finite(const double* p, int64_t n) {
    for (int64_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

// FNV-1a 64-bit. Used for config/checkpoint digests and for deriving named
// rng stream seeds. Not cryptographic; digests here only have to detect
// accidental mismatches, not adversaries.
struct Fnv1a {
    uint64_t h = 0xcbf29ce484222325ull;
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    template <typename T>
    void update_pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        update(&v, sizeof(v));
    }
    uint64_t digest() const { return h; }
};

std::string hex64(uint64_t v);

}  // namespace lsep
