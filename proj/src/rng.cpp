// SPDX-License-Identifier: Apache-2.0
#include "lsep/rng.hpp"

#include <cmath>
#include <numbers>

#include "lsep/common.hpp"

namespace lsep {

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

RngStream::RngStream(uint64_t master_seed, std::string_view name) {
    Fnv1a f;
    f.update(name.data(), name.size());
    seed_ = mix64(master_seed ^ f.digest());
}

std::mt19937_64 RngStream::at(uint64_t counter) const {
    return std::mt19937_64(mix64(seed_ ^ mix64(counter + 1)));
}

double uniform01(std::mt19937_64& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

double gaussian(std::mt19937_64& eng) {
    // u1 in (0,1], u2 in [0,1)
    double u1 = (static_cast<double>(eng() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(eng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void gaussian_fill(std::mt19937_64& eng, std::span<double> out) {
    for (double& v : out) v = gaussian(eng);
}

int64_t uniform_int(std::mt19937_64& eng, int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling keeps the distribution exactly uniform.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r;
    do {
        r = eng();
    } while (r >= limit);
    return lo + static_cast<int64_t>(r % span);
}

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace lsep
