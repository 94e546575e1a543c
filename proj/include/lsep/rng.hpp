// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace lsep {

// Named, seedable rng streams with counter-based per-step substreams.
//
// Each stream is identified by (master_seed, name). For step/record counter
// `c` the stream hands out an independent mt19937_64 engine; a run can be
// resumed at any step without replaying earlier draws, and changing one
// stream's seed cannot perturb any other stream.
class RngStream {
public:
    RngStream() = default;
    RngStream(uint64_t master_seed, std::string_view name);

    uint64_t stream_seed() const { return seed_; }

    // Engine for substream `counter` (typically the training step or a
    // sample index). Engines from distinct counters are independent.
    std::mt19937_64 at(uint64_t counter) const;

private:
    uint64_t seed_ = 0;
};

// splitmix64; used to whiten seeds derived from hashes.
uint64_t mix64(uint64_t x);

// Uniform double in [0,1).
double uniform01(std::mt19937_64& eng);

// Standard normal via Box-Muller, one value per call, no cached state
// (keeps engines trivially serializable as a counter).
double gaussian(std::mt19937_64& eng);

void gaussian_fill(std::mt19937_64& eng, std::span<double> out);

// Uniform integer in [lo, hi] inclusive.
int64_t uniform_int(std::mt19937_64& eng, int64_t lo, int64_t hi);

}  // namespace lsep
