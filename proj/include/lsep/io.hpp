// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsep/common.hpp"

namespace lsep::io {

// Little-endian binary primitives shared by the container formats
// (checkpoints, feature files, datasets). All readers throw
// ValidationError on truncated or malformed input.

void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_i64(std::ostream& os, int64_t v);
void write_f64(std::ostream& os, const double* p, size_t n);
void write_f32(std::ostream& os, const float* p, size_t n);
// u64 length prefix + raw bytes.
void write_str(std::ostream& os, const std::string& s);

uint32_t read_u32(std::istream& is, const char* what);
uint64_t read_u64(std::istream& is, const char* what);
int64_t read_i64(std::istream& is, const char* what);
void read_f64(std::istream& is, double* p, size_t n, const char* what);
void read_f32(std::istream& is, float* p, size_t n, const char* what);
std::string read_str(std::istream& is, const char* what, uint64_t max_len = 1u << 20);

// Fixed-width magic tag at the current position.
void write_magic(std::ostream& os, const char magic[8]);
void expect_magic(std::istream& is, const char magic[8], const char* what);

}  // namespace lsep::io
