// SPDX-License-Identifier: Apache-2.0
#include "lsep/io.hpp"

#include <cstring>
#include <istream>
#include <ostream>

namespace lsep::io {

namespace {

void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw ValidationError(std::string(what) + ": truncated input");
}

}  // namespace

void write_u32(std::ostream& os, uint32_t v) { write_bytes(os, &v, sizeof v); }
void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, sizeof v); }
void write_i64(std::ostream& os, int64_t v) { write_bytes(os, &v, sizeof v); }
void write_f64(std::ostream& os, const double* p, size_t n) { write_bytes(os, p, n * sizeof *p); }
void write_f32(std::ostream& os, const float* p, size_t n) { write_bytes(os, p, n * sizeof *p); }

void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    write_bytes(os, s.data(), s.size());
}

uint32_t read_u32(std::istream& is, const char* what) {
    uint32_t v;
    read_bytes(is, &v, sizeof v, what);
    return v;
}

uint64_t read_u64(std::istream& is, const char* what) {
    uint64_t v;
    read_bytes(is, &v, sizeof v, what);
    return v;
}

int64_t read_i64(std::istream& is, const char* what) {
    int64_t v;
    read_bytes(is, &v, sizeof v, what);
    return v;
}

void read_f64(std::istream& is, double* p, size_t n, const char* what) {
    read_bytes(is, p, n * sizeof *p, what);
}

void read_f32(std::istream& is, float* p, size_t n, const char* what) {
    read_bytes(is, p, n * sizeof *p, what);
}

std::string read_str(std::istream& is, const char* what, uint64_t max_len) {
    const uint64_t len = read_u64(is, what);
    if (len > max_len)
        throw ValidationError(std::string(what) + ": string length " + std::to_string(len) +
                              " exceeds limit");
    std::string s(len, '\0');
    if (len > 0) read_bytes(is, s.data(), len, what);
    return s;
}

void write_magic(std::ostream& os, const char magic[8]) { write_bytes(os, magic, 8); }

void expect_magic(std::istream& is, const char magic[8], const char* what) {
    char got[8];
    read_bytes(is, got, 8, what);
    if (std::memcmp(got, magic, 8) != 0)
        throw ValidationError(std::string(what) + ": bad magic tag");
}

}  // namespace lsep::io
