// SPDX-License-Identifier: Apache-2.0
#include "lsep/checkpoint.hpp"

#include <fstream>
#include <set>

#include "lsep/io.hpp"

namespace lsep::ckpt {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'E', 'P', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
// Sanity cap against corrupt headers allocating absurd buffers.
constexpr int64_t kMaxElements = int64_t(1) << 31;

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

NamedArray& Checkpoint::add(const std::string& name, Shape shape, std::vector<double> values) {
    if (find(name) != nullptr)
        throw ValidationError("Checkpoint: duplicate array '" + name + "'");
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
        throw ValidationError("Checkpoint: array '" + name + "' has " +
                              std::to_string(values.size()) + " values for shape " +
                              shape_str(shape));
    arrays.push_back({name, std::move(shape), std::move(values)});
    return arrays.back();
}

uint64_t Checkpoint::digest() const {
    Fnv1a h;
    const std::string m = meta.dump();
    h.update(m.data(), m.size());
    for (const auto& a : arrays) {
        h.update(a.name.data(), a.name.size());
        h.update_pod(static_cast<uint64_t>(a.shape.size()));
        for (int64_t d : a.shape) h.update_pod(d);
        h.update(a.values.data(), a.values.size() * sizeof(double));
    }
    return h.digest();
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("save_checkpoint: cannot open '" + path + "'");
    io::write_magic(os, kMagic);
    io::write_u32(os, kVersion);
    io::write_str(os, c.meta.dump());
    io::write_u64(os, c.arrays.size());
    for (const auto& a : c.arrays) {
        io::write_str(os, a.name);
        io::write_u64(os, a.shape.size());
        for (int64_t d : a.shape) io::write_i64(os, d);
        io::write_f64(os, a.values.data(), a.values.size());
    }
    if (!os) throw ValidationError("save_checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("load_checkpoint: cannot open '" + path + "'");
    io::expect_magic(is, kMagic, "load_checkpoint");
    const uint32_t version = io::read_u32(is, "load_checkpoint");
    if (version != kVersion)
        throw ValidationError("load_checkpoint: unsupported version " + std::to_string(version));
    Checkpoint c;
    const std::string meta_text = io::read_str(is, "load_checkpoint", uint64_t(1) << 26);
    c.meta = nlohmann::json::parse(meta_text, nullptr, false);
    if (c.meta.is_discarded())
        throw ValidationError("load_checkpoint: metadata is not valid JSON");
    const uint64_t count = io::read_u64(is, "load_checkpoint");
    for (uint64_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = io::read_str(is, "load_checkpoint");
        const uint64_t ndim = io::read_u64(is, "load_checkpoint");
        if (ndim > 8)
            throw ValidationError("load_checkpoint: array '" + a.name + "' has " +
                                  std::to_string(ndim) + " dimensions");
        a.shape.resize(ndim);
        for (uint64_t d = 0; d < ndim; ++d) {
            a.shape[d] = io::read_i64(is, "load_checkpoint");
            if (a.shape[d] < 0)
                throw ValidationError("load_checkpoint: negative dimension in '" + a.name + "'");
        }
        const int64_t n = numel_of(a.shape);
        if (n < 0 || n > kMaxElements)
            throw ValidationError("load_checkpoint: array '" + a.name + "' element count " +
                                  std::to_string(n) + " out of range");
        a.values.resize(static_cast<size_t>(n));
        io::read_f64(is, a.values.data(), a.values.size(), "load_checkpoint");
        if (c.find(a.name) != nullptr)
            throw ValidationError("load_checkpoint: duplicate array '" + a.name + "'");
        c.arrays.push_back(std::move(a));
    }
    return c;
}

void pack_params(Checkpoint& c, const std::string& prefix,
                 const std::vector<model::NamedParam>& params) {
    for (const auto& p : params)
        c.add(prefix + p.name, p.tensor.shape(), p.tensor.values());
}

void unpack_params(const Checkpoint& c, const std::string& prefix,
                   std::vector<model::NamedParam>& params) {
    std::set<std::string> used;
    for (auto& p : params) {
        const std::string key = prefix + p.name;
        const NamedArray* a = c.find(key);
        if (a == nullptr)
            throw ValidationError("unpack_params: checkpoint has no array '" + key + "'");
        if (a->shape != p.tensor.shape())
            throw ValidationError("unpack_params: '" + key + "' has shape " +
                                  shape_str(a->shape) + ", parameter expects " +
                                  shape_str(p.tensor.shape()));
        p.tensor.values() = a->values;
        used.insert(key);
    }
    for (const auto& a : c.arrays)
        if (a.name.rfind(prefix, 0) == 0 && used.count(a.name) == 0)
            throw ValidationError("unpack_params: checkpoint array '" + a.name +
                                  "' matches no parameter");
}

void check_meta_digest(const Checkpoint& c, const std::string& key, const std::string& expected,
                       bool allow_mismatch) {
    if (!c.meta.contains(key) || !c.meta[key].is_string())
        throw ValidationError("check_meta_digest: metadata lacks string field '" + key + "'");
    const std::string got = c.meta[key].get<std::string>();
    if (got != expected && !allow_mismatch)
        throw ValidationError("check_meta_digest: '" + key + "' is " + got + ", expected " +
                              expected + " (pass the override flag to load anyway)");
}

}  // namespace lsep::ckpt
