// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsep/common.hpp"
#include "lsep/model.hpp"

namespace lsep::ckpt {

// Self-describing checkpoint container.
//
// On-disk layout (little-endian):
//   magic   "LSEPCKPT" (8 bytes)
//   version u32 (currently 1)
//   meta    u64 length + UTF-8 JSON text (sorted keys, canonical)
//   count   u64 number of arrays, then per array:
//     name   u64 length + bytes
//     ndim   u64, dims i64[ndim]
//     values f64[prod(dims)] raw bits (non-finite values round-trip,
//            so diagnostic checkpoints can carry a blown-up state)
//
// The meta record carries at least: step, the model config, the probe
// policy, and the digest of the experiment config that produced the run
// (key "config_digest"). Loading against a different config is rejected
// unless explicitly overridden (check_meta_digest).

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
    NamedArray& add(const std::string& name, Shape shape, std::vector<double> values);
    // FNV-1a over the canonical meta text and every array's name, shape
    // and raw value bits, in order.
    uint64_t digest() const;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Copies every parameter into the checkpoint as prefix + param name.
void pack_params(Checkpoint& c, const std::string& prefix,
                 const std::vector<model::NamedParam>& params);

// Restores parameter values from prefix + param name. Every parameter must
// be present with a matching shape, and every checkpoint array under the
// prefix must correspond to a parameter: leftovers mean the architectures
// disagree, so they are rejected.
void unpack_params(const Checkpoint& c, const std::string& prefix,
                   std::vector<model::NamedParam>& params);

// Verifies meta[key] (a hex digest string) equals `expected`. A mismatch
// throws ValidationError unless allow_mismatch is set.
void check_meta_digest(const Checkpoint& c, const std::string& key, const std::string& expected,
                       bool allow_mismatch);

}  // namespace lsep::ckpt
