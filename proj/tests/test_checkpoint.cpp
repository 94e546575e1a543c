// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "lsep/checkpoint.hpp"
#include "lsep/model.hpp"

using namespace lsep;
using namespace lsep::ckpt;

namespace {

// Temporary file path under the build tree; unique per tag so cases can run
// in any order without clobbering each other.
std::string tmp_path(const std::string& tag) {
    return "ckpt_test_" + tag + ".bin";
}

model::ModelConfig ckpt_test_config() {
    model::ModelConfig c;
    c.input_channels = 1;
    c.input_size = 8;
    c.patch_size = 2;
    c.depth = 2;
    c.hidden_dim = 8;
    c.num_heads = 2;
    c.num_classes = 3;
    c.target_depth = 1;
    return c;
}

Checkpoint sample_checkpoint() {
    Checkpoint c;
    c.meta["step"] = 42;
    c.meta["config_digest"] = "deadbeef00000000";
    c.meta["note"] = "unit-test fixture";
    c.add("a.weight", {2, 3}, {1.0, -2.0, 3.5, 0.0, 1e-300, -1e300});
    c.add("a.bias", {3}, {0.125, -0.25, 0.5});
    // ndim-0 scalar entry (e.g. an optimizer step counter stored as a value).
    c.add("opt.t", {}, {7.0});
    return c;
}

// Truncate `path` to its first `keep` bytes in place.
void truncate_file(const std::string& path, size_t keep) {
    std::ifstream is(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() > keep);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(keep));
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise, including non-finite values") {
    Checkpoint c = sample_checkpoint();
    // Non-finite payloads must survive: diagnostic checkpoints exist to carry
    // blown-up state out of a failed run.
    const double qnan = std::numeric_limits<double>::quiet_NaN();
    const double inf = std::numeric_limits<double>::infinity();
    c.add("diag.blown", {4}, {qnan, inf, -inf, 0.0});

    const std::string path = tmp_path("roundtrip");
    save_checkpoint(path, c);
    Checkpoint r = load_checkpoint(path);

    CHECK(r.meta == c.meta);
    REQUIRE(r.arrays.size() == c.arrays.size());
    for (size_t i = 0; i < c.arrays.size(); ++i) {
        CHECK(r.arrays[i].name == c.arrays[i].name);
        CHECK(r.arrays[i].shape == c.arrays[i].shape);
        REQUIRE(r.arrays[i].values.size() == c.arrays[i].values.size());
        for (size_t j = 0; j < c.arrays[i].values.size(); ++j) {
            // Bitwise comparison so NaN payloads count as preserved.
            uint64_t want, got;
            std::memcpy(&want, &c.arrays[i].values[j], 8);
            std::memcpy(&got, &r.arrays[i].values[j], 8);
            CHECK(want == got);
        }
    }
    CHECK(r.digest() == c.digest());

    SUBCASE("scalar array keeps its empty shape and single value") {
        const NamedArray* s = r.find("opt.t");
        REQUIRE(s != nullptr);
        CHECK(s->shape.empty());
        REQUIRE(s->values.size() == 1);
        CHECK(s->values[0] == 7.0);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint add validates names and element counts") {
    Checkpoint c;
    c.add("w", {2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(c.add("w", {1}, {0.0}), ValidationError);          // duplicate
    CHECK_THROWS_AS(c.add("v", {2, 2}, {1, 2, 3}), ValidationError);   // count mismatch
    CHECK(c.find("missing") == nullptr);
    REQUIRE(c.find("w") != nullptr);
    CHECK(c.find("w")->values[3] == 4.0);
}

TEST_CASE("checkpoint digest is stable and sensitive") {
    Checkpoint a = sample_checkpoint();
    Checkpoint b = sample_checkpoint();
    CHECK(a.digest() == b.digest());

    SUBCASE("meta key insertion order does not matter") {
        Checkpoint c;
        c.meta["note"] = "unit-test fixture";  // reversed insertion order
        c.meta["config_digest"] = "deadbeef00000000";
        c.meta["step"] = 42;
        c.add("a.weight", {2, 3}, {1.0, -2.0, 3.5, 0.0, 1e-300, -1e300});
        c.add("a.bias", {3}, {0.125, -0.25, 0.5});
        c.add("opt.t", {}, {7.0});
        CHECK(c.digest() == a.digest());
    }
    SUBCASE("one flipped value changes the digest") {
        b.arrays[0].values[4] = 1e-299;
        CHECK(a.digest() != b.digest());
    }
    SUBCASE("a changed meta field changes the digest") {
        b.meta["step"] = 43;
        CHECK(a.digest() != b.digest());
    }
    SUBCASE("a renamed array changes the digest") {
        b.arrays[1].name = "a.bias2";
        CHECK(a.digest() != b.digest());
    }
    SUBCASE("reshaping without changing values changes the digest") {
        b.arrays[0].shape = {3, 2};
        CHECK(a.digest() != b.digest());
    }
}

TEST_CASE("checkpoint loader rejects malformed files") {
    const std::string path = tmp_path("malformed");

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint("no_such_dir/absent.bin"), ValidationError);
    }
    SUBCASE("wrong magic") {
        std::ofstream os(path, std::ios::binary);
        os << "NOTACKPTxxxxxxxxxxxxxxxx";
        os.close();
        CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    }
    SUBCASE("unsupported version") {
        Checkpoint c = sample_checkpoint();
        save_checkpoint(path, c);
        // Patch the version field (bytes 8..11) to 99.
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(8);
        uint32_t bad = 99;
        f.write(reinterpret_cast<const char*>(&bad), 4);
        f.close();
        CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    }
    SUBCASE("truncated payload") {
        Checkpoint c = sample_checkpoint();
        save_checkpoint(path, c);
        truncate_file(path, 40);
        CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    }
    SUBCASE("truncated inside the last array") {
        Checkpoint c = sample_checkpoint();
        save_checkpoint(path, c);
        std::ifstream is(path, std::ios::binary | std::ios::ate);
        const auto full = static_cast<size_t>(is.tellg());
        is.close();
        truncate_file(path, full - 5);
        CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    }
    std::remove(path.c_str());
}

TEST_CASE("pack and unpack transfer model parameters exactly") {
    const model::ModelConfig cfg = ckpt_test_config();
    model::DitModel src(cfg, 111);
    model::DitModel dst(cfg, 222);
    // Perturb the source away from init so the transfer is observable.
    for (auto& p : src.params())
        for (auto& v : p.tensor.values()) v += 0.001;
    REQUIRE(src.param_digest() != dst.param_digest());

    Checkpoint c;
    c.meta["step"] = 0;
    pack_params(c, "model.", src.params());
    CHECK(c.arrays.size() == src.params().size());

    const std::string path = tmp_path("params");
    save_checkpoint(path, c);
    Checkpoint r = load_checkpoint(path);
    unpack_params(r, "model.", dst.params());
    CHECK(src.param_digest() == dst.param_digest());
    std::remove(path.c_str());

    SUBCASE("missing array is rejected") {
        Checkpoint holes;
        pack_params(holes, "model.", src.params());
        holes.arrays.pop_back();
        model::DitModel m(cfg, 333);
        CHECK_THROWS_AS(unpack_params(holes, "model.", m.params()), ValidationError);
    }
    SUBCASE("shape mismatch is rejected") {
        Checkpoint warped;
        pack_params(warped, "model.", src.params());
        warped.arrays[0].shape.push_back(1);  // same element count, extra axis
        model::DitModel m(cfg, 333);
        CHECK_THROWS_AS(unpack_params(warped, "model.", m.params()), ValidationError);
    }
    SUBCASE("leftover array under the prefix is rejected") {
        Checkpoint extra;
        pack_params(extra, "model.", src.params());
        extra.add("model.stowaway", {1}, {0.0});
        model::DitModel m(cfg, 333);
        CHECK_THROWS_AS(unpack_params(extra, "model.", m.params()), ValidationError);
    }
    SUBCASE("arrays under other prefixes are ignored") {
        Checkpoint mixed;
        pack_params(mixed, "model.", src.params());
        mixed.add("ema.extra", {1}, {0.0});
        model::DitModel m(cfg, 333);
        unpack_params(mixed, "model.", m.params());
        CHECK(m.param_digest() == src.param_digest());
    }
}

TEST_CASE("metadata digest check honours the override flag") {
    Checkpoint c;
    c.meta["config_digest"] = "abc123";

    check_meta_digest(c, "config_digest", "abc123", false);  // match: no throw
    CHECK_THROWS_AS(check_meta_digest(c, "config_digest", "zzz999", false), ValidationError);
    check_meta_digest(c, "config_digest", "zzz999", true);  // override accepts mismatch

    SUBCASE("missing key throws even with the override") {
        CHECK_THROWS_AS(check_meta_digest(c, "absent", "abc123", true), ValidationError);
    }
    SUBCASE("non-string value throws") {
        c.meta["config_digest"] = 5;
        CHECK_THROWS_AS(check_meta_digest(c, "config_digest", "abc123", false), ValidationError);
    }
}
