// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "lsep/flow.hpp"
#include "lsep/model.hpp"
#include "lsep/rng.hpp"

using namespace lsep;
using namespace lsep::model;

namespace {

ModelConfig tiny_test_config() {
    ModelConfig c;
    c.input_channels = 1;
    c.input_size = 8;
    c.patch_size = 2;
    c.depth = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.num_classes = 3;
    c.target_depth = 1;
    return c;
}

std::vector<double> randn(size_t n, uint64_t salt, double scale = 1.0) {
    auto eng = RngStream(8800, "model-tests").at(salt);
    std::vector<double> v(n);
    for (double& x : v) x = scale * gaussian(eng);
    return v;
}

// Fills every parameter (including the zero-initialized modulations) with
// small noise so conditioning actually influences the blocks.
void randomize_all(DitModel& m, uint64_t salt, double scale = 0.15) {
    auto eng = RngStream(8801, "model-randomize").at(salt);
    for (auto& p : m.params())
        for (double& v : p.tensor.values()) v = scale * gaussian(eng);
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(tiny_test_config().validate());
    auto bad = tiny_test_config();
    bad.patch_size = 3;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = tiny_test_config();
    bad.target_depth = 2;  // must stay below depth
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = tiny_test_config();
    bad.num_heads = 5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(arch_preset("huge"), ValidationError);
}

TEST_CASE("architecture presets") {
    auto tiny = arch_preset("tiny");
    CHECK(tiny.depth == 6);
    CHECK(tiny.hidden_dim == 192);
    CHECK(tiny.tokens() == 64);
    auto xl = arch_preset("XL");
    CHECK(xl.depth == 28);
    CHECK(xl.hidden_dim == 1152);
    CHECK(xl.num_heads == 16);
    CHECK(xl.patch_size == 2);
    CHECK(xl.target_depth == 8);
    CHECK(arch_preset("B").target_depth == 4);
    CHECK(arch_preset("L").target_depth == 7);
}

TEST_CASE("positional and time tables") {
    auto pos = sincos_pos_embed_2d(4, 16);
    CHECK(pos.size() == 16u * 16u);
    for (double v : pos) CHECK(std::abs(v) <= 1.0);
    // distinct grid cells get distinct rows
    bool any_diff = false;
    for (int c = 0; c < 16; ++c) any_diff |= pos[0 * 16 + c] != pos[5 * 16 + c];
    CHECK(any_diff);

    auto te = time_embedding({0.0, 0.5}, 8);
    // t=0: cos block is 1, sin block is 0
    for (int i = 0; i < 4; ++i) {
        CHECK(te[i] == 1.0);
        CHECK(te[4 + i] == 0.0);
    }
    bool t_diff = false;
    for (int i = 0; i < 8; ++i) t_diff |= te[i] != te[8 + i];
    CHECK(t_diff);
}

TEST_CASE("embed_tokens produces the expected token grid") {
    DitModel m(arch_preset("tiny"), 1);
    const int64_t B = 2;
    nn::Tensor x = nn::Tensor::from({B, 3, 32, 32}, randn(B * 3 * 32 * 32, 1));
    nn::Tensor tok = m.embed_tokens(x);
    CHECK(tok.shape() == Shape({B * 64, 192}));
}

TEST_CASE("conditioning vectors distinguish labels, including the null label") {
    DitModel m(tiny_test_config(), 2);
    nn::Tensor c =
        m.condition_vector({0.5, 0.5}, {0, static_cast<int>(m.config().null_label_id())});
    const int64_t D = m.config().hidden_dim;
    bool diff = false;
    for (int64_t i = 0; i < D; ++i) diff |= c.data()[i] != c.data()[D + i];
    CHECK(diff);
    CHECK_THROWS_AS(m.condition_vector({0.5}, {static_cast<int>(m.config().num_classes) + 1}),
                    ValidationError);
    CHECK_THROWS_AS(m.condition_vector({0.5}, {-1}), ValidationError);
}

TEST_CASE("identical samples in one batch produce identical outputs") {
    DitModel m(tiny_test_config(), 3);
    randomize_all(m, 1);
    auto xdata = randn(64, 2);
    std::vector<double> two(128);
    std::copy(xdata.begin(), xdata.end(), two.begin());
    std::copy(xdata.begin(), xdata.end(), two.begin() + 64);
    nn::Tensor x = nn::Tensor::from({2, 1, 8, 8}, two);
    nn::Tensor v = m.forward_velocity(x, {0.3, 0.3}, {1, 1});
    for (int i = 0; i < 64; ++i) CHECK(v.data()[i] == v.data()[64 + i]);
}

TEST_CASE("fresh init: conditioning cannot reach the blocks, velocity head is zero") {
    DitModel m(tiny_test_config(), 4);
    nn::Tensor x = nn::Tensor::from({1, 1, 8, 8}, randn(64, 3));
    nn::Tensor ha = m.forward_to_depth(x, {0.4}, {0}, 1);
    nn::Tensor hb = m.forward_to_depth(x, {0.4}, {2}, 1);
    CHECK(ha.values() == hb.values());  // adaLN-zero: label independent at step 0

    nn::Tensor v = m.forward_velocity(x, {0.4}, {0});
    for (int64_t i = 0; i < v.numel(); ++i) CHECK(v.data()[i] == 0.0);
}

TEST_CASE("after randomization, labels modulate hidden features") {
    DitModel m(tiny_test_config(), 5);
    randomize_all(m, 2);
    nn::Tensor x = nn::Tensor::from({1, 1, 8, 8}, randn(64, 4));
    nn::Tensor ha = m.forward_to_depth(x, {0.4}, {0}, 1);
    nn::Tensor hb = m.forward_to_depth(x, {0.4}, {2}, 1);
    double max_diff = 0.0;
    for (int64_t i = 0; i < ha.numel(); ++i)
        max_diff = std::max(max_diff, std::abs(ha.data()[i] - hb.data()[i]));
    CHECK(max_diff > 1e-8);
}

TEST_CASE("prefix consistency: truncated pass equals captured full-pass activations") {
    DitModel m(tiny_test_config(), 6);
    randomize_all(m, 3);
    nn::Tensor x = nn::Tensor::from({2, 1, 8, 8}, randn(128, 5));
    std::vector<double> t = {0.2, 0.9};
    std::vector<int> labels = {1, 3};

    std::vector<nn::Tensor> captured;
    nn::Tensor v = m.forward_velocity(x, t, labels, &captured);
    REQUIRE(captured.size() == 2);
    CHECK(v.shape() == x.shape());

    for (int64_t k = 1; k <= 2; ++k) {
        nn::Tensor h = m.forward_to_depth(x, t, labels, k);
        CHECK(h.values() == captured[k - 1].values());  // bitwise
    }
    CHECK_THROWS_AS(m.forward_to_depth(x, t, labels, 0), ValidationError);
    CHECK_THROWS_AS(m.forward_to_depth(x, t, labels, 3), ValidationError);
}

TEST_CASE("label equivariance under consistent permutation of the embedding table") {
    DitModel m(tiny_test_config(), 7);
    randomize_all(m, 4);
    nn::Tensor x = nn::Tensor::from({2, 1, 8, 8}, randn(128, 6));
    std::vector<double> t = {0.5, 0.7};
    nn::Tensor before = m.forward_velocity(x, t, {0, 2});

    // swap class rows 0 and 2, relabel accordingly
    auto table = m.param("label_embed.table");
    const int64_t D = m.config().hidden_dim;
    for (int64_t c = 0; c < D; ++c)
        std::swap(table.values()[0 * D + c], table.values()[2 * D + c]);
    nn::Tensor after = m.forward_velocity(x, t, {2, 0});
    CHECK(before.values() == after.values());
}

TEST_CASE("velocity gradients match finite differences on a tiny model") {
    DitModel m(tiny_test_config(), 8);
    randomize_all(m, 5, 0.2);
    auto sched = flow::linear_schedule();
    Shape shape = {2, 1, 8, 8};
    auto x0 = randn(128, 7);
    auto eps = randn(128, 8);
    std::vector<double> t = {0.35, 0.8};
    std::vector<int> labels = {0, 2};
    auto nb = flow::forward_noising(shape, x0, eps, t, sched);
    nn::Tensor x_t = nn::Tensor::from(shape, nb.x_t);

    for (auto& p : m.params()) p.tensor.zero_grad();
    nn::Tensor loss = flow::velocity_loss(m.forward_velocity(x_t, t, labels), x0, eps, t, sched);
    loss.backward();

    nn::NoGradGuard ng;
    const double h = 1e-5;
    size_t checked = 0, nonzero = 0;
    for (auto& p : m.params()) {
        REQUIRE(p.tensor.grad().size() == p.tensor.values().size());
        auto& vals = p.tensor.values();
        for (size_t i = 0; i < vals.size(); i += 29) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp =
                flow::velocity_loss(m.forward_velocity(x_t, t, labels), x0, eps, t, sched).item();
            vals[i] = orig - h;
            const double fm =
                flow::velocity_loss(m.forward_velocity(x_t, t, labels), x0, eps, t, sched).item();
            vals[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double got = p.tensor.grad()[i];
            INFO(p.name, " elem ", i);
            CHECK(std::abs(fd - got) <= 1e-3 * std::max({1.0, std::abs(fd), std::abs(got)}));
            ++checked;
            if (std::abs(got) > 1e-9) ++nonzero;
        }
    }
    CHECK(checked > 400);
    CHECK(nonzero > checked / 2);  // the check must not be vacuous
}

TEST_CASE("non-finite activations surface the failing block index") {
    DitModel m(tiny_test_config(), 9);
    randomize_all(m, 6);
    nn::Tensor x = nn::Tensor::from({1, 1, 8, 8}, randn(64, 9));
    const double inf = std::numeric_limits<double>::infinity();

    m.param("block1.mlp.b2").values()[0] = inf;
    try {
        m.forward_velocity(x, {0.5}, {0});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.layer_index == 1);
    }

    DitModel m2(tiny_test_config(), 10);
    randomize_all(m2, 7);
    m2.param("final.linear.bias").values()[0] = inf;
    try {
        m2.forward_velocity(x, {0.5}, {0});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.layer_index == m2.config().depth);
    }
}

TEST_CASE("input validation") {
    DitModel m(tiny_test_config(), 11);
    nn::Tensor wrong = nn::Tensor::from({1, 1, 4, 4}, randn(16, 10));
    CHECK_THROWS_AS(m.forward_velocity(wrong, {0.5}, {0}), ValidationError);
    nn::Tensor x = nn::Tensor::from({1, 1, 8, 8}, randn(64, 11));
    CHECK_THROWS_AS(m.forward_velocity(x, {1.5}, {0}), ValidationError);
    CHECK_THROWS_AS(m.forward_velocity(x, {0.5}, {7}), ValidationError);
    CHECK_THROWS_AS(m.forward_velocity(x, {0.5, 0.6}, {0}), ValidationError);
}

TEST_CASE("param digest tracks parameter changes and init seed") {
    DitModel a(tiny_test_config(), 12);
    DitModel b(tiny_test_config(), 12);
    DitModel c(tiny_test_config(), 13);
    CHECK(a.param_digest() == b.param_digest());
    CHECK(a.param_digest() != c.param_digest());
    b.param("patch_embed.weight").values()[0] += 1e-12;
    CHECK(a.param_digest() != b.param_digest());
    CHECK(a.param_count() == b.param_count());
}
