// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "lsep/rng.hpp"
#include "lsep/tensor.hpp"

using namespace lsep;
using namespace lsep::nn;

namespace {

Tensor rand_tensor(Shape shape, uint64_t salt, double scale = 1.0, bool param = true) {
    auto eng = RngStream(20240917, "tensor-tests").at(salt);
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) x = scale * gaussian(eng);
    return param ? Tensor::param(shape, std::move(v)) : Tensor::from(shape, std::move(v));
}

// Central-difference check of d(loss)/d(param) for every listed parameter.
// `make_loss` must rebuild the graph from the params' current values.
void fd_check(std::vector<Tensor> params, const std::function<Tensor()>& make_loss,
              double h = 1e-5, double tol = 1e-6) {
    for (Tensor& p : params) p.zero_grad();
    Tensor loss = make_loss();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (Tensor& p : params) {
        REQUIRE(p.grad().size() == p.values().size());
        analytic.push_back(p.grad());
    }
    NoGradGuard ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = make_loss().item();
            vals[i] = orig - h;
            const double fm = make_loss().item();
            vals[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double got = analytic[pi][i];
            const double denom = std::max({1.0, std::abs(fd), std::abs(got)});
            INFO("param ", pi, " elem ", i, " fd=", fd, " grad=", got);
            CHECK(std::abs(fd - got) <= tol * denom);
        }
    }
}

// Projects a tensor to a scalar with fixed pseudo-random weights so every
// output element influences the loss differently.
Tensor project(const Tensor& y, uint64_t salt) {
    Tensor w = rand_tensor(y.shape(), 0xabc000 + salt, 1.0, false);
    return mean_all(mul(y, w));
}

}  // namespace

TEST_CASE("elementwise ops: values and gradients") {
    Tensor a = rand_tensor({3, 4}, 1);
    Tensor b = rand_tensor({3, 4}, 2);

    Tensor s = add(a, b);
    for (int i = 0; i < 12; ++i) CHECK(s.data()[i] == a.data()[i] + b.data()[i]);

    fd_check({a, b}, [&] { return project(add(a, b), 1); });
    fd_check({a, b}, [&] { return project(sub(a, b), 2); });
    fd_check({a, b}, [&] { return project(mul(a, b), 3); });
    fd_check({a}, [&] { return project(add_scalar(a, 2.5), 4); });
    fd_check({a}, [&] { return project(mul_scalar(a, -1.7), 5); });
}

TEST_CASE("same tensor used twice accumulates gradient") {
    Tensor x = rand_tensor({5}, 3);
    Tensor loss = sum_all(mul(x, x));
    loss.backward();
    for (int i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]));
}

TEST_CASE("add_rowvec and rowwise_scale") {
    Tensor x = rand_tensor({4, 3}, 10);
    Tensor bias = rand_tensor({3}, 11);
    Tensor y = add_rowvec(x, bias);
    CHECK(y.data()[5] == doctest::Approx(x.data()[5] + bias.data()[2]));
    fd_check({x, bias}, [&] { return project(add_rowvec(x, bias), 10); });

    Tensor s = rand_tensor({4}, 12);
    fd_check({x, s}, [&] { return project(rowwise_scale(x, s, 4), 11); });

    CHECK_THROWS_AS(add_rowvec(x, rand_tensor({4}, 13)), ValidationError);
    CHECK_THROWS_AS(rowwise_scale(x, s, 3), ValidationError);
}

TEST_CASE("activations") {
    Tensor x = rand_tensor({2, 7}, 20, 2.0);

    Tensor zero = Tensor::from({1}, {0.0});
    CHECK(silu(zero).data()[0] == 0.0);
    CHECK(gelu_tanh(zero).data()[0] == 0.0);
    Tensor big = Tensor::from({1}, {12.0});
    CHECK(gelu_tanh(big).data()[0] == doctest::Approx(12.0).epsilon(1e-9));
    CHECK(silu(big).data()[0] == doctest::Approx(12.0).epsilon(1e-4));

    fd_check({x}, [&] { return project(silu(x), 20); });
    fd_check({x}, [&] { return project(gelu_tanh(x), 21); });
}

TEST_CASE("matmul and linear") {
    Tensor a = rand_tensor({3, 5}, 30);
    Tensor b = rand_tensor({5, 2}, 31);
    Tensor y = matmul(a, b);
    // spot check one element
    double manual = 0.0;
    for (int k = 0; k < 5; ++k) manual += a.data()[1 * 5 + k] * b.data()[k * 2 + 1];
    CHECK(y.data()[1 * 2 + 1] == doctest::Approx(manual));
    fd_check({a, b}, [&] { return project(matmul(a, b), 30); });

    Tensor x = rand_tensor({4, 5}, 32);
    Tensor W = rand_tensor({3, 5}, 33);
    Tensor bias = rand_tensor({3}, 34);
    Tensor z = linear(x, W, bias);
    double m2 = bias.data()[2];
    for (int k = 0; k < 5; ++k) m2 += x.data()[1 * 5 + k] * W.data()[2 * 5 + k];
    CHECK(z.data()[1 * 3 + 2] == doctest::Approx(m2));
    fd_check({x, W, bias}, [&] { return project(linear(x, W, bias), 31); });
    fd_check({x, W}, [&] { return project(linear(x, W, Tensor()), 32); });

    CHECK_THROWS_AS(matmul(a, a), ValidationError);
    CHECK_THROWS_AS(linear(x, rand_tensor({3, 4}, 35), bias), ValidationError);
}

TEST_CASE("slice_cols") {
    Tensor x = rand_tensor({3, 6}, 40);
    Tensor y = slice_cols(x, 2, 5);
    CHECK(y.shape() == Shape({3, 3}));
    CHECK(y.data()[0] == x.data()[2]);
    CHECK(y.data()[3] == x.data()[6 + 2]);
    fd_check({x}, [&] { return project(slice_cols(x, 2, 5), 40); });
    CHECK_THROWS_AS(slice_cols(x, 4, 4), ValidationError);
    CHECK_THROWS_AS(slice_cols(x, 0, 7), ValidationError);
}

TEST_CASE("embedding gathers rows and scatter-adds gradients") {
    Tensor table = rand_tensor({6, 3}, 50);
    std::vector<int> ids = {1, 1, 4, 0};
    Tensor y = embedding(table, ids);
    CHECK(y.shape() == Shape({4, 3}));
    for (int c = 0; c < 3; ++c) {
        CHECK(y.data()[0 * 3 + c] == table.data()[1 * 3 + c]);
        CHECK(y.data()[2 * 3 + c] == table.data()[4 * 3 + c]);
    }
    // repeated id 1 must receive the sum of both row gradients
    fd_check({table}, [&] { return project(embedding(table, ids), 50); });
    std::vector<int> bad = {6};
    CHECK_THROWS_AS(embedding(table, bad), ValidationError);
}

TEST_CASE("add_tokenvec broadcasts over batch") {
    const int64_t B = 2, T = 3, D = 4;
    Tensor x = rand_tensor({B * T, D}, 60);
    Tensor pos = rand_tensor({T, D}, 61);
    Tensor y = add_tokenvec(x, pos, B);
    CHECK(y.data()[(1 * T + 2) * D + 3] ==
          doctest::Approx(x.data()[(1 * T + 2) * D + 3] + pos.data()[2 * D + 3]));
    fd_check({x, pos}, [&] { return project(add_tokenvec(x, pos, B), 60); });
}

TEST_CASE("per-sample modulate and gate") {
    const int64_t B = 2, T = 3, D = 4;
    Tensor x = rand_tensor({B * T, D}, 70);
    Tensor shift = rand_tensor({B, D}, 71);
    Tensor scale = rand_tensor({B, D}, 72);
    Tensor gate = rand_tensor({B, D}, 73);

    Tensor y = per_sample_modulate(x, shift, scale, B);
    int64_t b = 1, t = 2, d = 1;
    CHECK(y.data()[(b * T + t) * D + d] ==
          doctest::Approx(x.data()[(b * T + t) * D + d] * (1.0 + scale.data()[b * D + d]) +
                          shift.data()[b * D + d]));

    fd_check({x, shift, scale}, [&] { return project(per_sample_modulate(x, shift, scale, B), 70); });
    fd_check({x, gate}, [&] { return project(per_sample_gate(x, gate, B), 71); });

    // zero scale and shift is identity; zero gate kills everything
    Tensor z = Tensor::zeros({B, D});
    Tensor id = per_sample_modulate(x, z, z, B);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(id.data()[i] == x.data()[i]);
    Tensor dead = per_sample_gate(x, z, B);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(dead.data()[i] == 0.0);
}

TEST_CASE("layernorm normalizes rows") {
    const int64_t R = 4, C = 8;
    Tensor x = rand_tensor({R, C}, 80, 3.0);
    Tensor y = layernorm_noaffine(x);
    for (int64_t r = 0; r < R; ++r) {
        double mu = 0.0, var = 0.0;
        for (int64_t c = 0; c < C; ++c) mu += y.data()[r * C + c];
        mu /= C;
        for (int64_t c = 0; c < C; ++c) {
            double d = y.data()[r * C + c] - mu;
            var += d * d;
        }
        var /= C;
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    }
    Tensor gain = rand_tensor({C}, 81);
    Tensor bias = rand_tensor({C}, 82);
    fd_check({x, gain, bias}, [&] { return project(layernorm(x, gain, bias), 80); }, 1e-5, 1e-5);
    fd_check({x}, [&] { return project(layernorm_noaffine(x), 81); }, 1e-5, 1e-5);
}

TEST_CASE("attention matches a naive reference") {
    const int64_t B = 1, T = 4, H = 1, D = 3;
    Tensor q = rand_tensor({B * T, D}, 90);
    Tensor k = rand_tensor({B * T, D}, 91);
    Tensor v = rand_tensor({B * T, D}, 92);
    Tensor out = attention(q, k, v, B, H);

    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    for (int64_t i = 0; i < T; ++i) {
        std::vector<double> s(T);
        double m = -1e300;
        for (int64_t j = 0; j < T; ++j) {
            double acc = 0.0;
            for (int64_t c = 0; c < D; ++c) acc += q.data()[i * D + c] * k.data()[j * D + c];
            s[j] = acc * scale;
            m = std::max(m, s[j]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < T; ++j) z += std::exp(s[j] - m);
        for (int64_t c = 0; c < D; ++c) {
            double acc = 0.0;
            for (int64_t j = 0; j < T; ++j)
                acc += std::exp(s[j] - m) / z * v.data()[j * D + c];
            CHECK(out.data()[i * D + c] == doctest::Approx(acc).epsilon(1e-10));
        }
    }
}

TEST_CASE("attention gradients (multi-head, batched)") {
    const int64_t B = 2, T = 3, heads = 2, D = 4;
    Tensor q = rand_tensor({B * T, D}, 95);
    Tensor k = rand_tensor({B * T, D}, 96);
    Tensor v = rand_tensor({B * T, D}, 97);
    fd_check({q, k, v}, [&] { return project(attention(q, k, v, B, heads), 90); }, 1e-5, 1e-5);
    CHECK_THROWS_AS(attention(q, k, v, B, 3), ValidationError);
}

TEST_CASE("patchify/unpatchify layout and round trip") {
    const int64_t B = 1, C = 2, H = 4, p = 2, G = H / p;
    std::vector<double> data(static_cast<size_t>(B * C * H * H));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < H; ++x) data[(c * H + y) * H + x] = c * 100 + y * 10 + x;
    Tensor img = Tensor::param({B, C, H, H}, std::move(data));
    Tensor tok = patchify(img, p);
    CHECK(tok.shape() == Shape({G * G, C * p * p}));
    for (int64_t gy = 0; gy < G; ++gy)
        for (int64_t gx = 0; gx < G; ++gx)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        CHECK(tok.data()[(gy * G + gx) * C * p * p + (c * p + py) * p + px] ==
                              c * 100 + (gy * p + py) * 10 + (gx * p + px));

    Tensor back = unpatchify(tok, B, C, H, p);
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(back.data()[i] == img.data()[i]);

    fd_check({img}, [&] { return project(patchify(img, p), 100); });
    Tensor tokens = rand_tensor({8, 8}, 101);
    fd_check({tokens}, [&] { return project(unpatchify(tokens, 2, 2, 4, 2), 101); });
    CHECK_THROWS_AS(patchify(img, 3), ValidationError);
}

TEST_CASE("tokens_subset_mean pools selected rows") {
    const int64_t B = 2, T = 4, D = 3;
    Tensor x = rand_tensor({B * T, D}, 110);
    std::vector<int> ids = {1, 3};
    Tensor y = tokens_subset_mean(x, B, T, ids);
    CHECK(y.shape() == Shape({B, D}));
    CHECK(y.data()[1 * D + 2] ==
          doctest::Approx(0.5 * (x.data()[(T + 1) * D + 2] + x.data()[(T + 3) * D + 2])));
    fd_check({x}, [&] { return project(tokens_subset_mean(x, B, T, ids), 110); });
    std::vector<int> bad = {4};
    CHECK_THROWS_AS(tokens_subset_mean(x, B, T, bad), ValidationError);
    CHECK_THROWS_AS(tokens_subset_mean(x, B, T, std::vector<int>{}), ValidationError);
}

TEST_CASE("reductions") {
    Tensor x = rand_tensor({3, 4}, 120);
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += x.data()[i];
    CHECK(sum_all(x).item() == doctest::Approx(s));
    CHECK(mean_all(x).item() == doctest::Approx(s / 12.0));
    fd_check({x}, [&] { return mean_all(x); });
    fd_check({x}, [&] { return mul_scalar(sum_all(x), 0.25); });

    Tensor v = rand_tensor({5}, 121);
    std::vector<double> w = {0.1, -2.0, 0.0, 1.5, 3.0};
    double exp_val = 0.0;
    for (int i = 0; i < 5; ++i) exp_val += w[i] * v.data()[i];
    CHECK(weighted_mean(v, w).item() == doctest::Approx(exp_val / 5.0));
    fd_check({v}, [&] { return weighted_mean(v, w); });
}

TEST_CASE("cross entropy matches manual softmax") {
    Tensor logits = Tensor::param({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
    std::vector<int> labels = {1, 0};
    Tensor ce = cross_entropy_rows(logits, labels);
    for (int b = 0; b < 2; ++b) {
        double m = std::max({logits.data()[b * 3], logits.data()[b * 3 + 1], logits.data()[b * 3 + 2]});
        double z = 0.0;
        for (int c = 0; c < 3; ++c) z += std::exp(logits.data()[b * 3 + c] - m);
        double expect = m + std::log(z) - logits.data()[b * 3 + labels[b]];
        CHECK(ce.data()[b] == doctest::Approx(expect).epsilon(1e-12));
    }
    // uniform logits -> log C
    Tensor u = Tensor::param({1, 7}, std::vector<double>(7, 0.3));
    std::vector<int> l0 = {4};
    CHECK(cross_entropy_rows(u, l0).data()[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));

    Tensor big = rand_tensor({3, 5}, 130, 4.0);
    std::vector<int> lab = {0, 4, 2};
    std::vector<double> w = {1.0, 0.5, 2.0};
    fd_check({big}, [&] { return weighted_mean(cross_entropy_rows(big, lab), w); });
    std::vector<int> bad = {5, 0, 0};
    CHECK_THROWS_AS(cross_entropy_rows(big, bad), ValidationError);
}

TEST_CASE("cosine_rows values, zero handling, gradients") {
    Tensor x = Tensor::param({3, 2}, {1.0, 0.0, 2.0, 0.0, 0.0, 0.0});
    Tensor t = Tensor::from({3, 2}, {2.0, 0.0, -1.0, 0.0, 1.0, 1.0});
    int64_t zeros = -1;
    Tensor y = cosine_rows(x, t, &zeros);
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(-1.0));
    CHECK(y.data()[2] == 0.0);
    CHECK(zeros == 1);

    Tensor a = rand_tensor({4, 6}, 140);
    Tensor b = rand_tensor({4, 6}, 141);
    std::vector<double> w = {1.0, -0.5, 2.0, 0.25};
    fd_check({a, b}, [&] { return weighted_mean(cosine_rows(a, b), w); }, 1e-5, 1e-5);
}

TEST_CASE("NoGradGuard disables graph recording") {
    Tensor x = rand_tensor({3}, 150);
    {
        NoGradGuard ng;
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
        CHECK_THROWS_AS(sum_all(y).backward(), ValidationError);
    }
    Tensor y = mul(x, x);
    CHECK(y.requires_grad());
}

TEST_CASE("backward preconditions and grad accumulation across calls") {
    Tensor x = rand_tensor({2, 2}, 160);
    CHECK_THROWS_AS(mul(x, x).backward(), ValidationError);  // non-scalar
    Tensor c = Tensor::from({}, {1.0});
    CHECK_THROWS_AS(c.backward(), ValidationError);  // no grad

    Tensor l1 = sum_all(x);
    l1.backward();
    CHECK(x.grad()[0] == 1.0);
    Tensor l2 = sum_all(x);
    l2.backward();
    CHECK(x.grad()[0] == 2.0);  // accumulates until zero_grad
    x.zero_grad();
    CHECK(x.grad().empty());
}

TEST_CASE("deep chain backward does not overflow the stack") {
    Tensor x = rand_tensor({4}, 170, 0.01);
    Tensor y = x;
    for (int i = 0; i < 20000; ++i) y = add_scalar(y, 1e-9);
    Tensor loss = sum_all(y);
    loss.backward();
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));
}
