// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <utility>
#include <vector>

#include "lsep/rng.hpp"
#include "lsep/sampler.hpp"

using namespace lsep;
using namespace lsep::sampler;

namespace {

// Optimal velocity for x0 ~ N(0, s^2 I): v*(x,t) = [t - (1-t)s^2] x / g2 with
// g2 = (1-t)^2 s^2 + t^2. Since d(g2)/dt = 2 g2 * coef, the exact reverse
// flow map is x(t) = gamma(t) * x(1), so integrating to t=0 yields s * eps.
// `label_gain` optionally scales the field for the null label so guidance
// visibly changes trajectories.
struct GaussianOracle : VelocityField {
    double s;
    double null_gain = 1.0;
    explicit GaussianOracle(double s, double null_gain = 1.0) : s(s), null_gain(null_gain) {}
    std::vector<double> velocity(const Shape&, const std::vector<double>& x, double t,
                                 const std::vector<int>& labels) override {
        const double g2 = (1 - t) * (1 - t) * s * s + t * t;
        double coef = (t - (1 - t) * s * s) / g2;
        if (!labels.empty() && labels[0] == null_label()) coef *= null_gain;
        std::vector<double> v(x.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = coef * x[i];
        return v;
    }
    int null_label() const override { return 99; }
};

// Counts conditional and unconditional evaluations of an inner field.
struct CountingField : VelocityField {
    VelocityField& inner;
    int cond_calls = 0;
    int uncond_calls = 0;
    explicit CountingField(VelocityField& inner) : inner(inner) {}
    std::vector<double> velocity(const Shape& shape, const std::vector<double>& x, double t,
                                 const std::vector<int>& labels) override {
        if (!labels.empty() && labels[0] == inner.null_label())
            ++uncond_calls;
        else
            ++cond_calls;
        return inner.velocity(shape, x, t, labels);
    }
    int null_label() const override { return inner.null_label(); }
};

std::pair<double, double> moments(const std::vector<double>& v) {
    double m = 0, q = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) q += (x - m) * (x - m);
    q /= static_cast<double>(v.size());
    return {m, q};
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<double> replay_initial_noise(const Shape& shape, uint64_t seed) {
    const int64_t per = numel_of(shape) / shape[0];
    std::vector<double> x(static_cast<size_t>(numel_of(shape)));
    const RngStream init(seed, "sample-init");
    for (int64_t i = 0; i < shape[0]; ++i) {
        auto eng = init.at(static_cast<uint64_t>(i));
        gaussian_fill(eng, std::span<double>(x.data() + i * per, static_cast<size_t>(per)));
    }
    return x;
}

SampleSpec scalar_spec(int64_t batch, int64_t steps, uint64_t seed) {
    SampleSpec spec;
    spec.steps = steps;
    spec.seed = seed;
    spec.labels.assign(static_cast<size_t>(batch), 0);
    return spec;
}

model::ModelConfig sampler_test_config() {
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

}  // namespace

TEST_CASE("sample spec validation and guidance gating") {
    SampleSpec spec;
    spec.validate();  // defaults are legal

    SUBCASE("each bad field is rejected") {
        SampleSpec s = spec;
        s.steps = 0;
        CHECK_THROWS_AS(s.validate(), ValidationError);
        s = spec;
        s.cfg_weight = 0.9;
        CHECK_THROWS_AS(s.validate(), ValidationError);
        s = spec;
        s.interval_lo = 0.7;
        s.interval_hi = 0.6;
        CHECK_THROWS_AS(s.validate(), ValidationError);
        s = spec;
        s.interval_hi = 1.5;
        CHECK_THROWS_AS(s.validate(), ValidationError);
        s = spec;
        s.t_min = -0.1;
        CHECK_THROWS_AS(s.validate(), ValidationError);
        s = spec;
        s.t_min = 1.0;
        CHECK_THROWS_AS(s.validate(), ValidationError);
        s = spec;
        s.diffusion_scale = -1.0;
        CHECK_THROWS_AS(s.validate(), ValidationError);
    }
    SUBCASE("gate tests t directly by default, inclusively") {
        spec.interval_lo = 0.0;
        spec.interval_hi = 0.65;
        CHECK(spec.guidance_at(0.5));
        CHECK(spec.guidance_at(0.65));   // inclusive upper edge
        CHECK(spec.guidance_at(0.0));    // inclusive lower edge
        CHECK(!spec.guidance_at(0.651));
        CHECK(!spec.guidance_at(1.0));
    }
    SUBCASE("noise-axis gate tests 1-t") {
        spec.interval_lo = 0.0;
        spec.interval_hi = 0.65;
        spec.interval_on_noise = true;
        CHECK(spec.guidance_at(0.5));    // 1-t = 0.5
        CHECK(!spec.guidance_at(0.2));   // 1-t = 0.8
        CHECK(spec.guidance_at(1.0));    // 1-t = 0
        CHECK(!spec.guidance_at(0.0));   // 1-t = 1
    }
}

TEST_CASE("sampler kind parsing round trips") {
    CHECK(sampler_kind_from("ode") == SamplerKind::ode);
    CHECK(sampler_kind_from("sde") == SamplerKind::sde);
    CHECK(to_string(SamplerKind::ode) == "ode");
    CHECK(to_string(SamplerKind::sde) == "sde");
    CHECK_THROWS_AS(sampler_kind_from("heun"), ValidationError);
}

TEST_CASE("guided velocity blends inside the interval only") {
    SampleSpec spec;
    spec.cfg_weight = 1.8;
    spec.interval_lo = 0.0;
    spec.interval_hi = 0.65;

    // Inside the interval: v_u + w*(v_c - v_u); the published weight on the
    // unit case gives exactly 1.8.
    std::vector<double> out = guided_velocity({1.0}, {0.0}, 0.3, spec);
    CHECK(out[0] == doctest::Approx(1.8).epsilon(1e-15));

    SUBCASE("outside the interval the conditional branch passes through") {
        out = guided_velocity({1.0}, {0.0}, 0.9, spec);
        CHECK(out[0] == 1.0);
    }
    SUBCASE("weight one is the identity for any t") {
        spec.cfg_weight = 1.0;
        for (double t : {0.1, 0.5, 0.9}) {
            out = guided_velocity({0.7, -0.2}, {4.0, 4.0}, t, spec);
            CHECK(out[0] == doctest::Approx(0.7).epsilon(1e-15));
            CHECK(out[1] == doctest::Approx(-0.2).epsilon(1e-15));
        }
    }
    SUBCASE("blend formula holds elementwise on random vectors") {
        auto eng = RngStream(5001, "sampler-tests").at(0);
        std::vector<double> vc(32), vu(32);
        gaussian_fill(eng, vc);
        gaussian_fill(eng, vu);
        out = guided_velocity(vc, vu, 0.4, spec);
        for (size_t i = 0; i < out.size(); ++i)
            CHECK(out[i] == doctest::Approx(vu[i] + 1.8 * (vc[i] - vu[i])).epsilon(1e-14));
    }
    SUBCASE("size mismatch is rejected") {
        CHECK_THROWS_AS(guided_velocity({1.0, 2.0}, {0.0}, 0.3, spec), ValidationError);
    }
}

TEST_CASE("ode sampler matches the analytic gaussian oracle") {
    GaussianOracle field(0.5);
    const auto sched = flow::linear_schedule();
    const Shape shape = {10000, 1, 1, 1};
    SampleSpec spec = scalar_spec(10000, 250, 77);

    SampleBatch out = sample_ode(field, shape, spec, sched);
    REQUIRE(out.values.size() == 10000);
    auto [mean, var] = moments(out.values);
    // Target s^2 = 0.25 within 5%; mean within 3 standard errors (s/100).
    CHECK(var > 0.95 * 0.25);
    CHECK(var < 1.05 * 0.25);
    CHECK(std::abs(mean) < 3.0 * 0.5 / 100.0);

    SUBCASE("same seed reproduces the batch bitwise; another seed does not") {
        SampleBatch again = sample_ode(field, shape, spec, sched);
        CHECK(bitwise_equal(out.values, again.values));
        spec.seed = 78;
        SampleBatch other = sample_ode(field, shape, spec, sched);
        CHECK(!bitwise_equal(out.values, other.values));
    }
    SUBCASE("a sample's trajectory does not depend on batch composition") {
        SampleSpec small = scalar_spec(3, 250, 77);
        SampleBatch head = sample_ode(field, {3, 1, 1, 1}, small, sched);
        for (int i = 0; i < 3; ++i) CHECK(head.values[size_t(i)] == out.values[size_t(i)]);
    }
}

TEST_CASE("sde sampler reproduces the oracle distribution") {
    GaussianOracle field(0.5);
    const auto sched = flow::linear_schedule();
    const Shape shape = {10000, 1, 1, 1};
    SampleSpec spec = scalar_spec(10000, 250, 77);

    SampleBatch sde = sample_sde(field, shape, spec, sched);
    auto [mean, var] = moments(sde.values);
    CHECK(var > 0.95 * 0.25);
    CHECK(var < 1.05 * 0.25);
    CHECK(std::abs(mean) < 3.0 * 0.5 / 100.0);

    SUBCASE("ode and sde agree in distribution on the first two moments") {
        SampleBatch ode = sample_ode(field, shape, spec, sched);
        auto [mean_ode, var_ode] = moments(ode.values);
        CHECK(var_ode / var > 0.95);
        CHECK(var_ode / var < 1.05);
        CHECK(std::abs(mean_ode - mean) < 0.02);
    }
    SUBCASE("zero diffusion collapses the sde onto the ode bitwise") {
        spec.diffusion_scale = 0.0;
        SampleBatch frozen = sample_sde(field, shape, spec, sched);
        SampleBatch ode = sample_ode(field, shape, spec, sched);
        CHECK(bitwise_equal(frozen.values, ode.values));
    }
    SUBCASE("sde noise is seed-deterministic") {
        SampleBatch again = sample_sde(field, shape, spec, sched);
        CHECK(bitwise_equal(sde.values, again.values));
    }
}

TEST_CASE("euler integration is first order on the gaussian oracle") {
    // The oracle's reverse flow ends exactly at s * eps, so with a shared
    // seed the only deviation is discretization error. First order: halving
    // the step count about doubles it (measured ratios 1.986 and 1.992).
    GaussianOracle field(0.5);
    const auto sched = flow::linear_schedule();
    const Shape shape = {2000, 1, 1, 1};
    const std::vector<double> eps = replay_initial_noise(shape, 77);

    auto rel_error = [&](int64_t steps) {
        SampleSpec spec = scalar_spec(2000, steps, 77);
        SampleBatch out = sample_ode(field, shape, spec, sched);
        double num = 0, den = 0;
        for (size_t i = 0; i < out.values.size(); ++i) {
            const double d = out.values[i] - 0.5 * eps[i];
            num += d * d;
            den += 0.25 * eps[i] * eps[i];
        }
        return std::sqrt(num / den);
    };

    const double e50 = rel_error(50), e100 = rel_error(100), e200 = rel_error(200);
    CHECK(e50 > e100);
    CHECK(e100 > e200);
    CHECK(e200 < 0.01);
    CHECK(e50 / e100 > 1.6);
    CHECK(e50 / e100 < 2.1);
    CHECK(e100 / e200 > 1.6);
    CHECK(e100 / e200 < 2.1);
}

TEST_CASE("single euler step integrates x1 - v exactly") {
    struct ConstField : VelocityField {
        std::vector<double> c;
        std::vector<double> velocity(const Shape&, const std::vector<double>& x, double,
                                     const std::vector<int>&) override {
            std::vector<double> v(x.size());
            for (size_t i = 0; i < v.size(); ++i) v[i] = c[i % c.size()];
            return v;
        }
        int null_label() const override { return 0; }
    };

    const Shape shape = {4, 1, 1, 1};
    SampleSpec spec = scalar_spec(4, 1, 9);
    spec.t_min = 0.0;  // the whole reverse pass is the one step t=1 -> 0
    const auto sched = flow::linear_schedule();

    ConstField zero;
    zero.c = {0.0};
    SampleBatch base = sample_ode(zero, shape, spec, sched);
    CHECK(bitwise_equal(base.values, replay_initial_noise(shape, 9)));

    ConstField step;
    step.c = {0.25, -1.5, 3.0, 0.125};
    SampleBatch moved = sample_ode(step, shape, spec, sched);
    for (size_t i = 0; i < 4; ++i) CHECK(moved.values[i] == base.values[i] - step.c[i]);
}

TEST_CASE("guidance gating skips unconditional evaluations") {
    // null_gain != 1 makes the unconditional field genuinely different, so a
    // firing gate must change the trajectory.
    GaussianOracle inner(0.5, 0.25);
    const auto sched = flow::linear_schedule();
    const Shape shape = {8, 1, 1, 1};

    SampleSpec plain = scalar_spec(8, 16, 3);
    plain.labels.assign(8, 1);  // any non-null id

    SUBCASE("empty interval reproduces the conditional-only run bitwise") {
        CountingField probe(inner);
        SampleSpec gated = plain;
        gated.cfg_weight = 1.8;  // would guide, but the gate never fires
        gated.interval_lo = gated.interval_hi = 0.0;
        SampleBatch guided = sample_sde(probe, shape, gated, sched);
        CHECK(probe.uncond_calls == 0);
        CHECK(probe.cond_calls == 17);  // 16 grid steps + final Euler step

        SampleBatch conditional = sample_sde(inner, shape, plain, sched);
        CHECK(bitwise_equal(guided.values, conditional.values));
    }
    SUBCASE("gate fires exactly on grid times inside the interval") {
        CountingField probe(inner);
        SampleSpec gated = plain;
        gated.cfg_weight = 1.8;
        gated.interval_lo = 0.0;
        gated.interval_hi = 0.65;
        SampleBatch guided = sample_sde(probe, shape, gated, sched);

        int expected = 0;
        const double dt = (1.0 - gated.t_min) / static_cast<double>(gated.steps);
        for (int64_t k = 0; k < gated.steps; ++k)
            if (gated.guidance_at(1.0 - static_cast<double>(k) * dt)) ++expected;
        if (gated.guidance_at(gated.t_min)) ++expected;
        CHECK(expected > 0);
        CHECK(probe.uncond_calls == expected);
        CHECK(probe.cond_calls == 17);

        SampleBatch conditional = sample_sde(inner, shape, plain, sched);
        CHECK(!bitwise_equal(guided.values, conditional.values));
    }
    SUBCASE("noise-axis gate counts its own grid times") {
        CountingField probe(inner);
        SampleSpec gated = plain;
        gated.cfg_weight = 1.8;
        gated.interval_lo = 0.0;
        gated.interval_hi = 0.65;
        gated.interval_on_noise = true;
        sample_sde(probe, shape, gated, sched);

        int expected = 0;
        const double dt = (1.0 - gated.t_min) / static_cast<double>(gated.steps);
        for (int64_t k = 0; k < gated.steps; ++k)
            if (gated.guidance_at(1.0 - static_cast<double>(k) * dt)) ++expected;
        if (gated.guidance_at(gated.t_min)) ++expected;
        CHECK(expected > 0);
        CHECK(probe.uncond_calls == expected);
    }
    SUBCASE("weight one never evaluates the unconditional branch") {
        CountingField probe(inner);
        SampleSpec open = plain;
        open.interval_lo = 0.0;
        open.interval_hi = 1.0;  // gate always admits, but weight 1 short-circuits
        sample_sde(probe, shape, open, sched);
        CHECK(probe.uncond_calls == 0);
    }
}

TEST_CASE("score from velocity matches the analytic gaussian score") {
    // x_t ~ N(0, g2) with the optimal velocity implies score(x) = -x / g2.
    const auto sched = flow::linear_schedule();
    const double s = 0.5;
    auto eng = RngStream(5001, "sampler-tests").at(1);
    for (double t : {0.1, 0.5, 0.9}) {
        const double g2 = (1 - t) * (1 - t) * s * s + t * t;
        const int64_t n = 100;
        std::vector<double> x(static_cast<size_t>(n));
        gaussian_fill(eng, x);
        for (double& v : x) v *= std::sqrt(g2);
        std::vector<double> v_star(x.size());
        const double coef = (t - (1 - t) * s * s) / g2;
        for (size_t i = 0; i < x.size(); ++i) v_star[i] = coef * x[i];
        const std::vector<double> t_batch(static_cast<size_t>(n), t);
        const std::vector<double> score =
            flow::score_from_velocity({n, 1, 1, 1}, x, v_star, t_batch, sched);
        for (size_t i = 0; i < x.size(); ++i)
            CHECK(score[i] == doctest::Approx(-x[i] / g2).epsilon(1e-5));
    }
}

TEST_CASE("model-driven sampling is deterministic and label-checked") {
    const model::ModelConfig cfg = sampler_test_config();
    const model::DitModel m(cfg, 321);  // fresh init: velocity is exactly zero
    const auto sched = flow::linear_schedule();

    SampleSpec spec;
    spec.kind = SamplerKind::ode;
    spec.steps = 6;
    spec.seed = 11;
    spec.labels = {0, 2};

    SUBCASE("zero-velocity model leaves the initial noise untouched") {
        SampleBatch out = sample(m, spec, sched);
        CHECK(out.shape == Shape{2, 1, 8, 8});
        CHECK(bitwise_equal(out.values, replay_initial_noise({2, 1, 8, 8}, 11)));
    }
    SUBCASE("sde run is finite and repeatable") {
        spec.kind = SamplerKind::sde;
        SampleBatch a = sample(m, spec, sched);
        SampleBatch b = sample(m, spec, sched);
        CHECK(all_finite(a.values.data(), static_cast<int64_t>(a.values.size())));
        CHECK(bitwise_equal(a.values, b.values));
    }
    SUBCASE("labels outside the embedding table are rejected") {
        spec.labels = {0, 7};
        CHECK_THROWS_AS(sample(m, spec, sched), ValidationError);
    }
    SUBCASE("empty label list is rejected") {
        spec.labels.clear();
        CHECK_THROWS_AS(sample(m, spec, sched), ValidationError);
    }
    SUBCASE("core entry point checks label count against the batch") {
        GaussianOracle field(0.5);
        SampleSpec bad = scalar_spec(2, 4, 1);
        CHECK_THROWS_AS(sample_ode(field, {4, 1, 1, 1}, bad, sched), ValidationError);
    }
}

TEST_CASE("non-finite states abort with the step index") {
    struct BlowupField : VelocityField {
        int fuse;  // call index that returns NaN
        int calls = 0;
        explicit BlowupField(int fuse) : fuse(fuse) {}
        std::vector<double> velocity(const Shape&, const std::vector<double>& x, double,
                                     const std::vector<int>&) override {
            std::vector<double> v(x.size(), 0.0);
            if (calls++ == fuse) v[0] = std::numeric_limits<double>::quiet_NaN();
            return v;
        }
        int null_label() const override { return 0; }
    };
    const auto sched = flow::linear_schedule();
    const Shape shape = {2, 1, 1, 1};
    SampleSpec spec = scalar_spec(2, 8, 5);

    for (int fuse : {0, 3}) {
        BlowupField field(fuse);
        try {
            sample_ode(field, shape, spec, sched);
            FAIL("expected NumericalError");
        } catch (const NumericalError& e) {
            CHECK(e.layer_index == fuse);
        }
    }
}
