// SPDX-License-Identifier: Apache-2.0
#include "lsep/sampler.hpp"

#include <cmath>

#include "lsep/rng.hpp"
#include "lsep/tensor.hpp"

namespace lsep::sampler {

namespace {

void check_state_shape(const Shape& shape, const std::vector<int>& labels) {
    if (shape.size() != 4)
        throw ValidationError("sampler: state shape must be 4-D, got " + shape_str(shape));
    for (int64_t d : shape)
        if (d <= 0) throw ValidationError("sampler: non-positive dim in " + shape_str(shape));
    if (static_cast<int64_t>(labels.size()) != shape[0])
        throw ValidationError("sampler: " + std::to_string(labels.size()) + " labels for batch " +
                              std::to_string(shape[0]));
}

// Conditional velocity, blended with the unconditional pass only when
// guidance can actually fire at this t. Skipping the unconditional
// evaluation (rather than blending with weight zero) keeps gated-off runs
// bitwise identical to conditional-only runs.
std::vector<double> eval_velocity(VelocityField& field, const Shape& shape,
                                  const std::vector<double>& x, double t,
                                  const SampleSpec& spec, const std::vector<int>& labels,
                                  const std::vector<int>& null_labels) {
    std::vector<double> v = field.velocity(shape, x, t, labels);
    if (v.size() != x.size())
        throw ValidationError("sampler: field returned " + std::to_string(v.size()) +
                              " values for " + std::to_string(x.size()) + " state elements");
    if (spec.cfg_weight != 1.0 && spec.guidance_at(t)) {
        const std::vector<double> vu = field.velocity(shape, x, t, null_labels);
        v = guided_velocity(v, vu, t, spec);
    }
    return v;
}

void check_finite_state(const std::vector<double>& x, int64_t step) {
    if (!all_finite(x.data(), static_cast<int64_t>(x.size())))
        throw NumericalError(
            "sampler: non-finite state after step " + std::to_string(step),
            static_cast<int>(step));
}

// Initial state x_1 = eps. Each sample's noise comes from its own substream
// so sample i is independent of batch composition.
std::vector<double> initial_noise(const Shape& shape, uint64_t seed) {
    const int64_t batch = shape[0];
    const int64_t per = numel_of(shape) / batch;
    std::vector<double> x(static_cast<size_t>(batch * per));
    const RngStream init(seed, "sample-init");
    for (int64_t i = 0; i < batch; ++i) {
        auto eng = init.at(static_cast<uint64_t>(i));
        gaussian_fill(eng, std::span<double>(x.data() + i * per, static_cast<size_t>(per)));
    }
    return x;
}

std::vector<int> null_labels_like(const std::vector<int>& labels, int null_id) {
    return std::vector<int>(labels.size(), null_id);
}

}  // namespace

SamplerKind sampler_kind_from(const std::string& name) {
    if (name == "ode") return SamplerKind::ode;
    if (name == "sde") return SamplerKind::sde;
    throw ValidationError("sampler: unknown kind '" + name + "' (expected ode|sde)");
}

std::string to_string(SamplerKind k) {
    return k == SamplerKind::ode ? "ode" : "sde";
}

void SampleSpec::validate() const {
    if (steps < 1) throw ValidationError("SampleSpec: steps must be >= 1");
    if (!(cfg_weight >= 1.0))
        throw ValidationError("SampleSpec: cfg_weight must be >= 1, got " +
                              std::to_string(cfg_weight));
    if (!(interval_lo >= 0.0 && interval_lo <= interval_hi && interval_hi <= 1.0))
        throw ValidationError("SampleSpec: guidance interval must satisfy 0 <= lo <= hi <= 1");
    if (!(t_min >= 0.0 && t_min < 1.0))
        throw ValidationError("SampleSpec: t_min must lie in [0, 1)");
    if (!(diffusion_scale >= 0.0))
        throw ValidationError("SampleSpec: diffusion_scale must be >= 0");
}

bool SampleSpec::guidance_at(double t) const {
    const double u = interval_on_noise ? 1.0 - t : t;
    return u >= interval_lo && u <= interval_hi;
}

std::vector<double> ModelVelocity::velocity(const Shape& shape, const std::vector<double>& x,
                                            double t, const std::vector<int>& labels) {
    nn::NoGradGuard no_grad;
    const nn::Tensor x_t = nn::Tensor::from(shape, x);
    const std::vector<double> t_batch(static_cast<size_t>(shape[0]), t);
    return m_.forward_velocity(x_t, t_batch, labels).values();
}

std::vector<double> guided_velocity(const std::vector<double>& v_cond,
                                    const std::vector<double>& v_uncond, double t,
                                    const SampleSpec& spec) {
    if (v_cond.size() != v_uncond.size())
        throw ValidationError("guided_velocity: size mismatch, " + std::to_string(v_cond.size()) +
                              " vs " + std::to_string(v_uncond.size()));
    if (!spec.guidance_at(t)) return v_cond;
    std::vector<double> out(v_cond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = v_uncond[i] + spec.cfg_weight * (v_cond[i] - v_uncond[i]);
    return out;
}

SampleBatch sample_ode(VelocityField& field, const Shape& shape, const SampleSpec& spec,
                       const flow::InterpolantSchedule& sched) {
    spec.validate();
    flow::validate_schedule(sched);
    check_state_shape(shape, spec.labels);
    const std::vector<int> nulls = null_labels_like(spec.labels, field.null_label());
    const double dt = (1.0 - spec.t_min) / static_cast<double>(spec.steps);

    std::vector<double> x = initial_noise(shape, spec.seed);
    for (int64_t k = 0; k < spec.steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) * dt;
        const std::vector<double> v = eval_velocity(field, shape, x, t, spec, spec.labels, nulls);
        for (size_t j = 0; j < x.size(); ++j) x[j] -= dt * v[j];
        check_finite_state(x, k);
    }
    if (spec.t_min > 0.0) {
        const std::vector<double> v =
            eval_velocity(field, shape, x, spec.t_min, spec, spec.labels, nulls);
        for (size_t j = 0; j < x.size(); ++j) x[j] -= spec.t_min * v[j];
        check_finite_state(x, spec.steps);
    }
    return {shape, std::move(x)};
}

SampleBatch sample_sde(VelocityField& field, const Shape& shape, const SampleSpec& spec,
                       const flow::InterpolantSchedule& sched) {
    spec.validate();
    flow::validate_schedule(sched);
    check_state_shape(shape, spec.labels);
    const std::vector<int> nulls = null_labels_like(spec.labels, field.null_label());
    const int64_t batch = shape[0];
    const int64_t per = numel_of(shape) / batch;
    const double dt = (1.0 - spec.t_min) / static_cast<double>(spec.steps);

    // One Wiener engine per sample, consumed in step order, so trajectories
    // stay independent across samples and across batch sizes.
    const RngStream wiener(spec.seed, "sample-wiener");
    std::vector<std::mt19937_64> engines;
    engines.reserve(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) engines.push_back(wiener.at(static_cast<uint64_t>(i)));

    std::vector<double> x = initial_noise(shape, spec.seed);
    std::vector<double> t_batch(static_cast<size_t>(batch));
    for (int64_t k = 0; k < spec.steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) * dt;
        const std::vector<double> v = eval_velocity(field, shape, x, t, spec, spec.labels, nulls);
        const double w_t = spec.diffusion_scale * sched.sigma(t);
        if (w_t > 0.0) {
            t_batch.assign(static_cast<size_t>(batch), t);
            const std::vector<double> score =
                flow::score_from_velocity(shape, x, v, t_batch, sched, spec.t_min);
            const double noise_scale = std::sqrt(w_t * dt);
            for (int64_t i = 0; i < batch; ++i) {
                double* row = x.data() + i * per;
                const double* vr = v.data() + i * per;
                const double* sr = score.data() + i * per;
                for (int64_t e = 0; e < per; ++e)
                    row[e] += -dt * (vr[e] - 0.5 * w_t * sr[e]) +
                              noise_scale * gaussian(engines[static_cast<size_t>(i)]);
            }
        } else {
            for (size_t j = 0; j < x.size(); ++j) x[j] -= dt * v[j];
        }
        check_finite_state(x, k);
    }
    if (spec.t_min > 0.0) {
        const std::vector<double> v =
            eval_velocity(field, shape, x, spec.t_min, spec, spec.labels, nulls);
        for (size_t j = 0; j < x.size(); ++j) x[j] -= spec.t_min * v[j];
        check_finite_state(x, spec.steps);
    }
    return {shape, std::move(x)};
}

SampleBatch sample(const model::DitModel& m, const SampleSpec& spec,
                   const flow::InterpolantSchedule& sched) {
    if (spec.labels.empty()) throw ValidationError("sample: spec.labels is empty");
    const model::ModelConfig& cfg = m.config();
    const Shape shape = {static_cast<int64_t>(spec.labels.size()), cfg.input_channels,
                         cfg.input_size, cfg.input_size};
    ModelVelocity field(m);
    return spec.kind == SamplerKind::ode ? sample_ode(field, shape, spec, sched)
                                         : sample_sde(field, shape, spec, sched);
}

}  // namespace lsep::sampler
