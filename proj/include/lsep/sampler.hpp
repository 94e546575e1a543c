// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "lsep/common.hpp"
#include "lsep/flow.hpp"
#include "lsep/model.hpp"

namespace lsep::sampler {

enum class SamplerKind { ode, sde };

SamplerKind sampler_kind_from(const std::string& name);  // "ode" | "sde"
std::string to_string(SamplerKind k);

// Everything a sampling job needs besides the model: integrator kind, step
// count, classifier-free guidance strength and gating interval, the final
// time floor, and the requested class ids (one per output sample).
//
// Guidance is active at time t when cfg_weight != 1 and the gate admits t.
// By default the gate tests t in [interval_lo, interval_hi] directly (t=1 is
// pure noise, so [0, 0.65] restricts guidance to the low-noise tail); with
// `interval_on_noise` the gate tests the noise fraction 1-t instead. Both
// readings ship because the published interval does not say which axis it
// indexes.
struct SampleSpec {
    SamplerKind kind = SamplerKind::sde;
    int64_t steps = 250;
    double cfg_weight = 1.0;         // omega_cfg >= 1; 1 disables guidance
    double interval_lo = 0.0;        // gate bounds, inclusive
    double interval_hi = 0.0;        // lo == hi == 0 never fires (no eval at t=0)
    bool interval_on_noise = false;  // gate on 1-t instead of t
    double t_min = 1e-3;             // SDE integrates to here, then one Euler step
    double diffusion_scale = 1.0;    // multiplies w_t; 0 makes the SDE deterministic
    uint64_t seed = 0;
    std::vector<int> labels;

    void validate() const;           // throws ValidationError
    bool guidance_at(double t) const;
};

// Conditional velocity field driving the reverse-time integrators. `labels`
// carries one class id per sample. Implementations must be deterministic
// functions of (shape, x, t, labels) and return one value per element of x.
class VelocityField {
public:
    virtual ~VelocityField() = default;
    virtual std::vector<double> velocity(const Shape& shape, const std::vector<double>& x,
                                         double t, const std::vector<int>& labels) = 0;
    // Class id of the unconditional embedding c_null.
    virtual int null_label() const = 0;
};

// Evaluates a DitModel without recording autograd state.
class ModelVelocity : public VelocityField {
public:
    explicit ModelVelocity(const model::DitModel& m) : m_(m) {}
    std::vector<double> velocity(const Shape& shape, const std::vector<double>& x, double t,
                                 const std::vector<int>& labels) override;
    int null_label() const override { return static_cast<int>(m_.config().null_label_id()); }

private:
    const model::DitModel& m_;
};

struct SampleBatch {
    Shape shape;                 // (batch, channels, height, width)
    std::vector<double> values;  // row-major
};

// Classifier-free guidance blend: v_uncond + cfg_weight*(v_cond - v_uncond)
// when the gate admits t, v_cond unchanged otherwise.
std::vector<double> guided_velocity(const std::vector<double>& v_cond,
                                    const std::vector<double>& v_uncond, double t,
                                    const SampleSpec& spec);

// Euler integration of dx/dt = v from t=1 down to t_min over `steps` uniform
// steps, plus one deterministic Euler step t_min -> 0 when t_min > 0. The
// initial noise is the only randomness; sample i depends solely on
// (spec.seed, i), never on batch composition. Unconditional passes are
// skipped entirely whenever guidance cannot fire, so a guided spec with an
// empty gate reproduces the conditional-only trajectory bitwise.
// Non-finite state aborts with NumericalError carrying the step index.
SampleBatch sample_ode(VelocityField& field, const Shape& shape, const SampleSpec& spec,
                       const flow::InterpolantSchedule& sched);

// Euler-Maruyama for the reverse SDE with diffusion w_t = diffusion_scale *
// sigma(t): x <- x - dt*(v - (w_t/2)*score) + sqrt(w_t*dt)*z, with the score
// implied by the guided velocity. The final step below t_min is the same
// deterministic Euler step the ODE takes. diffusion_scale = 0 reproduces
// sample_ode bitwise at equal seeds.
SampleBatch sample_sde(VelocityField& field, const Shape& shape, const SampleSpec& spec,
                       const flow::InterpolantSchedule& sched);

// Derives the state shape from the model config (batch = spec.labels.size())
// and dispatches on spec.kind.
SampleBatch sample(const model::DitModel& m, const SampleSpec& spec,
                   const flow::InterpolantSchedule& sched);

}  // namespace lsep::sampler
