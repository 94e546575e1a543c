// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lsep/common.hpp"
#include "lsep/tensor.hpp"

namespace lsep::flow {

// Interpolant x_t = alpha(t)*x0 + sigma(t)*eps on t in [0,1], with
// alpha(0)=1, alpha(1)=0, sigma(0)=0, sigma(1)=1.
struct InterpolantSchedule {
    std::function<double(double)> alpha;
    std::function<double(double)> sigma;
    std::function<double(double)> alpha_dot;
    std::function<double(double)> sigma_dot;
    std::string name;
};

// The shipped schedule: alpha = 1-t, sigma = t.
InterpolantSchedule linear_schedule();

// Checks endpoint conventions, monotonicity, and that the provided
// derivatives match finite differences of alpha/sigma on a 100-point grid.
// Throws ValidationError on violation.
void validate_schedule(const InterpolantSchedule& sched);

// One noised batch; arrays are row-major (batch, channels, H, W).
struct NoisyBatch {
    Shape shape;                  // full array shape, shape[0] == batch
    std::vector<double> x_t;
    std::vector<double> x0;
    std::vector<double> epsilon;
    std::vector<double> t;        // per-sample times, size shape[0]
};

// x_t = alpha(t_b)*x0 + sigma(t_b)*eps, broadcast per sample.
NoisyBatch forward_noising(const Shape& shape, const std::vector<double>& x0,
                           const std::vector<double>& epsilon, const std::vector<double>& t,
                           const InterpolantSchedule& sched);

// Velocity target alpha_dot(t_b)*x0 + sigma_dot(t_b)*eps (for the linear
// schedule this is eps - x0).
std::vector<double> velocity_target(const Shape& shape, const std::vector<double>& x0,
                                    const std::vector<double>& epsilon,
                                    const std::vector<double>& t,
                                    const InterpolantSchedule& sched);

// Mean squared error over every element between `predicted` and the
// velocity target; differentiable through `predicted`.
nn::Tensor velocity_loss(const nn::Tensor& predicted, const std::vector<double>& x0,
                         const std::vector<double>& epsilon, const std::vector<double>& t,
                         const InterpolantSchedule& sched);

// Score estimate -(x_t + (1-t)*v_hat)/t implied by eps_hat = x_t + (1-t)*v_hat.
// Linear schedule only; every t must be strictly above t_min (1/t blows up
// at t=0).
std::vector<double> score_from_velocity(const Shape& shape, const std::vector<double>& x_t,
                                        const std::vector<double>& v_hat,
                                        const std::vector<double>& t,
                                        const InterpolantSchedule& sched, double t_min = 1e-3);

}  // namespace lsep::flow
