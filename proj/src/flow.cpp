// SPDX-License-Identifier: Apache-2.0
#include "lsep/flow.hpp"

#include <cmath>

namespace lsep::flow {

namespace {

// Validates the shared preconditions of the batched schedule ops and
// returns the per-sample element count.
int64_t check_batch(const Shape& shape, const std::vector<double>& a, const std::vector<double>& b,
                    const std::vector<double>& t, const char* op) {
    const int64_t n = numel_of(shape);
    if (shape.empty() || shape[0] <= 0)
        throw ValidationError(std::string(op) + ": batch shape " + shape_str(shape) + " is empty");
    if (static_cast<int64_t>(a.size()) != n || static_cast<int64_t>(b.size()) != n)
        throw ValidationError(std::string(op) + ": array sizes " + std::to_string(a.size()) +
                              ", " + std::to_string(b.size()) + " do not match shape " +
                              shape_str(shape));
    if (static_cast<int64_t>(t.size()) != shape[0])
        throw ValidationError(std::string(op) + ": " + std::to_string(t.size()) +
                              " times for batch " + std::to_string(shape[0]));
    return n / shape[0];
}

void check_times(const std::vector<double>& t, const char* op) {
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError(std::string(op) + ": time " + std::to_string(v) +
                                  " outside [0,1]");
}

void check_schedule_callable(const InterpolantSchedule& sched, const char* op) {
    if (!sched.alpha || !sched.sigma || !sched.alpha_dot || !sched.sigma_dot)
        throw ValidationError(std::string(op) + ": schedule '" + sched.name +
                              "' has unset coefficient functions");
}

}  // namespace

InterpolantSchedule linear_schedule() {
    return InterpolantSchedule{
        [](double t) { return 1.0 - t; },
        [](double t) { return t; },
        [](double) { return -1.0; },
        [](double) { return 1.0; },
        "linear",
    };
}

void validate_schedule(const InterpolantSchedule& sched) {
    check_schedule_callable(sched, "validate_schedule");
    auto close = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };
    if (!close(sched.alpha(0.0), 1.0, 1e-9) || !close(sched.alpha(1.0), 0.0, 1e-9) ||
        !close(sched.sigma(0.0), 0.0, 1e-9) || !close(sched.sigma(1.0), 1.0, 1e-9))
        throw ValidationError("schedule '" + sched.name + "': endpoint convention violated");
    const int grid = 100;
    double prev_a = sched.alpha(0.0), prev_s = sched.sigma(0.0);
    for (int i = 1; i <= grid; ++i) {
        const double t = static_cast<double>(i) / grid;
        const double a = sched.alpha(t), s = sched.sigma(t);
        if (a > prev_a + 1e-12 || s < prev_s - 1e-12)
            throw ValidationError("schedule '" + sched.name + "': monotonicity violated at t=" +
                                  std::to_string(t));
        prev_a = a;
        prev_s = s;
    }
    const double h = 1e-6;
    for (int i = 0; i <= grid; ++i) {
        double t = static_cast<double>(i) / grid;
        // one-sided at the endpoints, central inside
        const double lo = std::max(0.0, t - h), hi = std::min(1.0, t + h);
        const double fd_a = (sched.alpha(hi) - sched.alpha(lo)) / (hi - lo);
        const double fd_s = (sched.sigma(hi) - sched.sigma(lo)) / (hi - lo);
        if (!close(fd_a, sched.alpha_dot(t), 1e-5) || !close(fd_s, sched.sigma_dot(t), 1e-5))
            throw ValidationError("schedule '" + sched.name +
                                  "': derivative mismatch at t=" + std::to_string(t));
    }
}

NoisyBatch forward_noising(const Shape& shape, const std::vector<double>& x0,
                           const std::vector<double>& epsilon, const std::vector<double>& t,
                           const InterpolantSchedule& sched) {
    const int64_t per = check_batch(shape, x0, epsilon, t, "forward_noising");
    check_times(t, "forward_noising");
    check_schedule_callable(sched, "forward_noising");
    NoisyBatch nb;
    nb.shape = shape;
    nb.x0 = x0;
    nb.epsilon = epsilon;
    nb.t = t;
    nb.x_t.resize(x0.size());
    for (int64_t b = 0; b < shape[0]; ++b) {
        const double a = sched.alpha(t[b]), s = sched.sigma(t[b]);
        for (int64_t i = b * per; i < (b + 1) * per; ++i)
            nb.x_t[i] = a * x0[i] + s * epsilon[i];
    }
    return nb;
}

std::vector<double> velocity_target(const Shape& shape, const std::vector<double>& x0,
                                    const std::vector<double>& epsilon,
                                    const std::vector<double>& t,
                                    const InterpolantSchedule& sched) {
    const int64_t per = check_batch(shape, x0, epsilon, t, "velocity_target");
    check_times(t, "velocity_target");
    check_schedule_callable(sched, "velocity_target");
    std::vector<double> out(x0.size());
    for (int64_t b = 0; b < shape[0]; ++b) {
        const double ad = sched.alpha_dot(t[b]), sd = sched.sigma_dot(t[b]);
        for (int64_t i = b * per; i < (b + 1) * per; ++i)
            out[i] = ad * x0[i] + sd * epsilon[i];
    }
    return out;
}

nn::Tensor velocity_loss(const nn::Tensor& predicted, const std::vector<double>& x0,
                         const std::vector<double>& epsilon, const std::vector<double>& t,
                         const InterpolantSchedule& sched) {
    if (!all_finite(predicted.data(), predicted.numel()))
        throw ValidationError("velocity_loss: non-finite prediction");
    if (!all_finite(x0.data(), static_cast<int64_t>(x0.size())) ||
        !all_finite(epsilon.data(), static_cast<int64_t>(epsilon.size())))
        throw ValidationError("velocity_loss: non-finite inputs");
    std::vector<double> target = velocity_target(predicted.shape(), x0, epsilon, t, sched);
    nn::Tensor tgt = nn::Tensor::from(predicted.shape(), std::move(target));
    nn::Tensor err = nn::sub(predicted, tgt);
    return nn::mean_all(nn::mul(err, err));
}

std::vector<double> score_from_velocity(const Shape& shape, const std::vector<double>& x_t,
                                        const std::vector<double>& v_hat,
                                        const std::vector<double>& t,
                                        const InterpolantSchedule& sched, double t_min) {
    if (sched.name != "linear")
        throw ValidationError("score_from_velocity: only the linear schedule is supported, got '" +
                              sched.name + "'");
    if (!(t_min > 0.0))
        throw ValidationError("score_from_velocity: t_min must be positive");
    const int64_t per = check_batch(shape, x_t, v_hat, t, "score_from_velocity");
    for (double v : t)
        if (!(v > t_min))
            throw ValidationError("score_from_velocity: t=" + std::to_string(v) +
                                  " at or below floor " + std::to_string(t_min));
    std::vector<double> out(x_t.size());
    for (int64_t b = 0; b < shape[0]; ++b) {
        const double tb = t[b];
        for (int64_t i = b * per; i < (b + 1) * per; ++i)
            out[i] = -(x_t[i] + (1.0 - tb) * v_hat[i]) / tb;
    }
    return out;
}

}  // namespace lsep::flow
