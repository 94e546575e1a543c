// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsep/common.hpp"
#include "lsep/model.hpp"
#include "lsep/tensor.hpp"

namespace lsep::train {

// Shared optimizer hyperparameters; the per-group learning rate lives on
// the group so the trunk, probe head and alignment head can differ.
struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const;  // throws ValidationError
};

struct ParamGroup {
    std::vector<nn::Tensor> params;
    double lr = 1e-4;
};

// Decoupled-weight-decay Adam. Parameters whose gradient buffer is empty at
// step() are treated as having zero gradient (their moments decay and the
// values stay put at zero weight decay), so disabling a loss branch never
// perturbs the update sequence of the others.
class AdamW {
public:
    AdamW(std::vector<ParamGroup> groups, AdamWConfig cfg);

    void zero_grad();
    void step();
    int64_t step_count() const { return step_count_; }

    // First/second moment buffers in group-major parameter order, exposed
    // for checkpointing.
    struct Slot {
        std::vector<double> exp_avg;
        std::vector<double> exp_avg_sq;
    };
    const std::vector<Slot>& slots() const { return slots_; }
    std::vector<Slot>& slots() { return slots_; }
    void set_step_count(int64_t n);
    int64_t param_count() const;

private:
    std::vector<ParamGroup> groups_;
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    int64_t step_count_ = 0;
};

// Exponential moving average of named parameter values,
// ema' = decay*ema + (1-decay)*param. Evaluation and sampling read these.
class EmaState {
public:
    explicit EmaState(const std::vector<model::NamedParam>& params);  // copies current values

    void update(const std::vector<model::NamedParam>& params, double decay);
    // Overwrites the parameter values with the averaged ones.
    void write_to(std::vector<model::NamedParam>& params) const;

    const std::vector<std::vector<double>>& values() const { return values_; }
    std::vector<std::vector<double>>& values() { return values_; }
    const std::vector<std::string>& names() const { return names_; }
    uint64_t digest() const;

private:
    std::vector<std::string> names_;
    std::vector<std::vector<double>> values_;
};

}  // namespace lsep::train
