// SPDX-License-Identifier: Apache-2.0
#include "lsep/train.hpp"

#include <cmath>

namespace lsep::train {

void AdamWConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ValidationError("AdamWConfig: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError("AdamWConfig: eps must be positive");
    if (!(weight_decay >= 0.0)) throw ValidationError("AdamWConfig: weight_decay must be >= 0");
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig cfg)
    : groups_(std::move(groups)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& g : groups_) {
        if (!(g.lr > 0.0)) throw ValidationError("AdamW: group learning rate must be positive");
        for (const auto& p : g.params) {
            if (!p.defined()) throw ValidationError("AdamW: undefined parameter tensor");
            Slot s;
            s.exp_avg.assign(static_cast<size_t>(p.numel()), 0.0);
            s.exp_avg_sq.assign(static_cast<size_t>(p.numel()), 0.0);
            slots_.push_back(std::move(s));
        }
    }
}

void AdamW::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) p.zero_grad();
}

void AdamW::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    size_t slot = 0;
    for (auto& g : groups_) {
        for (auto& p : g.params) {
            Slot& s = slots_[slot++];
            double* value = p.data();
            const std::vector<double>& grad = p.grad();
            const int64_t n = p.numel();
            if (!grad.empty() && static_cast<int64_t>(grad.size()) != n)
                throw ValidationError("AdamW: gradient size mismatch");
            for (int64_t i = 0; i < n; ++i) {
                const double gi = grad.empty() ? 0.0 : grad[static_cast<size_t>(i)];
                double& m = s.exp_avg[static_cast<size_t>(i)];
                double& v = s.exp_avg_sq[static_cast<size_t>(i)];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gi;
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gi * gi;
                const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                value[i] -= g.lr * (update + cfg_.weight_decay * value[i]);
            }
        }
    }
}

void AdamW::set_step_count(int64_t n) {
    if (n < 0) throw ValidationError("AdamW: step count must be >= 0");
    step_count_ = n;
}

int64_t AdamW::param_count() const {
    int64_t n = 0;
    for (const auto& g : groups_)
        for (const auto& p : g.params) n += p.numel();
    return n;
}

EmaState::EmaState(const std::vector<model::NamedParam>& params) {
    names_.reserve(params.size());
    values_.reserve(params.size());
    for (const auto& p : params) {
        names_.push_back(p.name);
        values_.push_back(p.tensor.values());
    }
}

void EmaState::update(const std::vector<model::NamedParam>& params, double decay) {
    if (!(decay >= 0.0 && decay <= 1.0))
        throw ValidationError("EmaState: decay must lie in [0, 1]");
    if (params.size() != values_.size())
        throw ValidationError("EmaState: parameter count changed");
    for (size_t i = 0; i < params.size(); ++i) {
        const std::vector<double>& src = params[i].tensor.values();
        std::vector<double>& dst = values_[i];
        if (src.size() != dst.size())
            throw ValidationError("EmaState: shape of '" + params[i].name + "' changed");
        for (size_t j = 0; j < dst.size(); ++j)
            dst[j] = decay * dst[j] + (1.0 - decay) * src[j];
    }
}

void EmaState::write_to(std::vector<model::NamedParam>& params) const {
    if (params.size() != values_.size())
        throw ValidationError("EmaState: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].tensor.values().size() != values_[i].size())
            throw ValidationError("EmaState: shape of '" + params[i].name + "' mismatches");
        params[i].tensor.values() = values_[i];
    }
}

uint64_t EmaState::digest() const {
    Fnv1a h;
    for (size_t i = 0; i < values_.size(); ++i) {
        h.update(names_[i]);
        h.update(values_[i].data(), values_[i].size() * sizeof(double));
    }
    return h.digest();
}

}  // namespace lsep::train
