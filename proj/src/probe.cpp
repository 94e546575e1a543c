// SPDX-License-Identifier: Apache-2.0
#include "lsep/probe.hpp"

#include <cmath>

#include "lsep/rng.hpp"

namespace lsep::probe {

using nn::Tensor;

void ProbePolicy::validate(int64_t grid_side, int64_t depth) const {
    if (target_depth < 1 || target_depth >= depth)
        throw ValidationError("ProbePolicy: target_depth " + std::to_string(target_depth) +
                              " outside [1, depth)");
    if (!(rho_L >= 0.0 && rho_L <= 1.0))
        throw ValidationError("ProbePolicy: rho_L " + std::to_string(rho_L) + " outside [0,1]");
    if (crop_min < 1 || crop_min > crop_max || crop_max > grid_side)
        throw ValidationError("ProbePolicy: crop range [" + std::to_string(crop_min) + "," +
                              std::to_string(crop_max) + "] invalid for grid side " +
                              std::to_string(grid_side));
    if (omega_start > omega_end)
        throw ValidationError("ProbePolicy: omega_start > omega_end");
    if (bins < 1) throw ValidationError("ProbePolicy: bins must be >= 1");
    if (!(probe_lr > 0.0)) throw ValidationError("ProbePolicy: probe_lr must be positive");
    if (label_mode != "ground_truth" && label_mode != "random_nonnull")
        throw ValidationError("ProbePolicy: unknown label_mode '" + label_mode + "'");
}

ProbeHead::ProbeHead(int64_t hidden_dim, int64_t num_classes)
    : hidden_dim_(hidden_dim), num_classes_(num_classes) {
    if (hidden_dim <= 0 || num_classes <= 0)
        throw ValidationError("ProbeHead: dimensions must be positive");
    auto add = [&](const std::string& name, Shape shape, double fill) {
        std::vector<double> v(static_cast<size_t>(numel_of(shape)), fill);
        params_.push_back({name, Tensor::param(std::move(shape), std::move(v))});
    };
    add("probe.ln.gain", {hidden_dim}, 1.0);
    add("probe.ln.bias", {hidden_dim}, 0.0);
    add("probe.linear.weight", {num_classes, hidden_dim}, 0.0);
    add("probe.linear.bias", {num_classes}, 0.0);
}

Tensor ProbeHead::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw ValidationError("ProbeHead: no parameter named '" + name + "'");
}

int64_t ProbeHead::param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

Tensor ProbeHead::forward(const nn::Tensor& pooled) const {
    if (pooled.shape().size() != 2 || pooled.dim(1) != hidden_dim_)
        throw ValidationError("ProbeHead: pooled shape " + shape_str(pooled.shape()) +
                              ", expected (batch," + std::to_string(hidden_dim_) + ")");
    if (!all_finite(pooled.data(), pooled.numel()))
        throw NumericalError("ProbeHead: non-finite pooled features");
    Tensor normed = nn::layernorm(pooled, param("probe.ln.gain"), param("probe.ln.bias"));
    return nn::linear(normed, param("probe.linear.weight"), param("probe.linear.bias"));
}

std::vector<int> sample_probe_labels(const std::vector<int>& gt_labels, double rho_L,
                                     int64_t num_classes, std::mt19937_64& eng,
                                     const std::string& label_mode) {
    std::vector<int> out(gt_labels.size());
    const int null_id = static_cast<int>(num_classes);
    for (size_t i = 0; i < gt_labels.size(); ++i) {
        if (gt_labels[i] < 0 || gt_labels[i] >= null_id)
            throw ValidationError("sample_probe_labels: label " + std::to_string(gt_labels[i]) +
                                  " is not a real class in [0," + std::to_string(num_classes) +
                                  ")");
        const double u = uniform01(eng);
        if (u < rho_L) {
            out[i] = null_id;
        } else if (label_mode == "random_nonnull") {
            out[i] = static_cast<int>(uniform_int(eng, 0, num_classes - 1));
        } else {
            out[i] = gt_labels[i];
        }
    }
    return out;
}

CropWindow sample_crop(const ProbePolicy& policy, int64_t grid_side, std::mt19937_64& eng) {
    if (policy.crop_min < 1 || policy.crop_min > policy.crop_max ||
        policy.crop_max > grid_side)
        throw ValidationError("sample_crop: crop range [" + std::to_string(policy.crop_min) +
                              "," + std::to_string(policy.crop_max) + "] invalid for grid side " +
                              std::to_string(grid_side));
    CropWindow w;
    w.n = uniform_int(eng, policy.crop_min, policy.crop_max);
    w.row = uniform_int(eng, 0, grid_side - w.n);
    w.col = uniform_int(eng, 0, grid_side - w.n);
    return w;
}

Tensor crop_pool(const Tensor& features, int64_t batch, int64_t grid_side,
                 const CropWindow& window) {
    if (window.n < 1 || window.row < 0 || window.col < 0 ||
        window.row + window.n > grid_side || window.col + window.n > grid_side)
        throw ValidationError("crop_pool: window " + std::to_string(window.n) + "x" +
                              std::to_string(window.n) + " at (" + std::to_string(window.row) +
                              "," + std::to_string(window.col) + ") outside grid " +
                              std::to_string(grid_side));
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(window.n * window.n));
    for (int64_t r = window.row; r < window.row + window.n; ++r)
        for (int64_t c = window.col; c < window.col + window.n; ++c)
            ids.push_back(static_cast<int>(r * grid_side + c));
    return nn::tokens_subset_mean(features, batch, grid_side * grid_side, ids);
}

Tensor class_loss(const Tensor& logits, const std::vector<int>& gt_labels) {
    return nn::mean_all(nn::cross_entropy_rows(logits, gt_labels));
}

double omega_class(double t, const ProbePolicy& policy) {
    if (!(t >= 0.0 && t <= 1.0))
        throw ValidationError("omega_class: t=" + std::to_string(t) + " outside [0,1]");
    const double delta =
        (policy.omega_end - policy.omega_start) / static_cast<double>(policy.bins);
    int64_t j = static_cast<int64_t>(std::floor(t * static_cast<double>(policy.bins)));
    j = std::min(j, policy.bins - 1);
    return policy.omega_start + static_cast<double>(j) * delta;
}

LsepParts lsep_loss(const model::DitModel& m, const ProbeHead& head, const Shape& shape,
                    const std::vector<double>& x0, const std::vector<double>& epsilon,
                    const std::vector<double>& t, const std::vector<int>& gt_labels,
                    const ProbePolicy& policy, double rho_D,
                    const flow::InterpolantSchedule& sched, std::mt19937_64& denoiser_eng,
                    std::mt19937_64& probe_eng, std::vector<nn::Tensor>* denoiser_capture) {
    const auto& cfg = m.config();
    policy.validate(cfg.grid(), cfg.depth);
    if (!(rho_D >= 0.0 && rho_D <= 1.0))
        throw ValidationError("lsep_loss: rho_D outside [0,1]");
    if (gt_labels.size() != t.size())
        throw ValidationError("lsep_loss: label/time batch mismatch");
    for (int l : gt_labels)
        if (l < 0 || l >= cfg.num_classes)
            throw ValidationError("lsep_loss: ground-truth label " + std::to_string(l) +
                                  " is not a real class");

    // Denoiser conditioning: ground truth dropped to c_null w.p. rho_D.
    const int null_id = static_cast<int>(cfg.null_label_id());
    std::vector<int> den_labels(gt_labels);
    for (auto& l : den_labels)
        if (uniform01(denoiser_eng) < rho_D) l = null_id;

    flow::NoisyBatch nb = flow::forward_noising(shape, x0, epsilon, t, sched);
    Tensor x_t = Tensor::from(shape, nb.x_t);

    Tensor v = m.forward_velocity(x_t, t, den_labels, denoiser_capture);
    Tensor vel = flow::velocity_loss(v, x0, epsilon, t, sched);

    LsepParts parts;
    parts.velocity = vel.item();
    if (!policy.enabled()) {
        // Baseline objective: the probe branch contributes no graph nodes,
        // keeping the step bit-identical to a plain velocity run.
        parts.total = vel;
        return parts;
    }

    std::vector<int> probe_labels =
        sample_probe_labels(gt_labels, policy.rho_L, cfg.num_classes, probe_eng,
                            policy.label_mode);
    int64_t nulls = 0;
    for (int l : probe_labels) nulls += (l == null_id) ? 1 : 0;
    parts.null_fraction =
        static_cast<double>(nulls) / static_cast<double>(probe_labels.size());
    parts.crop = sample_crop(policy, cfg.grid(), probe_eng);

    Tensor hidden = m.forward_to_depth(x_t, t, probe_labels, policy.target_depth);
    Tensor pooled = crop_pool(hidden, shape[0], cfg.grid(), parts.crop);
    Tensor logits = head.forward(pooled);
    Tensor ce = nn::cross_entropy_rows(logits, gt_labels);

    std::vector<double> w(t.size());
    double omega_sum = 0.0, ce_sum = 0.0;
    for (size_t i = 0; i < t.size(); ++i) {
        w[i] = omega_class(t[i], policy);
        omega_sum += w[i];
        ce_sum += ce.data()[i];
    }
    parts.omega_mean = omega_sum / static_cast<double>(t.size());
    parts.class_mean = ce_sum / static_cast<double>(t.size());

    Tensor weighted = nn::weighted_mean(ce, w);
    parts.class_term = weighted.item();
    parts.total = nn::add(vel, weighted);
    return parts;
}

}  // namespace lsep::probe
