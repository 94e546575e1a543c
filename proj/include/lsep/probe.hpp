// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lsep/flow.hpp"
#include "lsep/model.hpp"
#include "lsep/tensor.hpp"

namespace lsep::probe {

// Probe-branch configuration: tap depth, unconditioning probability for the
// probe pass, crop range over the token grid, and the piecewise-constant
// classification weight schedule.
struct ProbePolicy {
    int64_t target_depth = 2;  // 1-based block index k
    double rho_L = 0.9;        // probability the probe branch sees c_null
    int64_t crop_min = 1;
    int64_t crop_max = 1;      // crop side n drawn uniformly from [crop_min, crop_max]
    double omega_start = 0.0;
    double omega_end = 0.0;
    int64_t bins = 1;
    double probe_lr = 0.03;
    // How non-null probe labels are chosen: the sample's ground truth
    // ("ground_truth", default) or a uniformly random real class
    // ("random_nonnull"). The source text does not disambiguate.
    std::string label_mode = "ground_truth";

    // ω ≡ 0 disables the probe branch entirely.
    bool enabled() const { return omega_start != 0.0 || omega_end != 0.0; }
    void validate(int64_t grid_side, int64_t depth) const;
    bool operator==(const ProbePolicy&) const = default;
};

// LayerNorm (gain, bias) followed by a linear classifier — the probe head
// attached to pooled block-k features. All parameters train jointly with
// the trunk (optionally at their own learning rate).
class ProbeHead {
public:
    ProbeHead(int64_t hidden_dim, int64_t num_classes);

    int64_t hidden_dim() const { return hidden_dim_; }
    int64_t num_classes() const { return num_classes_; }
    std::vector<model::NamedParam>& params() { return params_; }
    const std::vector<model::NamedParam>& params() const { return params_; }
    nn::Tensor param(const std::string& name) const;
    int64_t param_count() const;

    // logits = W * layernorm(pooled) + b. Softmax lives in the loss.
    nn::Tensor forward(const nn::Tensor& pooled) const;

private:
    int64_t hidden_dim_;
    int64_t num_classes_;
    std::vector<model::NamedParam> params_;
};

// Per-sample probe-branch conditioning labels: c_null with probability
// rho_L, otherwise the ground-truth label (or a random real class under
// "random_nonnull"). Ground-truth labels must be real classes.
std::vector<int> sample_probe_labels(const std::vector<int>& gt_labels, double rho_L,
                                     int64_t num_classes, std::mt19937_64& eng,
                                     const std::string& label_mode = "ground_truth");

struct CropWindow {
    int64_t n = 0;    // side length in tokens
    int64_t row = 0;  // top-left corner on the token grid
    int64_t col = 0;
};

// Draws n uniform over [crop_min, crop_max], then a uniformly random
// placement of the n x n window (row before column).
CropWindow sample_crop(const ProbePolicy& policy, int64_t grid_side, std::mt19937_64& eng);

// Mean over the n^2 tokens inside the window, per channel.
// features: (batch*T, hidden_dim) in row-major grid order.
nn::Tensor crop_pool(const nn::Tensor& features, int64_t batch, int64_t grid_side,
                     const CropWindow& window);

// Mean cross-entropy against ground-truth labels (always real classes).
nn::Tensor class_loss(const nn::Tensor& logits, const std::vector<int>& gt_labels);

// Piecewise-constant weight: omega_start + j*(omega_end-omega_start)/bins
// with j = min(floor(t*bins), bins-1).
double omega_class(double t, const ProbePolicy& policy);

struct LsepParts {
    nn::Tensor total;           // differentiable loss (velocity + weighted class term)
    double velocity = 0.0;
    double class_mean = 0.0;    // unweighted mean cross-entropy (0 when disabled)
    double class_term = 0.0;    // mean over batch of omega(t_i) * CE_i
    double omega_mean = 0.0;
    double null_fraction = 0.0; // fraction of probe labels replaced by c_null
    CropWindow crop;
};

// One full LSEP objective evaluation: the denoising pass conditioned on
// ground truth (dropped to c_null with probability rho_D, drawn from
// `denoiser_eng`) plus a separate truncated probe pass through blocks
// 1..k conditioned by `probe_eng` draws. With omega identically zero the
// probe branch is skipped and `total` is exactly the velocity loss, so a
// baseline run consumes identical denoiser randomness. When
// `denoiser_capture` is given it receives the denoising pass's per-block
// token outputs (for alignment losses tapping intermediate features).
LsepParts lsep_loss(const model::DitModel& m, const ProbeHead& head, const Shape& shape,
                    const std::vector<double>& x0, const std::vector<double>& epsilon,
                    const std::vector<double>& t, const std::vector<int>& gt_labels,
                    const ProbePolicy& policy, double rho_D,
                    const flow::InterpolantSchedule& sched, std::mt19937_64& denoiser_eng,
                    std::mt19937_64& probe_eng,
                    std::vector<nn::Tensor>* denoiser_capture = nullptr);

}  // namespace lsep::probe
