// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "lsep/common.hpp"
#include "lsep/flow.hpp"
#include "lsep/model.hpp"

namespace lsep::eval {

enum class Pooling { global_mean, none };

// Frozen-feature batch: (count, dim) when pooled, (count, tokens, dim) when
// not. Labels travel alongside for probing.
struct FeatureSet {
    Shape shape;
    std::vector<double> values;
    std::vector<int> labels;

    int64_t count() const { return shape.empty() ? 0 : shape[0]; }
    int64_t dim() const { return shape.empty() ? 0 : shape.back(); }
};

// Noises every sample to level t with a per-sample seeded draw, runs the
// frozen model to block `layer` (1-based) under unconditional conditioning,
// and optionally pools tokens. Two calls with equal arguments return
// identical features; no gradient state is touched.
FeatureSet extract_features(const model::DitModel& m, const Shape& data_shape,
                            const std::vector<double>& x0, const std::vector<int>& labels,
                            int64_t layer, double t, Pooling pooling, uint64_t noise_seed,
                            const flow::InterpolantSchedule& sched);

// Shuffled train/val split of a feature set.
struct SplitSpec {
    double train_fraction = 0.8;
    uint64_t seed = 0;
};

struct ProbeFitConfig {
    int64_t iterations = 200;  // full-batch optimizer steps
    double lr = 0.05;
};

struct ProbeOutcome {
    double val_accuracy = 0.0;
    double train_accuracy = 0.0;
    double final_loss = 0.0;
    int64_t train_count = 0;
    int64_t val_count = 0;
};

// Fits a layer-norm + linear classifier on frozen pooled features and
// reports held-out accuracy. Splits with a single class on either side are
// rejected; equal inputs give equal outcomes.
ProbeOutcome train_linear_probe(const FeatureSet& features, int64_t num_classes,
                                const SplitSpec& split, const ProbeFitConfig& fit);

struct ProbePoint {
    int64_t layer = 0;
    double t = 0.0;
    double accuracy = 0.0;
};

struct ProbeReport {
    std::vector<ProbePoint> points;  // layer-major, times inner
    int64_t iterations = 0;
    double lr = 0.0;
    int64_t train_count = 0;
    int64_t val_count = 0;
};

// Linear probing over a (layer, t) grid with shared split and fit settings.
ProbeReport probe_grid(const model::DitModel& m, const Shape& data_shape,
                       const std::vector<double>& x0, const std::vector<int>& labels,
                       int64_t num_classes, const std::vector<int64_t>& layers,
                       const std::vector<double>& times, const SplitSpec& split,
                       const ProbeFitConfig& fit, uint64_t noise_seed,
                       const flow::InterpolantSchedule& sched);

// Gaussian fit of a feature set, the two sufficient statistics of the
// Frechet distance. The covariance is stored dense row-major and is exactly
// symmetric by construction.
struct FrechetStats {
    int64_t count = 0;
    std::vector<double> mean;  // (dim)
    std::vector<double> cov;   // (dim, dim), unbiased

    int64_t dim() const { return static_cast<int64_t>(mean.size()); }
};

FrechetStats compute_frechet_stats(const std::vector<double>& rows, int64_t count, int64_t dim);

// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), evaluated through the
// symmetric form (Sa^(1/2) Sb Sa^(1/2))^(1/2). Throws NumericalError with
// the offending eigenvalue when a covariance is not PSD within tolerance.
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

struct PcaResult {
    int64_t components = 0;
    std::vector<double> projected;   // (count, components)
    std::vector<double> explained;   // variance ratios, non-increasing
    std::vector<double> directions;  // (components, dim), unit rows
    bool rank_deficient = false;     // some components padded with zeros
};

// Centers the rows, projects onto the top principal directions, and reports
// explained-variance ratios. Directions beyond the data's rank come back as
// zero rows with the flag set.
PcaResult pca_project(const std::vector<double>& rows, int64_t count, int64_t dim,
                      int64_t components = 3);

// ---- FID-proxy feature extractor ----

struct ProxyConfig {
    int64_t width = 64;     // first hidden layer
    int64_t feat_dim = 16;  // penultimate layer = feature space
};

// Small supervised MLP classifier over flattened pixels. Trained once on the
// dataset, then frozen; its penultimate activations replace the usual
// large pretrained feature network in the Frechet-distance proxy, so only
// orderings between distances are meaningful, never absolute values.
class ProxyExtractor {
public:
    // `sample_shape` is (channels, height, width).
    ProxyExtractor(Shape sample_shape, int64_t num_classes, ProxyConfig cfg, uint64_t init_seed);

    const Shape& sample_shape() const { return sample_shape_; }
    int64_t num_classes() const { return num_classes_; }
    int64_t feat_dim() const { return cfg_.feat_dim; }
    std::vector<model::NamedParam>& params() { return params_; }
    const std::vector<model::NamedParam>& params() const { return params_; }
    uint64_t param_digest() const;

    // Minibatch cross-entropy training; returns final whole-set train
    // accuracy. Deterministic given seeds.
    double fit(const std::vector<double>& x, const Shape& shape, const std::vector<int>& labels,
               int64_t epochs, int64_t batch_size, double lr, uint64_t seed);

    // Penultimate activations, (count, feat_dim).
    std::vector<double> features(const std::vector<double>& x, const Shape& shape) const;
    std::vector<int> predict(const std::vector<double>& x, const Shape& shape) const;

private:
    nn::Tensor forward_features(const nn::Tensor& flat) const;
    nn::Tensor forward_logits(const nn::Tensor& feats) const;
    void check_batch(const std::vector<double>& x, const Shape& shape) const;

    Shape sample_shape_;
    int64_t num_classes_;
    ProxyConfig cfg_;
    std::vector<model::NamedParam> params_;
};

// Frechet statistics of proxy features for an image set.
FrechetStats frechet_from_images(const ProxyExtractor& proxy, const std::vector<double>& x,
                                 const Shape& shape);

}  // namespace lsep::eval
