// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lsep/probe.hpp"
#include "lsep/tensor.hpp"

namespace lsep::repa {

// One batch of alignment targets: (batch*tokens, feat_dim) row-major.
struct FeatureBatch {
    int64_t tokens = 0;
    int64_t feat_dim = 0;
    std::vector<double> values;
};

// Supplies clean-image target features for representation alignment.
// Implementations must be pure: the same inputs yield the same features.
class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual std::string descriptor() const = 0;
    virtual int64_t feat_dim() const = 0;
    // x_clean: (batch, C, H, W) row-major. `sample_ids` identifies each
    // batch element for providers backed by precomputed files; providers
    // that derive features from pixels ignore it.
    virtual FeatureBatch clean_features(const Shape& shape, const std::vector<double>& x_clean,
                                        std::span<const int64_t> sample_ids) const = 0;
};

// Encoder-free provider: raw flattened patches of the clean image, one
// feature vector per trunk token. Useful as a desk-scale default and for
// deterministic tests.
class PatchProvider : public FeatureProvider {
public:
    PatchProvider(int64_t channels, int64_t patch_size);

    std::string descriptor() const override;
    int64_t feat_dim() const override { return channels_ * patch_size_ * patch_size_; }
    FeatureBatch clean_features(const Shape& shape, const std::vector<double>& x_clean,
                                std::span<const int64_t> sample_ids) const override;

private:
    int64_t channels_;
    int64_t patch_size_;
};

// Precomputed-feature container: sample id -> (tokens, feat_dim) f32 array,
// with a header recording the producing provider's descriptor.
struct FeatureFile {
    std::string descriptor;
    int64_t tokens = 0;
    int64_t feat_dim = 0;
    std::map<int64_t, std::vector<float>> records;  // id -> tokens*feat_dim values
};

void write_feature_file(const std::string& path, const FeatureFile& file);
FeatureFile read_feature_file(const std::string& path);

// Serves features from a precomputed file; requires sample ids.
class FileFeatureProvider : public FeatureProvider {
public:
    explicit FileFeatureProvider(const std::string& path);

    std::string descriptor() const override { return file_.descriptor; }
    int64_t feat_dim() const override { return file_.feat_dim; }
    FeatureBatch clean_features(const Shape& shape, const std::vector<double>& x_clean,
                                std::span<const int64_t> sample_ids) const override;

private:
    FeatureFile file_;
};

// Trainable MLP projecting trunk features (hidden_dim) onto the provider's
// feature space (feat_dim): `depth` SiLU hidden layers of width `width`,
// then a linear output layer. depth=0 degenerates to a single linear map.
class AlignmentHead {
public:
    AlignmentHead(int64_t hidden_dim, int64_t feat_dim, int64_t width, int64_t depth,
                  uint64_t init_seed);

    int64_t hidden_dim() const { return hidden_dim_; }
    int64_t feat_dim() const { return feat_dim_; }
    std::vector<model::NamedParam>& params() { return params_; }
    const std::vector<model::NamedParam>& params() const { return params_; }
    nn::Tensor param(const std::string& name) const;

    // x: (rows, hidden_dim) -> (rows, feat_dim)
    nn::Tensor forward(const nn::Tensor& x) const;

private:
    int64_t hidden_dim_;
    int64_t feat_dim_;
    int64_t depth_;
    std::vector<model::NamedParam> params_;
};

// Negative mean patch-wise cosine similarity between projected hidden
// features and targets; in [-1, 1]. Zero-norm rows contribute similarity 0
// and are counted into *zero_rows when given.
nn::Tensor repa_loss(const nn::Tensor& hidden, const nn::Tensor& targets,
                     const AlignmentHead& head, int64_t* zero_rows = nullptr);

struct RepaConfig {
    double lambda = 0.5;      // Eq. 4 weight on the alignment term
    int64_t align_depth = 0;  // 1-based tap; 0 reuses ProbePolicy::target_depth

    bool enabled() const { return lambda != 0.0; }
};

struct CombinedParts {
    nn::Tensor total;  // velocity + lambda*alignment + omega-weighted class
    probe::LsepParts lsep;
    double repa = 0.0;  // alignment term value (0 when disabled)
    int64_t zero_rows = 0;
};

// Eq. 4 + Eq. 6 objective. With lambda = 0 the provider and head are never
// touched and `total` is exactly the LSEP objective's node; with omega also
// identically zero it degenerates to the bare velocity loss.
CombinedParts combined_repa_lsep_loss(
    const model::DitModel& m, const probe::ProbeHead& probe_head, const AlignmentHead& align_head,
    const FeatureProvider& provider, const Shape& shape, const std::vector<double>& x0,
    const std::vector<double>& epsilon, const std::vector<double>& t,
    const std::vector<int>& gt_labels, std::span<const int64_t> sample_ids,
    const probe::ProbePolicy& policy, double rho_D, const RepaConfig& repa_cfg,
    const flow::InterpolantSchedule& sched, std::mt19937_64& denoiser_eng,
    std::mt19937_64& probe_eng);

}  // namespace lsep::repa
