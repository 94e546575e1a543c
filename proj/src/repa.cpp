// SPDX-License-Identifier: Apache-2.0
#include "lsep/repa.hpp"

#include <cmath>
#include <fstream>

#include "lsep/io.hpp"
#include "lsep/rng.hpp"

namespace lsep::repa {

using nn::Tensor;

namespace {

constexpr char kFeatureMagic[8] = {'L', 'S', 'E', 'P', 'F', 'E', 'A', 'T'};
constexpr uint32_t kFeatureVersion = 1;

void check_clean_batch(const Shape& shape, const std::vector<double>& x_clean,
                       const char* who) {
    if (shape.size() != 4 || shape[0] <= 0)
        throw ValidationError(std::string(who) + ": clean batch shape " + shape_str(shape) +
                              ", expected (batch, C, H, W)");
    if (static_cast<int64_t>(x_clean.size()) != numel_of(shape))
        throw ValidationError(std::string(who) + ": clean array size " +
                              std::to_string(x_clean.size()) + " does not match shape " +
                              shape_str(shape));
    if (!all_finite(x_clean.data(), numel_of(shape)))
        throw NumericalError(std::string(who) + ": non-finite clean inputs");
}

}  // namespace

PatchProvider::PatchProvider(int64_t channels, int64_t patch_size)
    : channels_(channels), patch_size_(patch_size) {
    if (channels <= 0 || patch_size <= 0)
        throw ValidationError("PatchProvider: dimensions must be positive");
}

std::string PatchProvider::descriptor() const {
    return "patch_pixels:c" + std::to_string(channels_) + ":p" + std::to_string(patch_size_);
}

FeatureBatch PatchProvider::clean_features(const Shape& shape, const std::vector<double>& x_clean,
                                           std::span<const int64_t>) const {
    check_clean_batch(shape, x_clean, "PatchProvider");
    if (shape[1] != channels_ || shape[2] != shape[3] || shape[2] % patch_size_ != 0)
        throw ValidationError("PatchProvider: batch " + shape_str(shape) +
                              " incompatible with " + descriptor());
    nn::NoGradGuard g;
    Tensor patches = nn::patchify(Tensor::from(shape, x_clean), patch_size_);
    FeatureBatch fb;
    fb.tokens = (shape[2] / patch_size_) * (shape[3] / patch_size_);
    fb.feat_dim = feat_dim();
    fb.values = patches.values();
    return fb;
}

void write_feature_file(const std::string& path, const FeatureFile& file) {
    if (file.tokens <= 0 || file.feat_dim <= 0)
        throw ValidationError("write_feature_file: tokens and feat_dim must be positive");
    const size_t per = static_cast<size_t>(file.tokens * file.feat_dim);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("write_feature_file: cannot open '" + path + "'");
    io::write_magic(os, kFeatureMagic);
    io::write_u32(os, kFeatureVersion);
    io::write_str(os, file.descriptor);
    io::write_i64(os, file.tokens);
    io::write_i64(os, file.feat_dim);
    io::write_u64(os, file.records.size());
    for (const auto& [id, values] : file.records) {
        if (values.size() != per)
            throw ValidationError("write_feature_file: record " + std::to_string(id) + " has " +
                                  std::to_string(values.size()) + " values, expected " +
                                  std::to_string(per));
        io::write_i64(os, id);
        io::write_f32(os, values.data(), values.size());
    }
    if (!os) throw ValidationError("write_feature_file: write to '" + path + "' failed");
}

FeatureFile read_feature_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("read_feature_file: cannot open '" + path + "'");
    io::expect_magic(is, kFeatureMagic, "read_feature_file");
    const uint32_t version = io::read_u32(is, "read_feature_file");
    if (version != kFeatureVersion)
        throw ValidationError("read_feature_file: unsupported version " +
                              std::to_string(version));
    FeatureFile file;
    file.descriptor = io::read_str(is, "read_feature_file");
    file.tokens = io::read_i64(is, "read_feature_file");
    file.feat_dim = io::read_i64(is, "read_feature_file");
    if (file.tokens <= 0 || file.feat_dim <= 0)
        throw ValidationError("read_feature_file: non-positive dimensions in header");
    const uint64_t count = io::read_u64(is, "read_feature_file");
    const size_t per = static_cast<size_t>(file.tokens * file.feat_dim);
    for (uint64_t r = 0; r < count; ++r) {
        const int64_t id = io::read_i64(is, "read_feature_file");
        std::vector<float> values(per);
        io::read_f32(is, values.data(), per, "read_feature_file");
        for (float v : values)
            if (!std::isfinite(v))
                throw NumericalError("read_feature_file: non-finite feature in record " +
                                     std::to_string(id));
        if (!file.records.emplace(id, std::move(values)).second)
            throw ValidationError("read_feature_file: duplicate record id " + std::to_string(id));
    }
    return file;
}

FileFeatureProvider::FileFeatureProvider(const std::string& path)
    : file_(read_feature_file(path)) {}

FeatureBatch FileFeatureProvider::clean_features(const Shape& shape,
                                                 const std::vector<double>& x_clean,
                                                 std::span<const int64_t> sample_ids) const {
    check_clean_batch(shape, x_clean, "FileFeatureProvider");
    if (static_cast<int64_t>(sample_ids.size()) != shape[0])
        throw ValidationError("FileFeatureProvider: " + std::to_string(sample_ids.size()) +
                              " sample ids for batch " + std::to_string(shape[0]));
    FeatureBatch fb;
    fb.tokens = file_.tokens;
    fb.feat_dim = file_.feat_dim;
    fb.values.reserve(static_cast<size_t>(shape[0] * file_.tokens * file_.feat_dim));
    for (int64_t id : sample_ids) {
        auto it = file_.records.find(id);
        if (it == file_.records.end())
            throw ValidationError("FileFeatureProvider: no record for sample id " +
                                  std::to_string(id));
        for (float v : it->second) fb.values.push_back(static_cast<double>(v));
    }
    return fb;
}

AlignmentHead::AlignmentHead(int64_t hidden_dim, int64_t feat_dim, int64_t width, int64_t depth,
                             uint64_t init_seed)
    : hidden_dim_(hidden_dim), feat_dim_(feat_dim), depth_(depth) {
    if (hidden_dim <= 0 || feat_dim <= 0 || width <= 0 || depth < 0)
        throw ValidationError("AlignmentHead: invalid dimensions");
    auto eng = RngStream(init_seed, "repa-init").at(0);
    auto xavier = [&](int64_t out, int64_t in) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        std::vector<double> v(static_cast<size_t>(out * in));
        for (double& x : v) x = (2.0 * uniform01(eng) - 1.0) * limit;
        return v;
    };
    auto add = [&](const std::string& name, Shape shape, std::vector<double> data) {
        params_.push_back({name, Tensor::param(std::move(shape), std::move(data))});
    };
    int64_t in = hidden_dim;
    for (int64_t l = 0; l < depth; ++l) {
        const std::string p = "repa.mlp" + std::to_string(l) + ".";
        add(p + "weight", {width, in}, xavier(width, in));
        add(p + "bias", {width}, std::vector<double>(static_cast<size_t>(width), 0.0));
        in = width;
    }
    add("repa.out.weight", {feat_dim, in}, xavier(feat_dim, in));
    add("repa.out.bias", {feat_dim}, std::vector<double>(static_cast<size_t>(feat_dim), 0.0));
}

Tensor AlignmentHead::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw ValidationError("AlignmentHead: no parameter named '" + name + "'");
}

Tensor AlignmentHead::forward(const Tensor& x) const {
    if (x.shape().size() != 2 || x.dim(1) != hidden_dim_)
        throw ValidationError("AlignmentHead: input shape " + shape_str(x.shape()) +
                              ", expected (rows," + std::to_string(hidden_dim_) + ")");
    Tensor h = x;
    for (int64_t l = 0; l < depth_; ++l) {
        const std::string p = "repa.mlp" + std::to_string(l) + ".";
        h = nn::silu(nn::linear(h, param(p + "weight"), param(p + "bias")));
    }
    return nn::linear(h, param("repa.out.weight"), param("repa.out.bias"));
}

Tensor repa_loss(const Tensor& hidden, const Tensor& targets, const AlignmentHead& head,
                 int64_t* zero_rows) {
    if (targets.shape().size() != 2 || targets.dim(1) != head.feat_dim())
        throw ValidationError("repa_loss: target shape " + shape_str(targets.shape()) +
                              ", expected (rows," + std::to_string(head.feat_dim()) + ")");
    if (hidden.dim(0) != targets.dim(0))
        throw ValidationError("repa_loss: " + std::to_string(hidden.dim(0)) +
                              " hidden patches vs " + std::to_string(targets.dim(0)) +
                              " target patches");
    if (!all_finite(targets.data(), targets.numel()))
        throw NumericalError("repa_loss: non-finite targets");
    Tensor projected = head.forward(hidden);
    Tensor cos = nn::cosine_rows(projected, targets, zero_rows);
    return nn::mul_scalar(nn::mean_all(cos), -1.0);
}

CombinedParts combined_repa_lsep_loss(
    const model::DitModel& m, const probe::ProbeHead& probe_head, const AlignmentHead& align_head,
    const FeatureProvider& provider, const Shape& shape, const std::vector<double>& x0,
    const std::vector<double>& epsilon, const std::vector<double>& t,
    const std::vector<int>& gt_labels, std::span<const int64_t> sample_ids,
    const probe::ProbePolicy& policy, double rho_D, const RepaConfig& repa_cfg,
    const flow::InterpolantSchedule& sched, std::mt19937_64& denoiser_eng,
    std::mt19937_64& probe_eng) {
    CombinedParts parts;
    if (!repa_cfg.enabled()) {
        // Alignment off: identical graph (and rng consumption) to lsep_loss.
        parts.lsep = probe::lsep_loss(m, probe_head, shape, x0, epsilon, t, gt_labels, policy,
                                      rho_D, sched, denoiser_eng, probe_eng);
        parts.total = parts.lsep.total;
        return parts;
    }

    const int64_t depth = repa_cfg.align_depth > 0 ? repa_cfg.align_depth : policy.target_depth;
    if (depth < 1 || depth > m.config().depth)
        throw ValidationError("combined_repa_lsep_loss: alignment depth " +
                              std::to_string(depth) + " outside [1," +
                              std::to_string(m.config().depth) + "]");

    std::vector<Tensor> capture;
    parts.lsep = probe::lsep_loss(m, probe_head, shape, x0, epsilon, t, gt_labels, policy, rho_D,
                                  sched, denoiser_eng, probe_eng, &capture);

    FeatureBatch fb = provider.clean_features(shape, x0, sample_ids);
    if (fb.tokens != m.config().tokens())
        throw ValidationError("combined_repa_lsep_loss: provider yields " +
                              std::to_string(fb.tokens) + " patches per sample, trunk has " +
                              std::to_string(m.config().tokens()));
    Tensor targets = Tensor::from({shape[0] * fb.tokens, fb.feat_dim}, std::move(fb.values));

    int64_t zeros = 0;
    Tensor align = repa_loss(capture[static_cast<size_t>(depth - 1)], targets, align_head, &zeros);
    parts.repa = align.item();
    parts.zero_rows = zeros;
    parts.total = nn::add(parts.lsep.total, nn::mul_scalar(align, repa_cfg.lambda));
    return parts;
}

}  // namespace lsep::repa
