// SPDX-License-Identifier: Apache-2.0
#include "lsep/evalkit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lsep/probe.hpp"
#include "lsep/rng.hpp"
#include "lsep/tensor.hpp"
#include "lsep/train.hpp"

namespace lsep::eval {

namespace {

// Forward chunk size during feature extraction; results are per-sample
// independent so the split never changes them.
constexpr int64_t kExtractChunk = 256;

void check_rows(const std::vector<double>& rows, int64_t count, int64_t dim, const char* what) {
    if (count < 1 || dim < 1)
        throw ValidationError(std::string(what) + ": count and dim must be positive");
    if (static_cast<int64_t>(rows.size()) != count * dim)
        throw ValidationError(std::string(what) + ": " + std::to_string(rows.size()) +
                              " values for " + std::to_string(count) + "x" + std::to_string(dim));
    if (!all_finite(rows.data(), count * dim))
        throw NumericalError(std::string(what) + ": non-finite input");
}

int distinct_labels(const std::vector<int>& labels) {
    std::vector<int> seen(labels);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    return static_cast<int>(seen.size());
}

// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<int64_t> shuffled_indices(int64_t n, std::mt19937_64& eng) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), int64_t{0});
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(uniform_int(eng, 0, i))]);
    return order;
}

std::vector<int> argmax_rows(const std::vector<double>& logits, int64_t count, int64_t classes) {
    std::vector<int> out(static_cast<size_t>(count));
    for (int64_t r = 0; r < count; ++r) {
        const double* row = logits.data() + r * classes;
        int best = 0;
        for (int64_t c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = static_cast<int>(c);
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

double accuracy_of(const std::vector<int>& predicted, const std::vector<int>& labels) {
    int64_t hits = 0;
    for (size_t i = 0; i < labels.size(); ++i)
        if (predicted[i] == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Symmetric PSD square root with eigenvalue clamping. `what` feeds the
// conditioning diagnostics on failure.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success)
        throw NumericalError(std::string(what) + ": eigendecomposition failed");
    Eigen::VectorXd lam = es.eigenvalues();
    const double scale = std::max(1.0, std::abs(lam.maxCoeff()));
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam[i] < -1e-8 * scale)
            throw NumericalError(std::string(what) + ": not PSD within tolerance (eigenvalue " +
                                 std::to_string(lam[i]) + ", max " +
                                 std::to_string(lam.maxCoeff()) + ")");
        lam[i] = lam[i] > 0.0 ? std::sqrt(lam[i]) : 0.0;
    }
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

FeatureSet extract_features(const model::DitModel& m, const Shape& data_shape,
                            const std::vector<double>& x0, const std::vector<int>& labels,
                            int64_t layer, double t, Pooling pooling, uint64_t noise_seed,
                            const flow::InterpolantSchedule& sched) {
    const model::ModelConfig& cfg = m.config();
    if (data_shape.size() != 4)
        throw ValidationError("extract_features: data shape must be 4-D, got " +
                              shape_str(data_shape));
    if (data_shape[1] != cfg.input_channels || data_shape[2] != cfg.input_size ||
        data_shape[3] != cfg.input_size)
        throw ValidationError("extract_features: data shape " + shape_str(data_shape) +
                              " does not match the model input");
    const int64_t batch = data_shape[0];
    const int64_t per = numel_of(data_shape) / batch;
    if (static_cast<int64_t>(x0.size()) != batch * per)
        throw ValidationError("extract_features: x0 has " + std::to_string(x0.size()) +
                              " values for shape " + shape_str(data_shape));
    if (static_cast<int64_t>(labels.size()) != batch)
        throw ValidationError("extract_features: label count mismatch");
    if (!(t >= 0.0 && t <= 1.0))
        throw ValidationError("extract_features: t must lie in [0,1]");
    if (layer < 1 || layer > cfg.depth)
        throw ValidationError("extract_features: layer " + std::to_string(layer) +
                              " outside [1, " + std::to_string(cfg.depth) + "]");

    nn::NoGradGuard no_grad;
    const int64_t tokens = cfg.tokens();
    const int64_t hidden = cfg.hidden_dim;
    const RngStream noise(noise_seed, "eval-noise");
    const double a_t = sched.alpha(t), s_t = sched.sigma(t);

    FeatureSet out;
    out.labels = labels;
    out.shape = pooling == Pooling::global_mean ? Shape{batch, hidden}
                                                : Shape{batch, tokens, hidden};
    out.values.resize(static_cast<size_t>(numel_of(out.shape)));

    std::vector<double> eps(static_cast<size_t>(per));
    for (int64_t first = 0; first < batch; first += kExtractChunk) {
        const int64_t n = std::min(kExtractChunk, batch - first);
        std::vector<double> x_t(static_cast<size_t>(n * per));
        for (int64_t i = 0; i < n; ++i) {
            auto eng = noise.at(static_cast<uint64_t>(first + i));
            gaussian_fill(eng, eps);
            const double* row0 = x0.data() + (first + i) * per;
            double* row = x_t.data() + i * per;
            for (int64_t e = 0; e < per; ++e) row[e] = a_t * row0[e] + s_t * eps[static_cast<size_t>(e)];
        }
        const nn::Tensor x = nn::Tensor::from({n, data_shape[1], data_shape[2], data_shape[3]},
                                              std::move(x_t));
        const std::vector<double> t_batch(static_cast<size_t>(n), t);
        const std::vector<int> nulls(static_cast<size_t>(n),
                                     static_cast<int>(cfg.null_label_id()));
        const nn::Tensor feats = m.forward_to_depth(x, t_batch, nulls, layer);  // (n*T, hidden)
        const double* f = feats.data();
        if (pooling == Pooling::global_mean) {
            for (int64_t i = 0; i < n; ++i) {
                double* dst = out.values.data() + (first + i) * hidden;
                for (int64_t h = 0; h < hidden; ++h) {
                    double acc = 0.0;
                    for (int64_t tk = 0; tk < tokens; ++tk)
                        acc += f[(i * tokens + tk) * hidden + h];
                    dst[h] = acc / static_cast<double>(tokens);
                }
            }
        } else {
            std::copy(f, f + n * tokens * hidden,
                      out.values.begin() + (first * tokens * hidden));
        }
    }
    return out;
}

ProbeOutcome train_linear_probe(const FeatureSet& features, int64_t num_classes,
                                const SplitSpec& split, const ProbeFitConfig& fit) {
    if (features.shape.size() != 2)
        throw ValidationError("train_linear_probe: features must be pooled (count, dim), got " +
                              shape_str(features.shape));
    const int64_t count = features.count(), dim = features.dim();
    check_rows(features.values, count, dim, "train_linear_probe");
    if (static_cast<int64_t>(features.labels.size()) != count)
        throw ValidationError("train_linear_probe: label count mismatch");
    if (num_classes < 2) throw ValidationError("train_linear_probe: need at least 2 classes");
    for (int c : features.labels)
        if (c < 0 || c >= num_classes)
            throw ValidationError("train_linear_probe: label " + std::to_string(c) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
    if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0))
        throw ValidationError("train_linear_probe: train_fraction must lie in (0,1)");
    if (fit.iterations < 1 || !(fit.lr > 0.0))
        throw ValidationError("train_linear_probe: bad fit config");

    auto eng = RngStream(split.seed, "probe-split").at(0);
    const std::vector<int64_t> order = shuffled_indices(count, eng);
    const int64_t train_n = std::llround(split.train_fraction * static_cast<double>(count));
    const int64_t val_n = count - train_n;
    if (train_n < 1 || val_n < 1)
        throw ValidationError("train_linear_probe: split leaves an empty side");

    auto gather = [&](int64_t first, int64_t n, std::vector<double>& rows,
                      std::vector<int>& labels) {
        rows.resize(static_cast<size_t>(n * dim));
        labels.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            const int64_t src = order[static_cast<size_t>(first + i)];
            std::copy_n(features.values.data() + src * dim, dim, rows.data() + i * dim);
            labels[static_cast<size_t>(i)] = features.labels[static_cast<size_t>(src)];
        }
    };
    std::vector<double> train_rows, val_rows;
    std::vector<int> train_labels, val_labels;
    gather(0, train_n, train_rows, train_labels);
    gather(train_n, val_n, val_rows, val_labels);
    if (distinct_labels(train_labels) < 2 || distinct_labels(val_labels) < 2)
        throw ValidationError("train_linear_probe: single-class split");

    probe::ProbeHead head(dim, num_classes);
    std::vector<nn::Tensor> head_params;
    for (auto& p : head.params()) head_params.push_back(p.tensor);
    train::AdamW opt({{head_params, fit.lr}}, {});

    const nn::Tensor x_train = nn::Tensor::from({train_n, dim}, train_rows);
    double last_loss = 0.0;
    for (int64_t it = 0; it < fit.iterations; ++it) {
        opt.zero_grad();
        const nn::Tensor loss = probe::class_loss(head.forward(x_train), train_labels);
        loss.backward();
        opt.step();
        last_loss = loss.item();
    }

    nn::NoGradGuard no_grad;
    ProbeOutcome out;
    out.final_loss = last_loss;
    out.train_count = train_n;
    out.val_count = val_n;
    const nn::Tensor train_logits = head.forward(nn::Tensor::from({train_n, dim}, train_rows));
    out.train_accuracy =
        accuracy_of(argmax_rows(train_logits.values(), train_n, num_classes), train_labels);
    const nn::Tensor val_logits = head.forward(nn::Tensor::from({val_n, dim}, val_rows));
    out.val_accuracy =
        accuracy_of(argmax_rows(val_logits.values(), val_n, num_classes), val_labels);
    return out;
}

ProbeReport probe_grid(const model::DitModel& m, const Shape& data_shape,
                       const std::vector<double>& x0, const std::vector<int>& labels,
                       int64_t num_classes, const std::vector<int64_t>& layers,
                       const std::vector<double>& times, const SplitSpec& split,
                       const ProbeFitConfig& fit, uint64_t noise_seed,
                       const flow::InterpolantSchedule& sched) {
    if (layers.empty() || times.empty())
        throw ValidationError("probe_grid: empty layer or time grid");
    ProbeReport report;
    report.iterations = fit.iterations;
    report.lr = fit.lr;
    for (int64_t layer : layers) {
        for (double t : times) {
            const FeatureSet feats = extract_features(m, data_shape, x0, labels, layer, t,
                                                      Pooling::global_mean, noise_seed, sched);
            const ProbeOutcome outcome = train_linear_probe(feats, num_classes, split, fit);
            report.points.push_back({layer, t, outcome.val_accuracy});
            report.train_count = outcome.train_count;
            report.val_count = outcome.val_count;
        }
    }
    return report;
}

FrechetStats compute_frechet_stats(const std::vector<double>& rows, int64_t count, int64_t dim) {
    check_rows(rows, count, dim, "compute_frechet_stats");
    if (count < 2) throw ValidationError("compute_frechet_stats: need at least 2 rows");

    FrechetStats s;
    s.count = count;
    s.mean.assign(static_cast<size_t>(dim), 0.0);
    for (int64_t r = 0; r < count; ++r)
        for (int64_t j = 0; j < dim; ++j) s.mean[static_cast<size_t>(j)] += rows[r * dim + j];
    for (double& v : s.mean) v /= static_cast<double>(count);

    // Upper triangle accumulated once and mirrored: exactly symmetric.
    s.cov.assign(static_cast<size_t>(dim * dim), 0.0);
    for (int64_t r = 0; r < count; ++r) {
        const double* row = rows.data() + r * dim;
        for (int64_t i = 0; i < dim; ++i) {
            const double di = row[i] - s.mean[static_cast<size_t>(i)];
            for (int64_t j = i; j < dim; ++j)
                s.cov[static_cast<size_t>(i * dim + j)] +=
                    di * (row[j] - s.mean[static_cast<size_t>(j)]);
        }
    }
    const double norm = 1.0 / static_cast<double>(count - 1);
    for (int64_t i = 0; i < dim; ++i)
        for (int64_t j = i; j < dim; ++j) {
            const double v = s.cov[static_cast<size_t>(i * dim + j)] * norm;
            s.cov[static_cast<size_t>(i * dim + j)] = v;
            s.cov[static_cast<size_t>(j * dim + i)] = v;
        }
    return s;
}

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
    if (a.dim() != b.dim())
        throw ValidationError("frechet_distance: dimension mismatch, " + std::to_string(a.dim()) +
                              " vs " + std::to_string(b.dim()));
    const int64_t d = a.dim();
    if (d < 1) throw ValidationError("frechet_distance: empty statistics");
    if (a.count < 2 || b.count < 2)
        throw ValidationError("frechet_distance: statistics need count >= 2");
    for (const FrechetStats* s : {&a, &b}) {
        if (static_cast<int64_t>(s->cov.size()) != d * d)
            throw ValidationError("frechet_distance: covariance size mismatch");
        if (!all_finite(s->mean.data(), d) || !all_finite(s->cov.data(), d * d))
            throw NumericalError("frechet_distance: non-finite statistics");
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = i + 1; j < d; ++j)
                if (std::abs(s->cov[static_cast<size_t>(i * d + j)] -
                             s->cov[static_cast<size_t>(j * d + i)]) > 1e-8)
                    throw ValidationError("frechet_distance: covariance not symmetric within 1e-8");
    }

    double mean_term = 0.0, tr_a = 0.0, tr_b = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double dm = a.mean[static_cast<size_t>(i)] - b.mean[static_cast<size_t>(i)];
        mean_term += dm * dm;
        tr_a += a.cov[static_cast<size_t>(i * d + i)];
        tr_b += b.cov[static_cast<size_t>(i * d + i)];
    }

    Eigen::MatrixXd sa(d, d), sb(d, d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) {
            sa(i, j) = a.cov[static_cast<size_t>(i * d + j)];
            sb(i, j) = b.cov[static_cast<size_t>(i * d + j)];
        }
    const Eigen::MatrixXd root_a = psd_sqrt(sa, "frechet_distance: covariance A");
    Eigen::MatrixXd inner = root_a * sb * root_a;
    inner = 0.5 * (inner + inner.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
    if (es.info() != Eigen::Success)
        throw NumericalError("frechet_distance: inner eigendecomposition failed");
    const double scale = std::max(1.0, std::abs(es.eigenvalues().maxCoeff()));
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double lam = es.eigenvalues()[i];
        if (lam < -1e-8 * scale)
            throw NumericalError("frechet_distance: product matrix not PSD (eigenvalue " +
                                 std::to_string(lam) + ")");
        tr_sqrt += lam > 0.0 ? std::sqrt(lam) : 0.0;
    }
    return mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
}

PcaResult pca_project(const std::vector<double>& rows, int64_t count, int64_t dim,
                      int64_t components) {
    check_rows(rows, count, dim, "pca_project");
    if (components < 1) throw ValidationError("pca_project: components must be >= 1");
    if (components > dim)
        throw ValidationError("pca_project: " + std::to_string(components) +
                              " components exceed dimension " + std::to_string(dim));
    if (count <= components)
        throw ValidationError("pca_project: need more than " + std::to_string(components) +
                              " rows, got " + std::to_string(count));

    std::vector<double> mean(static_cast<size_t>(dim), 0.0);
    for (int64_t r = 0; r < count; ++r)
        for (int64_t j = 0; j < dim; ++j) mean[static_cast<size_t>(j)] += rows[r * dim + j];
    for (double& v : mean) v /= static_cast<double>(count);

    Eigen::MatrixXd centered(count, dim);
    for (int64_t r = 0; r < count; ++r)
        for (int64_t j = 0; j < dim; ++j)
            centered(r, j) = rows[r * dim + j] - mean[static_cast<size_t>(j)];
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(count - 1);
    cov = 0.5 * (cov + cov.transpose().eval());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success)
        throw NumericalError("pca_project: eigendecomposition failed");
    const Eigen::VectorXd lam = es.eigenvalues();  // ascending
    const double total = std::max(lam.sum(), 0.0);
    const double floor = 1e-12 * std::max(1.0, lam.cwiseAbs().maxCoeff());

    PcaResult out;
    out.components = components;
    out.explained.assign(static_cast<size_t>(components), 0.0);
    out.directions.assign(static_cast<size_t>(components * dim), 0.0);
    out.projected.assign(static_cast<size_t>(count * components), 0.0);
    for (int64_t c = 0; c < components; ++c) {
        const Eigen::Index src = static_cast<Eigen::Index>(dim - 1 - c);  // descending
        const double value = lam[src];
        if (value <= floor || total <= 0.0) {
            out.rank_deficient = true;
            continue;  // zero direction, zero projections, zero ratio
        }
        Eigen::VectorXd dir = es.eigenvectors().col(src);
        // Deterministic sign: largest-magnitude coordinate positive.
        Eigen::Index peak = 0;
        dir.cwiseAbs().maxCoeff(&peak);
        if (dir[peak] < 0.0) dir = -dir;
        for (int64_t j = 0; j < dim; ++j)
            out.directions[static_cast<size_t>(c * dim + j)] = dir[j];
        out.explained[static_cast<size_t>(c)] = value / total;
        const Eigen::VectorXd proj = centered * dir;
        for (int64_t r = 0; r < count; ++r)
            out.projected[static_cast<size_t>(r * components + c)] = proj[r];
    }
    return out;
}

// ---- FID-proxy feature extractor ----

ProxyExtractor::ProxyExtractor(Shape sample_shape, int64_t num_classes, ProxyConfig cfg,
                               uint64_t init_seed)
    : sample_shape_(std::move(sample_shape)), num_classes_(num_classes), cfg_(cfg) {
    if (sample_shape_.size() != 3)
        throw ValidationError("ProxyExtractor: sample shape must be (channels, height, width)");
    for (int64_t d : sample_shape_)
        if (d <= 0) throw ValidationError("ProxyExtractor: non-positive sample dim");
    if (num_classes_ < 2) throw ValidationError("ProxyExtractor: need at least 2 classes");
    if (cfg_.width < 1 || cfg_.feat_dim < 1)
        throw ValidationError("ProxyExtractor: width and feat_dim must be positive");

    const int64_t d_in = numel_of(sample_shape_);
    auto eng = RngStream(init_seed, "proxy-init").at(0);
    auto xavier = [&](int64_t rows, int64_t cols) {
        std::vector<double> w(static_cast<size_t>(rows * cols));
        const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
        for (double& v : w) v = (2.0 * uniform01(eng) - 1.0) * bound;
        return w;
    };
    auto add_linear = [&](const std::string& stem, int64_t out_dim, int64_t in_dim) {
        params_.push_back({stem + ".weight",
                           nn::Tensor::param({out_dim, in_dim}, xavier(out_dim, in_dim))});
        params_.push_back({stem + ".bias", nn::Tensor::param(
                                               {out_dim},
                                               std::vector<double>(static_cast<size_t>(out_dim),
                                                                   0.0))});
    };
    add_linear("proxy.mlp0", cfg_.width, d_in);
    add_linear("proxy.mlp1", cfg_.feat_dim, cfg_.width);
    add_linear("proxy.out", num_classes_, cfg_.feat_dim);
}

uint64_t ProxyExtractor::param_digest() const {
    Fnv1a h;
    for (const auto& p : params_) {
        h.update(p.name);
        h.update(p.tensor.values().data(), p.tensor.values().size() * sizeof(double));
    }
    return h.digest();
}

void ProxyExtractor::check_batch(const std::vector<double>& x, const Shape& shape) const {
    if (shape.size() != 4 || shape[1] != sample_shape_[0] || shape[2] != sample_shape_[1] ||
        shape[3] != sample_shape_[2])
        throw ValidationError("ProxyExtractor: batch shape " + shape_str(shape) +
                              " does not match samples " + shape_str(sample_shape_));
    if (shape[0] < 1) throw ValidationError("ProxyExtractor: empty batch");
    if (static_cast<int64_t>(x.size()) != numel_of(shape))
        throw ValidationError("ProxyExtractor: value count mismatch");
    if (!all_finite(x.data(), static_cast<int64_t>(x.size())))
        throw NumericalError("ProxyExtractor: non-finite input");
}

nn::Tensor ProxyExtractor::forward_features(const nn::Tensor& flat) const {
    nn::Tensor h = nn::silu(nn::linear(flat, params_[0].tensor, params_[1].tensor));
    return nn::silu(nn::linear(h, params_[2].tensor, params_[3].tensor));
}

nn::Tensor ProxyExtractor::forward_logits(const nn::Tensor& feats) const {
    return nn::linear(feats, params_[4].tensor, params_[5].tensor);
}

double ProxyExtractor::fit(const std::vector<double>& x, const Shape& shape,
                           const std::vector<int>& labels, int64_t epochs, int64_t batch_size,
                           double lr, uint64_t seed) {
    check_batch(x, shape);
    const int64_t count = shape[0];
    const int64_t d_in = numel_of(sample_shape_);
    if (static_cast<int64_t>(labels.size()) != count)
        throw ValidationError("ProxyExtractor::fit: label count mismatch");
    for (int c : labels)
        if (c < 0 || c >= num_classes_)
            throw ValidationError("ProxyExtractor::fit: label " + std::to_string(c) +
                                  " outside [0, " + std::to_string(num_classes_) + ")");
    if (epochs < 1 || batch_size < 1 || !(lr > 0.0))
        throw ValidationError("ProxyExtractor::fit: bad training config");

    std::vector<nn::Tensor> tensors;
    for (auto& p : params_) tensors.push_back(p.tensor);
    train::AdamW opt({{tensors, lr}}, {});
    const RngStream order_stream(seed, "proxy-order");

    std::vector<double> rows(static_cast<size_t>(std::min(batch_size, count) * d_in));
    std::vector<int> row_labels;
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        auto eng = order_stream.at(static_cast<uint64_t>(epoch));
        const std::vector<int64_t> order = shuffled_indices(count, eng);
        for (int64_t first = 0; first < count; first += batch_size) {
            const int64_t n = std::min(batch_size, count - first);
            rows.resize(static_cast<size_t>(n * d_in));
            row_labels.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) {
                const int64_t src = order[static_cast<size_t>(first + i)];
                std::copy_n(x.data() + src * d_in, d_in, rows.data() + i * d_in);
                row_labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(src)];
            }
            opt.zero_grad();
            const nn::Tensor flat = nn::Tensor::from({n, d_in}, rows);
            const nn::Tensor loss =
                nn::mean_all(nn::cross_entropy_rows(forward_logits(forward_features(flat)),
                                                    row_labels));
            loss.backward();
            opt.step();
        }
    }
    return accuracy_of(predict(x, shape), labels);
}

std::vector<double> ProxyExtractor::features(const std::vector<double>& x,
                                             const Shape& shape) const {
    check_batch(x, shape);
    nn::NoGradGuard no_grad;
    const nn::Tensor flat = nn::Tensor::from({shape[0], numel_of(sample_shape_)}, x);
    return forward_features(flat).values();
}

std::vector<int> ProxyExtractor::predict(const std::vector<double>& x, const Shape& shape) const {
    check_batch(x, shape);
    nn::NoGradGuard no_grad;
    const nn::Tensor flat = nn::Tensor::from({shape[0], numel_of(sample_shape_)}, x);
    const nn::Tensor logits = forward_logits(forward_features(flat));
    return argmax_rows(logits.values(), shape[0], num_classes_);
}

FrechetStats frechet_from_images(const ProxyExtractor& proxy, const std::vector<double>& x,
                                 const Shape& shape) {
    const std::vector<double> feats = proxy.features(x, shape);
    return compute_frechet_stats(feats, shape[0], proxy.feat_dim());
}

}  // namespace lsep::eval
