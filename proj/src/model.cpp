// SPDX-License-Identifier: Apache-2.0
#include "lsep/model.hpp"

#include <cmath>
#include <utility>

#include "lsep/rng.hpp"

namespace lsep::model {

using nn::Tensor;

namespace {

constexpr int64_t kTimeFreqDim = 256;  // sinusoidal time feature width
constexpr double kTimeScale = 1000.0;  // t in [0,1] stretched to the usual grid

}  // namespace

void ModelConfig::validate() const {
    if (input_channels <= 0 || input_size <= 0 || patch_size <= 0 || depth <= 0 ||
        hidden_dim <= 0 || num_heads <= 0 || num_classes <= 0)
        throw ValidationError("ModelConfig: all dimensions must be positive");
    if (input_size % patch_size != 0)
        throw ValidationError("ModelConfig: input_size " + std::to_string(input_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
    if (hidden_dim % num_heads != 0)
        throw ValidationError("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
    if (hidden_dim % 4 != 0)
        throw ValidationError("ModelConfig: hidden_dim must be divisible by 4 for the 2D "
                              "positional table");
    if (target_depth < 1 || target_depth >= depth)
        throw ValidationError("ModelConfig: target_depth " + std::to_string(target_depth) +
                              " outside [1, depth)");
}

ModelConfig arch_preset(const std::string& name) {
    ModelConfig c;
    if (name == "tiny") {
        c.input_channels = 3;
        c.input_size = 32;
        c.patch_size = 4;
        c.depth = 6;
        c.hidden_dim = 192;
        c.num_heads = 3;
        c.num_classes = 10;
        c.target_depth = 2;
    } else if (name == "B") {
        c.input_channels = 4;
        c.input_size = 32;
        c.patch_size = 2;
        c.depth = 12;
        c.hidden_dim = 768;
        c.num_heads = 12;
        c.num_classes = 1000;
        c.target_depth = 4;
    } else if (name == "L") {
        c.input_channels = 4;
        c.input_size = 32;
        c.patch_size = 2;
        c.depth = 24;
        c.hidden_dim = 1024;
        c.num_heads = 16;
        c.num_classes = 1000;
        c.target_depth = 7;
    } else if (name == "XL") {
        c.input_channels = 4;
        c.input_size = 32;
        c.patch_size = 2;
        c.depth = 28;
        c.hidden_dim = 1152;
        c.num_heads = 16;
        c.num_classes = 1000;
        c.target_depth = 8;
    } else {
        throw ValidationError("arch_preset: unknown preset '" + name + "'");
    }
    c.validate();
    return c;
}

std::vector<double> sincos_pos_embed_2d(int64_t grid, int64_t dim) {
    if (dim % 4 != 0) throw ValidationError("sincos_pos_embed_2d: dim must be divisible by 4");
    const int64_t quarter = dim / 4;
    std::vector<double> omega(static_cast<size_t>(quarter));
    for (int64_t i = 0; i < quarter; ++i)
        omega[i] = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
    std::vector<double> out(static_cast<size_t>(grid * grid * dim));
    for (int64_t gy = 0; gy < grid; ++gy)
        for (int64_t gx = 0; gx < grid; ++gx) {
            double* row = out.data() + (gy * grid + gx) * dim;
            for (int64_t i = 0; i < quarter; ++i) {
                row[i] = std::sin(gy * omega[i]);
                row[quarter + i] = std::cos(gy * omega[i]);
                row[2 * quarter + i] = std::sin(gx * omega[i]);
                row[3 * quarter + i] = std::cos(gx * omega[i]);
            }
        }
    return out;
}

std::vector<double> time_embedding(const std::vector<double>& t, int64_t dim) {
    if (dim % 2 != 0) throw ValidationError("time_embedding: dim must be even");
    const int64_t half = dim / 2;
    std::vector<double> out(t.size() * static_cast<size_t>(dim));
    for (size_t b = 0; b < t.size(); ++b) {
        double* row = out.data() + b * dim;
        for (int64_t i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = kTimeScale * t[b] * freq;
            row[i] = std::cos(arg);
            row[half + i] = std::sin(arg);
        }
    }
    return out;
}

namespace {

struct InitRng {
    std::mt19937_64 eng;

    std::vector<double> xavier(int64_t out, int64_t in) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        std::vector<double> v(static_cast<size_t>(out * in));
        for (double& x : v) x = (2.0 * uniform01(eng) - 1.0) * limit;
        return v;
    }
    std::vector<double> normal(int64_t n, double std_dev) {
        std::vector<double> v(static_cast<size_t>(n));
        for (double& x : v) x = std_dev * gaussian(eng);
        return v;
    }
};

}  // namespace

DitModel::DitModel(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int64_t D = cfg_.hidden_dim;
    InitRng rng{RngStream(init_seed, "init").at(0)};

    auto add = [&](const std::string& name, Shape shape, std::vector<double> data) {
        params_.push_back({name, Tensor::param(std::move(shape), std::move(data))});
    };
    auto zeros = [](Shape shape) {
        return std::vector<double>(static_cast<size_t>(numel_of(shape)), 0.0);
    };

    // Patch embedding (xavier) and conditioning embeddings (normal 0.02,
    // the DiT convention).
    add("patch_embed.weight", {D, cfg_.patch_dim()}, rng.xavier(D, cfg_.patch_dim()));
    add("patch_embed.bias", {D}, zeros({D}));
    add("time_mlp.w1", {D, kTimeFreqDim}, rng.normal(D * kTimeFreqDim, 0.02));
    add("time_mlp.b1", {D}, zeros({D}));
    add("time_mlp.w2", {D, D}, rng.normal(D * D, 0.02));
    add("time_mlp.b2", {D}, zeros({D}));
    add("label_embed.table", {cfg_.num_classes + 1, D},
        rng.normal((cfg_.num_classes + 1) * D, 0.02));

    for (int64_t i = 0; i < cfg_.depth; ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        add(p + "qkv.weight", {3 * D, D}, rng.xavier(3 * D, D));
        add(p + "qkv.bias", {3 * D}, zeros({3 * D}));
        add(p + "proj.weight", {D, D}, rng.xavier(D, D));
        add(p + "proj.bias", {D}, zeros({D}));
        add(p + "mlp.w1", {4 * D, D}, rng.xavier(4 * D, D));
        add(p + "mlp.b1", {4 * D}, zeros({4 * D}));
        add(p + "mlp.w2", {D, 4 * D}, rng.xavier(D, 4 * D));
        add(p + "mlp.b2", {D}, zeros({D}));
        // adaLN-zero: modulation starts at exactly zero so fresh blocks are
        // identity maps and conditioning has no influence at step 0.
        add(p + "ada.weight", {6 * D, D}, zeros({6 * D, D}));
        add(p + "ada.bias", {6 * D}, zeros({6 * D}));
    }

    add("final.ada.weight", {2 * D, D}, zeros({2 * D, D}));
    add("final.ada.bias", {2 * D}, zeros({2 * D}));
    add("final.linear.weight", {cfg_.patch_dim(), D}, zeros({cfg_.patch_dim(), D}));
    add("final.linear.bias", {cfg_.patch_dim()}, zeros({cfg_.patch_dim()}));

    pos_embed_ = sincos_pos_embed_2d(cfg_.grid(), D);
}

Tensor DitModel::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw ValidationError("DitModel: no parameter named '" + name + "'");
}

int64_t DitModel::param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

uint64_t DitModel::param_digest() const {
    Fnv1a f;
    for (const auto& p : params_) {
        f.update(p.name);
        f.update(p.tensor.data(), sizeof(double) * static_cast<size_t>(p.tensor.numel()));
    }
    return f.digest();
}

void DitModel::check_input(const Tensor& x_t, const std::vector<double>& t,
                           const std::vector<int>& labels) const {
    const Shape expect = {static_cast<int64_t>(t.size()), cfg_.input_channels, cfg_.input_size,
                          cfg_.input_size};
    if (x_t.shape() != expect)
        throw ValidationError("DitModel: input shape " + shape_str(x_t.shape()) +
                              ", expected " + shape_str(expect));
    if (labels.size() != t.size())
        throw ValidationError("DitModel: " + std::to_string(labels.size()) + " labels for batch " +
                              std::to_string(t.size()));
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError("DitModel: time " + std::to_string(v) + " outside [0,1]");
    for (int l : labels)
        if (l < 0 || l > cfg_.num_classes)
            throw ValidationError("DitModel: label " + std::to_string(l) + " outside [0," +
                                  std::to_string(cfg_.num_classes) + "]");
}

Tensor DitModel::condition_vector(const std::vector<double>& t,
                                  const std::vector<int>& labels) const {
    if (t.empty() || t.size() != labels.size())
        throw ValidationError("condition_vector: batch mismatch");
    for (int l : labels)
        if (l < 0 || l > cfg_.num_classes)
            throw ValidationError("condition_vector: label " + std::to_string(l) + " outside [0," +
                                  std::to_string(cfg_.num_classes) + "]");
    const int64_t B = static_cast<int64_t>(t.size());
    Tensor t_feat = Tensor::from({B, kTimeFreqDim}, time_embedding(t, kTimeFreqDim));
    Tensor h = nn::linear(t_feat, param("time_mlp.w1"), param("time_mlp.b1"));
    Tensor t_emb = nn::linear(nn::silu(h), param("time_mlp.w2"), param("time_mlp.b2"));
    Tensor y_emb = nn::embedding(param("label_embed.table"), labels);
    return nn::add(t_emb, y_emb);
}

Tensor DitModel::embed_tokens(const Tensor& x_t) const {
    Tensor tok = nn::patchify(x_t, cfg_.patch_size);
    Tensor proj = nn::linear(tok, param("patch_embed.weight"), param("patch_embed.bias"));
    Tensor pos = Tensor::from({cfg_.tokens(), cfg_.hidden_dim}, pos_embed_);
    const int64_t batch = x_t.dim(0);
    return nn::add_tokenvec(proj, pos, batch);
}

Tensor DitModel::block_forward(Tensor x, const Tensor& cond, int64_t index, int64_t batch) const {
    const int64_t D = cfg_.hidden_dim;
    const std::string p = "block" + std::to_string(index) + ".";
    Tensor mod = nn::linear(nn::silu(cond), param(p + "ada.weight"), param(p + "ada.bias"));
    Tensor shift_att = nn::slice_cols(mod, 0, D);
    Tensor scale_att = nn::slice_cols(mod, D, 2 * D);
    Tensor gate_att = nn::slice_cols(mod, 2 * D, 3 * D);
    Tensor shift_mlp = nn::slice_cols(mod, 3 * D, 4 * D);
    Tensor scale_mlp = nn::slice_cols(mod, 4 * D, 5 * D);
    Tensor gate_mlp = nn::slice_cols(mod, 5 * D, 6 * D);

    Tensor h = nn::per_sample_modulate(nn::layernorm_noaffine(x), shift_att, scale_att, batch);
    Tensor qkv = nn::linear(h, param(p + "qkv.weight"), param(p + "qkv.bias"));
    Tensor att = nn::attention(nn::slice_cols(qkv, 0, D), nn::slice_cols(qkv, D, 2 * D),
                               nn::slice_cols(qkv, 2 * D, 3 * D), batch, cfg_.num_heads);
    Tensor att_out = nn::linear(att, param(p + "proj.weight"), param(p + "proj.bias"));
    x = nn::add(x, nn::per_sample_gate(att_out, gate_att, batch));

    Tensor h2 = nn::per_sample_modulate(nn::layernorm_noaffine(x), shift_mlp, scale_mlp, batch);
    Tensor m = nn::gelu_tanh(nn::linear(h2, param(p + "mlp.w1"), param(p + "mlp.b1")));
    Tensor mlp_out = nn::linear(m, param(p + "mlp.w2"), param(p + "mlp.b2"));
    return nn::add(x, nn::per_sample_gate(mlp_out, gate_mlp, batch));
}

Tensor DitModel::blocks_forward(Tensor tokens, const Tensor& cond, int64_t first, int64_t last,
                                int64_t batch, std::vector<Tensor>* capture) const {
    if (first < 0 || last > cfg_.depth || first > last)
        throw ValidationError("blocks_forward: block range [" + std::to_string(first) + "," +
                              std::to_string(last) + ") outside depth " +
                              std::to_string(cfg_.depth));
    for (int64_t i = first; i < last; ++i) {
        tokens = block_forward(std::move(tokens), cond, i, batch);
        if (!all_finite(tokens.data(), tokens.numel()))
            throw NumericalError("non-finite activations after block " + std::to_string(i),
                                 static_cast<int>(i));
        if (capture) capture->push_back(tokens);
    }
    return tokens;
}

Tensor DitModel::forward_to_depth(const Tensor& x_t, const std::vector<double>& t,
                                  const std::vector<int>& labels, int64_t k) const {
    check_input(x_t, t, labels);
    if (k < 1 || k > cfg_.depth)
        throw ValidationError("forward_to_depth: k=" + std::to_string(k) + " outside [1," +
                              std::to_string(cfg_.depth) + "]");
    Tensor cond = condition_vector(t, labels);
    Tensor tokens = embed_tokens(x_t);
    return blocks_forward(std::move(tokens), cond, 0, k, x_t.dim(0));
}

Tensor DitModel::forward_velocity(const Tensor& x_t, const std::vector<double>& t,
                                  const std::vector<int>& labels,
                                  std::vector<Tensor>* capture) const {
    check_input(x_t, t, labels);
    const int64_t batch = x_t.dim(0);
    const int64_t D = cfg_.hidden_dim;
    Tensor cond = condition_vector(t, labels);
    Tensor tokens = embed_tokens(x_t);
    tokens = blocks_forward(std::move(tokens), cond, 0, cfg_.depth, batch, capture);

    Tensor mod = nn::linear(nn::silu(cond), param("final.ada.weight"), param("final.ada.bias"));
    Tensor shift = nn::slice_cols(mod, 0, D);
    Tensor scale = nn::slice_cols(mod, D, 2 * D);
    Tensor h = nn::per_sample_modulate(nn::layernorm_noaffine(tokens), shift, scale, batch);
    Tensor out_tokens = nn::linear(h, param("final.linear.weight"), param("final.linear.bias"));
    Tensor v = nn::unpatchify(out_tokens, batch, cfg_.input_channels, cfg_.input_size,
                              cfg_.patch_size);
    if (!all_finite(v.data(), v.numel()))
        throw NumericalError("non-finite velocity output", static_cast<int>(cfg_.depth));
    return v;
}

}  // namespace lsep::model
