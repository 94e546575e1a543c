// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lsep/common.hpp"

namespace lsep::nn {

// Reverse-mode autodiff over dense row-major double tensors.
//
// Graphs are built eagerly: each op allocates a Node holding the result and
// a backward closure. Tensor is a cheap shared handle. Leaves created with
// Tensor::param accumulate gradients across a backward pass; intermediate
// gradients are allocated lazily during backward. Everything is
// deterministic: no threading inside the engine itself, Eigen GEMMs run
// single-threaded.

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // noop for leaves

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void accumulate(const double* g, int64_t n);
    double* ensure_grad();  // allocates + zero-fills on first use
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from(Shape shape, std::vector<double> data);
    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> data);
    static Tensor scalar(double v) { return from({}, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return n_->numel(); }
    int64_t dim(size_t i) const { return n_->shape.at(i); }

    double* data() { return n_->value.data(); }
    const double* data() const { return n_->value.data(); }
    std::vector<double>& values() { return n_->value; }
    const std::vector<double>& values() const { return n_->value; }

    bool requires_grad() const { return n_->requires_grad; }
    // Gradient buffer; empty if this node never received gradient.
    const std::vector<double>& grad() const { return n_->grad; }
    std::vector<double>& grad_mut() { return n_->grad; }
    void zero_grad();

    double item() const;

    // Runs reverse-mode from this scalar (numel()==1) node.
    void backward() const;

    std::shared_ptr<Node> node() const { return n_; }
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<Node> n_;
};

// While alive, newly created ops do not record graph structure.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise / broadcast ----
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);           // same shape
Tensor mul(const Tensor& a, const Tensor& b);           // same shape
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& b);     // x:[R,C], b:[C]
// Multiplies row r of x (x viewed as [R, numel/R]) by s[r].
Tensor rowwise_scale(const Tensor& x, const Tensor& s, int64_t rows);

// ---- activations ----
Tensor silu(const Tensor& x);
Tensor gelu_tanh(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);         // [M,K]x[K,N]
// y = x W^T + b ; x:[R,in], W:[out,in], b:[out] (b may be undefined)
Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b);

// ---- structure ----
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);  // x:[R,C]
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Adds pos[t] to token row (b*T + t); x:[B*T,D], pos:[T,D].
Tensor add_tokenvec(const Tensor& x, const Tensor& pos, int64_t batch);

// x:[B*T,D]; shift/scale/gate:[B,D], broadcast over the T tokens of sample b.
Tensor per_sample_modulate(const Tensor& x, const Tensor& shift, const Tensor& scale, int64_t batch);
Tensor per_sample_gate(const Tensor& x, const Tensor& gate, int64_t batch);

// ---- normalization ----
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
Tensor layernorm_noaffine(const Tensor& x, double eps = 1e-6);

// ---- attention ----
// q,k,v: [B*T, D] with D = heads*head_dim. Returns [B*T, D].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t batch, int64_t heads);

// ---- patch <-> image ----
// x:[B,C,H,W] -> [B*T, C*p*p], tokens in row-major grid order, feature
// layout (c, py, px) with px fastest.
Tensor patchify(const Tensor& x, int64_t patch);
// Inverse: tokens:[B*T, C*p*p] with the same (c, py, px) feature layout;
// returns [B,C,H,W].
Tensor unpatchify(const Tensor& tokens, int64_t batch, int64_t channels, int64_t image_size, int64_t patch);

// Mean over a fixed subset of each sample's token rows. x:[B*T,D],
// token_ids within [0,T). Returns [B,D].
Tensor tokens_subset_mean(const Tensor& x, int64_t batch, int64_t tokens, std::span<const int> token_ids);

// ---- reductions / losses ----
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
// (1/R) * sum_r w[r]*v[r]; v:[R], w constant (no grad through w).
Tensor weighted_mean(const Tensor& v, std::span<const double> w);
// Per-row -log softmax(logits)[label]; logits:[B,C]. Returns [B].
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels);
// Per-row cosine similarity against constant targets; rows where either
// vector has ~zero norm contribute 0 (counted in *zero_count if given).
Tensor cosine_rows(const Tensor& x, const Tensor& target, int64_t* zero_count = nullptr);

}  // namespace lsep::nn
