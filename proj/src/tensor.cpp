// SPDX-License-Identifier: Apache-2.0
#include "lsep/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <cstring>
#include <unordered_set>
#include <utility>

namespace lsep::nn {

namespace {

using MatrixRd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatrixRd>;
using MapMc = Eigen::Map<const MatrixRd>;
using StrideM = Eigen::Map<const MatrixRd, 0, Eigen::OuterStride<>>;

thread_local bool g_grad_enabled = true;

void check(bool ok, const std::string& msg) {
    if (!ok) throw ValidationError(msg);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

void check_matrix(const Tensor& x, const char* op) {
    check(x.shape().size() == 2, std::string(op) + ": expected rank-2, got " + shape_str(x.shape()));
}

// Builds the output node; records parents + backward only when tracking.
Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || (p && p->requires_grad);
    if (g_grad_enabled && any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        Node* raw = n.get();
        n->backward_fn = [raw, fn = std::move(backward)] { fn(*raw); };
    }
    return Tensor(std::move(n));
}

bool tracking(std::initializer_list<const Tensor*> ts) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : ts)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

}  // namespace

void Node::accumulate(const double* g, int64_t n) {
    double* dst = ensure_grad();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

double* Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
}

Tensor Tensor::zeros(Shape shape) {
    auto n = std::make_shared<Node>();
    int64_t count = numel_of(shape);
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(count), 0.0);
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    check(numel_of(shape) == static_cast<int64_t>(data.size()),
          "Tensor::from: data size " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::param(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node()->requires_grad = true;
    return t;
}

void Tensor::zero_grad() {
    if (n_) n_->grad.clear();
}

double Tensor::item() const {
    check(n_ && n_->numel() == 1, "item: tensor is not scalar");
    return n_->value[0];
}

void Tensor::backward() const {
    check(static_cast<bool>(n_), "backward: undefined tensor");
    check(n_->numel() == 1, "backward: output must be scalar, got " + shape_str(n_->shape));
    check(n_->requires_grad, "backward: output does not require grad");

    // Post-order DFS over grad-requiring ancestors, then replay in reverse.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t child;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.child < f.n->parents.size()) {
            Node* p = f.n->parents[f.child++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    n_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* nd = *it;
        if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn();
    }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise / broadcast ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    const double* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](Node& n) {
        if (an->requires_grad) an->accumulate(n.grad.data(), n.numel());
        if (bn->requires_grad) bn->accumulate(n.grad.data(), n.numel());
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    const double* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](Node& n) {
        if (an->requires_grad) an->accumulate(n.grad.data(), n.numel());
        if (bn->requires_grad) {
            double* dst = bn->ensure_grad();
            for (int64_t i = 0; i < n.numel(); ++i) dst[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.values());
    const double* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](Node& n) {
        if (an->requires_grad) {
            double* dst = an->ensure_grad();
            for (int64_t i = 0; i < n.numel(); ++i) dst[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            double* dst = bn->ensure_grad();
            for (int64_t i = 0; i < n.numel(); ++i) dst[i] += n.grad[i] * an->value[i];
        }
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& v : out) v += c;
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {an}, [an](Node& n) {
        an->accumulate(n.grad.data(), n.numel());
    });
}

Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& v : out) v *= c;
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {an}, [an, c](Node& n) {
        double* dst = an->ensure_grad();
        for (int64_t i = 0; i < n.numel(); ++i) dst[i] += c * n.grad[i];
    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    check_matrix(x, "add_rowvec");
    check(b.shape().size() == 1 && b.dim(0) == x.dim(1),
          "add_rowvec: bias shape " + shape_str(b.shape()) + " does not match columns of " +
              shape_str(x.shape()));
    const int64_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.values());
    const double* bp = b.data();
    for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) out[r * C + c] += bp[c];
    auto xn = x.node(), bn = b.node();
    return make_op(x.shape(), std::move(out), {xn, bn}, [xn, bn, R, C](Node& n) {
        if (xn->requires_grad) xn->accumulate(n.grad.data(), n.numel());
        if (bn->requires_grad) {
            double* dst = bn->ensure_grad();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < C; ++c) dst[c] += n.grad[r * C + c];
        }
    });
}

Tensor rowwise_scale(const Tensor& x, const Tensor& s, int64_t rows) {
    check(rows > 0 && x.numel() % rows == 0,
          "rowwise_scale: numel " + std::to_string(x.numel()) + " not divisible by rows " +
              std::to_string(rows));
    check(s.numel() == rows, "rowwise_scale: scale numel " + std::to_string(s.numel()) +
                                 " != rows " + std::to_string(rows));
    const int64_t m = x.numel() / rows;
    std::vector<double> out(x.values());
    const double* sp = s.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < m; ++c) out[r * m + c] *= sp[r];
    auto xn = x.node(), sn = s.node();
    return make_op(x.shape(), std::move(out), {xn, sn}, [xn, sn, rows, m](Node& n) {
        if (xn->requires_grad) {
            double* dst = xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < m; ++c) dst[r * m + c] += n.grad[r * m + c] * sn->value[r];
        }
        if (sn->requires_grad) {
            double* dst = sn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int64_t c = 0; c < m; ++c) acc += n.grad[r * m + c] * xn->value[r * m + c];
                dst[r] += acc;
            }
        }
    });
}

// ---- activations ----

Tensor silu(const Tensor& x) {
    std::vector<double> out(x.values().size());
    const double* xp = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-xp[i]));
        out[i] = xp[i] * s;
    }
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {xn}, [xn](Node& n) {
        double* dst = xn->ensure_grad();
        for (int64_t i = 0; i < n.numel(); ++i) {
            double v = xn->value[i];
            double s = 1.0 / (1.0 + std::exp(-v));
            dst[i] += n.grad[i] * s * (1.0 + v * (1.0 - s));
        }
    });
}

Tensor gelu_tanh(const Tensor& x) {
    constexpr double kC = 0.044715;
    const double kK = std::sqrt(2.0 / std::numbers::pi);
    std::vector<double> out(x.values().size());
    const double* xp = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = xp[i];
        double u = kK * (v + kC * v * v * v);
        out[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {xn}, [xn, kK](Node& n) {
        double* dst = xn->ensure_grad();
        for (int64_t i = 0; i < n.numel(); ++i) {
            double v = xn->value[i];
            double u = kK * (v + kC * v * v * v);
            double th = std::tanh(u);
            double sech2 = 1.0 - th * th;
            double du = kK * (1.0 + 3.0 * kC * v * v);
            dst[i] += n.grad[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * du);
        }
    });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_matrix(a, "matmul");
    check_matrix(b, "matmul");
    check(a.dim(1) == b.dim(0), "matmul: inner dims " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<double> out(static_cast<size_t>(M * N));
    MapM(out.data(), M, N).noalias() = MapMc(a.data(), M, K) * MapMc(b.data(), K, N);
    auto an = a.node(), bn = b.node();
    return make_op({M, N}, std::move(out), {an, bn}, [an, bn, M, K, N](Node& n) {
        MapMc G(n.grad.data(), M, N);
        if (an->requires_grad)
            MapM(an->ensure_grad(), M, K).noalias() += G * MapMc(bn->value.data(), K, N).transpose();
        if (bn->requires_grad)
            MapM(bn->ensure_grad(), K, N).noalias() +=
                MapMc(an->value.data(), M, K).transpose() * G;
    });
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
    check_matrix(x, "linear");
    check_matrix(W, "linear");
    check(x.dim(1) == W.dim(1), "linear: input dim " + shape_str(x.shape()) + " vs weight " +
                                    shape_str(W.shape()));
    const int64_t R = x.dim(0), in = x.dim(1), out_dim = W.dim(0);
    if (b.defined())
        check(b.shape().size() == 1 && b.dim(0) == out_dim,
              "linear: bias shape " + shape_str(b.shape()) + " vs out dim " +
                  std::to_string(out_dim));
    std::vector<double> out(static_cast<size_t>(R * out_dim));
    MapM Y(out.data(), R, out_dim);
    Y.noalias() = MapMc(x.data(), R, in) * MapMc(W.data(), out_dim, in).transpose();
    if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), out_dim);
    auto xn = x.node(), Wn = W.node(), bn = b.defined() ? b.node() : nullptr;
    return make_op({R, out_dim}, std::move(out), {xn, Wn, bn},
                   [xn, Wn, bn, R, in, out_dim](Node& n) {
                       MapMc G(n.grad.data(), R, out_dim);
                       if (xn->requires_grad)
                           MapM(xn->ensure_grad(), R, in).noalias() +=
                               G * MapMc(Wn->value.data(), out_dim, in);
                       if (Wn->requires_grad)
                           MapM(Wn->ensure_grad(), out_dim, in).noalias() +=
                               G.transpose() * MapMc(xn->value.data(), R, in);
                       if (bn && bn->requires_grad) {
                           // scalar column sums: bit-stable regardless of
                           // buffer alignment (see attention softmax note)
                           double* db = bn->ensure_grad();
                           for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < out_dim; ++c)
                                   db[c] += n.grad[r * out_dim + c];
                       }
                   });
}

// ---- structure ----

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
    check_matrix(x, "slice_cols");
    check(0 <= c0 && c0 < c1 && c1 <= x.dim(1),
          "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " +
              shape_str(x.shape()));
    const int64_t R = x.dim(0), C = x.dim(1), W = c1 - c0;
    std::vector<double> out(static_cast<size_t>(R * W));
    const double* xp = x.data();
    for (int64_t r = 0; r < R; ++r)
        std::memcpy(out.data() + r * W, xp + r * C + c0, sizeof(double) * W);
    auto xn = x.node();
    return make_op({R, W}, std::move(out), {xn}, [xn, R, C, W, c0](Node& n) {
        double* dst = xn->ensure_grad();
        for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < W; ++c) dst[r * C + c0 + c] += n.grad[r * W + c];
    });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    check_matrix(table, "embedding");
    const int64_t V = table.dim(0), D = table.dim(1);
    const int64_t R = static_cast<int64_t>(ids.size());
    std::vector<double> out(static_cast<size_t>(R * D));
    const double* tp = table.data();
    for (int64_t r = 0; r < R; ++r) {
        int id = ids[r];
        check(0 <= id && id < V,
              "embedding: id " + std::to_string(id) + " out of table rows " + std::to_string(V));
        std::memcpy(out.data() + r * D, tp + static_cast<int64_t>(id) * D, sizeof(double) * D);
    }
    auto tn = table.node();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    return make_op({R, D}, std::move(out), {tn}, [tn, D, ids = std::move(ids_copy)](Node& n) {
        double* dst = tn->ensure_grad();
        for (size_t r = 0; r < ids.size(); ++r) {
            double* row = dst + static_cast<int64_t>(ids[r]) * D;
            const double* g = n.grad.data() + static_cast<int64_t>(r) * D;
            for (int64_t c = 0; c < D; ++c) row[c] += g[c];
        }
    });
}

Tensor add_tokenvec(const Tensor& x, const Tensor& pos, int64_t batch) {
    check_matrix(x, "add_tokenvec");
    check_matrix(pos, "add_tokenvec");
    check(batch > 0 && x.dim(0) % batch == 0, "add_tokenvec: rows not divisible by batch");
    const int64_t T = x.dim(0) / batch, D = x.dim(1);
    check(pos.dim(0) == T && pos.dim(1) == D, "add_tokenvec: pos shape " + shape_str(pos.shape()) +
                                                  " vs tokens " + std::to_string(T) + "x" +
                                                  std::to_string(D));
    std::vector<double> out(x.values());
    const double* pp = pos.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < T; ++t) {
            double* row = out.data() + (b * T + t) * D;
            const double* pr = pp + t * D;
            for (int64_t c = 0; c < D; ++c) row[c] += pr[c];
        }
    auto xn = x.node(), pn = pos.node();
    return make_op(x.shape(), std::move(out), {xn, pn}, [xn, pn, batch, T, D](Node& n) {
        if (xn->requires_grad) xn->accumulate(n.grad.data(), n.numel());
        if (pn->requires_grad) {
            double* dst = pn->ensure_grad();
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t t = 0; t < T; ++t) {
                    const double* g = n.grad.data() + (b * T + t) * D;
                    double* pr = dst + t * D;
                    for (int64_t c = 0; c < D; ++c) pr[c] += g[c];
                }
        }
    });
}

Tensor per_sample_modulate(const Tensor& x, const Tensor& shift, const Tensor& scale,
                           int64_t batch) {
    check_matrix(x, "per_sample_modulate");
    check(batch > 0 && x.dim(0) % batch == 0, "per_sample_modulate: rows not divisible by batch");
    const int64_t T = x.dim(0) / batch, D = x.dim(1);
    check(shift.shape() == Shape({batch, D}) && scale.shape() == Shape({batch, D}),
          "per_sample_modulate: cond shapes " + shape_str(shift.shape()) + ", " +
              shape_str(scale.shape()) + " vs [" + std::to_string(batch) + "," +
              std::to_string(D) + "]");
    std::vector<double> out(x.values().size());
    const double* xp = x.data();
    const double* sh = shift.data();
    const double* sc = scale.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < T; ++t) {
            const int64_t r = (b * T + t) * D;
            for (int64_t c = 0; c < D; ++c)
                out[r + c] = xp[r + c] * (1.0 + sc[b * D + c]) + sh[b * D + c];
        }
    auto xn = x.node(), shn = shift.node(), scn = scale.node();
    return make_op(x.shape(), std::move(out), {xn, shn, scn},
                   [xn, shn, scn, batch, T, D](Node& n) {
                       for (int64_t b = 0; b < batch; ++b)
                           for (int64_t t = 0; t < T; ++t) {
                               const int64_t r = (b * T + t) * D;
                               const double* g = n.grad.data() + r;
                               if (xn->requires_grad) {
                                   double* dx = xn->ensure_grad() + r;
                                   for (int64_t c = 0; c < D; ++c)
                                       dx[c] += g[c] * (1.0 + scn->value[b * D + c]);
                               }
                               if (scn->requires_grad) {
                                   double* ds = scn->ensure_grad() + b * D;
                                   for (int64_t c = 0; c < D; ++c) ds[c] += g[c] * xn->value[r + c];
                               }
                               if (shn->requires_grad) {
                                   double* dh = shn->ensure_grad() + b * D;
                                   for (int64_t c = 0; c < D; ++c) dh[c] += g[c];
                               }
                           }
                   });
}

Tensor per_sample_gate(const Tensor& x, const Tensor& gate, int64_t batch) {
    check_matrix(x, "per_sample_gate");
    check(batch > 0 && x.dim(0) % batch == 0, "per_sample_gate: rows not divisible by batch");
    const int64_t T = x.dim(0) / batch, D = x.dim(1);
    check(gate.shape() == Shape({batch, D}), "per_sample_gate: gate shape " +
                                                 shape_str(gate.shape()) + " vs [" +
                                                 std::to_string(batch) + "," + std::to_string(D) +
                                                 "]");
    std::vector<double> out(x.values().size());
    const double* xp = x.data();
    const double* gp = gate.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < T; ++t) {
            const int64_t r = (b * T + t) * D;
            for (int64_t c = 0; c < D; ++c) out[r + c] = xp[r + c] * gp[b * D + c];
        }
    auto xn = x.node(), gn = gate.node();
    return make_op(x.shape(), std::move(out), {xn, gn}, [xn, gn, batch, T, D](Node& n) {
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t t = 0; t < T; ++t) {
                const int64_t r = (b * T + t) * D;
                const double* g = n.grad.data() + r;
                if (xn->requires_grad) {
                    double* dx = xn->ensure_grad() + r;
                    for (int64_t c = 0; c < D; ++c) dx[c] += g[c] * gn->value[b * D + c];
                }
                if (gn->requires_grad) {
                    double* dg = gn->ensure_grad() + b * D;
                    for (int64_t c = 0; c < D; ++c) dg[c] += g[c] * xn->value[r + c];
                }
            }
    });
}

// ---- normalization ----

namespace {

Tensor layernorm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias, double eps) {
    check_matrix(x, "layernorm");
    const int64_t R = x.dim(0), C = x.dim(1);
    if (gain)
        check(gain->shape() == Shape({C}) && bias->shape() == Shape({C}),
              "layernorm: affine shapes " + shape_str(gain->shape()) + ", " +
                  shape_str(bias->shape()) + " vs columns " + std::to_string(C));
    std::vector<double> out(static_cast<size_t>(R * C));
    std::vector<double> xhat(static_cast<size_t>(R * C));
    std::vector<double> inv_std(static_cast<size_t>(R));
    const double* xp = x.data();
    for (int64_t r = 0; r < R; ++r) {
        const double* row = xp + r * C;
        double mu = 0.0;
        for (int64_t c = 0; c < C; ++c) mu += row[c];
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            double d = row[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (int64_t c = 0; c < C; ++c) {
            double h = (row[c] - mu) * inv;
            xhat[r * C + c] = h;
            out[r * C + c] = gain ? h * gain->data()[c] + bias->data()[c] : h;
        }
    }
    auto xn = x.node();
    auto gn = gain ? gain->node() : nullptr;
    auto bn = bias ? bias->node() : nullptr;
    return make_op(x.shape(), std::move(out), {xn, gn, bn},
                   [xn, gn, bn, R, C, xh = std::move(xhat), inv = std::move(inv_std)](Node& n) {
                       for (int64_t r = 0; r < R; ++r) {
                           const double* g = n.grad.data() + r * C;
                           const double* h = xh.data() + r * C;
                           if (gn && gn->requires_grad) {
                               double* dg = gn->ensure_grad();
                               for (int64_t c = 0; c < C; ++c) dg[c] += g[c] * h[c];
                           }
                           if (bn && bn->requires_grad) {
                               double* db = bn->ensure_grad();
                               for (int64_t c = 0; c < C; ++c) db[c] += g[c];
                           }
                           if (!xn->requires_grad) continue;
                           // dxhat = g * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                           double m1 = 0.0, m2 = 0.0;
                           for (int64_t c = 0; c < C; ++c) {
                               double dh = gn ? g[c] * gn->value[c] : g[c];
                               m1 += dh;
                               m2 += dh * h[c];
                           }
                           m1 /= static_cast<double>(C);
                           m2 /= static_cast<double>(C);
                           double* dx = xn->ensure_grad() + r * C;
                           for (int64_t c = 0; c < C; ++c) {
                               double dh = gn ? g[c] * gn->value[c] : g[c];
                               dx[c] += inv[r] * (dh - m1 - h[c] * m2);
                           }
                       }
                   });
}

}  // namespace

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    return layernorm_impl(x, &gain, &bias, eps);
}

Tensor layernorm_noaffine(const Tensor& x, double eps) {
    return layernorm_impl(x, nullptr, nullptr, eps);
}

// ---- attention ----

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t batch, int64_t heads) {
    check_matrix(q, "attention");
    check_same_shape(q, k, "attention");
    check_same_shape(q, v, "attention");
    const int64_t D = q.dim(1);
    check(batch > 0 && q.dim(0) % batch == 0, "attention: rows not divisible by batch");
    check(heads > 0 && D % heads == 0, "attention: dim " + std::to_string(D) +
                                           " not divisible by heads " + std::to_string(heads));
    const int64_t T = q.dim(0) / batch, hd = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> out(q.values().size(), 0.0);
    // Row-softmax attention weights, kept for the backward pass.
    std::vector<double> probs(static_cast<size_t>(batch * heads * T * T));
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t off = b * T * D + h * hd;
            StrideM Q(q.data() + off, T, hd, Eigen::OuterStride<>(D));
            StrideM K(k.data() + off, T, hd, Eigen::OuterStride<>(D));
            StrideM V(v.data() + off, T, hd, Eigen::OuterStride<>(D));
            MapM P(probs.data() + (b * heads + h) * T * T, T, T);
            P.noalias() = Q * K.transpose() * scale;
            // Scalar softmax: Eigen's vectorized row reductions change
            // summation order with buffer alignment, which breaks bitwise
            // reproducibility across allocations.
            for (int64_t r = 0; r < T; ++r) {
                double* prow = probs.data() + ((b * heads + h) * T + r) * T;
                double m = prow[0];
                for (int64_t c = 1; c < T; ++c) m = std::max(m, prow[c]);
                double sum = 0.0;
                for (int64_t c = 0; c < T; ++c) {
                    prow[c] = std::exp(prow[c] - m);
                    sum += prow[c];
                }
                const double inv = 1.0 / sum;
                for (int64_t c = 0; c < T; ++c) prow[c] *= inv;
            }
            Eigen::Map<MatrixRd, 0, Eigen::OuterStride<>> O(out.data() + off, T, hd,
                                                            Eigen::OuterStride<>(D));
            O.noalias() = P * V;
        }
    }
    auto qn = q.node(), kn = k.node(), vn = v.node();
    if (!tracking({&q, &k, &v})) probs.clear();
    return make_op(q.shape(), std::move(out), {qn, kn, vn},
                   [qn, kn, vn, batch, heads, T, hd, D, scale, P = std::move(probs)](Node& n) {
                       MatrixRd dS(T, T), dP(T, T);
                       for (int64_t b = 0; b < batch; ++b) {
                           for (int64_t h = 0; h < heads; ++h) {
                               const int64_t off = b * T * D + h * hd;
                               StrideM Q(qn->value.data() + off, T, hd, Eigen::OuterStride<>(D));
                               StrideM K(kn->value.data() + off, T, hd, Eigen::OuterStride<>(D));
                               StrideM V(vn->value.data() + off, T, hd, Eigen::OuterStride<>(D));
                               StrideM dO(n.grad.data() + off, T, hd, Eigen::OuterStride<>(D));
                               MapMc Pm(P.data() + (b * heads + h) * T * T, T, T);
                               if (vn->requires_grad) {
                                   Eigen::Map<MatrixRd, 0, Eigen::OuterStride<>> dV(
                                       vn->ensure_grad() + off, T, hd, Eigen::OuterStride<>(D));
                                   dV.noalias() += Pm.transpose() * dO;
                               }
                               if (!qn->requires_grad && !kn->requires_grad) continue;
                               dP.noalias() = dO * V.transpose();
                               // scalar reductions, see softmax note above
                               for (int64_t r = 0; r < T; ++r) {
                                   double rs = 0.0;
                                   for (int64_t c = 0; c < T; ++c) rs += dP(r, c) * Pm(r, c);
                                   for (int64_t c = 0; c < T; ++c)
                                       dS(r, c) = Pm(r, c) * (dP(r, c) - rs);
                               }
                               if (qn->requires_grad) {
                                   Eigen::Map<MatrixRd, 0, Eigen::OuterStride<>> dQ(
                                       qn->ensure_grad() + off, T, hd, Eigen::OuterStride<>(D));
                                   dQ.noalias() += dS * K * scale;
                               }
                               if (kn->requires_grad) {
                                   Eigen::Map<MatrixRd, 0, Eigen::OuterStride<>> dK(
                                       kn->ensure_grad() + off, T, hd, Eigen::OuterStride<>(D));
                                   dK.noalias() += dS.transpose() * Q * scale;
                               }
                           }
                       }
                   });
}

// ---- patch <-> image ----

namespace {

void check_patch_geometry(int64_t channels, int64_t image_size, int64_t patch) {
    check(patch > 0 && image_size > 0 && channels > 0, "patchify: non-positive geometry");
    check(image_size % patch == 0, "patchify: image size " + std::to_string(image_size) +
                                       " not divisible by patch " + std::to_string(patch));
}

}  // namespace

Tensor patchify(const Tensor& x, int64_t patch) {
    check(x.shape().size() == 4, "patchify: expected [B,C,H,W], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H == W, "patchify: expected square images, got " + shape_str(x.shape()));
    check_patch_geometry(C, H, patch);
    const int64_t G = H / patch, T = G * G, F = C * patch * patch;
    std::vector<double> out(static_cast<size_t>(B * T * F));
    const double* xp = x.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t gy = 0; gy < G; ++gy)
            for (int64_t gx = 0; gx < G; ++gx) {
                double* row = out.data() + (b * T + gy * G + gx) * F;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < patch; ++py)
                        for (int64_t px = 0; px < patch; ++px)
                            row[(c * patch + py) * patch + px] =
                                xp[((b * C + c) * H + gy * patch + py) * W + gx * patch + px];
            }
    auto xn = x.node();
    return make_op({B * T, F}, std::move(out), {xn}, [xn, B, C, H, W, G, T, F, patch](Node& n) {
        double* dst = xn->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t gy = 0; gy < G; ++gy)
                for (int64_t gx = 0; gx < G; ++gx) {
                    const double* row = n.grad.data() + (b * T + gy * G + gx) * F;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t py = 0; py < patch; ++py)
                            for (int64_t px = 0; px < patch; ++px)
                                dst[((b * C + c) * H + gy * patch + py) * W + gx * patch + px] +=
                                    row[(c * patch + py) * patch + px];
                }
    });
}

Tensor unpatchify(const Tensor& tokens, int64_t batch, int64_t channels, int64_t image_size,
                  int64_t patch) {
    check_matrix(tokens, "unpatchify");
    check_patch_geometry(channels, image_size, patch);
    const int64_t G = image_size / patch, T = G * G, F = channels * patch * patch;
    check(tokens.dim(0) == batch * T && tokens.dim(1) == F,
          "unpatchify: token shape " + shape_str(tokens.shape()) + " vs expected [" +
              std::to_string(batch * T) + "," + std::to_string(F) + "]");
    const int64_t H = image_size, W = image_size, C = channels;
    std::vector<double> out(static_cast<size_t>(batch * C * H * W));
    const double* tp = tokens.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t gy = 0; gy < G; ++gy)
            for (int64_t gx = 0; gx < G; ++gx) {
                const double* row = tp + (b * T + gy * G + gx) * F;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < patch; ++py)
                        for (int64_t px = 0; px < patch; ++px)
                            out[((b * C + c) * H + gy * patch + py) * W + gx * patch + px] =
                                row[(c * patch + py) * patch + px];
            }
    auto tn = tokens.node();
    return make_op({batch, C, H, W}, std::move(out), {tn},
                   [tn, batch, C, H, W, G, T, F, patch](Node& n) {
                       double* dst = tn->ensure_grad();
                       for (int64_t b = 0; b < batch; ++b)
                           for (int64_t gy = 0; gy < G; ++gy)
                               for (int64_t gx = 0; gx < G; ++gx) {
                                   double* row = dst + (b * T + gy * G + gx) * F;
                                   for (int64_t c = 0; c < C; ++c)
                                       for (int64_t py = 0; py < patch; ++py)
                                           for (int64_t px = 0; px < patch; ++px)
                                               row[(c * patch + py) * patch + px] +=
                                                   n.grad[((b * C + c) * H + gy * patch + py) * W +
                                                          gx * patch + px];
                               }
                   });
}

Tensor tokens_subset_mean(const Tensor& x, int64_t batch, int64_t tokens,
                          std::span<const int> token_ids) {
    check_matrix(x, "tokens_subset_mean");
    check(x.dim(0) == batch * tokens, "tokens_subset_mean: rows " + std::to_string(x.dim(0)) +
                                          " vs batch*tokens " + std::to_string(batch * tokens));
    check(!token_ids.empty(), "tokens_subset_mean: empty token subset");
    const int64_t D = x.dim(1);
    for (int id : token_ids)
        check(0 <= id && id < tokens,
              "tokens_subset_mean: token id " + std::to_string(id) + " out of range " +
                  std::to_string(tokens));
    const double inv = 1.0 / static_cast<double>(token_ids.size());
    std::vector<double> out(static_cast<size_t>(batch * D), 0.0);
    const double* xp = x.data();
    for (int64_t b = 0; b < batch; ++b) {
        double* dst = out.data() + b * D;
        for (int id : token_ids) {
            const double* row = xp + (b * tokens + id) * D;
            for (int64_t c = 0; c < D; ++c) dst[c] += row[c];
        }
        for (int64_t c = 0; c < D; ++c) dst[c] *= inv;
    }
    auto xn = x.node();
    std::vector<int> ids_copy(token_ids.begin(), token_ids.end());
    return make_op({batch, D}, std::move(out), {xn},
                   [xn, batch, tokens, D, inv, ids = std::move(ids_copy)](Node& n) {
                       double* dst = xn->ensure_grad();
                       for (int64_t b = 0; b < batch; ++b) {
                           const double* g = n.grad.data() + b * D;
                           for (int id : ids) {
                               double* row = dst + (b * tokens + id) * D;
                               for (int64_t c = 0; c < D; ++c) row[c] += g[c] * inv;
                           }
                       }
                   });
}

// ---- reductions / losses ----

Tensor mean_all(const Tensor& x) {
    check(x.numel() > 0, "mean_all: empty tensor");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    auto xn = x.node();
    return make_op({}, {acc * inv}, {xn}, [xn, inv](Node& n) {
        double* dst = xn->ensure_grad();
        const double g = n.grad[0] * inv;
        for (size_t i = 0; i < xn->value.size(); ++i) dst[i] += g;
    });
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    auto xn = x.node();
    return make_op({}, {acc}, {xn}, [xn](Node& n) {
        double* dst = xn->ensure_grad();
        for (size_t i = 0; i < xn->value.size(); ++i) dst[i] += n.grad[0];
    });
}

Tensor weighted_mean(const Tensor& v, std::span<const double> w) {
    check(v.numel() == static_cast<int64_t>(w.size()),
          "weighted_mean: " + std::to_string(v.numel()) + " values vs " +
              std::to_string(w.size()) + " weights");
    check(!w.empty(), "weighted_mean: empty input");
    const double inv = 1.0 / static_cast<double>(w.size());
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) acc += w[i] * v.data()[i];
    auto vn = v.node();
    std::vector<double> w_copy(w.begin(), w.end());
    return make_op({}, {acc * inv}, {vn}, [vn, inv, wc = std::move(w_copy)](Node& n) {
        double* dst = vn->ensure_grad();
        for (size_t i = 0; i < wc.size(); ++i) dst[i] += n.grad[0] * wc[i] * inv;
    });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
    check_matrix(logits, "cross_entropy_rows");
    const int64_t B = logits.dim(0), C = logits.dim(1);
    check(static_cast<int64_t>(labels.size()) == B,
          "cross_entropy_rows: " + std::to_string(labels.size()) + " labels vs " +
              std::to_string(B) + " rows");
    std::vector<double> out(static_cast<size_t>(B));
    std::vector<double> probs;
    const bool track = tracking({&logits});
    if (track) probs.resize(static_cast<size_t>(B * C));
    const double* zp = logits.data();
    for (int64_t b = 0; b < B; ++b) {
        int label = labels[b];
        check(0 <= label && label < C, "cross_entropy_rows: label " + std::to_string(label) +
                                           " out of range " + std::to_string(C));
        const double* row = zp + b * C;
        double m = row[0];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        double sum = 0.0;
        for (int64_t c = 0; c < C; ++c) sum += std::exp(row[c] - m);
        out[b] = m + std::log(sum) - row[label];
        if (track)
            for (int64_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(row[c] - m) / sum;
    }
    auto zn = logits.node();
    std::vector<int> labels_copy(labels.begin(), labels.end());
    return make_op({B}, std::move(out), {zn},
                   [zn, B, C, p = std::move(probs), lab = std::move(labels_copy)](Node& n) {
                       double* dst = zn->ensure_grad();
                       for (int64_t b = 0; b < B; ++b) {
                           const double g = n.grad[b];
                           for (int64_t c = 0; c < C; ++c)
                               dst[b * C + c] += g * (p[b * C + c] - (c == lab[b] ? 1.0 : 0.0));
                       }
                   });
}

Tensor cosine_rows(const Tensor& x, const Tensor& target, int64_t* zero_count) {
    check_matrix(x, "cosine_rows");
    check_same_shape(x, target, "cosine_rows");
    const int64_t R = x.dim(0), D = x.dim(1);
    constexpr double kTiny = 1e-12;
    std::vector<double> out(static_cast<size_t>(R));
    std::vector<double> norms(static_cast<size_t>(2 * R));
    const double* xp = x.data();
    const double* tp = target.data();
    int64_t zeros = 0;
    for (int64_t r = 0; r < R; ++r) {
        double nx = 0.0, nt = 0.0, dot = 0.0;
        for (int64_t c = 0; c < D; ++c) {
            nx += xp[r * D + c] * xp[r * D + c];
            nt += tp[r * D + c] * tp[r * D + c];
            dot += xp[r * D + c] * tp[r * D + c];
        }
        nx = std::sqrt(nx);
        nt = std::sqrt(nt);
        norms[2 * r] = nx;
        norms[2 * r + 1] = nt;
        if (nx < kTiny || nt < kTiny) {
            out[r] = 0.0;
            ++zeros;
        } else {
            out[r] = dot / (nx * nt);
        }
    }
    if (zero_count) *zero_count = zeros;
    auto xn = x.node(), tn = target.node();
    return make_op({R}, std::move(out), {xn, tn},
                   [xn, tn, R, D, ns = std::move(norms)](Node& n) {
                       for (int64_t r = 0; r < R; ++r) {
                           const double nx = ns[2 * r], nt = ns[2 * r + 1];
                           if (nx < kTiny || nt < kTiny) continue;
                           const double y = n.value[r];
                           const double g = n.grad[r];
                           if (xn->requires_grad) {
                               double* dx = xn->ensure_grad() + r * D;
                               for (int64_t c = 0; c < D; ++c)
                                   dx[c] += g * (tn->value[r * D + c] / (nx * nt) -
                                                 y * xn->value[r * D + c] / (nx * nx));
                           }
                           if (tn->requires_grad) {
                               double* dt = tn->ensure_grad() + r * D;
                               for (int64_t c = 0; c < D; ++c)
                                   dt[c] += g * (xn->value[r * D + c] / (nx * nt) -
                                                 y * tn->value[r * D + c] / (nt * nt));
                           }
                       }
                   });
}

}  // namespace lsep::nn
