#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "medvae/common.hpp"

namespace medvae {

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One record in the autodiff graph. `parents` + `backprop` encode the local
// backward rule; the topological order is materialized during backward().
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

inline bool grad_mode_enabled_flag(int delta = 0) {
    thread_local int depth = 0;
    depth += delta;
    return depth == 0;
}

}  // namespace detail

// Disables graph recording in scope (inference / evaluation paths).
struct NoGradGuard {
    NoGradGuard() { detail::grad_mode_enabled_flag(+1); }
    ~NoGradGuard() { detail::grad_mode_enabled_flag(-1); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording_enabled() { return detail::grad_mode_enabled_flag(); }

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        node_ = std::make_shared<detail::Node>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel_of(shape)), 0.0);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel_of(shape)), v);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel_of(shape)));
        for (auto& x : d) x = rng.normal() * stddev;
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::span<const double> data() const { return {node_->value.data(), node_->value.size()}; }
    std::span<double> mutable_data() { return {node_->value.data(), node_->value.size()}; }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->value[0];
    }

    // Gradient buffer; zeros if backward never touched this node.
    std::vector<double> grad() const {
        if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
        return node_->grad;
    }

    bool has_grad() const { return !node_->grad.empty(); }

    void zero_grad() { node_->grad.clear(); }

    // Same values, no graph attachment.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    detail::Node* node() const { return node_.get(); }
    const detail::NodePtr& node_ptr() const { return node_; }

    static Tensor from_node(detail::NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    detail::NodePtr node_;
};

namespace detail {

inline NodePtr make_result(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

// Attach graph edges when any input needs gradients and recording is on.
inline void record(NodePtr& result, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
    if (!grad_mode_enabled_flag()) return;
    bool any = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) any = true;
    if (!any) return;
    result->requires_grad = true;
    result->parents = std::move(parents);
    result->backprop = std::move(fn);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// Populates gradients of every requires_grad node reachable from `loss`.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    using detail::Node;
    if (!loss.requires_grad()) return;

    // Topological order over the recorded graph (each node visited once).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        n->ensure_grad();
        if (n->backprop) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops accept equal shapes or a scalar on either side.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar) check_same_shape(a, b, name);
    const Shape& out_shape = a_scalar ? b.shape() : a.shape();
    const int64_t n = numel_of(out_shape);
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t i = 0; i < n; ++i) {
        const double x = pa[a_scalar ? 0 : i];
        const double y = pb[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: out[i] = x + y; break;
            case BinKind::Sub: out[i] = x - y; break;
            case BinKind::Mul: out[i] = x * y; break;
            case BinKind::Div: out[i] = x / y; break;
        }
    }
    auto res = make_result(out_shape, std::move(out));
    Node* an = a.node();
    Node* bn = b.node();
    record(res, {a.node_ptr(), b.node_ptr()}, [an, bn, a_scalar, b_scalar, kind, n](Node& self) {
        const double* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            double* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) {
                double d = 0.0;
                const double y = bn->value[b_scalar ? 0 : i];
                switch (kind) {
                    case BinKind::Add: d = g[i]; break;
                    case BinKind::Sub: d = g[i]; break;
                    case BinKind::Mul: d = g[i] * y; break;
                    case BinKind::Div: d = g[i] / y; break;
                }
                ga[a_scalar ? 0 : i] += d;
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            double* gb = bn->grad.data();
            for (int64_t i = 0; i < n; ++i) {
                double d = 0.0;
                const double x = an->value[a_scalar ? 0 : i];
                const double y = bn->value[b_scalar ? 0 : i];
                switch (kind) {
                    case BinKind::Add: d = g[i]; break;
                    case BinKind::Sub: d = -g[i]; break;
                    case BinKind::Mul: d = g[i] * x; break;
                    case BinKind::Div: d = -g[i] * x / (y * y); break;
                }
                gb[b_scalar ? 0 : i] += d;
            }
        }
    });
    return Tensor::from_node(res);
}

inline Tensor unary_op(const Tensor& a, const std::function<double(double)>& f,
                       const std::function<double(double, double)>& df_xy) {
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[i] = f(pa[i]);
    auto res = make_result(a.shape(), std::move(out));
    Node* an = a.node();
    record(res, {a.node_ptr()}, [an, df_xy, n](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        double* ga = an->grad.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * df_xy(an->value[i], self.value[i]);
    });
    return Tensor::from_node(res);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Mul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Div, "div"); }

inline Tensor add_scalar(const Tensor& a, double v) { return add(a, Tensor::scalar(v)); }
inline Tensor mul_scalar(const Tensor& a, double v) { return mul(a, Tensor::scalar(v)); }

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor abs_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::fabs(x); },
                            [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// exp/log are range-guarded so finite inputs cannot produce inf/NaN.
inline Tensor exp_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::exp(std::min(x, 700.0)); },
                            [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::log(std::max(x, 1e-300)); },
                            [](double x, double) { return 1.0 / std::max(x, 1e-300); });
}

inline Tensor sqrt_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::sqrt(std::max(x, 0.0)); },
                            [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                            [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double alpha) {
    return detail::unary_op(a, [alpha](double x) { return x > 0 ? x : alpha * x; },
                            [alpha](double x, double) { return x > 0 ? 1.0 : alpha; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) {
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return x * s;
        },
        [](double x, double) {
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary_op(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                            [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    const int64_t n = a.numel();
    double s = 0.0;
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) s += pa[i];
    auto res = detail::make_result({1}, {s});
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, n](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (int64_t i = 0; i < n; ++i) an->grad[i] += g;
    });
    return Tensor::from_node(res);
}

inline Tensor mean_all(const Tensor& a) {
    const int64_t n = a.numel();
    double s = 0.0;
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) s += pa[i];
    auto res = detail::make_result({1}, {s / static_cast<double>(n)});
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, n](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) an->grad[i] += g;
    });
    return Tensor::from_node(res);
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse");
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

inline Tensor l1(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "l1");
    return mean_all(abs_op(sub(a, b)));
}

// Mean across the channel axis, keeping a singleton channel: [N,C,sp...] -> [N,1,sp...].
inline Tensor channel_mean(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.size() < 2) throw ShapeError("channel_mean: expected [N,C,...], got " + shape_str(s));
    const int64_t N = s[0], C = s[1];
    int64_t P = 1;
    for (size_t i = 2; i < s.size(); ++i) P *= s[i];
    Shape out_shape = s;
    out_shape[1] = 1;
    std::vector<double> out(static_cast<size_t>(N * P), 0.0);
    const double* pa = a.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* src = pa + (n * C + c) * P;
            double* dst = out.data() + n * P;
            for (int64_t p = 0; p < P; ++p) dst[p] += src[p];
        }
    const double inv = 1.0 / static_cast<double>(C);
    for (auto& v : out) v *= inv;
    auto res = detail::make_result(std::move(out_shape), std::move(out));
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, N, C, P, inv](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                double* dst = an->grad.data() + (n * C + c) * P;
                const double* src = g + n * P;
                for (int64_t p = 0; p < P; ++p) dst[p] += src[p] * inv;
            }
    });
    return Tensor::from_node(res);
}

// Global average pool over spatial axes: [N,C,sp...] -> [N,C].
inline Tensor spatial_mean(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.size() < 3) throw ShapeError("spatial_mean: expected [N,C,spatial...], got " + shape_str(s));
    const int64_t N = s[0], C = s[1];
    int64_t P = 1;
    for (size_t i = 2; i < s.size(); ++i) P *= s[i];
    std::vector<double> out(static_cast<size_t>(N * C), 0.0);
    const double* pa = a.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* src = pa + nc * P;
        double acc = 0.0;
        for (int64_t p = 0; p < P; ++p) acc += src[p];
        out[nc] = acc / static_cast<double>(P);
    }
    auto res = detail::make_result({N, C}, std::move(out));
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, N, C, P](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const double g = self.grad[nc] / static_cast<double>(P);
            double* dst = an->grad.data() + nc * P;
            for (int64_t p = 0; p < P; ++p) dst[p] += g;
        }
    });
    return Tensor::from_node(res);
}

// Per-position unit normalization across channels: y[n,:,p] = x[n,:,p] / sqrt(sum_c x^2 + eps).
// Also normalizes plain [N,E] feature vectors (spatial size 1).
inline Tensor channel_unit_normalize(const Tensor& a, double eps = 1e-10) {
    const Shape& s = a.shape();
    if (s.size() < 2) throw ShapeError("channel_unit_normalize: expected [N,C,...], got " + shape_str(s));
    const int64_t N = s[0], C = s[1];
    int64_t P = 1;
    for (size_t i = 2; i < s.size(); ++i) P *= s[i];
    std::vector<double> out(static_cast<size_t>(N * C * P));
    std::vector<double> rnorm(static_cast<size_t>(N * P));
    const double* pa = a.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < P; ++p) {
            double ss = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                const double v = pa[(n * C + c) * P + p];
                ss += v * v;
            }
            rnorm[n * P + p] = 1.0 / std::sqrt(ss + eps);
        }
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < P; ++p)
                out[(n * C + c) * P + p] = pa[(n * C + c) * P + p] * rnorm[n * P + p];
    auto res = detail::make_result(s, std::move(out));
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, N, C, P, rnorm](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* x = an->value.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t p = 0; p < P; ++p) {
                const double r = rnorm[n * P + p];
                double dot = 0.0;
                for (int64_t c = 0; c < C; ++c) dot += g[(n * C + c) * P + p] * x[(n * C + c) * P + p];
                const double r3dot = dot * r * r * r;
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t i = (n * C + c) * P + p;
                    an->grad[i] += g[i] * r - x[i] * r3dot;
                }
            }
    });
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw ShapeError("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(new_shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    auto res = detail::make_result(std::move(new_shape), std::move(out));
    detail::Node* an = a.node();
    const int64_t n = a.numel();
    detail::record(res, {a.node_ptr()}, [an, n](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
    });
    return Tensor::from_node(res);
}

// Contiguous channel slice [start, start+len) of axis 1.
inline Tensor narrow_channels(const Tensor& a, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    if (s.size() < 2) throw ShapeError("narrow_channels: expected [N,C,...], got " + shape_str(s));
    const int64_t N = s[0], C = s[1];
    if (start < 0 || len < 1 || start + len > C)
        throw ShapeError("narrow_channels: slice [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of C=" + std::to_string(C));
    int64_t P = 1;
    for (size_t i = 2; i < s.size(); ++i) P *= s[i];
    Shape out_shape = s;
    out_shape[1] = len;
    std::vector<double> out(static_cast<size_t>(N * len * P));
    const double* pa = a.data().data();
    for (int64_t n = 0; n < N; ++n)
        std::memcpy(out.data() + n * len * P, pa + (n * C + start) * P,
                    static_cast<size_t>(len * P) * sizeof(double));
    auto res = detail::make_result(std::move(out_shape), std::move(out));
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, N, C, P, start, len](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
            double* dst = an->grad.data() + (n * C + start) * P;
            const double* src = self.grad.data() + n * len * P;
            for (int64_t i = 0; i < len * P; ++i) dst[i] += src[i];
        }
    });
    return Tensor::from_node(res);
}

// Extracts index `idx` of the last axis: [..., S] -> [...]. Used for per-slice
// losses on volumes laid out [N,C,H,W,S].
inline Tensor slice_last(const Tensor& a, int64_t idx) {
    const Shape& s = a.shape();
    if (s.size() < 2) throw ShapeError("slice_last: rank must be >= 2, got " + shape_str(s));
    const int64_t S = s.back();
    if (idx < 0 || idx >= S)
        throw ShapeError("slice_last: index " + std::to_string(idx) + " out of extent " + std::to_string(S));
    Shape out_shape(s.begin(), s.end() - 1);
    const int64_t n_out = numel_of(out_shape);
    std::vector<double> out(static_cast<size_t>(n_out));
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n_out; ++i) out[i] = pa[i * S + idx];
    auto res = detail::make_result(std::move(out_shape), std::move(out));
    detail::Node* an = a.node();
    detail::record(res, {a.node_ptr()}, [an, S, idx, n_out](detail::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < n_out; ++i) an->grad[i * S + idx] += self.grad[i];
    });
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Convolution (2D/3D, channels-first, zero padding)
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Output range [lo, hi] such that 0 <= o*stride - pad + k_off < in_extent.
inline void tap_range(int64_t in_extent, int64_t out_extent, int64_t stride, int64_t pad,
                      int64_t k_off, int64_t& lo, int64_t& hi) {
    const int64_t a = pad - k_off;
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    const int64_t b = in_extent - 1 + pad - k_off;
    hi = b < 0 ? -1 : std::min(b / stride, out_extent - 1);
}

inline void check_conv_args(const Shape& in, const Shape& kern, int64_t stride, int64_t pad, int ndim,
                            const char* op, bool kernel_must_fit = true) {
    if (ndim != 2 && ndim != 3) throw ShapeError(std::string(op) + ": ndim must be 2 or 3");
    if (static_cast<int>(in.size()) != ndim + 2)
        throw ShapeError(std::string(op) + ": input rank " + std::to_string(in.size()) +
                         " does not match ndim " + std::to_string(ndim) + " (want [N,C,spatial...])");
    if (static_cast<int>(kern.size()) != ndim + 2)
        throw ShapeError(std::string(op) + ": kernel rank " + std::to_string(kern.size()) +
                         " does not match ndim " + std::to_string(ndim));
    if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
    if (pad < 0) throw ShapeError(std::string(op) + ": padding must be >= 0");
    if (kernel_must_fit) {
        for (int a = 0; a < ndim; ++a) {
            if (kern[2 + a] > in[2 + a] + 2 * pad)
                throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(kern[2 + a]) +
                                 " exceeds padded input extent on spatial axis " + std::to_string(a));
        }
    }
}

}  // namespace detail

// conv(input[N,Cin,sp...], kernel[Cout,Cin,k...]) with zero padding.
inline Tensor conv(const Tensor& input, const Tensor& kernel, int64_t stride, int64_t pad, int ndim,
                   const Tensor* bias = nullptr) {
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    detail::check_conv_args(is, ks, stride, pad, ndim, "conv");
    if (is[1] != ks[1])
        throw ShapeError("conv: input channel axis has " + std::to_string(is[1]) +
                         " channels but kernel expects " + std::to_string(ks[1]));
    const int64_t N = is[0], Cin = is[1], Cout = ks[0];
    if (bias && (bias->shape() != Shape{Cout}))
        throw ShapeError("conv: bias shape " + shape_str(bias->shape()) + " != (" + std::to_string(Cout) + ")");

    Shape out_shape{N, Cout};
    for (int a = 0; a < ndim; ++a) {
        const int64_t oe = detail::conv_out_extent(is[2 + a], ks[2 + a], stride, pad);
        if (oe < 1)
            throw ShapeError("conv: empty output on spatial axis " + std::to_string(a));
        out_shape.push_back(oe);
    }
    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)), 0.0);

    const double* X = input.data().data();
    const double* W = kernel.data().data();
    const double* B = bias ? bias->data().data() : nullptr;

    if (ndim == 2) {
        const int64_t H = is[2], Wd = is[3], KH = ks[2], KW = ks[3];
        const int64_t OH = out_shape[2], OW = out_shape[3];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                double* op = out.data() + ((n * Cout + co) * OH) * OW;
                if (B) {
                    const double bv = B[co];
                    for (int64_t i = 0; i < OH * OW; ++i) op[i] = bv;
                }
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    const double* ip = X + ((n * Cin + ci) * H) * Wd;
                    const double* wp = W + ((co * Cin + ci) * KH) * KW;
                    for (int64_t ky = 0; ky < KH; ++ky)
                        for (int64_t kx = 0; kx < KW; ++kx) {
                            const double wv = wp[ky * KW + kx];
                            int64_t oy_lo, oy_hi, ox_lo, ox_hi;
                            detail::tap_range(H, OH, stride, pad, ky, oy_lo, oy_hi);
                            detail::tap_range(Wd, OW, stride, pad, kx, ox_lo, ox_hi);
                            for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                const double* irow = ip + (oy * stride - pad + ky) * Wd + (kx - pad);
                                double* orow = op + oy * OW;
                                if (stride == 1) {
                                    for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox];
                                } else {
                                    for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                        orow[ox] += wv * irow[ox * stride];
                                }
                            }
                        }
                }
            }
    } else {
        const int64_t D0 = is[2], D1 = is[3], D2 = is[4];
        const int64_t K0 = ks[2], K1 = ks[3], K2 = ks[4];
        const int64_t O0 = out_shape[2], O1 = out_shape[3], O2 = out_shape[4];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                double* op = out.data() + ((n * Cout + co) * O0) * O1 * O2;
                if (B) {
                    const double bv = B[co];
                    for (int64_t i = 0; i < O0 * O1 * O2; ++i) op[i] = bv;
                }
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    const double* ip = X + ((n * Cin + ci) * D0) * D1 * D2;
                    const double* wp = W + (((co * Cin + ci) * K0) * K1) * K2;
                    for (int64_t k0 = 0; k0 < K0; ++k0)
                        for (int64_t k1 = 0; k1 < K1; ++k1)
                            for (int64_t k2 = 0; k2 < K2; ++k2) {
                                const double wv = wp[(k0 * K1 + k1) * K2 + k2];
                                int64_t lo0, hi0, lo1, hi1, lo2, hi2;
                                detail::tap_range(D0, O0, stride, pad, k0, lo0, hi0);
                                detail::tap_range(D1, O1, stride, pad, k1, lo1, hi1);
                                detail::tap_range(D2, O2, stride, pad, k2, lo2, hi2);
                                for (int64_t o0 = lo0; o0 <= hi0; ++o0) {
                                    const int64_t i0 = o0 * stride - pad + k0;
                                    for (int64_t o1 = lo1; o1 <= hi1; ++o1) {
                                        const int64_t i1 = o1 * stride - pad + k1;
                                        const double* irow = ip + (i0 * D1 + i1) * D2 + (k2 - pad);
                                        double* orow = op + (o0 * O1 + o1) * O2;
                                        if (stride == 1) {
                                            for (int64_t o2 = lo2; o2 <= hi2; ++o2) orow[o2] += wv * irow[o2];
                                        } else {
                                            for (int64_t o2 = lo2; o2 <= hi2; ++o2)
                                                orow[o2] += wv * irow[o2 * stride];
                                        }
                                    }
                                }
                            }
                }
            }
    }

    auto res = detail::make_result(out_shape, std::move(out));
    detail::Node* xn = input.node();
    detail::Node* wn = kernel.node();
    detail::Node* bn = bias ? bias->node() : nullptr;
    std::vector<detail::NodePtr> parents{input.node_ptr(), kernel.node_ptr()};
    if (bias) parents.push_back(bias->node_ptr());
    const Shape in_shape = is, k_shape = ks;
    detail::record(res, std::move(parents), [=](detail::Node& self) {
        const double* G = self.grad.data();
        const Shape& os = self.shape;
        const int64_t Nn = in_shape[0], Ci = in_shape[1], Co = k_shape[0];
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            int64_t P = 1;
            for (size_t i = 2; i < os.size(); ++i) P *= os[i];
            for (int64_t n = 0; n < Nn; ++n)
                for (int64_t co = 0; co < Co; ++co) {
                    const double* gp = G + (n * Co + co) * P;
                    double acc = 0.0;
                    for (int64_t i = 0; i < P; ++i) acc += gp[i];
                    bn->grad[co] += acc;
                }
        }
        if (ndim == 2) {
            const int64_t H = in_shape[2], Wd = in_shape[3], KH = k_shape[2], KW = k_shape[3];
            const int64_t OH = os[2], OW = os[3];
            for (int64_t n = 0; n < Nn; ++n)
                for (int64_t co = 0; co < Co; ++co) {
                    const double* gp = G + ((n * Co + co) * OH) * OW;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const double* ip = xn->value.data() + ((n * Ci + ci) * H) * Wd;
                        double* dip = xn->requires_grad
                                          ? (xn->ensure_grad(), xn->grad.data() + ((n * Ci + ci) * H) * Wd)
                                          : nullptr;
                        const double* wp = wn->value.data() + ((co * Ci + ci) * KH) * KW;
                        double* dwp = wn->requires_grad
                                          ? (wn->ensure_grad(), wn->grad.data() + ((co * Ci + ci) * KH) * KW)
                                          : nullptr;
                        for (int64_t ky = 0; ky < KH; ++ky)
                            for (int64_t kx = 0; kx < KW; ++kx) {
                                int64_t oy_lo, oy_hi, ox_lo, ox_hi;
                                detail::tap_range(H, OH, stride, pad, ky, oy_lo, oy_hi);
                                detail::tap_range(Wd, OW, stride, pad, kx, ox_lo, ox_hi);
                                if (dip) {
                                    const double wv = wp[ky * KW + kx];
                                    for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                        double* drow = dip + (oy * stride - pad + ky) * Wd + (kx - pad);
                                        const double* grow = gp + oy * OW;
                                        if (stride == 1) {
                                            for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) drow[ox] += wv * grow[ox];
                                        } else {
                                            for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                                drow[ox * stride] += wv * grow[ox];
                                        }
                                    }
                                }
                                if (dwp) {
                                    double acc = 0.0;
                                    for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                        const double* irow = ip + (oy * stride - pad + ky) * Wd + (kx - pad);
                                        const double* grow = gp + oy * OW;
                                        if (stride == 1) {
                                            for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) acc += grow[ox] * irow[ox];
                                        } else {
                                            for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                                acc += grow[ox] * irow[ox * stride];
                                        }
                                    }
                                    dwp[ky * KW + kx] += acc;
                                }
                            }
                    }
                }
        } else {
            const int64_t D0 = in_shape[2], D1 = in_shape[3], D2 = in_shape[4];
            const int64_t K0 = k_shape[2], K1 = k_shape[3], K2 = k_shape[4];
            const int64_t O0 = os[2], O1 = os[3], O2 = os[4];
            for (int64_t n = 0; n < Nn; ++n)
                for (int64_t co = 0; co < Co; ++co) {
                    const double* gp = G + ((n * Co + co) * O0) * O1 * O2;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const double* ip = xn->value.data() + ((n * Ci + ci) * D0) * D1 * D2;
                        double* dip = xn->requires_grad
                                          ? (xn->ensure_grad(), xn->grad.data() + ((n * Ci + ci) * D0) * D1 * D2)
                                          : nullptr;
                        const double* wp = wn->value.data() + (((co * Ci + ci) * K0) * K1) * K2;
                        double* dwp = wn->requires_grad
                                          ? (wn->ensure_grad(),
                                             wn->grad.data() + (((co * Ci + ci) * K0) * K1) * K2)
                                          : nullptr;
                        for (int64_t k0 = 0; k0 < K0; ++k0)
                            for (int64_t k1 = 0; k1 < K1; ++k1)
                                for (int64_t k2 = 0; k2 < K2; ++k2) {
                                    int64_t lo0, hi0, lo1, hi1, lo2, hi2;
                                    detail::tap_range(D0, O0, stride, pad, k0, lo0, hi0);
                                    detail::tap_range(D1, O1, stride, pad, k1, lo1, hi1);
                                    detail::tap_range(D2, O2, stride, pad, k2, lo2, hi2);
                                    const double wv = wp[(k0 * K1 + k1) * K2 + k2];
                                    double acc = 0.0;
                                    for (int64_t o0 = lo0; o0 <= hi0; ++o0) {
                                        const int64_t i0 = o0 * stride - pad + k0;
                                        for (int64_t o1 = lo1; o1 <= hi1; ++o1) {
                                            const int64_t i1 = o1 * stride - pad + k1;
                                            const int64_t ibase = (i0 * D1 + i1) * D2 + (k2 - pad);
                                            const double* grow = gp + (o0 * O1 + o1) * O2;
                                            if (dip) {
                                                double* drow = dip + ibase;
                                                if (stride == 1) {
                                                    for (int64_t o2 = lo2; o2 <= hi2; ++o2)
                                                        drow[o2] += wv * grow[o2];
                                                } else {
                                                    for (int64_t o2 = lo2; o2 <= hi2; ++o2)
                                                        drow[o2 * stride] += wv * grow[o2];
                                                }
                                            }
                                            if (dwp) {
                                                const double* irow = ip + ibase;
                                                if (stride == 1) {
                                                    for (int64_t o2 = lo2; o2 <= hi2; ++o2)
                                                        acc += grow[o2] * irow[o2];
                                                } else {
                                                    for (int64_t o2 = lo2; o2 <= hi2; ++o2)
                                                        acc += grow[o2] * irow[o2 * stride];
                                                }
                                            }
                                        }
                                    }
                                    if (dwp) dwp[(k0 * K1 + k1) * K2 + k2] += acc;
                                }
                    }
                }
        }
    });
    return Tensor::from_node(res);
}

// Adjoint of conv with the same kernel: input has Cout channels, output Cin.
// Output extent per axis: (in-1)*stride - 2*pad + k.
inline Tensor conv_transpose(const Tensor& input, const Tensor& kernel, int64_t stride, int64_t pad,
                             int ndim, const Tensor* bias = nullptr) {
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    detail::check_conv_args(is, ks, stride, pad, ndim, "conv_transpose", /*kernel_must_fit=*/false);
    if (is[1] != ks[0])
        throw ShapeError("conv_transpose: input channel axis has " + std::to_string(is[1]) +
                         " channels but kernel expects " + std::to_string(ks[0]));
    const int64_t N = is[0], Cq = is[1], Cr = ks[1];
    if (bias && (bias->shape() != Shape{Cr}))
        throw ShapeError("conv_transpose: bias shape mismatch");

    Shape out_shape{N, Cr};
    for (int a = 0; a < ndim; ++a) {
        const int64_t oe = (is[2 + a] - 1) * stride - 2 * pad + ks[2 + a];
        if (oe < 1) throw ShapeError("conv_transpose: empty output on spatial axis " + std::to_string(a));
        out_shape.push_back(oe);
    }
    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)), 0.0);

    const double* X = input.data().data();
    const double* W = kernel.data().data();

    if (ndim == 2) {
        const int64_t IH = is[2], IW = is[3], KH = ks[2], KW = ks[3];
        const int64_t OH = out_shape[2], OW = out_shape[3];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t cq = 0; cq < Cq; ++cq) {
                const double* ip = X + ((n * Cq + cq) * IH) * IW;
                for (int64_t cr = 0; cr < Cr; ++cr) {
                    double* op = out.data() + ((n * Cr + cr) * OH) * OW;
                    const double* wp = W + ((cq * Cr + cr) * KH) * KW;
                    for (int64_t ky = 0; ky < KH; ++ky)
                        for (int64_t kx = 0; kx < KW; ++kx) {
                            const double wv = wp[ky * KW + kx];
                            int64_t iy_lo, iy_hi, ix_lo, ix_hi;
                            detail::tap_range(OH, IH, stride, pad, ky, iy_lo, iy_hi);
                            detail::tap_range(OW, IW, stride, pad, kx, ix_lo, ix_hi);
                            for (int64_t iy = iy_lo; iy <= iy_hi; ++iy) {
                                double* orow = op + (iy * stride - pad + ky) * OW + (kx - pad);
                                const double* irow = ip + iy * IW;
                                if (stride == 1) {
                                    for (int64_t ix = ix_lo; ix <= ix_hi; ++ix) orow[ix] += wv * irow[ix];
                                } else {
                                    for (int64_t ix = ix_lo; ix <= ix_hi; ++ix)
                                        orow[ix * stride] += wv * irow[ix];
                                }
                            }
                        }
                }
            }
    } else {
        const int64_t I0 = is[2], I1 = is[3], I2 = is[4];
        const int64_t K0 = ks[2], K1 = ks[3], K2 = ks[4];
        const int64_t O0 = out_shape[2], O1 = out_shape[3], O2 = out_shape[4];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t cq = 0; cq < Cq; ++cq) {
                const double* ip = X + ((n * Cq + cq) * I0) * I1 * I2;
                for (int64_t cr = 0; cr < Cr; ++cr) {
                    double* op = out.data() + ((n * Cr + cr) * O0) * O1 * O2;
                    const double* wp = W + (((cq * Cr + cr) * K0) * K1) * K2;
                    for (int64_t k0 = 0; k0 < K0; ++k0)
                        for (int64_t k1 = 0; k1 < K1; ++k1)
                            for (int64_t k2 = 0; k2 < K2; ++k2) {
                                const double wv = wp[(k0 * K1 + k1) * K2 + k2];
                                int64_t lo0, hi0, lo1, hi1, lo2, hi2;
                                detail::tap_range(O0, I0, stride, pad, k0, lo0, hi0);
                                detail::tap_range(O1, I1, stride, pad, k1, lo1, hi1);
                                detail::tap_range(O2, I2, stride, pad, k2, lo2, hi2);
                                for (int64_t i0 = lo0; i0 <= hi0; ++i0) {
                                    const int64_t o0 = i0 * stride - pad + k0;
                                    for (int64_t i1 = lo1; i1 <= hi1; ++i1) {
                                        const int64_t o1 = i1 * stride - pad + k1;
                                        double* orow = op + (o0 * O1 + o1) * O2 + (k2 - pad);
                                        const double* irow = ip + (i0 * I1 + i1) * I2;
                                        if (stride == 1) {
                                            for (int64_t i2 = lo2; i2 <= hi2; ++i2) orow[i2] += wv * irow[i2];
                                        } else {
                                            for (int64_t i2 = lo2; i2 <= hi2; ++i2)
                                                orow[i2 * stride] += wv * irow[i2];
                                        }
                                    }
                                }
                            }
                }
            }
    }
    if (bias) {
        const double* B = bias->data().data();
        int64_t P = 1;
        for (size_t i = 2; i < out_shape.size(); ++i) P *= out_shape[i];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t cr = 0; cr < Cr; ++cr) {
                double* op = out.data() + (n * Cr + cr) * P;
                const double bv = B[cr];
                for (int64_t i = 0; i < P; ++i) op[i] += bv;
            }
    }

    auto res = detail::make_result(out_shape, std::move(out));
    detail::Node* xn = input.node();
    detail::Node* wn = kernel.node();
    detail::Node* bn = bias ? bias->node() : nullptr;
    std::vector<detail::NodePtr> parents{input.node_ptr(), kernel.node_ptr()};
    if (bias) parents.push_back(bias->node_ptr());
    const Shape in_shape = is, k_shape = ks;
    detail::record(res, std::move(parents), [=](detail::Node& self) {
        const double* G = self.grad.data();
        const Shape& os = self.shape;
        const int64_t Nn = in_shape[0], CQ = in_shape[1], CR = k_shape[1];
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            int64_t P = 1;
            for (size_t i = 2; i < os.size(); ++i) P *= os[i];
            for (int64_t n = 0; n < Nn; ++n)
                for (int64_t cr = 0; cr < CR; ++cr) {
                    const double* gp = G + (n * CR + cr) * P;
                    double acc = 0.0;
                    for (int64_t i = 0; i < P; ++i) acc += gp[i];
                    bn->grad[cr] += acc;
                }
        }
        // d(input) is a plain conv of G with the kernel; d(kernel) mirrors conv's rule.
        if (ndim == 2) {
            const int64_t IH = in_shape[2], IW = in_shape[3], KH = k_shape[2], KW = k_shape[3];
            const int64_t OH = os[2], OW = os[3];
            for (int64_t n = 0; n < Nn; ++n)
                for (int64_t cq = 0; cq < CQ; ++cq) {
                    const double* ip = xn->value.data() + ((n * CQ + cq) * IH) * IW;
                    double* dip = xn->requires_grad
                                      ? (xn->ensure_grad(), xn->grad.data() + ((n * CQ + cq) * IH) * IW)
                                      : nullptr;
                    for (int64_t cr = 0; cr < CR; ++cr) {
                        const double* gp = G + ((n * CR + cr) * OH) * OW;
                        const double* wp = wn->value.data() + ((cq * CR + cr) * KH) * KW;
                        double* dwp = wn->requires_grad
                                          ? (wn->ensure_grad(), wn->grad.data() + ((cq * CR + cr) * KH) * KW)
                                          : nullptr;
                        for (int64_t ky = 0; ky < KH; ++ky)
                            for (int64_t kx = 0; kx < KW; ++kx) {
                                const double wv = wp[ky * KW + kx];
                                int64_t iy_lo, iy_hi, ix_lo, ix_hi;
                                detail::tap_range(OH, IH, stride, pad, ky, iy_lo, iy_hi);
                                detail::tap_range(OW, IW, stride, pad, kx, ix_lo, ix_hi);
                                double acc = 0.0;
                                for (int64_t iy = iy_lo; iy <= iy_hi; ++iy) {
                                    const double* grow = gp + (iy * stride - pad + ky) * OW + (kx - pad);
                                    const double* irow = ip + iy * IW;
                                    double* drow = dip ? dip + iy * IW : nullptr;
                                    if (stride == 1) {
                                        for (int64_t ix = ix_lo; ix <= ix_hi; ++ix) {
                                            if (drow) drow[ix] += wv * grow[ix];
                                            if (dwp) acc += grow[ix] * irow[ix];
                                        }
                                    } else {
                                        for (int64_t ix = ix_lo; ix <= ix_hi; ++ix) {
                                            if (drow) drow[ix] += wv * grow[ix * stride];
                                            if (dwp) acc += grow[ix * stride] * irow[ix];
                                        }
                                    }
                                }
                                if (dwp) dwp[ky * KW + kx] += acc;
                            }
                    }
                }
        } else {
            const int64_t I0 = in_shape[2], I1 = in_shape[3], I2 = in_shape[4];
            const int64_t K0 = k_shape[2], K1 = k_shape[3], K2 = k_shape[4];
            const int64_t O0 = os[2], O1 = os[3], O2 = os[4];
            for (int64_t n = 0; n < Nn; ++n)
                for (int64_t cq = 0; cq < CQ; ++cq) {
                    const double* ip = xn->value.data() + ((n * CQ + cq) * I0) * I1 * I2;
                    double* dip = xn->requires_grad
                                      ? (xn->ensure_grad(), xn->grad.data() + ((n * CQ + cq) * I0) * I1 * I2)
                                      : nullptr;
                    for (int64_t cr = 0; cr < CR; ++cr) {
                        const double* gp = G + ((n * CR + cr) * O0) * O1 * O2;
                        const double* wp = wn->value.data() + (((cq * CR + cr) * K0) * K1) * K2;
                        double* dwp = wn->requires_grad
                                          ? (wn->ensure_grad(),
                                             wn->grad.data() + (((cq * CR + cr) * K0) * K1) * K2)
                                          : nullptr;
                        for (int64_t k0 = 0; k0 < K0; ++k0)
                            for (int64_t k1 = 0; k1 < K1; ++k1)
                                for (int64_t k2 = 0; k2 < K2; ++k2) {
                                    const double wv = wp[(k0 * K1 + k1) * K2 + k2];
                                    int64_t lo0, hi0, lo1, hi1, lo2, hi2;
                                    detail::tap_range(O0, I0, stride, pad, k0, lo0, hi0);
                                    detail::tap_range(O1, I1, stride, pad, k1, lo1, hi1);
                                    detail::tap_range(O2, I2, stride, pad, k2, lo2, hi2);
                                    double acc = 0.0;
                                    for (int64_t i0 = lo0; i0 <= hi0; ++i0) {
                                        const int64_t o0 = i0 * stride - pad + k0;
                                        for (int64_t i1 = lo1; i1 <= hi1; ++i1) {
                                            const int64_t o1 = i1 * stride - pad + k1;
                                            const double* grow = gp + (o0 * O1 + o1) * O2 + (k2 - pad);
                                            const double* irow = ip + (i0 * I1 + i1) * I2;
                                            double* drow = dip ? dip + (i0 * I1 + i1) * I2 : nullptr;
                                            if (stride == 1) {
                                                for (int64_t i2 = lo2; i2 <= hi2; ++i2) {
                                                    if (drow) drow[i2] += wv * grow[i2];
                                                    if (dwp) acc += grow[i2] * irow[i2];
                                                }
                                            } else {
                                                for (int64_t i2 = lo2; i2 <= hi2; ++i2) {
                                                    if (drow) drow[i2] += wv * grow[i2 * stride];
                                                    if (dwp) acc += grow[i2 * stride] * irow[i2];
                                                }
                                            }
                                        }
                                    }
                                    if (dwp) dwp[(k0 * K1 + k1) * K2 + k2] += acc;
                                }
                    }
                }
        }
    });
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int64_t groups,
                         double eps = 1e-5) {
    const Shape& s = x.shape();
    if (s.size() < 3) throw ShapeError("group_norm: expected [N,C,spatial...], got " + shape_str(s));
    const int64_t N = s[0], C = s[1];
    if (C % groups != 0)
        throw ShapeError("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                         std::to_string(groups));
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("group_norm: gamma/beta must have shape (" + std::to_string(C) + ")");
    int64_t P = 1;
    for (size_t i = 2; i < s.size(); ++i) P *= s[i];
    const int64_t cpg = C / groups;
    const int64_t M = cpg * P;  // elements per (n, group)

    std::vector<double> out(static_cast<size_t>(N * C * P));
    std::vector<double> mean(static_cast<size_t>(N * groups));
    std::vector<double> inv_std(static_cast<size_t>(N * groups));
    const double* X = x.data().data();
    const double* Ga = gamma.data().data();
    const double* Be = beta.data().data();

    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            const double* base = X + (n * C + g * cpg) * P;
            double m = 0.0;
            for (int64_t i = 0; i < M; ++i) m += base[i];
            m /= static_cast<double>(M);
            double v = 0.0;
            for (int64_t i = 0; i < M; ++i) {
                const double d = base[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(M);
            mean[n * groups + g] = m;
            inv_std[n * groups + g] = 1.0 / std::sqrt(v + eps);
        }
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const int64_t g = c / cpg;
            const double m = mean[n * groups + g];
            const double is = inv_std[n * groups + g];
            const double ga = Ga[c], be = Be[c];
            const double* src = X + (n * C + c) * P;
            double* dst = out.data() + (n * C + c) * P;
            for (int64_t p = 0; p < P; ++p) dst[p] = ga * (src[p] - m) * is + be;
        }

    auto res = detail::make_result(s, std::move(out));
    detail::Node* xn = x.node();
    detail::Node* gn = gamma.node();
    detail::Node* bn = beta.node();
    detail::record(res, {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                   [xn, gn, bn, N, C, P, groups, cpg, M, mean, inv_std](detail::Node& self) {
                       const double* G = self.grad.data();
                       const double* X = xn->value.data();
                       const double* Ga = gn->value.data();
                       if (gn->requires_grad) gn->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       if (xn->requires_grad) xn->ensure_grad();
                       for (int64_t n = 0; n < N; ++n)
                           for (int64_t g = 0; g < groups; ++g) {
                               const double m = mean[n * groups + g];
                               const double is = inv_std[n * groups + g];
                               const int64_t cbase = g * cpg;
                               // dgamma/dbeta accumulate per channel; dx needs the
                               // two per-group sums of the standard normalization rule.
                               double s1 = 0.0, s2 = 0.0;
                               for (int64_t cc = 0; cc < cpg; ++cc) {
                                   const int64_t c = cbase + cc;
                                   const double* gp = G + (n * C + c) * P;
                                   const double* xp = X + (n * C + c) * P;
                                   const double ga = Ga[c];
                                   double dg = 0.0, db = 0.0;
                                   for (int64_t p = 0; p < P; ++p) {
                                       const double xh = (xp[p] - m) * is;
                                       const double a = ga * gp[p];
                                       s1 += a;
                                       s2 += a * xh;
                                       dg += gp[p] * xh;
                                       db += gp[p];
                                   }
                                   if (gn->requires_grad) gn->grad[c] += dg;
                                   if (bn->requires_grad) bn->grad[c] += db;
                               }
                               if (xn->requires_grad) {
                                   const double s1m = s1 / static_cast<double>(M);
                                   const double s2m = s2 / static_cast<double>(M);
                                   for (int64_t cc = 0; cc < cpg; ++cc) {
                                       const int64_t c = cbase + cc;
                                       const double* gp = G + (n * C + c) * P;
                                       const double* xp = X + (n * C + c) * P;
                                       double* dxp = xn->grad.data() + (n * C + c) * P;
                                       const double ga = Ga[c];
                                       for (int64_t p = 0; p < P; ++p) {
                                           const double xh = (xp[p] - m) * is;
                                           dxp[p] += is * (ga * gp[p] - s1m - xh * s2m);
                                       }
                                   }
                               }
                           }
                   });
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Dense ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
    const int64_t M = as[0], K = as[1], N = bs[1];
    std::vector<double> out(static_cast<size_t>(M * N), 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (int64_t i = 0; i < M; ++i)
        for (int64_t k = 0; k < K; ++k) {
            const double av = A[i * K + k];
            const double* brow = B + k * N;
            double* orow = out.data() + i * N;
            for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    auto res = detail::make_result({M, N}, std::move(out));
    detail::Node* an = a.node();
    detail::Node* bn = b.node();
    detail::record(res, {a.node_ptr(), b.node_ptr()}, [an, bn, M, K, N](detail::Node& self) {
        const double* G = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < M; ++i)
                for (int64_t k = 0; k < K; ++k) {
                    const double* brow = bn->value.data() + k * N;
                    const double* grow = G + i * N;
                    double acc = 0.0;
                    for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                    an->grad[i * K + k] += acc;
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t k = 0; k < K; ++k)
                for (int64_t i = 0; i < M; ++i) {
                    const double av = an->value[i * K + k];
                    const double* grow = G + i * N;
                    double* brow = bn->grad.data() + k * N;
                    for (int64_t j = 0; j < N; ++j) brow[j] += av * grow[j];
                }
        }
    });
    return Tensor::from_node(res);
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
        throw ShapeError("linear: incompatible shapes " + shape_str(xs) + " x " + shape_str(ws));
    Tensor y = matmul(x, w);
    if (!bias) return y;
    if (bias->shape() != Shape{ws[1]}) throw ShapeError("linear: bias shape mismatch");
    const int64_t N = xs[0], K = ws[1];
    std::vector<double> out(y.data().begin(), y.data().end());
    const double* B = bias->data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) out[n * K + k] += B[k];
    auto res = detail::make_result({N, K}, std::move(out));
    detail::Node* yn = y.node();
    detail::Node* bn = bias->node();
    detail::record(res, {y.node_ptr(), bias->node_ptr()}, [yn, bn, N, K](detail::Node& self) {
        if (yn->requires_grad) {
            yn->ensure_grad();
            for (int64_t i = 0; i < N * K; ++i) yn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < K; ++k) bn->grad[k] += self.grad[n * K + k];
        }
    });
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Resampling ops
// ---------------------------------------------------------------------------

// Nearest-neighbor upsample by an integer factor on every spatial axis.
inline Tensor upsample_nearest(const Tensor& x, int64_t factor, int ndim) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != ndim + 2)
        throw ShapeError("upsample_nearest: input rank does not match ndim");
    if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
    Shape out_shape = s;
    for (int a = 0; a < ndim; ++a) out_shape[2 + a] *= factor;
    const int64_t NC = s[0] * s[1];
    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
    const double* X = x.data().data();
    if (ndim == 2) {
        const int64_t H = s[2], W = s[3], OH = H * factor, OW = W * factor;
        for (int64_t nc = 0; nc < NC; ++nc) {
            const double* ip = X + nc * H * W;
            double* op = out.data() + nc * OH * OW;
            for (int64_t oy = 0; oy < OH; ++oy) {
                const double* irow = ip + (oy / factor) * W;
                double* orow = op + oy * OW;
                for (int64_t ox = 0; ox < OW; ++ox) orow[ox] = irow[ox / factor];
            }
        }
    } else {
        const int64_t D0 = s[2], D1 = s[3], D2 = s[4];
        const int64_t O0 = D0 * factor, O1 = D1 * factor, O2 = D2 * factor;
        for (int64_t nc = 0; nc < NC; ++nc) {
            const double* ip = X + nc * D0 * D1 * D2;
            double* op = out.data() + nc * O0 * O1 * O2;
            for (int64_t o0 = 0; o0 < O0; ++o0)
                for (int64_t o1 = 0; o1 < O1; ++o1) {
                    const double* irow = ip + ((o0 / factor) * D1 + (o1 / factor)) * D2;
                    double* orow = op + (o0 * O1 + o1) * O2;
                    for (int64_t o2 = 0; o2 < O2; ++o2) orow[o2] = irow[o2 / factor];
                }
        }
    }
    auto res = detail::make_result(out_shape, std::move(out));
    detail::Node* xn = x.node();
    const Shape in_shape = s;
    detail::record(res, {x.node_ptr()}, [xn, in_shape, factor, ndim, NC](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* G = self.grad.data();
        if (ndim == 2) {
            const int64_t H = in_shape[2], W = in_shape[3], OH = H * factor, OW = W * factor;
            for (int64_t nc = 0; nc < NC; ++nc) {
                double* dp = xn->grad.data() + nc * H * W;
                const double* gp = G + nc * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    double* drow = dp + (oy / factor) * W;
                    const double* grow = gp + oy * OW;
                    for (int64_t ox = 0; ox < OW; ++ox) drow[ox / factor] += grow[ox];
                }
            }
        } else {
            const int64_t D0 = in_shape[2], D1 = in_shape[3], D2 = in_shape[4];
            const int64_t O0 = D0 * factor, O1 = D1 * factor, O2 = D2 * factor;
            for (int64_t nc = 0; nc < NC; ++nc) {
                double* dp = xn->grad.data() + nc * D0 * D1 * D2;
                const double* gp = G + nc * O0 * O1 * O2;
                for (int64_t o0 = 0; o0 < O0; ++o0)
                    for (int64_t o1 = 0; o1 < O1; ++o1) {
                        double* drow = dp + ((o0 / factor) * D1 + (o1 / factor)) * D2;
                        const double* grow = gp + (o0 * O1 + o1) * O2;
                        for (int64_t o2 = 0; o2 < O2; ++o2) drow[o2 / factor] += grow[o2];
                    }
            }
        }
    });
    return Tensor::from_node(res);
}

// Differentiable bilinear resize, align-corners-false, edge-clamped.
inline Tensor resize_bilinear2d(const Tensor& x, int64_t out_h, int64_t out_w) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("resize_bilinear2d: expected [N,C,H,W], got " + shape_str(s));
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear2d: output dims must be >= 1");
    const int64_t NC = s[0] * s[1], H = s[2], W = s[3];

    struct Tap {
        int64_t i0, i1;
        double w0, w1;
    };
    auto make_taps = [](int64_t in, int64_t out) {
        std::vector<Tap> taps(static_cast<size_t>(out));
        const double r = static_cast<double>(in) / static_cast<double>(out);
        for (int64_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * r - 0.5;
            src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
            const int64_t i0 = static_cast<int64_t>(std::floor(src));
            const int64_t i1 = std::min(i0 + 1, in - 1);
            const double f = src - static_cast<double>(i0);
            taps[o] = {i0, i1, 1.0 - f, f};
        }
        return taps;
    };
    const auto ty = make_taps(H, out_h);
    const auto tx = make_taps(W, out_w);

    std::vector<double> out(static_cast<size_t>(NC * out_h * out_w));
    const double* X = x.data().data();
    for (int64_t nc = 0; nc < NC; ++nc) {
        const double* ip = X + nc * H * W;
        double* op = out.data() + nc * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[oy];
            const double* r0 = ip + a.i0 * W;
            const double* r1 = ip + a.i1 * W;
            double* orow = op + oy * out_w;
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[ox];
                orow[ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) +
                           a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
            }
        }
    }
    auto res = detail::make_result({s[0], s[1], out_h, out_w}, std::move(out));
    detail::Node* xn = x.node();
    detail::record(res, {x.node_ptr()}, [xn, NC, H, W, out_h, out_w, ty, tx](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* G = self.grad.data();
        for (int64_t nc = 0; nc < NC; ++nc) {
            double* dp = xn->grad.data() + nc * H * W;
            const double* gp = G + nc * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const Tap& a = ty[oy];
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const Tap& b = tx[ox];
                    const double g = gp[oy * out_w + ox];
                    dp[a.i0 * W + b.i0] += g * a.w0 * b.w0;
                    dp[a.i0 * W + b.i1] += g * a.w0 * b.w1;
                    dp[a.i1 * W + b.i0] += g * a.w1 * b.w0;
                    dp[a.i1 * W + b.i1] += g * a.w1 * b.w1;
                }
            }
        }
    });
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Classification losses (fused, numerically stable)
// ---------------------------------------------------------------------------

inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("softmax_cross_entropy: expected [N,K] logits");
    const int64_t N = s[0], K = s[1];
    if (static_cast<int64_t>(labels.size()) != N)
        throw ShapeError("softmax_cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= K) throw ShapeError("softmax_cross_entropy: label out of range");
    const double* Z = logits.data().data();
    double loss = 0.0;
    for (int64_t n = 0; n < N; ++n) {
        const double* z = Z + n * K;
        double zmax = z[0];
        for (int64_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
        double lse = 0.0;
        for (int64_t k = 0; k < K; ++k) lse += std::exp(z[k] - zmax);
        lse = zmax + std::log(lse);
        loss += lse - z[labels[static_cast<size_t>(n)]];
    }
    loss /= static_cast<double>(N);
    auto res = detail::make_result({1}, {loss});
    detail::Node* zn = logits.node();
    detail::record(res, {logits.node_ptr()}, [zn, N, K, labels](detail::Node& self) {
        if (!zn->requires_grad) return;
        zn->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(N);
        for (int64_t n = 0; n < N; ++n) {
            const double* z = zn->value.data() + n * K;
            double zmax = z[0];
            for (int64_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
            double denom = 0.0;
            for (int64_t k = 0; k < K; ++k) denom += std::exp(z[k] - zmax);
            for (int64_t k = 0; k < K; ++k) {
                const double p = std::exp(z[k] - zmax) / denom;
                zn->grad[n * K + k] += g * (p - (labels[static_cast<size_t>(n)] == k ? 1.0 : 0.0));
            }
        }
    });
    return Tensor::from_node(res);
}

// Binary cross-entropy on a single logit per sample.
inline Tensor bce_logits(const Tensor& logits, const std::vector<double>& targets) {
    const int64_t N = logits.numel();
    if (static_cast<int64_t>(targets.size()) != N) throw ShapeError("bce_logits: target count mismatch");
    const double* Z = logits.data().data();
    double loss = 0.0;
    for (int64_t n = 0; n < N; ++n) {
        const double z = Z[n];
        // softplus(z) - y*z, stable form
        loss += std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))) - targets[static_cast<size_t>(n)] * z;
    }
    loss /= static_cast<double>(N);
    auto res = detail::make_result({1}, {loss});
    detail::Node* zn = logits.node();
    detail::record(res, {logits.node_ptr()}, [zn, N, targets](detail::Node& self) {
        if (!zn->requires_grad) return;
        zn->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(N);
        for (int64_t n = 0; n < N; ++n) {
            const double z = zn->value[n];
            const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            zn->grad[n] += g * (sig - targets[static_cast<size_t>(n)]);
        }
    });
    return Tensor::from_node(res);
}

}  // namespace medvae
