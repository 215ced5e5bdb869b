#pragma once

#include <cmath>
#include <vector>

#include "medvae/tensor.hpp"

namespace medvae {

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// AdamW with decoupled weight decay applied multiplicatively before the
// adaptive step. Parameters are identified by position, so the list handed to
// step() must keep a stable order across calls (and across checkpoint resume).
class AdamW {
public:
    explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

    const AdamWOptions& options() const { return opts_; }
    AdamWOptions& options() { return opts_; }
    int64_t step_count() const { return t_; }

    void step(std::vector<Tensor>& params) {
        if (m_.empty()) init_state(params);
        if (m_.size() != params.size())
            throw ShapeError("adamw: parameter count changed between steps");
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (size_t p = 0; p < params.size(); ++p) {
            Tensor& theta = params[p];
            if (m_[p].size() != static_cast<size_t>(theta.numel()))
                throw ShapeError("adamw: parameter shape changed between steps");
            const std::vector<double> g = theta.grad();
            auto w = theta.mutable_data();
            double* m = m_[p].data();
            double* v = v_[p].data();
            for (size_t i = 0; i < g.size(); ++i) {
                w[i] *= 1.0 - opts_.lr * opts_.weight_decay;
                m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
                v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
        }
    }

    static void zero_grad(std::vector<Tensor>& params) {
        for (auto& p : params) p.zero_grad();
    }

    // Global-norm gradient clipping; returns the pre-clip norm.
    static double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
        double total = 0.0;
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) total += g * g;
        }
        total = std::sqrt(total);
        if (total > max_norm && total > 0.0) {
            const double scale = max_norm / total;
            for (auto& p : params) {
                if (!p.has_grad()) continue;
                auto g = p.grad();
                for (auto& v : g) v *= scale;
                // write back through the node
                Tensor t = p;
                t.zero_grad();
                // re-accumulate scaled grads
                auto* node = t.node();
                node->grad = std::move(g);
            }
        }
        return total;
    }

    // Raw optimizer state for checkpointing.
    struct State {
        int64_t t = 0;
        std::vector<std::vector<double>> m, v;
    };

    State save() const { return State{t_, m_, v_}; }

    void restore(const State& st) {
        t_ = st.t;
        m_ = st.m;
        v_ = st.v;
    }

private:
    void init_state(const std::vector<Tensor>& params) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t p = 0; p < params.size(); ++p) {
            m_[p].assign(static_cast<size_t>(params[p].numel()), 0.0);
            v_[p].assign(static_cast<size_t>(params[p].numel()), 0.0);
        }
    }

    AdamWOptions opts_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace medvae
