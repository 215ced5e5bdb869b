#pragma once

// Test-side gradient oracle: central finite differences over tensor entries.
// Kept independent of the autodiff engine's backward path on purpose — it only
// perturbs values and re-runs the forward function.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "medvae/tensor.hpp"

namespace medvae::testsupport {

inline double fd_grad(const std::function<double()>& forward, medvae::Tensor& param, int64_t idx,
                      double h = 1e-5) {
    auto d = param.mutable_data();
    const double orig = d[idx];
    d[idx] = orig + h;
    const double fp = forward();
    d[idx] = orig - h;
    const double fm = forward();
    d[idx] = orig;
    return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-3});
}

struct FdReport {
    int checked = 0;
    int failed = 0;
    double worst = 0.0;
    std::string worst_where;
};

// Compares autodiff gradients of `loss_fn` against finite differences on
// `probes` randomly chosen entries of each tensor in `params`.
inline FdReport check_gradients(const std::function<medvae::Tensor()>& loss_fn,
                                std::vector<medvae::Tensor>& params, medvae::Rng& rng, int probes,
                                double tol = 1e-4) {
    FdReport rep;
    for (auto& p : params) p.zero_grad();
    medvae::Tensor loss = loss_fn();
    medvae::backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    auto scalar_forward = [&]() { return loss_fn().item(); };
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (int k = 0; k < probes; ++k) {
            const int64_t idx = static_cast<int64_t>(rng.uniform_below(
                static_cast<uint64_t>(params[pi].numel())));
            const double num = fd_grad(scalar_forward, params[pi], idx);
            const double err = rel_err(analytic[pi][static_cast<size_t>(idx)], num);
            ++rep.checked;
            if (err > tol) {
                ++rep.failed;
                if (err > rep.worst) {
                    rep.worst = err;
                    rep.worst_where = "param " + std::to_string(pi) + " idx " + std::to_string(idx) +
                                      " analytic " + std::to_string(analytic[pi][static_cast<size_t>(idx)]) +
                                      " numeric " + std::to_string(num);
                }
            } else {
                rep.worst = std::max(rep.worst, err);
            }
        }
    }
    return rep;
}

}  // namespace medvae::testsupport
