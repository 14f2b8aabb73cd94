#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "obsd/nn/modules.hpp"
#include "obsd/nn/tensor.hpp"

namespace obsd::testutil {

// Central finite differences against analytic gradients. `f` must rebuild the
// graph from the current parameter values on every call and be deterministic.
// Returns the max of |fd - analytic| / max(1, |fd|, |analytic|).
inline double max_rel_grad_err(const std::function<nn::Tensor()>& f,
                               const std::vector<nn::Tensor>& params, double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        for (auto& p : params) const_cast<nn::Tensor&>(p).zero_grad();
        nn::Tensor loss = f();
        nn::backward(loss);
        for (auto& p : params) {
            if (p.grad_values().empty())
                analytic.push_back(std::vector<double>((size_t)p.numel(), 0.0));
            else
                analytic.push_back(p.grad_values());
        }
    }
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        nn::Tensor p = params[pi];
        for (int64_t j = 0; j < p.numel(); ++j) {
            double orig = p.data()[j];
            p.data()[j] = orig + h;
            double lp = f().item();
            p.data()[j] = orig - h;
            double lm = f().item();
            p.data()[j] = orig;
            double fd = (lp - lm) / (2.0 * h);
            double an = analytic[pi][(size_t)j];
            double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, (double)std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace obsd::testutil
