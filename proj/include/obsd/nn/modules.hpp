#pragma once

#include <map>
#include <string>
#include <vector>

#include "obsd/common.hpp"
#include "obsd/nn/ops.hpp"
#include "obsd/nn/tensor.hpp"

namespace obsd::nn {

// Named parameter registry. Creation order is the serialization order and the
// RNG consumption order, so identical construction sequences with the same
// seed give bit-identical initializations.
class ParamStore {
public:
    explicit ParamStore(uint64_t seed) : rng_(seed) {}

    // Uniform(-scale, scale) init; scale = 0 gives a zero tensor.
    Tensor make(const std::string& name, std::vector<int> shape, double scale);
    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Tensor make_fan_in(const std::string& name, std::vector<int> shape, int fan_in);
    Tensor make_const(const std::string& name, std::vector<int> shape, double value);

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Tensor get(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<Tensor> all() const;
    int64_t total_parameters() const;
    void zero_grad();

private:
    Rng rng_;
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, size_t> index_;
};

struct Linear {
    Tensor w, b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, bool zero_init = false);
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct Conv2d {
    Tensor w, b;
    int stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride,
           int pad, bool zero_init = false);
    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct GroupNorm {
    Tensor gamma, beta;
    int groups = 1;
    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups);
    Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};

struct AdamConfig {
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// Adam with L2 weight decay folded into the gradient.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    void step();
    void zero_grad();
    int64_t step_count() const { return t_; }

    // exposed for checkpoint persistence
    std::vector<std::vector<double>>& m() { return m_; }
    std::vector<std::vector<double>>& v() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// Sinusoidal embeddings, one row per timestep value: [sin..., cos...].
Tensor timestep_embedding(const std::vector<int>& ts, int dim);

}  // namespace obsd::nn
