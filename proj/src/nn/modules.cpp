#include "obsd/nn/modules.hpp"

#include <cmath>

namespace obsd::nn {

Tensor ParamStore::make(const std::string& name, std::vector<int> shape, double scale) {
    require(!has(name), "duplicate parameter name: " + name);
    Tensor t = Tensor::param(std::move(shape));
    if (scale != 0.0) {
        double* d = t.data();
        for (int64_t i = 0; i < t.numel(); ++i) d[i] = rng_.uniform(-scale, scale);
    }
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
}

Tensor ParamStore::make_fan_in(const std::string& name, std::vector<int> shape, int fan_in) {
    return make(name, std::move(shape), 1.0 / std::sqrt((double)fan_in));
}

Tensor ParamStore::make_const(const std::string& name, std::vector<int> shape, double value) {
    require(!has(name), "duplicate parameter name: " + name);
    Tensor t = Tensor::param(std::move(shape));
    std::fill(t.values().begin(), t.values().end(), value);
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter: " + name);
    return items_[it->second].second;
}

std::vector<Tensor> ParamStore::all() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (auto& [_, t] : items_) out.push_back(t);
    return out;
}

int64_t ParamStore::total_parameters() const {
    int64_t n = 0;
    for (auto& [_, t] : items_) n += t.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [_, t] : items_) const_cast<Tensor&>(t).zero_grad();
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, bool zero_init) {
    w = zero_init ? ps.make(name + ".w", {out, in}, 0.0)
                  : ps.make_fan_in(name + ".w", {out, in}, in);
    b = ps.make(name + ".b", {out}, 0.0);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k,
               int stride_, int pad_, bool zero_init) {
    stride = stride_;
    pad = pad_;
    int fan_in = cin * k * k;
    w = zero_init ? ps.make(name + ".w", {cout, cin, k, k}, 0.0)
                  : ps.make_fan_in(name + ".w", {cout, cin, k, k}, fan_in);
    b = ps.make(name + ".b", {cout}, 0.0);
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups_) {
    groups = groups_;
    gamma = ps.make_const(name + ".gamma", {channels}, 1.0);
    beta = ps.make_const(name + ".beta", {channels}, 0.0);
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign((size_t)params_[i].numel(), 0.0);
        v_[i].assign((size_t)params_[i].numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (p.grad_values().empty()) continue;
        double* theta = p.data();
        const double* g = p.grad_values().data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < m.size(); ++j) {
            double grad = g[j] + cfg_.weight_decay * theta[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad * grad;
            if (cfg_.lr != 0.0) {
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                theta[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

Tensor timestep_embedding(const std::vector<int>& ts, int dim) {
    require(dim >= 2 && dim % 2 == 0, "timestep_embedding: dim must be even, >= 2");
    int half = dim / 2;
    Tensor out = Tensor::zeros({(int)ts.size(), dim});
    double* d = out.data();
    for (size_t i = 0; i < ts.size(); ++i) {
        for (int j = 0; j < half; ++j) {
            double freq =
                std::exp(-std::log(10000.0) * (half > 1 ? (double)j / (half - 1) : 0.0));
            double a = (double)ts[i] * freq;
            d[i * dim + j] = std::sin(a);
            d[i * dim + half + j] = std::cos(a);
        }
    }
    return out;
}

}  // namespace obsd::nn
