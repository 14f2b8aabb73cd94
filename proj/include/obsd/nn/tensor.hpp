#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "obsd/common.hpp"

namespace obsd::nn {

// Reverse-mode autograd over contiguous row-major double buffers. Shapes are
// plain int vectors; NCHW for feature maps, (rows, cols) for matrices.
struct Node {
    std::vector<int> shape;
    std::vector<double> v;
    std::vector<double> g;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    int64_t numel() const {
        int64_t n = 1;
        for (int s : shape) n *= s;
        return n;
    }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

bool& grad_enabled();

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(const std::vector<double>& data, std::vector<int> shape);
    static Tensor from(const std::vector<float>& data, std::vector<int> shape);
    static Tensor param(std::vector<int> shape);  // leaf with requires_grad

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[i]; }
    int64_t numel() const { return n_->numel(); }

    double* data() { return n_->v.data(); }
    const double* data() const { return n_->v.data(); }
    std::vector<double>& values() { return n_->v; }
    const std::vector<double>& values() const { return n_->v; }

    double* grad() {
        n_->ensure_grad();
        return n_->g.data();
    }
    const std::vector<double>& grad_values() const { return n_->g; }
    void zero_grad() {
        if (!n_->g.empty()) std::fill(n_->g.begin(), n_->g.end(), 0.0);
    }

    bool requires_grad() const { return n_->requires_grad; }
    double item() const {
        if (numel() != 1) throw UsageError("item() on non-scalar tensor");
        return n_->v[0];
    }

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// Topological backward pass from a scalar loss; seeds d(loss)/d(loss) = 1.
void backward(const Tensor& loss);

// Shape helpers for op implementations.
std::string shape_str(const std::vector<int>& s);
void require(bool cond, const std::string& msg);

}  // namespace obsd::nn
