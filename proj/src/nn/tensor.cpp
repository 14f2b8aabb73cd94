#include "obsd/nn/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace obsd::nn {

bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

static NodePtr make_node(std::vector<int> shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->v.assign((size_t)n->numel(), 0.0);
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(make_node(std::move(shape))); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    auto n = make_node(std::move(shape));
    std::fill(n->v.begin(), n->v.end(), value);
    return Tensor(n);
}

Tensor Tensor::from(const std::vector<double>& data, std::vector<int> shape) {
    auto n = make_node(std::move(shape));
    require((int64_t)data.size() == n->numel(), "Tensor::from: data size mismatch");
    n->v = data;
    return Tensor(n);
}

Tensor Tensor::from(const std::vector<float>& data, std::vector<int> shape) {
    auto n = make_node(std::move(shape));
    require((int64_t)data.size() == n->numel(), "Tensor::from: data size mismatch");
    std::copy(data.begin(), data.end(), n->v.begin());
    return Tensor(n);
}

Tensor Tensor::param(std::vector<int> shape) {
    auto n = make_node(std::move(shape));
    n->requires_grad = true;
    return Tensor(n);
}

void backward(const Tensor& loss) {
    require(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar");
    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Node* node = stack.back().first;
        size_t idx = stack.back().second;
        if (idx < node->parents.size()) {
            stack.back().second++;
            Node* p = node->parents[idx].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->ensure_grad();
    loss.node()->g[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw UsageError(msg);
}

}  // namespace obsd::nn
