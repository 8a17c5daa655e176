#include "lipsync/nn/tensor.hpp"

#include <cstring>

namespace lipsync::nn {

Tensor Graph::input(Shape shape, const float* src, bool needs_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.shape = std::move(shape);
    n.val.resize(static_cast<size_t>(shape_numel(n.shape)));
    if (src) std::memcpy(n.val.data(), src, n.val.size() * sizeof(float));
    n.needs_grad = needs_grad;
    order_.push_back(&n);
    return Tensor(this, &n);
}

Tensor Graph::param(Param& p) {
    for (auto& [param, node] : param_leaves_)
        if (param == &p) return Tensor(this, node);
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.shape = p.shape;
    n.val = p.w;
    n.needs_grad = p.trainable;
    n.bound = &p;
    order_.push_back(&n);
    param_leaves_.emplace_back(&p, &n);
    return Tensor(this, &n);
}

Tensor Graph::make(Shape shape, std::vector<Node*> parents, std::function<void(Node&)> backprop) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.shape = std::move(shape);
    n.val.resize(static_cast<size_t>(shape_numel(n.shape)));
    for (Node* p : parents) n.needs_grad = n.needs_grad || p->needs_grad;
    n.parents = std::move(parents);
    if (n.needs_grad) n.backprop = std::move(backprop);
    order_.push_back(&n);
    return Tensor(this, &n);
}

void Graph::backward(const Tensor& loss) {
    LS_CHECK(loss.graph() == this, "Graph::backward: loss from another graph");
    LS_CHECK(loss.numel() == 1, "Graph::backward: loss must be scalar");
    Node* ln = loss.node();
    ln->ensure_grad();
    ln->grad[0] = 1.0f;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* n = *it;
        if (!n->needs_grad || n->grad.empty() || !n->backprop) continue;
        n->backprop(*n);
    }
}

void Graph::accumulate_param_grads() {
    for (auto& [param, node] : param_leaves_) {
        if (node->grad.empty() || !param->trainable) continue;
        for (size_t i = 0; i < param->g.size(); i++) param->g[i] += node->grad[i];
    }
}

} // namespace lipsync::nn
