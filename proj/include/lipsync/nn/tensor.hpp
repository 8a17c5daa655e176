#pragma once

#include "lipsync/common.hpp"
#include "lipsync/nn/rng.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <vector>

namespace lipsync::nn {

// Trainable parameter: values plus accumulated gradient and Adam state.
// Owned by model structs; graphs hold non-owning references.
struct Param {
    std::string name;
    Shape shape;
    std::vector<float> w;
    std::vector<float> g;
    std::vector<float> adam_m, adam_v;  // sized by the optimizer on first step
    bool trainable = true;

    Param() = default;
    Param(std::string n, Shape s, float fill = 0.0f)
        : name(std::move(n)), shape(std::move(s)) {
        w.assign(static_cast<size_t>(shape_numel(shape)), fill);
        g.assign(w.size(), 0.0f);
    }

    int64_t numel() const { return static_cast<int64_t>(w.size()); }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0f); }

    void init_uniform(Rng& rng, float bound) { rng.fill_uniform(w.data(), numel(), -bound, bound); }
    void init_gauss(Rng& rng, float stddev) { rng.fill_gauss(w.data(), numel(), stddev); }
};

class Graph;

struct Node {
    Shape shape;
    std::vector<float> val;
    std::vector<float> grad;  // allocated lazily during backward
    bool needs_grad = false;
    Param* bound = nullptr;
    std::function<void(Node&)> backprop;  // accumulates into parents' grads
    std::vector<Node*> parents;

    int64_t numel() const { return static_cast<int64_t>(val.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), 0.0f);
    }
};

// Lightweight handle into a Graph-owned node.
class Tensor {
public:
    Tensor() = default;
    Tensor(Graph* g, Node* n) : g_(g), n_(n) {}

    bool ok() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    float* data() { return n_->val.data(); }
    const float* data() const { return n_->val.data(); }
    float item() const {
        LS_CHECK(numel() == 1, "Tensor::item on non-scalar %s", shape_str(n_->shape).c_str());
        return n_->val[0];
    }
    Node* node() const { return n_; }
    Graph* graph() const { return g_; }

private:
    Graph* g_ = nullptr;
    Node* n_ = nullptr;
};

// One forward+backward tape. Creation order is the topological order; the
// tape is rebuilt every step (dynamic graph).
class Graph {
public:
    explicit Graph(bool training = false, uint64_t rng_seed = 0)
        : training_(training), rng_(rng_seed) {}

    bool training() const { return training_; }
    Rng& rng() { return rng_; }

    Tensor input(Shape shape, const float* src = nullptr, bool needs_grad = false);
    Tensor input(Shape shape, const std::vector<float>& src, bool needs_grad = false) {
        LS_CHECK(shape_numel(shape) == static_cast<int64_t>(src.size()), "Graph::input size mismatch");
        return input(std::move(shape), src.data(), needs_grad);
    }
    // Leaf bound to a parameter. Repeated calls with the same Param return
    // the same node, so reuse accumulates gradient naturally.
    Tensor param(Param& p);

    // Internal: used by ops to allocate result nodes.
    Tensor make(Shape shape, std::vector<Node*> parents, std::function<void(Node&)> backprop);

    // Runs reverse-mode accumulation from a scalar loss.
    void backward(const Tensor& loss);

    // Adds every bound leaf's gradient into its Param::g.
    void accumulate_param_grads();

    size_t num_nodes() const { return nodes_.size(); }
    // Read-only introspection (finite-difference validity checks in tests).
    const std::deque<Node>& nodes() const { return nodes_; }

private:
    std::deque<Node> nodes_;
    std::vector<Node*> order_;
    std::vector<std::pair<Param*, Node*>> param_leaves_;
    bool training_ = false;
    Rng rng_;
};

} // namespace lipsync::nn
