#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sf/diffcore/tensor.hpp"

namespace sf::diff {

template <typename Real>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
template <typename Real>
struct Var {
    Graph<Real>* graph = nullptr;
    std::size_t id = 0;

    const Shape& shape() const { return graph->node(id).shape; }
    std::span<const Real> values() const { return graph->node(id).value; }
    std::size_t size() const { return graph->node(id).value.size(); }
    bool requires_grad() const { return graph->node(id).requires_grad; }
};

/// Tape of operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of its consumer and the append order is already topological.
/// Backward walks the tape once from the output down to node 0.
template <typename Real>
class Graph {
  public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    struct Node {
        std::string_view op;
        Shape shape;
        std::vector<Real> value;
        std::vector<Real> grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<Real> leaf(const BasicTensor<Real>& t) { return leaf(t.shape, t.values, t.requires_grad); }

    Var<Real> leaf(Shape shape, std::vector<Real> values, bool requires_grad) {
        if (element_count(shape) != values.size()) {
            throw ContractViolation("leaf shape " + shape_string(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
        }
        check_finite("leaf", values);
        Node n;
        n.op = "leaf";
        n.shape = std::move(shape);
        n.value = std::move(values);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var<Real>{this, nodes_.size() - 1};
    }

    Var<Real> constant(Shape shape, std::vector<Real> values) {
        return leaf(std::move(shape), std::move(values), false);
    }

    /// Appends an op result. The backward closure is dropped when no input
    /// needs a gradient.
    Var<Real> record(std::string_view op, Shape shape, std::vector<Real> value,
                     std::vector<std::size_t> inputs, BackwardFn backward) {
        check_finite(op, value);
        Node n;
        n.op = op;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        for (std::size_t in : n.inputs) {
            if (in >= nodes_.size()) {
                throw ContractViolation(std::string(op) + ": input id refers to a later node");
            }
            n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
        }
        if (n.requires_grad) {
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return Var<Real>{this, nodes_.size() - 1};
    }

    /// Reverse pass from a scalar output with seed 1.
    void backward(Var<Real> out) {
        if (node(out.id).value.size() != 1) {
            throw ContractViolation("backward() needs a scalar output, got shape " +
                                    shape_string(node(out.id).shape));
        }
        const Real one{1};
        backward(out, std::span<const Real>(&one, 1));
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `out`).
    void backward(Var<Real> out, std::span<const Real> seed) {
        Node& root = node(out.id);
        if (seed.size() != root.value.size()) {
            throw ContractViolation("backward seed has " + std::to_string(seed.size()) +
                                    " entries for output of shape " + shape_string(root.shape));
        }
        for (Node& n : nodes_) {
            n.grad.clear();
        }
        if (!root.requires_grad) {
            return;
        }
        root.grad.assign(seed.begin(), seed.end());
        if (!all_finite(root.grad)) {
            throw NumericFailure("non-finite backward seed at node #" + std::to_string(out.id) + " (" +
                                 std::string(root.op) + ")");
        }
        for (std::size_t id = out.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (n.grad.empty() || !n.backward) {
                continue;
            }
            n.backward(*this, id);
            for (std::size_t in : n.inputs) {
                if (!all_finite(nodes_[in].grad)) {
                    throw NumericFailure("non-finite gradient produced by backward of node #" + std::to_string(id) +
                                         " (" + std::string(n.op) + ")");
                }
            }
        }
    }

    /// Gradient accumulated at `v` by the last backward pass (zeros if none reached it).
    std::vector<Real> grad(Var<Real> v) const {
        const Node& n = node(v.id);
        if (n.grad.empty()) {
            return std::vector<Real>(n.value.size(), Real{0});
        }
        return n.grad;
    }

    BasicTensor<Real> tensor(Var<Real> v) const {
        const Node& n = node(v.id);
        return BasicTensor<Real>(n.shape, n.value);
    }

    /// Gradient slot of an input node, allocated on first use. Only meaningful
    /// inside a backward closure.
    std::vector<Real>& grad_slot(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) {
            n.grad.assign(n.value.size(), Real{0});
        }
        return n.grad;
    }

    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    Node& node(std::size_t id) { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

  private:
    static bool all_finite(const std::vector<Real>& values) {
        for (Real x : values) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    }

    static void check_finite(std::string_view op, const std::vector<Real>& values) {
        for (Real x : values) {
            if (!std::isfinite(x)) {
                throw NumericFailure("non-finite value produced by " + std::string(op));
            }
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace sf::diff
