#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cohesion/errors.hpp"

namespace cohesion {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
};

template <typename T>
inline void check_finite(const std::vector<T>& values, const char* op) {
    for (const T v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) +
                               " produced a non-finite value (overflow is an error)");
        }
    }
}

}  // namespace detail

/// N-dimensional array participating in a reverse-mode differentiation graph.
///
/// A Tensor is a cheap handle onto a graph node: copying shares the node.
/// Values are immutable once produced by an operation; only leaves created
/// with `requires_grad` (parameters) may be rewritten between graphs via
/// `values_mut`. Gradients accumulate additively across `backward` calls
/// until `zero_grad`.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto node = std::make_shared<detail::Node<T>>();
        node->values.assign(shape_size(shape), value);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor from_values(Shape shape, std::vector<T> values,
                              bool requires_grad = false) {
        if (shape_size(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                                 std::to_string(shape_size(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        auto node = std::make_shared<detail::Node<T>>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_values({1}, {value}, requires_grad);
    }

    /// Builds a non-leaf node. Parents and the backward closure are retained
    /// only when some parent is tracked, so untracked subgraphs stay flat.
    static Tensor make_op(Shape shape, std::vector<T> values,
                          const std::vector<Tensor>& parents,
                          std::function<void(detail::Node<T>&)> backward_fn) {
        auto node = std::make_shared<detail::Node<T>>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->leaf = false;
        for (const Tensor& p : parents) {
            if (p.requires_grad()) {
                node->requires_grad = true;
                break;
            }
        }
        if (node->requires_grad) {
            node->parents.reserve(parents.size());
            for (const Tensor& p : parents) node->parents.push_back(p.node_);
            node->backward_fn = std::move(backward_fn);
        }
        return Tensor(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return require().shape; }
    std::size_t size() const { return require().values.size(); }
    std::size_t rank() const { return require().shape.size(); }
    bool requires_grad() const { return require().requires_grad; }

    /// Enables or disables gradient collection for a leaf. Frozen leaves are
    /// treated as constants by every operation built afterwards.
    void set_requires_grad(bool on) {
        auto& n = require();
        if (!n.leaf) {
            throw ContractError("set_requires_grad: only leaf tensors can be toggled");
        }
        n.requires_grad = on;
    }
    bool is_leaf() const { return require().leaf; }

    const std::vector<T>& values() const { return require().values; }

    /// Mutable access for parameter updates. Only valid on leaves: values of
    /// operation results are frozen.
    std::vector<T>& values_mut() {
        auto& node = require();
        if (!node.leaf) {
            throw ContractError("values_mut: tensors produced by operations are immutable");
        }
        return node.values;
    }

    bool has_grad() const { return !require().grad.empty(); }

    const std::vector<T>& grad() const {
        const auto& node = require();
        if (node.grad.empty()) {
            throw ContractError("grad: no gradient populated; call backward first");
        }
        return node.grad;
    }

    void zero_grad() {
        auto& node = require();
        node.grad.assign(node.values.size(), T(0));
    }

    T item() const {
        const auto& node = require();
        if (node.values.size() != 1) {
            throw ContractError("item: tensor " + shape_str(node.shape) + " is not scalar");
        }
        return node.values[0];
    }

    std::shared_ptr<detail::Node<T>> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

    detail::Node<T>& require() const {
        if (!node_) throw ContractError("operation on an empty tensor");
        return *node_;
    }

    std::shared_ptr<detail::Node<T>> node_;
};

/// Runs reverse-mode accumulation from a scalar loss.
///
/// Intermediate gradients are reset per call; leaf gradients accumulate
/// additively across calls until zero_grad.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Depth-first topological order over the tracked subgraph.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> visited;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (detail::Node<T>* node : order) {
        if (node->leaf) {
            node->ensure_grad();
        } else {
            node->grad.assign(node->values.size(), T(0));
        }
    }
    root->grad[0] += T(1);

    // `order` is children-last; walk it backwards so each node is finished
    // before its parents receive contributions.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<T>* node = *it;
        if (!node->leaf && node->backward_fn) node->backward_fn(*node);
    }
}

}  // namespace cohesion
