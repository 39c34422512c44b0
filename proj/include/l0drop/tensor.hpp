#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "l0drop/errors.hpp"

namespace l0drop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "," : "") << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Propagates this node's grad into its inputs; receives the node itself so
    // closures never hold an owning reference to it.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T(0));
        }
    }
};

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_{detail::grad_enabled} { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_mode_enabled() noexcept { return detail::grad_enabled; }

// Dense row-major array with optional gradient tracking. Copies share storage;
// use clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_{std::make_shared<detail::Node<T>>()} {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        for (std::size_t d : shape) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
            }
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T v) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return rank() >= 2 ? node_->shape[rank() - 2] : 1; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<T> data() { return node_->value; }
    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
    std::span<T> grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) {
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
        }
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    T item() const {
        if (numel() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->value[0];
    }
    T at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
    T& at(std::size_t i, std::size_t j) { return node_->value[i * cols() + j]; }

    // Deep copy without graph history.
    Tensor clone() const {
        Tensor t(shape(), values(), requires_grad());
        return t;
    }
    // Same values, detached from the graph.
    Tensor detach() const { return Tensor(shape(), values(), false); }

    const NodePtr& node() const { return node_; }
    static Tensor from_node(NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    NodePtr node_;
};

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value produced by ") + op);
        }
    }
}

// Builds an op result; records the backward closure only when some input
// needs a gradient and recording is enabled.
template <class T, class... In>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values, std::function<void(Node<T>&)> backward,
                      const In&... inputs) {
    check_finite(values, op);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    const bool track = grad_enabled && (inputs.requires_grad() || ...);
    if (track) {
        node->requires_grad = true;
        (node->inputs.push_back(inputs.node()), ...);
        node->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(node));
}

template <class T>
Tensor<T> make_result_list(const char* op, Shape shape, std::vector<T> values, std::function<void(Node<T>&)> backward,
                           const std::vector<Tensor<T>>& inputs) {
    check_finite(values, op);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    const bool track =
        grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        for (const auto& t : inputs) {
            node->inputs.push_back(t.node());
        }
        node->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

// Reverse pass from a scalar loss. Leaf tensors accumulate into their grad.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    using detail::Node;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<T>* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    Node<T>* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) {
            for (auto& in : n->inputs) {
                if (in->requires_grad) {
                    in->ensure_grad();
                }
            }
            n->backward(*n);
        }
    }
}

}  // namespace l0drop
