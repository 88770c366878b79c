// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a per-step reverse-mode tape. A tensor owns its value
// block; operations attach parents and a backward closure to the result, so
// the differentiation graph is exactly the shared-pointer DAG hanging off the
// loss scalar and dies with it.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "mhgd/common.hpp"

namespace mhgd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
inline bool& grad_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_flag(); }

// Disables tape construction in scope (frozen networks, evaluation).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_flag()) { detail::grad_flag() = false; }
    ~NoGradGuard() { detail::grad_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
};

template <class T>
class TensorT {
  public:
    using Node = TensorNode<T>;
    using value_type = T;

    TensorT() = default;

    static TensorT zeros(Shape shape) {
        return full(std::move(shape), T(0));
    }
    static TensorT full(Shape shape, T v) {
        auto n = std::make_shared<Node>();
        n->values.assign(numel(shape), v);
        n->shape = std::move(shape);
        return TensorT(std::move(n));
    }
    static TensorT scalar(T v) { return full(Shape{}, v); }
    static TensorT from(Shape shape, std::vector<T> values) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor init: shape " + shape_str(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        return TensorT(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }

    const T* data() const { return node_->values.data(); }
    T* data() { return node_->values.data(); }
    const std::vector<T>& values() const { return node_->values; }
    std::vector<T>& values() { return node_->values; }

    T item() const {
        if (size() != 1) {
            throw ContractError("item(): tensor has " + std::to_string(size()) +
                                " elements, expected 1");
        }
        return node_->values[0];
    }

    TensorT& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }

    // Gradient of the last backprop; zeros if this leaf was untouched.
    TensorT grad() const {
        if (node_->grad.size() == node_->values.size()) {
            return TensorT::from(node_->shape, node_->grad);
        }
        return TensorT::zeros(node_->shape);
    }
    void zero_grad() { node_->grad.clear(); }

    // Same values, detached from any tape.
    TensorT detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->values = node_->values;
        return TensorT(std::move(n));
    }

    TensorT clone() const {
        TensorT c = detach();
        c.node_->requires_grad = node_->requires_grad;
        return c;
    }

    const std::shared_ptr<Node>& node() const { return node_; }

    bool all_finite() const {
        for (T v : node_->values) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
    if (checked_mode() && !t.all_finite()) {
        throw DomainError(std::string(op) + ": non-finite value in result");
    }
}

// Attaches tape metadata to a freshly computed result when any input needs
// gradients. `backward` receives the result node; it must accumulate into
// each parent's grad via ensure_grad().
template <class T, class Backward>
void attach(TensorT<T>& out, const char* op,
            std::initializer_list<TensorT<T>> parents, Backward&& backward) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return;
    auto& n = *out.node();
    n.requires_grad = true;
    n.op = op;
    n.parents.reserve(parents.size());
    for (const auto& p : parents) n.parents.push_back(p.node());
    n.backward = std::forward<Backward>(backward);
}

}  // namespace detail

// Reverse-mode accumulation from a scalar root. Visits each reachable tape
// node exactly once, in reverse topological order; leaves off every path keep
// a zero gradient.
template <class T>
void backprop(const TensorT<T>& root) {
    if (root.size() != 1) {
        throw ContractError("backprop: root must be scalar, got shape " +
                            shape_str(root.shape()));
    }
    using Node = TensorNode<T>;
    if (!root.node()->requires_grad) return;

    // Iterative post-order DFS over parents.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node().get(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->ensure_grad();
    root.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

using Tensor = TensorT<float>;

}  // namespace mhgd
