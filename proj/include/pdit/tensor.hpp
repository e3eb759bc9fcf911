#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pdit/errors.hpp"

namespace pdit {

namespace detail {

template <typename T>
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
};

inline std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

}  // namespace detail

// Dense row-major tensor handle with value semantics over a shared node.
// `T` is the scalar type; instantiate with float for training speed and
// double for gradient-check fidelity.
template <typename T>
class Tensor {
public:
    using Node = detail::TensorNode<T>;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape) {
        return filled(std::move(shape), T(0));
    }

    static Tensor filled(std::vector<std::size_t> shape, T v) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        validate_shape(shape);
        t.node_->shape = std::move(shape);
        t.node_->value.assign(detail::numel(t.node_->shape), v);
        return t;
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<T> data) {
        validate_shape(shape);
        if (detail::numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }

    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }

    // Row count / column count for rank-2 tensors.
    std::size_t rows() const { return node_->shape[0]; }
    std::size_t cols() const { return node_->shape[1]; }

    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }

    T& at(std::size_t i) { return node_->value[i]; }
    T at(std::size_t i) const { return node_->value[i]; }
    T& at(std::size_t i, std::size_t j) { return node_->value[i * cols() + j]; }
    T at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }

    // Gradient buffer, allocated (zeroed) on first access.
    std::vector<T>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
        return node_->grad;
    }
    const std::vector<T>& grad() const { return node_->grad; }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared_node() const { return node_; }

    // Deep copy of values (and requires_grad flag); grad is not copied.
    Tensor clone() const {
        Tensor t = from_data(node_->shape, node_->value);
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

private:
    static void validate_shape(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
        for (std::size_t e : shape) {
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
        }
    }

    std::shared_ptr<Node> node_;
};

// Per-backward-pass adjoint buffers keyed by tensor node. Kept separate from
// the persistent grad buffers so that replaying the same tape twice adds the
// same contribution twice (accumulation semantics).
template <typename T>
class Adjoints {
public:
    std::vector<T>* find(const detail::TensorNode<T>* n) {
        auto it = map_.find(n);
        return it == map_.end() ? nullptr : &it->second;
    }

    std::vector<T>& at_or_zero(const detail::TensorNode<T>* n, std::size_t size) {
        auto it = map_.find(n);
        if (it == map_.end()) it = map_.emplace(n, std::vector<T>(size, T(0))).first;
        return it->second;
    }

    void seed(const detail::TensorNode<T>* n, T v) { map_.emplace(n, std::vector<T>{v}); }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& kv : map_) fn(kv.first, kv.second);
    }

private:
    std::unordered_map<const detail::TensorNode<T>*, std::vector<T>> map_;
};

// Linear record of differentiable operations. Each recorded step, replayed in
// reverse, routes output adjoints to input adjoints. Steps keep their operand
// tensors alive through captured handles.
template <typename T>
class Tape {
public:
    using Step = std::function<void(Adjoints<T>&)>;

    void record(Step step) { steps_.push_back(std::move(step)); }

    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    // Accumulates dLoss/dx into x.grad() for every requires_grad tensor the
    // tape can reach from `loss`. The tape is left intact; a second call adds
    // the same gradients again.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_string(loss.shape()));
        }
        Adjoints<T> adj;
        adj.seed(loss.node(), T(1));
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)(adj);
        adj.for_each([](const detail::TensorNode<T>* n, const std::vector<T>& a) {
            auto* node = const_cast<detail::TensorNode<T>*>(n);
            if (!node->requires_grad) return;
            if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
            for (std::size_t i = 0; i < a.size(); ++i) node->grad[i] += a[i];
        });
    }

private:
    std::vector<Step> steps_;
};

}  // namespace pdit
