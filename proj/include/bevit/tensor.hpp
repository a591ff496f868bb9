#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bevit/error.hpp"

namespace bevit::num {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until an adjoint touches it
    bool requires_grad = false;
    bool leaf = true;
};

}  // namespace detail

// Handle to a dense array plus its gradient slot. Copying a Tensor copies the
// handle; `copy()` makes an independent leaf.
template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::int64_t dim(std::size_t axis) const { return node_->shape[axis]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<const T> values() const { return node_->value; }
    std::span<T> values_mut() { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool is_leaf() const { return node_->leaf; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const T> grad() const;
    std::span<T> grad_mut();
    void zero_grad() { node_->grad.clear(); }

    // Independent leaf with the same values; grad not copied.
    Tensor copy() const;
    // Same values as a constant leaf (cuts the tape link).
    Tensor detach() const;

    template <class U>
    Tensor<U> cast() const;

    detail::Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
template <class U>
Tensor<U> Tensor<T>::cast() const {
    std::vector<U> vals(node_->value.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<U>(node_->value[i]);
    return Tensor<U>::from(node_->shape, std::move(vals), node_->requires_grad);
}

// Ordered record of primitive applications. Ops append entries during the
// forward pass; backward() replays adjoints in reverse recording order, which
// is always a valid topological order.
template <class T>
class Tape {
public:
    static Tape& active();

    void record(std::shared_ptr<detail::Node<T>> out, std::function<void()> adjoint);
    void backward(const Tensor<T>& loss);
    void clear();
    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        std::shared_ptr<detail::Node<T>> out;
        std::function<void()> adjoint;
    };
    std::vector<Entry> entries_;
};

// While alive, ops do not record onto the tape (teacher forward, evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// --- primitive ops -------------------------------------------------------

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& x, T s);
template <class T> Tensor<T> add_scalar(const Tensor<T>& x, T s);

template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> broadcast_to(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> transpose(const Tensor<T>& x, const std::vector<int>& perm);
template <class T> Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len);
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim = false);
template <class T> Tensor<T> mean(const Tensor<T>& x);
template <class T> Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim = false);

template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis, T temperature = T(1));
template <class T> Tensor<T> log_softmax(const Tensor<T>& x, int axis);
template <class T> Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                                        const Tensor<T>& beta, T eps);
// tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
template <class T> Tensor<T> gelu(const Tensor<T>& x);
template <class T> Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T eps);

// Mean over the batch of w_y * (-log softmax(logits)_y). `class_weights` is
// either undefined (all ones) or a constant [C] tensor; no gradient flows to it.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        const Tensor<T>& class_weights = Tensor<T>());

template <class T> void backward(const Tensor<T>& loss);

// Value-only helpers (never recorded).
template <class T> std::vector<int> argmax_rows(const Tensor<T>& x);

}  // namespace bevit::num
