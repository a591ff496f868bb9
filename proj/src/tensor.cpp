#include "bevit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace bevit::num {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

thread_local int g_no_grad_depth = 0;

template <class T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <class T>
NodePtr<T> make_node(Shape shape) {
    auto n = std::make_shared<detail::Node<T>>();
    n->value.resize(static_cast<std::size_t>(shape_numel(shape)));
    n->shape = std::move(shape);
    return n;
}

template <class T>
void ensure_grad(detail::Node<T>& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
}

template <class T>
void mark_recorded(const NodePtr<T>& out) {
    out->requires_grad = true;
    out->leaf = false;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `shape` right-aligned into `out_shape`, 0 on broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out_shape) {
    const std::size_t nd = out_shape.size();
    std::vector<std::int64_t> natural(shape.size());
    std::int64_t acc = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        natural[i] = acc;
        acc *= shape[i];
    }
    std::vector<std::int64_t> strides(nd, 0);
    const std::size_t off = nd - shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i)
        strides[off + i] = (shape[i] == 1 && out_shape[off + i] != 1) ? 0 : natural[i];
    return strides;
}

// Apply f(a_i, b_i) over the broadcast iteration space.
template <class T, class F>
void broadcast_apply(const Shape& out_shape, const std::vector<T>& a,
                     const std::vector<std::int64_t>& sa, const std::vector<T>& b,
                     const std::vector<std::int64_t>& sb, std::vector<T>& out, F&& f) {
    const std::size_t nd = out_shape.size();
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t ia = 0, ib = 0;
    const std::int64_t total = shape_numel(out_shape);
    for (std::int64_t lin = 0; lin < total; ++lin) {
        out[static_cast<std::size_t>(lin)] =
            f(a[static_cast<std::size_t>(ia)], b[static_cast<std::size_t>(ib)]);
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out_shape[d]) break;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

// Sum grad over broadcast axes back into the input's shape.
template <class T>
void reduce_into(const std::vector<T>& grad_out, const Shape& out_shape, detail::Node<T>& in) {
    ensure_grad(in);
    if (in.shape == out_shape) {
        for (std::size_t i = 0; i < grad_out.size(); ++i) in.grad[i] += grad_out[i];
        return;
    }
    const auto strides = broadcast_strides(in.shape, out_shape);
    const std::size_t nd = out_shape.size();
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t ii = 0;
    const std::int64_t total = shape_numel(out_shape);
    for (std::int64_t lin = 0; lin < total; ++lin) {
        in.grad[static_cast<std::size_t>(ii)] += grad_out[static_cast<std::size_t>(lin)];
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ii += strides[d];
            if (idx[d] < out_shape[d]) break;
            ii -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

// c[i,j] += a[i,l] * b[l,j]
template <class T>
void mm_accum(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::int64_t l = 0; l < k; ++l) {
            const T av = arow[l];
            if (av == T(0)) continue;
            const T* brow = b + l * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[i,l] += sum_j a[i,j] * b[l,j]   (a: m x n, b: k x n, c: m x k)
template <class T>
void mm_abt_accum(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * n;
        T* crow = c + i * k;
        for (std::int64_t l = 0; l < k; ++l) {
            const T* brow = b + l * n;
            T acc = T(0);
            for (std::int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[l] += acc;
        }
    }
}

// c[l,j] += sum_i a[i,l] * b[i,j]   (a: m x k, b: m x n, c: k x n)
template <class T>
void mm_atb_accum(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::int64_t l = 0; l < k; ++l) {
            const T av = arow[l];
            if (av == T(0)) continue;
            T* crow = c + l * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
std::vector<T> permute_values(const std::vector<T>& v, const Shape& shape,
                              const std::vector<int>& perm) {
    const std::size_t nd = shape.size();
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = shape[static_cast<std::size_t>(perm[i])];
    std::vector<std::int64_t> in_strides(nd), out_strides(nd);
    std::int64_t acc = 1;
    for (std::size_t i = nd; i-- > 0;) {
        in_strides[i] = acc;
        acc *= shape[i];
    }
    acc = 1;
    for (std::size_t i = nd; i-- > 0;) {
        out_strides[i] = acc;
        acc *= out_shape[i];
    }
    std::vector<T> out(v.size());
    std::vector<std::int64_t> idx(nd, 0);
    const std::int64_t total = shape_numel(shape);
    for (std::int64_t lin = 0; lin < total; ++lin) {
        std::int64_t o = 0;
        for (std::size_t d = 0; d < nd; ++d) o += idx[static_cast<std::size_t>(perm[d])] * out_strides[d];
        out[static_cast<std::size_t>(o)] = v[static_cast<std::size_t>(lin)];
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

// (outer, len, inner) decomposition around `axis`.
struct AxisSplit {
    std::int64_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    if (axis < 0) axis += static_cast<int>(shape.size());
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

int normalize_axis(const Shape& shape, int axis) {
    int a = axis < 0 ? axis + static_cast<int>(shape.size()) : axis;
    if (a < 0 || a >= static_cast<int>(shape.size()))
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    return a;
}

}  // namespace

// --- Tensor ---------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    auto n = make_node<T>(std::move(shape));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto n = make_node<T>(std::move(shape));
    std::fill(n->value.begin(), n->value.end(), value);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " +
                         shape_str(shape));
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
    return from({1}, {value});
}

template <class T>
T Tensor<T>::item() const {
    if (!defined() || numel() != 1) throw ShapeError("item() requires a scalar tensor");
    return node_->value[0];
}

template <class T>
void Tensor<T>::set_requires_grad(bool flag) {
    if (!node_->leaf) throw ModelError("requires_grad may only be toggled on leaf tensors");
    node_->requires_grad = flag;
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
    if (!has_grad()) throw ShapeError("tensor has no gradient");
    return node_->grad;
}

template <class T>
std::span<T> Tensor<T>::grad_mut() {
    if (!has_grad()) throw ShapeError("tensor has no gradient");
    return node_->grad;
}

template <class T>
Tensor<T> Tensor<T>::copy() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = node_->requires_grad;
    return wrap(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return wrap(std::move(n));
}

// --- Tape -------------------------------------------------------------------

template <class T>
Tape<T>& Tape<T>::active() {
    thread_local Tape<T> tape;
    return tape;
}

template <class T>
void Tape<T>::record(std::shared_ptr<detail::Node<T>> out, std::function<void()> adjoint) {
    entries_.push_back(Entry{std::move(out), std::move(adjoint)});
}

template <class T>
void Tape<T>::clear() {
    entries_.clear();
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward requires a scalar loss");
    for (auto& e : entries_) e.out->grad.clear();
    auto* ln = loss.node();
    if (!ln->requires_grad) return;  // no trainable ancestor
    ln->grad.assign(1, T(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
        if (!it->out->grad.empty()) it->adjoint();
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

// --- elementwise binary -----------------------------------------------------

namespace {

template <class T, class FwdF>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdF&& f, T da_factor, T db_factor,
                    bool db_is_a_value, bool da_is_b_value) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto out = make_node<T>(out_shape);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    broadcast_apply(out_shape, a.node()->value, sa, b.node()->value, sb, out->value, f);

    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        mark_recorded(out);
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [an, bn, on, out_shape, sa, sb, da_factor, db_factor,
                                       da_is_b_value, db_is_a_value]() {
            const auto& g = on->grad;
            if (an->requires_grad) {
                if (da_is_b_value) {
                    // d(a*b)/da = b
                    std::vector<T> tmp(g.size());
                    broadcast_apply(out_shape, g, broadcast_strides(on->shape, out_shape),
                                    bn->value, sb, tmp, [](T x, T y) { return x * y; });
                    reduce_into(tmp, out_shape, *an);
                } else if (da_factor == T(1)) {
                    reduce_into(g, out_shape, *an);
                } else {
                    std::vector<T> tmp(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * da_factor;
                    reduce_into(tmp, out_shape, *an);
                }
            }
            if (bn->requires_grad) {
                if (db_is_a_value) {
                    std::vector<T> tmp(g.size());
                    broadcast_apply(out_shape, g, broadcast_strides(on->shape, out_shape),
                                    an->value, sa, tmp, [](T x, T y) { return x * y; });
                    reduce_into(tmp, out_shape, *bn);
                } else {
                    std::vector<T> tmp(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * db_factor;
                    reduce_into(tmp, out_shape, *bn);
                }
            }
        });
    }
    return Tensor<T>::wrap(out);
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x + y; }, T(1), T(1), false, false);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x - y; }, T(1), T(-1), false, false);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x * y; }, T(0), T(0), true, true);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * s;
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, s]() {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * s;
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] + s;
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on]() {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return Tensor<T>::wrap(out);
}

// --- matmul / bmm -----------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul shapes incompatible: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_node<T>({m, n});
    mm_accum(a.node()->value.data(), b.node()->value.data(), out->value.data(), m, k, n);

    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        mark_recorded(out);
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [an, bn, on, m, k, n]() {
            if (an->requires_grad) {
                ensure_grad(*an);
                mm_abt_accum(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                mm_atb_accum(an->value.data(), on->grad.data(), bn->grad.data(), m, k, n);
            }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm shapes incompatible: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    auto out = make_node<T>({nb, m, n});
    for (std::int64_t i = 0; i < nb; ++i)
        mm_accum(a.node()->value.data() + i * m * k, b.node()->value.data() + i * k * n,
                 out->value.data() + i * m * n, m, k, n);

    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        mark_recorded(out);
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [an, bn, on, nb, m, k, n]() {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (std::int64_t i = 0; i < nb; ++i)
                    mm_abt_accum(on->grad.data() + i * m * n, bn->value.data() + i * k * n,
                                 an->grad.data() + i * m * k, m, n, k);
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < nb; ++i)
                    mm_atb_accum(an->value.data() + i * m * k, on->grad.data() + i * m * n,
                                 bn->grad.data() + i * k * n, m, k, n);
            }
        });
    }
    return Tensor<T>::wrap(out);
}

// --- shape ops ----------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    auto out = std::make_shared<detail::Node<T>>();
    out->shape = std::move(shape);
    out->value = x.node()->value;
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on]() {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, Shape shape) {
    if (broadcast_shape(x.shape(), shape) != shape)
        throw DimensionError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    auto out = make_node<T>(shape);
    const auto sx = broadcast_strides(x.shape(), shape);
    const auto so = broadcast_strides(shape, shape);
    broadcast_apply(shape, x.node()->value, sx, out->value, so, out->value,
                    [](T a, T) { return a; });
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, shape]() { reduce_into(on->grad, shape, *xn); });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<int>& perm) {
    const std::size_t nd = x.ndim();
    if (perm.size() != nd) throw DimensionError("transpose perm rank mismatch");
    std::vector<bool> seen(nd, false);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(nd) || seen[static_cast<std::size_t>(p)])
            throw DimensionError("transpose perm is not a permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.dim(static_cast<std::size_t>(perm[i]));
    auto out = std::make_shared<detail::Node<T>>();
    out->shape = out_shape;
    out->value = permute_values(x.node()->value, x.shape(), perm);
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        std::vector<int> inv(nd);
        for (std::size_t i = 0; i < nd; ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, out_shape, inv]() {
            ensure_grad(*xn);
            auto back = permute_values(on->grad, out_shape, inv);
            for (std::size_t i = 0; i < back.size(); ++i) xn->grad[i] += back[i];
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len) {
    const int a = normalize_axis(x.shape(), axis);
    if (start < 0 || len < 0 || start + len > x.shape()[static_cast<std::size_t>(a)])
        throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") out of range on axis " + std::to_string(a) + " of " +
                             shape_str(x.shape()));
    const auto sp = split_axis(x.shape(), a);
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(a)] = len;
    auto out = make_node<T>(out_shape);
    const auto& xv = x.node()->value;
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t l = 0; l < len; ++l)
            std::copy_n(xv.data() + (o * sp.len + start + l) * sp.inner, sp.inner,
                        out->value.data() + (o * len + l) * sp.inner);
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, sp, start, len]() {
            ensure_grad(*xn);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t l = 0; l < len; ++l) {
                    const T* g = on->grad.data() + (o * len + l) * sp.inner;
                    T* dst = xn->grad.data() + (o * sp.len + start + l) * sp.inner;
                    for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
                }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const int a = normalize_axis(parts[0].shape(), axis);
    Shape out_shape = parts[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size())
            throw DimensionError("concat rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != a && s[d] != out_shape[d])
                throw DimensionError("concat shape mismatch: " + shape_str(out_shape) + " vs " +
                                     shape_str(s));
        axis_total += s[static_cast<std::size_t>(a)];
    }
    out_shape[static_cast<std::size_t>(a)] = axis_total;
    auto out = make_node<T>(out_shape);
    const auto spo = split_axis(out_shape, a);
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const auto sp = split_axis(p.shape(), a);
        const auto& pv = p.node()->value;
        for (std::int64_t o = 0; o < sp.outer; ++o)
            std::copy_n(pv.data() + o * sp.len * sp.inner, sp.len * sp.inner,
                        out->value.data() + (o * spo.len + offset) * spo.inner);
        offset += sp.len;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (grad_enabled() && any_grad) {
        mark_recorded(out);
        std::vector<NodePtr<T>> ins;
        std::vector<std::int64_t> lens;
        for (const auto& p : parts) {
            ins.push_back(p.node_ptr());
            lens.push_back(p.shape()[static_cast<std::size_t>(a)]);
        }
        auto on = out;
        Tape<T>::active().record(out, [ins, lens, on, spo]() {
            std::int64_t off = 0;
            for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                auto& in = *ins[pi];
                const std::int64_t len = lens[pi];
                if (in.requires_grad) {
                    ensure_grad(in);
                    for (std::int64_t o = 0; o < spo.outer; ++o) {
                        const T* g = on->grad.data() + (o * spo.len + off) * spo.inner;
                        T* dst = in.grad.data() + o * len * spo.inner;
                        for (std::int64_t i = 0; i < len * spo.inner; ++i) dst[i] += g[i];
                    }
                }
                off += len;
            }
        });
    }
    return Tensor<T>::wrap(out);
}

// --- reductions -----------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    auto out = make_node<T>({1});
    T acc = T(0);
    for (T v : x.node()->value) acc += v;
    out->value[0] = acc;
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on]() {
            ensure_grad(*xn);
            const T g = on->grad[0];
            for (auto& gi : xn->grad) gi += g;
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    return scale(sum(x), inv);
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim) {
    const int a = normalize_axis(x.shape(), axis);
    const auto sp = split_axis(x.shape(), a);
    Shape out_shape;
    for (std::size_t d = 0; d < x.ndim(); ++d) {
        if (static_cast<int>(d) == a) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.shape()[d]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);
    auto out = make_node<T>(out_shape);
    const auto& xv = x.node()->value;
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            T acc = T(0);
            for (std::int64_t l = 0; l < sp.len; ++l) acc += xv[(o * sp.len + l) * sp.inner + i];
            out->value[static_cast<std::size_t>(o * sp.inner + i)] = acc;
        }
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, sp]() {
            ensure_grad(*xn);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const T g = on->grad[static_cast<std::size_t>(o * sp.inner + i)];
                    for (std::int64_t l = 0; l < sp.len; ++l)
                        xn->grad[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)] += g;
                }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim) {
    const int a = normalize_axis(x.shape(), axis);
    const T inv = T(1) / static_cast<T>(x.shape()[static_cast<std::size_t>(a)]);
    return scale(sum_axis(x, a, keepdim), inv);
}

// --- normalization & activations -------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis, T temperature) {
    if (!(temperature > T(0))) throw DomainError("softmax temperature must be positive");
    const int a = normalize_axis(x.shape(), axis);
    const auto sp = split_axis(x.shape(), a);
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            T mx = xv[static_cast<std::size_t>(o * sp.len * sp.inner + i)];
            for (std::int64_t l = 1; l < sp.len; ++l)
                mx = std::max(mx, xv[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)]);
            T denom = T(0);
            for (std::int64_t l = 0; l < sp.len; ++l) {
                const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                const T e = std::exp((xv[at] - mx) / temperature);
                out->value[at] = e;
                denom += e;
            }
            for (std::int64_t l = 0; l < sp.len; ++l)
                out->value[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)] /= denom;
        }
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, sp, temperature]() {
            ensure_grad(*xn);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    T dot = T(0);
                    for (std::int64_t l = 0; l < sp.len; ++l) {
                        const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                        dot += on->grad[at] * on->value[at];
                    }
                    for (std::int64_t l = 0; l < sp.len; ++l) {
                        const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                        xn->grad[at] += on->value[at] * (on->grad[at] - dot) / temperature;
                    }
                }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
    const int a = normalize_axis(x.shape(), axis);
    const auto sp = split_axis(x.shape(), a);
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            T mx = xv[static_cast<std::size_t>(o * sp.len * sp.inner + i)];
            for (std::int64_t l = 1; l < sp.len; ++l)
                mx = std::max(mx, xv[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)]);
            T denom = T(0);
            for (std::int64_t l = 0; l < sp.len; ++l)
                denom += std::exp(xv[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)] - mx);
            const T lse = mx + std::log(denom);
            for (std::int64_t l = 0; l < sp.len; ++l) {
                const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                out->value[at] = xv[at] - lse;
            }
        }
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, sp]() {
            ensure_grad(*xn);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    T gsum = T(0);
                    for (std::int64_t l = 0; l < sp.len; ++l)
                        gsum += on->grad[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)];
                    for (std::int64_t l = 0; l < sp.len; ++l) {
                        const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                        xn->grad[at] += on->grad[at] - std::exp(on->value[at]) * gsum;
                    }
                }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (!(eps > T(0))) throw DomainError("layer_norm eps must be positive");
    const std::int64_t len = x.shape().back();
    if (gamma.numel() != len || beta.numel() != len)
        throw DimensionError("layer_norm affine length " + std::to_string(gamma.numel()) + "/" +
                             std::to_string(beta.numel()) + " does not match axis length " +
                             std::to_string(len));
    const std::int64_t rows = x.numel() / len;
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    const auto& gv = gamma.node()->value;
    const auto& bv = beta.node()->value;
    std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * len;
        T mu = T(0);
        for (std::int64_t i = 0; i < len; ++i) mu += row[i];
        mu /= static_cast<T>(len);
        T var = T(0);
        for (std::int64_t i = 0; i < len; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<T>(len);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t i = 0; i < len; ++i) {
            const T xh = (row[i] - mu) * is;
            xhat[static_cast<std::size_t>(r * len + i)] = xh;
            out->value[static_cast<std::size_t>(r * len + i)] = gv[static_cast<std::size_t>(i)] * xh +
                                                                bv[static_cast<std::size_t>(i)];
        }
    }
    if (grad_enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto gn = gamma.node_ptr();
        auto bn = beta.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, gn, bn, on, rows, len, xhat = std::move(xhat),
                                       inv_std = std::move(inv_std)]() {
            const auto& g = on->grad;
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < len; ++i)
                        bn->grad[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(r * len + i)];
            }
            if (gn->requires_grad) {
                ensure_grad(*gn);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < len; ++i)
                        gn->grad[static_cast<std::size_t>(i)] +=
                            g[static_cast<std::size_t>(r * len + i)] *
                            xhat[static_cast<std::size_t>(r * len + i)];
            }
            if (xn->requires_grad) {
                ensure_grad(*xn);
                const T invn = T(1) / static_cast<T>(len);
                for (std::int64_t r = 0; r < rows; ++r) {
                    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                    for (std::int64_t i = 0; i < len; ++i) {
                        const std::size_t at = static_cast<std::size_t>(r * len + i);
                        const T dxh = g[at] * gn->value[static_cast<std::size_t>(i)];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[at];
                    }
                    mean_dxhat *= invn;
                    mean_dxhat_xhat *= invn;
                    const T is = inv_std[static_cast<std::size_t>(r)];
                    for (std::int64_t i = 0; i < len; ++i) {
                        const std::size_t at = static_cast<std::size_t>(r * len + i);
                        const T dxh = g[at] * gn->value[static_cast<std::size_t>(i)];
                        xn->grad[at] += is * (dxh - mean_dxhat - xhat[at] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    // tanh approximation; c = sqrt(2/pi), cubic coefficient 0.044715
    constexpr double kC = 0.7978845608028653558798921198687;
    constexpr double kCubic = 0.044715;
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = static_cast<double>(xv[i]);
        const double t = std::tanh(kC * (v + kCubic * v * v * v));
        out->value[i] = static_cast<T>(0.5 * v * (1.0 + t));
    }
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on]() {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const double v = static_cast<double>(xn->value[i]);
                const double u = kC * (v + kCubic * v * v * v);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kCubic * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                xn->grad[i] += on->grad[i] * static_cast<T>(d);
            }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T eps) {
    const int a = normalize_axis(x.shape(), axis);
    const auto sp = split_axis(x.shape(), a);
    auto out = make_node<T>(x.shape());
    const auto& xv = x.node()->value;
    std::vector<T> norms(static_cast<std::size_t>(sp.outer * sp.inner));
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            T s = T(0);
            for (std::int64_t l = 0; l < sp.len; ++l) {
                const T v = xv[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)];
                s += v * v;
            }
            const T n = std::sqrt(s + eps);
            norms[static_cast<std::size_t>(o * sp.inner + i)] = n;
            for (std::int64_t l = 0; l < sp.len; ++l) {
                const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                out->value[at] = xv[at] / n;
            }
        }
    if (grad_enabled() && x.requires_grad()) {
        mark_recorded(out);
        auto xn = x.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, sp, norms = std::move(norms)]() {
            ensure_grad(*xn);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    T dot = T(0);
                    for (std::int64_t l = 0; l < sp.len; ++l) {
                        const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                        dot += on->grad[at] * on->value[at];
                    }
                    const T n = norms[static_cast<std::size_t>(o * sp.inner + i)];
                    for (std::int64_t l = 0; l < sp.len; ++l) {
                        const std::size_t at = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
                        xn->grad[at] += (on->grad[at] - dot * on->value[at]) / n;
                    }
                }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        const Tensor<T>& class_weights) {
    if (logits.ndim() != 2)
        throw DimensionError("cross_entropy expects [batch x classes] logits, got " +
                             shape_str(logits.shape()));
    const std::int64_t B = logits.dim(0), C = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != B)
        throw LabelError("cross_entropy target count " + std::to_string(targets.size()) +
                         " != batch " + std::to_string(B));
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (targets[i] < 0 || targets[i] >= C)
            throw LabelError("cross_entropy target " + std::to_string(targets[i]) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(C) + ")");
    std::vector<T> w(static_cast<std::size_t>(C), T(1));
    if (class_weights.defined()) {
        if (class_weights.numel() != C)
            throw DimensionError("class_weights length must equal class count");
        const auto cw = class_weights.values();
        std::copy(cw.begin(), cw.end(), w.begin());
    }
    auto out = make_node<T>({1});
    const auto& xv = logits.node()->value;
    std::vector<T> probs(static_cast<std::size_t>(B * C));
    T total = T(0);
    for (std::int64_t r = 0; r < B; ++r) {
        const T* row = xv.data() + r * C;
        T mx = row[0];
        for (std::int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::int64_t j = 0; j < C; ++j) {
            const T e = std::exp(row[j] - mx);
            probs[static_cast<std::size_t>(r * C + j)] = e;
            denom += e;
        }
        for (std::int64_t j = 0; j < C; ++j) probs[static_cast<std::size_t>(r * C + j)] /= denom;
        const T lse = mx + std::log(denom);
        total += w[static_cast<std::size_t>(targets[static_cast<std::size_t>(r)])] *
                 (lse - row[targets[static_cast<std::size_t>(r)]]);
    }
    out->value[0] = total / static_cast<T>(B);
    if (grad_enabled() && logits.requires_grad()) {
        mark_recorded(out);
        auto xn = logits.node_ptr();
        auto on = out;
        Tape<T>::active().record(out, [xn, on, targets, w, probs = std::move(probs), B, C]() {
            ensure_grad(*xn);
            const T g = on->grad[0] / static_cast<T>(B);
            for (std::int64_t r = 0; r < B; ++r) {
                const int y = targets[static_cast<std::size_t>(r)];
                const T wy = w[static_cast<std::size_t>(y)];
                for (std::int64_t j = 0; j < C; ++j) {
                    const std::size_t at = static_cast<std::size_t>(r * C + j);
                    const T p = probs[at];
                    xn->grad[at] += g * wy * (p - (j == y ? T(1) : T(0)));
                }
            }
        });
    }
    return Tensor<T>::wrap(out);
}

template <class T>
void backward(const Tensor<T>& loss) {
    Tape<T>::active().backward(loss);
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
    if (x.ndim() != 2) throw DimensionError("argmax_rows expects a 2-d tensor");
    const std::int64_t B = x.dim(0), C = x.dim(1);
    std::vector<int> out(static_cast<std::size_t>(B));
    const auto v = x.values();
    for (std::int64_t r = 0; r < B; ++r) {
        int best = 0;
        for (std::int64_t j = 1; j < C; ++j)
            if (v[static_cast<std::size_t>(r * C + j)] > v[static_cast<std::size_t>(r * C + best)])
                best = static_cast<int>(j);
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

// --- explicit instantiations -------------------------------------------------

#define BEVIT_INSTANTIATE(T)                                                                     \
    template class Tensor<T>;                                                                    \
    template class Tape<T>;                                                                      \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> scale(const Tensor<T>&, T);                                               \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
    template Tensor<T> broadcast_to(const Tensor<T>&, Shape);                                    \
    template Tensor<T> transpose(const Tensor<T>&, const std::vector<int>&);                     \
    template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                 \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                               \
    template Tensor<T> sum(const Tensor<T>&);                                                    \
    template Tensor<T> sum_axis(const Tensor<T>&, int, bool);                                    \
    template Tensor<T> mean(const Tensor<T>&);                                                   \
    template Tensor<T> mean_axis(const Tensor<T>&, int, bool);                                   \
    template Tensor<T> softmax(const Tensor<T>&, int, T);                                        \
    template Tensor<T> log_softmax(const Tensor<T>&, int);                                       \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
    template Tensor<T> gelu(const Tensor<T>&);                                                   \
    template Tensor<T> l2_normalize(const Tensor<T>&, int, T);                                   \
    template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&, const Tensor<T>&); \
    template void backward(const Tensor<T>&);                                                    \
    template std::vector<int> argmax_rows(const Tensor<T>&);

BEVIT_INSTANTIATE(float)
BEVIT_INSTANTIATE(double)

#undef BEVIT_INSTANTIATE

}  // namespace bevit::num
