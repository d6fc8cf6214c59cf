#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wdstagnn/error.hpp"
#include "wdstagnn/numerics/tensor.hpp"

namespace wdstagnn {

/// Named learnable tensors. Ordered so iteration (and therefore optimisation
/// and serialisation) is deterministic.
using ParameterStore = std::map<std::string, Tensor>;
using GradientStore = std::map<std::string, Tensor>;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph *g, std::uint32_t id) : graph_(g), id_(id) {}

    Graph &graph() const { return *graph_; }
    std::uint32_t id() const { return id_; }
    const Tensor &value() const;
    const Shape &shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph *graph_ = nullptr;
    std::uint32_t id_ = 0;
};

/// Tape of operation records for reverse-mode differentiation.
///
/// Records are appended in evaluation order, so the tape is always
/// topologically sorted. Parameters are bound lazily from the attached
/// ParameterStore and cached, so repeated lookups share one leaf and their
/// gradients accumulate. Single writer: do not touch one Graph from several
/// threads.
class Graph {
public:
    using BackwardFn = std::function<void(Graph &, Var self)>;

    explicit Graph(const ParameterStore *params = nullptr) : params_(params) {}
    Graph(const Graph &) = delete;
    Graph &operator=(const Graph &) = delete;

    Var constant(Tensor value) { return push(std::move(value), false, {}); }

    /// Differentiable leaf that is not part of the parameter registry.
    Var variable(Tensor value) { return push(std::move(value), true, {}); }

    Var parameter(const std::string &name) {
        if (auto it = bound_.find(name); it != bound_.end()) {
            return Var(this, it->second);
        }
        if (!params_) {
            throw ContractError("graph has no parameter store; cannot bind '" + name + "'");
        }
        auto it = params_->find(name);
        if (it == params_->end()) {
            throw ContractError("unknown parameter '" + name + "'");
        }
        Var v = push(it->second, true, {});
        bound_.emplace(name, v.id());
        return v;
    }

    /// Appends an operation record. The backward rule is dropped when no
    /// input is differentiable.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        bool needs = false;
        for (const Var &in : inputs) {
            check_owner(in);
            needs = needs || nodes_[in.id()].requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
    }

    Var record(Tensor value, const std::vector<Var> &inputs, BackwardFn backward) {
        bool needs = false;
        for (const Var &in : inputs) {
            check_owner(in);
            needs = needs || nodes_[in.id()].requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
    }

    const Tensor &value(Var v) const { return nodes_[v.id()].value; }
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

    /// Gradient accumulator of v, allocated on first use; nullptr when v is
    /// not differentiable.
    Tensor *grad_sink(Var v) {
        Node &n = nodes_[v.id()];
        if (!n.requires_grad) {
            return nullptr;
        }
        if (n.grad.empty()) {
            n.grad = Tensor(n.value.shape());
        }
        return &n.grad;
    }

    /// Gradient of v after backward(); zeros if nothing flowed into it.
    Tensor grad(Var v) const {
        const Node &n = nodes_[v.id()];
        return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
    }

    const Tensor &upstream(Var self) const { return nodes_[self.id()].grad; }

    void backward(Var loss) {
        check_owner(loss);
        const Node &root = nodes_[loss.id()];
        if (root.value.size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
        }
        for (auto &n : nodes_) {
            n.grad = Tensor();
        }
        if (!root.requires_grad) {
            return;
        }
        nodes_[loss.id()].grad = Tensor(root.value.shape(), 1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node &n = nodes_[i];
            if (n.backward && !n.grad.empty()) {
                n.backward(*this, Var(this, static_cast<std::uint32_t>(i)));
            }
        }
    }

    /// Gradients for every entry of the parameter store (zeros for entries
    /// this graph never bound).
    GradientStore gradients() const {
        GradientStore out;
        if (!params_) {
            return out;
        }
        for (const auto &[name, value] : *params_) {
            auto it = bound_.find(name);
            out.emplace(name, it == bound_.end() ? Tensor(value.shape()) : grad(Var(const_cast<Graph *>(this), it->second)));
        }
        return out;
    }

    /// Adds this graph's parameter gradients into acc (shapes created on demand).
    void accumulate_gradients(GradientStore &acc, double scale = 1.0) const {
        if (!params_) {
            return;
        }
        for (const auto &[name, value] : *params_) {
            auto [slot, inserted] = acc.try_emplace(name, value.shape());
            auto it = bound_.find(name);
            if (it == bound_.end()) {
                continue;
            }
            const Tensor &g = nodes_[it->second].grad;
            if (g.empty()) {
                continue;
            }
            for (std::size_t i = 0; i < g.size(); ++i) {
                slot->second[i] += scale * g[i];
            }
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Tensor value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(backward)});
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    void check_owner(const Var &v) const {
        if (&v.graph() != this) {
            throw ContractError("variable belongs to a different graph");
        }
    }

    const ParameterStore *params_;
    std::vector<Node> nodes_;
    std::unordered_map<std::string, std::uint32_t> bound_;
};

inline const Tensor &Var::value() const { return graph_->value(*this); }

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_graph(const Var &a, const Var &b) {
    if (&a.graph() != &b.graph()) {
        throw ContractError("operands belong to different graphs");
    }
}

inline Tensor map_unary(const Tensor &x, double (*f)(double)) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = f(x[i]);
    }
    return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// Blocked GEMM packing does not pay off for tiny per-head products.
inline bool small_product(std::size_t m, std::size_t k, std::size_t n) { return m * k * n < 32768; }

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    if (small_product(m, k, n)) {
        MMap(c, M, N).noalias() += CMap(a, M, K).lazyProduct(CMap(b, K, N));
    } else {
        MMap(c, M, N).noalias() += CMap(a, M, K) * CMap(b, K, N);
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    if (small_product(m, k, n)) {
        MMap(c, M, N).noalias() += CMap(a, M, K).lazyProduct(CMap(b, N, K).transpose());
    } else {
        MMap(c, M, N).noalias() += CMap(a, M, K) * CMap(b, N, K).transpose();
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    if (small_product(m, k, n)) {
        MMap(c, K, N).noalias() += CMap(a, M, K).transpose().lazyProduct(CMap(b, M, N));
    } else {
        MMap(c, K, N).noalias() += CMap(a, M, K).transpose() * CMap(b, M, N);
    }
}

struct MatmulDims {
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    bool b_broadcast = false;
    Shape out;
};

// a: (..., m, k); b: (k, n) broadcast or (..., k, n) [transpose_b: (n, k) / (..., n, k)].
inline MatmulDims matmul_dims(const Shape &a, const Shape &b, bool transpose_b, const char *name) {
    auto fail = [&] {
        throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    };
    if (a.size() < 2 || b.size() < 2) {
        fail();
    }
    MatmulDims d;
    d.m = a[a.size() - 2];
    d.k = a.back();
    const std::size_t bk = transpose_b ? b.back() : b[b.size() - 2];
    d.n = transpose_b ? b[b.size() - 2] : b.back();
    if (bk != d.k) {
        fail();
    }
    if (b.size() == 2) {
        d.b_broadcast = true;
    } else if (b.size() != a.size() || !std::equal(a.begin(), a.end() - 2, b.begin())) {
        fail();
    }
    for (std::size_t i = 0; i + 2 < a.size(); ++i) {
        d.batch *= a[i];
    }
    d.out.assign(a.begin(), a.end() - 2);
    d.out.push_back(d.m);
    d.out.push_back(d.n);
    if (d.b_broadcast) {
        // a shared right operand turns the batch into one taller product
        d.m *= d.batch;
        d.batch = 1;
    }
    return d;
}

inline std::size_t suffix_offset(const Shape &full, const Shape &suffix, const char *name) {
    if (suffix.size() > full.size() || !std::equal(suffix.begin(), suffix.end(), full.end() - suffix.size())) {
        throw DimensionError(std::string(name) + ": " + shape_str(suffix) + " is not a trailing sub-shape of " +
                             shape_str(full));
    }
    return shape_size(suffix);
}

} // namespace detail

inline Var add(Var a, Var b) {
    detail::require_same_graph(a, b);
    a.value().require_same_shape(b.value(), "add");
    Tensor out = a.value();
    out += b.value();
    return a.graph().record(std::move(out), {a, b}, [a, b](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        if (Tensor *ga = g.grad_sink(a)) {
            *ga += gy;
        }
        if (Tensor *gb = g.grad_sink(b)) {
            *gb += gy;
        }
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same_graph(a, b);
    a.value().require_same_shape(b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b.value()[i];
    }
    return a.graph().record(std::move(out), {a, b}, [a, b](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        if (Tensor *ga = g.grad_sink(a)) {
            *ga += gy;
        }
        if (Tensor *gb = g.grad_sink(b)) {
            for (std::size_t i = 0; i < gy.size(); ++i) {
                (*gb)[i] -= gy[i];
            }
        }
    });
}

/// Elementwise (Hadamard) product of equally shaped operands.
inline Var mul(Var a, Var b) {
    detail::require_same_graph(a, b);
    a.value().require_same_shape(b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    return a.graph().record(std::move(out), {a, b}, [a, b](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        const Tensor &av = g.value(a);
        const Tensor &bv = g.value(b);
        if (Tensor *ga = g.grad_sink(a)) {
            for (std::size_t i = 0; i < gy.size(); ++i) {
                (*ga)[i] += gy[i] * bv[i];
            }
        }
        if (Tensor *gb = g.grad_sink(b)) {
            for (std::size_t i = 0; i < gy.size(); ++i) {
                (*gb)[i] += gy[i] * av[i];
            }
        }
    });
}

inline Var scale(Var a, double s) {
    Tensor out = a.value();
    out *= s;
    return a.graph().record(std::move(out), {a}, [a, s](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            (*ga)[i] += s * gy[i];
        }
    });
}

/// a + b where b's shape is a trailing sub-shape of a's (bias broadcast).
inline Var add_bias(Var a, Var b) {
    detail::require_same_graph(a, b);
    const std::size_t inner = detail::suffix_offset(a.shape(), b.shape(), "add_bias");
    Tensor out = a.value();
    const Tensor &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i % inner];
    }
    return a.graph().record(std::move(out), {a, b}, [a, b, inner](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        if (Tensor *ga = g.grad_sink(a)) {
            *ga += gy;
        }
        if (Tensor *gb = g.grad_sink(b)) {
            for (std::size_t i = 0; i < gy.size(); ++i) {
                (*gb)[i % inner] += gy[i];
            }
        }
    });
}

/// a ⊙ b where b's shape is a trailing sub-shape of a's.
inline Var mul_bias(Var a, Var b) {
    detail::require_same_graph(a, b);
    const std::size_t inner = detail::suffix_offset(a.shape(), b.shape(), "mul_bias");
    Tensor out = a.value();
    const Tensor &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i % inner];
    }
    return a.graph().record(std::move(out), {a, b}, [a, b, inner](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        const Tensor &av = g.value(a);
        const Tensor &bv = g.value(b);
        if (Tensor *ga = g.grad_sink(a)) {
            for (std::size_t i = 0; i < gy.size(); ++i) {
                (*ga)[i] += gy[i] * bv[i % inner];
            }
        }
        if (Tensor *gb = g.grad_sink(b)) {
            for (std::size_t i = 0; i < gy.size(); ++i) {
                (*gb)[i % inner] += gy[i] * av[i];
            }
        }
    });
}

/// Repeats a unit-extent axis `count` times.
inline Var repeat_axis(Var a, std::size_t axis, std::size_t count) {
    const Shape &as = a.shape();
    if (axis >= as.size() || as[axis] != 1 || count == 0) {
        throw DimensionError("repeat_axis: axis " + std::to_string(axis) + " of " + shape_str(as) +
                             " must have extent 1");
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= as[i];
    }
    for (std::size_t i = axis + 1; i < as.size(); ++i) {
        inner *= as[i];
    }
    Shape os = as;
    os[axis] = count;
    Tensor out(os);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t r = 0; r < count; ++r) {
            std::copy_n(a.value().data() + o * inner, inner, out.data() + (o * count + r) * inner);
        }
    }
    return a.graph().record(std::move(out), {a}, [a, outer, inner, count](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t r = 0; r < count; ++r) {
                const double *src = gy.data() + (o * count + r) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    (*ga)[o * inner + i] += src[i];
                }
            }
        }
    });
}

/// Sum of several equally shaped operands.
inline Var add_n(const std::vector<Var> &terms) {
    if (terms.empty()) {
        throw ContractError("add_n of an empty list");
    }
    Tensor out = terms.front().value();
    for (std::size_t t = 1; t < terms.size(); ++t) {
        detail::require_same_graph(terms.front(), terms[t]);
        out += terms[t].value();
    }
    return terms.front().graph().record(std::move(out), terms, [terms](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        for (const Var &t : terms) {
            if (Tensor *gt = g.grad_sink(t)) {
                *gt += gy;
            }
        }
    });
}

/// Matrix product over the two trailing axes, batched over leading axes.
/// b is either 2-D (shared across the batch) or has a's leading extents.
inline Var matmul(Var a, Var b) {
    detail::require_same_graph(a, b);
    const auto d = detail::matmul_dims(a.shape(), b.shape(), false, "matmul");
    Tensor out(d.out);
    const double *ap = a.value().data();
    const double *bp = b.value().data();
    for (std::size_t s = 0; s < d.batch; ++s) {
        detail::gemm_nn(ap + s * d.m * d.k, bp + (d.b_broadcast ? 0 : s * d.k * d.n), out.data() + s * d.m * d.n, d.m,
                        d.k, d.n);
    }
    return a.graph().record(std::move(out), {a, b}, [a, b, d](Graph &g, Var self) {
        const double *gy = g.upstream(self).data();
        const double *av = g.value(a).data();
        const double *bv = g.value(b).data();
        Tensor *ga = g.grad_sink(a);
        Tensor *gb = g.grad_sink(b);
        for (std::size_t s = 0; s < d.batch; ++s) {
            const std::size_t boff = d.b_broadcast ? 0 : s * d.k * d.n;
            if (ga) {
                detail::gemm_nt(gy + s * d.m * d.n, bv + boff, ga->data() + s * d.m * d.k, d.m, d.n, d.k);
            }
            if (gb) {
                detail::gemm_tn(av + s * d.m * d.k, gy + s * d.m * d.n, gb->data() + boff, d.m, d.k, d.n);
            }
        }
    });
}

/// a · bᵀ over the two trailing axes (b: (n, k) shared, or batched (..., n, k)).
inline Var matmul_nt(Var a, Var b) {
    detail::require_same_graph(a, b);
    const auto d = detail::matmul_dims(a.shape(), b.shape(), true, "matmul_nt");
    Tensor out(d.out);
    const double *ap = a.value().data();
    const double *bp = b.value().data();
    for (std::size_t s = 0; s < d.batch; ++s) {
        detail::gemm_nt(ap + s * d.m * d.k, bp + (d.b_broadcast ? 0 : s * d.n * d.k), out.data() + s * d.m * d.n, d.m,
                        d.k, d.n);
    }
    return a.graph().record(std::move(out), {a, b}, [a, b, d](Graph &g, Var self) {
        const double *gy = g.upstream(self).data();
        const double *av = g.value(a).data();
        const double *bv = g.value(b).data();
        Tensor *ga = g.grad_sink(a);
        Tensor *gb = g.grad_sink(b);
        for (std::size_t s = 0; s < d.batch; ++s) {
            const std::size_t boff = d.b_broadcast ? 0 : s * d.n * d.k;
            if (ga) {
                // dA = dY · B
                detail::gemm_nn(gy + s * d.m * d.n, bv + boff, ga->data() + s * d.m * d.k, d.m, d.n, d.k);
            }
            if (gb) {
                // dB = dYᵀ · A
                detail::gemm_tn(gy + s * d.m * d.n, av + s * d.m * d.k, gb->data() + boff, d.m, d.n, d.k);
            }
        }
    });
}

inline Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.graph().record(std::move(out), {a}, [a](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            (*ga)[i] += gy[i];
        }
    });
}

namespace detail {

// Index map for out = permute(in, perm): out flat index -> in flat index.
inline std::vector<std::size_t> permutation_index(const Shape &in, const std::vector<std::size_t> &perm, Shape &out) {
    const std::size_t r = in.size();
    if (perm.size() != r) {
        throw DimensionError("permute: permutation rank does not match " + shape_str(in));
    }
    std::vector<bool> seen(r, false);
    for (std::size_t p : perm) {
        if (p >= r || seen[p]) {
            throw DimensionError("permute: invalid permutation for " + shape_str(in));
        }
        seen[p] = true;
    }
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * in[i];
    }
    out.resize(r);
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out[i] = in[perm[i]];
        stride[i] = in_stride[perm[i]];
    }
    const std::size_t n = shape_size(in);
    std::vector<std::size_t> index(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        index[flat] = src;
        for (std::size_t ax = r; ax-- > 0;) {
            src += stride[ax];
            if (++counter[ax] < out[ax]) {
                break;
            }
            src -= stride[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    return index;
}

} // namespace detail

/// Axis permutation: output axis i is input axis perm[i].
inline Var permute(Var a, const std::vector<std::size_t> &perm) {
    Shape out_shape;
    auto index = detail::permutation_index(a.shape(), perm, out_shape);
    Tensor out(out_shape);
    const Tensor &av = a.value();
    for (std::size_t i = 0; i < index.size(); ++i) {
        out[i] = av[index[i]];
    }
    return a.graph().record(std::move(out), {a}, [a, index = std::move(index)](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < index.size(); ++i) {
            (*ga)[index[i]] += gy[i];
        }
    });
}

/// Softmax over the last axis; each slice is shifted by its maximum first.
inline Var softmax_last(Var a) {
    const Tensor &av = a.value();
    if (av.rank() == 0) {
        throw DimensionError("softmax_last needs at least one axis");
    }
    const std::size_t n = av.shape().back();
    const std::size_t rows = av.size() / n;
    Tensor out(av.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double *x = av.data() + r * n;
        double *y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, x[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] *= inv;
        }
    }
    return a.graph().record(std::move(out), {a}, [a, n, rows](Graph &g, Var self) {
        const Tensor &y = g.value(self);
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t r = 0; r < rows; ++r) {
            const double *yr = y.data() + r * n;
            const double *gr = gy.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dot += yr[j] * gr[j];
            }
            double *out = ga->data() + r * n;
            for (std::size_t j = 0; j < n; ++j) {
                out[j] += yr[j] * (gr[j] - dot);
            }
        }
    });
}

/// Normalises each last-axis slice to zero mean and unit (population)
/// variance, then applies gain and bias of the slice's extent.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    if (!(eps > 0.0)) {
        throw ParameterError("layer_norm: eps must be positive");
    }
    detail::require_same_graph(x, gain);
    detail::require_same_graph(x, bias);
    const Tensor &xv = x.value();
    if (xv.rank() == 0) {
        throw DimensionError("layer_norm needs at least one axis");
    }
    const std::size_t n = xv.shape().back();
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
        throw DimensionError("layer_norm: gain/bias must have shape (" + std::to_string(n) + "), got " +
                             shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    const std::size_t rows = xv.size() / n;
    Tensor normed(xv.shape());
    std::vector<double> inv_std(rows);
    Tensor out(xv.shape());
    const Tensor &gv = gain.value();
    const Tensor &bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double *xr = xv.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += xr[j];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (xr[j] - mean) * (xr[j] - mean);
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mean) * inv_std[r];
            normed[r * n + j] = h;
            out[r * n + j] = h * gv[j] + bv[j];
        }
    }
    return x.graph().record(
        std::move(out), {x, gain, bias},
        [x, gain, bias, n, rows, normed = std::move(normed), inv_std = std::move(inv_std)](Graph &g, Var self) {
            const Tensor &gy = g.upstream(self);
            const Tensor &gv = g.value(gain);
            Tensor *gx = g.grad_sink(x);
            Tensor *gg = g.grad_sink(gain);
            Tensor *gb = g.grad_sink(bias);
            std::vector<double> dh(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const double *gr = gy.data() + r * n;
                const double *hr = normed.data() + r * n;
                if (gg) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*gg)[j] += gr[j] * hr[j];
                    }
                }
                if (gb) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*gb)[j] += gr[j];
                    }
                }
                if (gx) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dh[j] = gr[j] * gv[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * hr[j];
                    }
                    mean_dh /= static_cast<double>(n);
                    mean_dh_h /= static_cast<double>(n);
                    double *out = gx->data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        out[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
        });
}

inline std::size_t conv1d_output_length(std::size_t input, std::size_t kernel, std::size_t stride) {
    if (stride == 0) {
        throw ParameterError("conv1d: stride must be positive");
    }
    if (kernel == 0 || kernel > input) {
        throw DimensionError("conv1d: kernel size " + std::to_string(kernel) + " exceeds input length " +
                             std::to_string(input));
    }
    return (input - kernel) / stride + 1;
}

/// Valid (unpadded) cross-correlation along the last axis.
/// x: (B, C_in, M); kernel: (C_out, C_in, s); bias: (C_out) or an invalid Var.
inline Var conv1d(Var x, Var kernel, Var bias, std::size_t stride = 1) {
    detail::require_same_graph(x, kernel);
    const Shape &xs = x.shape();
    const Shape &ks = kernel.shape();
    if (xs.size() != 3 || ks.size() != 3 || ks[1] != xs[1]) {
        throw DimensionError("conv1d: expected input (B, C_in, M) and kernel (C_out, C_in, s), got " + shape_str(xs) +
                             " and " + shape_str(ks));
    }
    const bool has_bias = bias.valid();
    if (has_bias) {
        detail::require_same_graph(x, bias);
        if (bias.shape() != Shape{ks[0]}) {
            throw DimensionError("conv1d: bias shape " + shape_str(bias.shape()) + " does not match " +
                                 std::to_string(ks[0]) + " output channels");
        }
    }
    const std::size_t B = xs[0], cin = xs[1], M = xs[2], cout = ks[0], s = ks[2];
    const std::size_t L = conv1d_output_length(M, s, stride);
    const std::size_t rows = B * L, width = cin * s;
    // im2col: row (b, t) holds x[b, c, t·stride + k] at column c·s + k
    auto cols = std::make_shared<std::vector<double>>(rows * width);
    const Tensor &xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            double *row = cols->data() + (b * L + t) * width;
            for (std::size_t c = 0; c < cin; ++c) {
                std::copy_n(xv.data() + (b * cin + c) * M + t * stride, s, row + c * s);
            }
        }
    }
    std::vector<double> yt(rows * cout, 0.0);
    detail::gemm_nt(cols->data(), kernel.value().data(), yt.data(), rows, width, cout);
    Tensor out({B, cout, L});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            const double bo = has_bias ? bias.value()[o] : 0.0;
            double *y = out.data() + (b * cout + o) * L;
            for (std::size_t t = 0; t < L; ++t) {
                y[t] = yt[(b * L + t) * cout + o] + bo;
            }
        }
    }
    std::vector<Var> inputs{x, kernel};
    if (has_bias) {
        inputs.push_back(bias);
    }
    return x.graph().record(std::move(out), inputs,
                            [x, kernel, bias, has_bias, cols, B, cin, M, cout, s, L, stride](Graph &g, Var self) {
        const std::size_t rows = B * L, width = cin * s;
        const Tensor &gy = g.upstream(self);
        std::vector<double> dyt(rows * cout);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t o = 0; o < cout; ++o) {
                const double *dy = gy.data() + (b * cout + o) * L;
                for (std::size_t t = 0; t < L; ++t) {
                    dyt[(b * L + t) * cout + o] = dy[t];
                }
            }
        }
        if (Tensor *gb = has_bias ? g.grad_sink(bias) : nullptr) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t o = 0; o < cout; ++o) {
                    (*gb)[o] += dyt[r * cout + o];
                }
            }
        }
        if (Tensor *gk = g.grad_sink(kernel)) {
            detail::gemm_tn(dyt.data(), cols->data(), gk->data(), rows, cout, width);
        }
        if (Tensor *gx = g.grad_sink(x)) {
            std::vector<double> dcols(rows * width, 0.0);
            detail::gemm_nn(dyt.data(), g.value(kernel).data(), dcols.data(), rows, cout, width);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t t = 0; t < L; ++t) {
                    const double *row = dcols.data() + (b * L + t) * width;
                    for (std::size_t c = 0; c < cin; ++c) {
                        double *dx = gx->data() + (b * cin + c) * M + t * stride;
                        for (std::size_t k = 0; k < s; ++k) {
                            dx[k] += row[c * s + k];
                        }
                    }
                }
            }
        }
    });
}

inline Var tanh(Var a) {
    Tensor out = detail::map_unary(a.value(), [](double v) { return std::tanh(v); });
    return a.graph().record(std::move(out), {a}, [a](Graph &g, Var self) {
        const Tensor &y = g.value(self);
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < y.size(); ++i) {
            (*ga)[i] += gy[i] * (1.0 - y[i] * y[i]);
        }
    });
}

inline Var sigmoid(Var a) {
    Tensor out = detail::map_unary(a.value(), [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    });
    return a.graph().record(std::move(out), {a}, [a](Graph &g, Var self) {
        const Tensor &y = g.value(self);
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < y.size(); ++i) {
            (*ga)[i] += gy[i] * y[i] * (1.0 - y[i]);
        }
    });
}

inline Var relu(Var a) {
    Tensor out = detail::map_unary(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
    return a.graph().record(std::move(out), {a}, [a](Graph &g, Var self) {
        const Tensor &x = g.value(a);
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x[i] > 0.0) {
                (*ga)[i] += gy[i];
            }
        }
    });
}

/// Non-overlapping average pooling along the last axis; a trailing partial
/// window is dropped.
inline Var avg_pool_last(Var a, std::size_t window) {
    if (window == 0) {
        throw ParameterError("avg_pool_last: window must be positive");
    }
    const Shape &as = a.shape();
    if (as.empty() || as.back() < window) {
        throw DimensionError("avg_pool_last: window " + std::to_string(window) + " longer than last axis of " +
                             shape_str(as));
    }
    const std::size_t M = as.back();
    const std::size_t L = M / window;
    const std::size_t rows = a.size() / M;
    Shape os = as;
    os.back() = L;
    Tensor out(os);
    const double inv = 1.0 / static_cast<double>(window);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t t = 0; t < L; ++t) {
            double s = 0.0;
            for (std::size_t w = 0; w < window; ++w) {
                s += a.value()[r * M + t * window + w];
            }
            out[r * L + t] = s * inv;
        }
    }
    return a.graph().record(std::move(out), {a}, [a, M, L, rows, window, inv](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < L; ++t) {
                for (std::size_t w = 0; w < window; ++w) {
                    (*ga)[r * M + t * window + w] += gy[r * L + t] * inv;
                }
            }
        }
    });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var> &parts, std::size_t axis) {
    if (parts.empty()) {
        throw ContractError("concat of an empty list");
    }
    const Shape &first = parts.front().shape();
    if (axis >= first.size()) {
        throw DimensionError("concat: axis out of range for " + shape_str(first));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= first[i];
    }
    for (std::size_t i = axis + 1; i < first.size(); ++i) {
        inner *= first[i];
    }
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const Var &p : parts) {
        detail::require_same_graph(parts.front(), p);
        const Shape &s = p.shape();
        if (s.size() != first.size()) {
            throw DimensionError("concat: rank mismatch");
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != first[i]) {
                throw DimensionError("concat: extent mismatch " + shape_str(first) + " vs " + shape_str(s));
            }
        }
        extents.push_back(s[axis]);
        total += s[axis];
    }
    Shape os = first;
    os[axis] = total;
    Tensor out(os);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor &v = parts[p].value();
        const std::size_t chunk = extents[p] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(v.data() + o * chunk, chunk, out.data() + o * total * inner + offset * inner);
        }
        offset += extents[p];
    }
    return parts.front().graph().record(std::move(out), parts, [parts, extents, outer, inner, total](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const std::size_t chunk = extents[p] * inner;
            if (Tensor *gp = g.grad_sink(parts[p])) {
                for (std::size_t o = 0; o < outer; ++o) {
                    const double *src = gy.data() + o * total * inner + offset * inner;
                    double *dst = gp->data() + o * chunk;
                    for (std::size_t i = 0; i < chunk; ++i) {
                        dst[i] += src[i];
                    }
                }
            }
            offset += extents[p];
        }
    });
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape &as = a.shape();
    if (axis >= as.size() || begin >= end || end > as[axis]) {
        throw DimensionError("slice: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") on axis " + std::to_string(axis) + " of " + shape_str(as));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= as[i];
    }
    for (std::size_t i = axis + 1; i < as.size(); ++i) {
        inner *= as[i];
    }
    const std::size_t full = as[axis];
    const std::size_t len = end - begin;
    Shape os = as;
    os[axis] = len;
    Tensor out(os);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a.value().data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
    }
    return a.graph().record(std::move(out), {a}, [a, outer, inner, full, len, begin](Graph &g, Var self) {
        const Tensor &gy = g.upstream(self);
        Tensor *ga = g.grad_sink(a);
        for (std::size_t o = 0; o < outer; ++o) {
            const double *src = gy.data() + o * len * inner;
            double *dst = ga->data() + (o * full + begin) * inner;
            for (std::size_t i = 0; i < len * inner; ++i) {
                dst[i] += src[i];
            }
        }
    });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) {
        s += v;
    }
    return a.graph().record(Tensor::scalar(s), {a}, [a](Graph &g, Var self) {
        const double gy = g.upstream(self)[0];
        Tensor *ga = g.grad_sink(a);
        for (std::size_t i = 0; i < ga->size(); ++i) {
            (*ga)[i] += gy;
        }
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Mean Huber loss: 0.5e² for |e| ≤ delta, delta(|e| − delta/2) beyond.
inline Var huber_loss(Var pred, Var target, double delta = 1.0) {
    detail::require_same_graph(pred, target);
    if (!(delta > 0.0)) {
        throw ParameterError("huber_loss: delta must be positive");
    }
    pred.value().require_same_shape(target.value(), "huber_loss");
    const Tensor &p = pred.value();
    const Tensor &t = target.value();
    const double n = static_cast<double>(p.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double e = std::abs(p[i] - t[i]);
        acc += e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
    }
    return pred.graph().record(Tensor::scalar(acc / n), {pred, target}, [pred, target, delta, n](Graph &g, Var self) {
        const double gy = g.upstream(self)[0] / n;
        const Tensor &p = g.value(pred);
        const Tensor &t = g.value(target);
        Tensor *gp = g.grad_sink(pred);
        Tensor *gt = g.grad_sink(target);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double e = p[i] - t[i];
            const double d = std::abs(e) <= delta ? e : (e > 0 ? delta : -delta);
            if (gp) {
                (*gp)[i] += gy * d;
            }
            if (gt) {
                (*gt)[i] -= gy * d;
            }
        }
    });
}

} // namespace wdstagnn
