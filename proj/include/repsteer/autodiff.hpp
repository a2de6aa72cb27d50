#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "repsteer/errors.hpp"
#include "repsteer/tensor.hpp"

namespace repsteer {

enum class OpKind : std::uint8_t {
    constant,
    parameter,
    add,
    sub,
    mul,
    scale,
    add_rowvec,
    matmul,
    matmul_nt,
    softmax_rows,
    layernorm,
    gelu,
    gather_rows,
    row_norms,
    normalize_rows,
    mean,
    sum,
    slice_rows,
    slice_cols,
    concat_cols,
    reshape,
    cross_entropy,
    detach,
};

inline std::string_view op_name(OpKind k) {
    switch (k) {
        case OpKind::constant: return "constant";
        case OpKind::parameter: return "parameter";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::add_rowvec: return "add_rowvec";
        case OpKind::matmul: return "matmul";
        case OpKind::matmul_nt: return "matmul_nt";
        case OpKind::softmax_rows: return "softmax_rows";
        case OpKind::layernorm: return "layernorm";
        case OpKind::gelu: return "gelu";
        case OpKind::gather_rows: return "gather_rows";
        case OpKind::row_norms: return "row_norms";
        case OpKind::normalize_rows: return "normalize_rows";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::slice_rows: return "slice_rows";
        case OpKind::slice_cols: return "slice_cols";
        case OpKind::concat_cols: return "concat_cols";
        case OpKind::reshape: return "reshape";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::detach: return "detach";
    }
    return "?";
}

// Handle to a node inside one Graph.
struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    friend bool operator==(Var, Var) = default;
    friend auto operator<=>(Var, Var) = default;
};

template <typename T>
using GradientMap = std::map<std::size_t, Array<T>>;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
MapC<T> mat(const Array<T>& a) {
    return MapC<T>(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}
template <typename T>
MapM<T> mat(Array<T>& a) {
    return MapM<T>(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

inline void require_matrix(const Shape& s, std::string_view op) {
    if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}

template <typename T>
constexpr T gelu_c = T(0.7978845608028654);  // sqrt(2/pi)

}  // namespace detail

// Append-only tape. Every node's inputs precede it, so reverse insertion order
// is a valid topological order for the backward sweep.
template <typename T>
class Graph {
public:
    using Backward = std::function<void(const Graph&, std::size_t self, const Array<T>& grad_out,
                                        std::vector<Array<T>>& grads)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) noexcept = default;
    Graph& operator=(Graph&&) noexcept = default;

    // Leaves ------------------------------------------------------------------

    Var constant(Array<T> value) { return push_leaf(OpKind::constant, std::move(value), nullptr, false); }

    // Non-owning leaf; `value` must outlive the graph.
    Var constant_ref(const Array<T>& value) { return push_leaf(OpKind::constant, Array<T>{}, &value, false); }

    Var parameter(Array<T> value) { return push_leaf(OpKind::parameter, std::move(value), nullptr, true); }

    Var parameter_ref(const Array<T>& value) { return push_leaf(OpKind::parameter, Array<T>{}, &value, true); }

    // Accessors ---------------------------------------------------------------

    const Array<T>& value(Var v) const { return node(v.id).value(); }
    const Shape& shape(Var v) const { return value(v).shape(); }
    OpKind kind(Var v) const { return node(v.id).kind; }
    const std::vector<std::size_t>& inputs(Var v) const { return node(v.id).inputs; }
    bool requires_grad(Var v) const { return node(v.id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    std::vector<Var> parameters() const {
        std::vector<Var> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].kind == OpKind::parameter) out.push_back(Var{i});
        }
        return out;
    }

    // Elementwise -------------------------------------------------------------

    Var add(Var a, Var b) {
        same_shape(a, b, "add");
        Array<T> out = value(a);
        const auto& bv = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return push(OpKind::add, {a.id, b.id}, std::move(out),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        g.accumulate(grads, in[0], go);
                        g.accumulate(grads, in[1], go);
                    });
    }

    Var sub(Var a, Var b) {
        same_shape(a, b, "sub");
        Array<T> out = value(a);
        const auto& bv = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return push(OpKind::sub, {a.id, b.id}, std::move(out),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        g.accumulate(grads, in[0], go);
                        g.accumulate_scaled(grads, in[1], go, T{-1});
                    });
    }

    Var mul(Var a, Var b) {
        same_shape(a, b, "mul");
        Array<T> out = value(a);
        const auto& bv = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return push(OpKind::mul, {a.id, b.id}, std::move(out),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        const auto& av = g.nodes_[in[0]].value();
                        const auto& bv = g.nodes_[in[1]].value();
                        if (g.nodes_[in[0]].requires_grad) {
                            Array<T>& ga = g.grad_slot(grads, in[0]);
                            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
                        }
                        if (g.nodes_[in[1]].requires_grad) {
                            Array<T>& gb = g.grad_slot(grads, in[1]);
                            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
                        }
                    });
    }

    Var scale(Var a, T c) {
        Array<T> out = value(a);
        for (auto& v : out.storage()) v *= c;
        return push(OpKind::scale, {a.id}, std::move(out),
                    [c](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        g.accumulate_scaled(grads, g.nodes_[self].inputs[0], go, c);
                    });
    }

    // x[m,n] + b[n] broadcast over rows.
    Var add_rowvec(Var x, Var b) {
        detail::require_matrix(shape(x), "add_rowvec");
        const std::size_t m = shape(x)[0], n = shape(x)[1];
        if (shape(b) != Shape{n}) throw ShapeError("add_rowvec: bias shape " + shape_str(shape(b)));
        Array<T> out = value(x);
        const auto& bv = value(b);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
        return push(OpKind::add_rowvec, {x.id, b.id}, std::move(out),
                    [m, n](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        g.accumulate(grads, in[0], go);
                        if (g.nodes_[in[1]].requires_grad) {
                            Array<T>& gb = g.grad_slot(grads, in[1]);
                            for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
                        }
                    });
    }

    // Linear algebra ----------------------------------------------------------

    // a[m,k] * b[k,n]
    Var matmul(Var a, Var b) {
        detail::require_matrix(shape(a), "matmul");
        detail::require_matrix(shape(b), "matmul");
        const std::size_t m = shape(a)[0], k = shape(a)[1], n = shape(b)[1];
        if (shape(b)[0] != k) {
            throw ShapeError("matmul: " + shape_str(shape(a)) + " x " + shape_str(shape(b)));
        }
        Array<T> out(Shape{m, n}, uninitialized);
        detail::mat(out).noalias() = detail::mat(value(a)) * detail::mat(value(b));
        return push(OpKind::matmul, {a.id, b.id}, std::move(out),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        const auto& av = g.nodes_[in[0]].value();
                        const auto& bv = g.nodes_[in[1]].value();
                        if (g.nodes_[in[0]].requires_grad) {
                            Array<T>& ga = g.grad_slot(grads, in[0]);
                            detail::mat(ga).noalias() += detail::mat(go) * detail::mat(bv).transpose();
                        }
                        if (g.nodes_[in[1]].requires_grad) {
                            Array<T>& gb = g.grad_slot(grads, in[1]);
                            detail::mat(gb).noalias() += detail::mat(av).transpose() * detail::mat(go);
                        }
                    });
    }

    // a[m,k] * b[n,k]^T
    Var matmul_nt(Var a, Var b) {
        detail::require_matrix(shape(a), "matmul_nt");
        detail::require_matrix(shape(b), "matmul_nt");
        const std::size_t m = shape(a)[0], k = shape(a)[1], n = shape(b)[0];
        if (shape(b)[1] != k) {
            throw ShapeError("matmul_nt: " + shape_str(shape(a)) + " x " + shape_str(shape(b)) + "^T");
        }
        Array<T> out(Shape{m, n}, uninitialized);
        detail::mat(out).noalias() = detail::mat(value(a)) * detail::mat(value(b)).transpose();
        return push(OpKind::matmul_nt, {a.id, b.id}, std::move(out),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        const auto& av = g.nodes_[in[0]].value();
                        const auto& bv = g.nodes_[in[1]].value();
                        if (g.nodes_[in[0]].requires_grad) {
                            Array<T>& ga = g.grad_slot(grads, in[0]);
                            detail::mat(ga).noalias() += detail::mat(go) * detail::mat(bv);
                        }
                        if (g.nodes_[in[1]].requires_grad) {
                            Array<T>& gb = g.grad_slot(grads, in[1]);
                            detail::mat(gb).noalias() += detail::mat(go).transpose() * detail::mat(av);
                        }
                    });
    }

    // Row softmax with max subtraction. With `causal`, row r only sees columns
    // 0..r (columns beyond get probability 0).
    Var softmax_rows(Var x, bool causal = false) {
        detail::require_matrix(shape(x), "softmax_rows");
        const std::size_t m = shape(x)[0], n = shape(x)[1];
        const auto& xv = value(x);
        Array<T> out(Shape{m, n});
        for (std::size_t r = 0; r < m; ++r) {
            const std::size_t lim = causal ? std::min(n, r + 1) : n;
            T mx = xv[r * n];
            for (std::size_t c = 1; c < lim; ++c) mx = std::max(mx, xv[r * n + c]);
            T total{0};
            for (std::size_t c = 0; c < lim; ++c) {
                const T e = std::exp(xv[r * n + c] - mx);
                out[r * n + c] = e;
                total += e;
            }
            for (std::size_t c = 0; c < lim; ++c) out[r * n + c] /= total;
        }
        return push(OpKind::softmax_rows, {x.id}, std::move(out),
                    [m, n](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        const auto& y = g.nodes_[self].value();
                        Array<T>& gx = g.grad_slot(grads, in0);
                        for (std::size_t r = 0; r < m; ++r) {
                            T dot{0};
                            for (std::size_t c = 0; c < n; ++c) dot += go[r * n + c] * y[r * n + c];
                            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (go[r * n + c] - dot);
                        }
                    });
    }

    // Layer normalization over the last axis of x[m,n] with affine gamma/beta[n].
    Var layernorm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        detail::require_matrix(shape(x), "layernorm");
        const std::size_t m = shape(x)[0], n = shape(x)[1];
        if (shape(gamma) != Shape{n} || shape(beta) != Shape{n}) throw ShapeError("layernorm: affine shape");
        const auto& xv = value(x);
        const auto& gv = value(gamma);
        const auto& bv = value(beta);
        Array<T> out(Shape{m, n});
        auto xhat = std::make_shared<std::vector<T>>(m * n);
        auto inv_std = std::make_shared<std::vector<T>>(m);
        for (std::size_t r = 0; r < m; ++r) {
            T mu{0};
            for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
            mu /= T(n);
            T var{0};
            for (std::size_t c = 0; c < n; ++c) {
                const T d = xv[r * n + c] - mu;
                var += d * d;
            }
            var /= T(n);
            const T is = T(1) / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t c = 0; c < n; ++c) {
                const T h = (xv[r * n + c] - mu) * is;
                (*xhat)[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        return push(OpKind::layernorm, {x.id, gamma.id, beta.id}, std::move(out),
                    [m, n, xhat, inv_std](const Graph& g, std::size_t self, const Array<T>& go,
                                          std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        const auto& gv = g.nodes_[in[1]].value();
                        if (g.nodes_[in[1]].requires_grad) {
                            Array<T>& gg = g.grad_slot(grads, in[1]);
                            for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t c = 0; c < n; ++c) gg[c] += go[r * n + c] * (*xhat)[r * n + c];
                        }
                        if (g.nodes_[in[2]].requires_grad) {
                            Array<T>& gb = g.grad_slot(grads, in[2]);
                            for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
                        }
                        if (g.nodes_[in[0]].requires_grad) {
                            Array<T>& gx = g.grad_slot(grads, in[0]);
                            for (std::size_t r = 0; r < m; ++r) {
                                T mean_d{0}, mean_dx{0};
                                for (std::size_t c = 0; c < n; ++c) {
                                    const T d = go[r * n + c] * gv[c];
                                    mean_d += d;
                                    mean_dx += d * (*xhat)[r * n + c];
                                }
                                mean_d /= T(n);
                                mean_dx /= T(n);
                                for (std::size_t c = 0; c < n; ++c) {
                                    const T d = go[r * n + c] * gv[c];
                                    gx[r * n + c] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * n + c] * mean_dx);
                                }
                            }
                        }
                    });
    }

    // tanh-approximated GELU.
    Var gelu(Var x) {
        using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
        const auto& xv = value(x);
        const Eigen::Index n = static_cast<Eigen::Index>(xv.size());
        Eigen::Map<const Vec> xm(xv.data(), n);
        auto th = std::make_shared<Vec>((detail::gelu_c<T> * (xm + T(0.044715) * xm.cube())).tanh());
        Array<T> out(xv.shape(), uninitialized);
        Eigen::Map<Vec>(out.data(), n) = T(0.5) * xm * (T(1) + *th);
        return push(OpKind::gelu, {x.id}, std::move(out),
                    [th](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        const auto& xv = g.nodes_[in0].value();
                        const Eigen::Index n = static_cast<Eigen::Index>(xv.size());
                        Eigen::Map<const Vec> xm(xv.data(), n);
                        Eigen::Map<const Vec> gm(go.data(), n);
                        Array<T>& gx = g.grad_slot(grads, in0);
                        const Vec& t = *th;
                        const Vec du = detail::gelu_c<T> * (T(1) + T(3 * 0.044715) * xm.square());
                        Eigen::Map<Vec>(gx.data(), n) += gm * (T(0.5) * (T(1) + t) + T(0.5) * xm * (T(1) - t.square()) * du);
                    });
    }

    // Embedding lookup: rows of table[V,d] selected by ids -> [ids.size(), d].
    Var gather_rows(Var table, std::span<const int> ids) {
        detail::require_matrix(shape(table), "gather_rows");
        const std::size_t v = shape(table)[0], d = shape(table)[1];
        auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
        Array<T> out(Shape{idx->size(), d});
        const auto& tv = value(table);
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const int id = (*idx)[i];
            if (id < 0 || static_cast<std::size_t>(id) >= v) {
                throw DataError("gather_rows: index " + std::to_string(id) + " out of range [0," +
                                std::to_string(v) + ")");
            }
            std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
        }
        return push(OpKind::gather_rows, {table.id}, std::move(out),
                    [idx, d](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gt = g.grad_slot(grads, in0);
                        for (std::size_t i = 0; i < idx->size(); ++i) {
                            T* dst = gt.data() + static_cast<std::size_t>((*idx)[i]) * d;
                            for (std::size_t c = 0; c < d; ++c) dst[c] += go[i * d + c];
                        }
                    });
    }

    // Reductions and norms ----------------------------------------------------

    // Euclidean norm of every row of x[m,n] -> [m]. The subgradient at a zero
    // row is taken as 0.
    Var row_norms(Var x) {
        detail::require_matrix(shape(x), "row_norms");
        const std::size_t m = shape(x)[0], n = shape(x)[1];
        const auto& xv = value(x);
        Array<T> out(Shape{m});
        for (std::size_t r = 0; r < m; ++r) {
            T ss{0};
            for (std::size_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
            out[r] = std::sqrt(ss);
        }
        return push(OpKind::row_norms, {x.id}, std::move(out),
                    [m, n](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        const auto& xv = g.nodes_[in0].value();
                        const auto& y = g.nodes_[self].value();
                        Array<T>& gx = g.grad_slot(grads, in0);
                        for (std::size_t r = 0; r < m; ++r) {
                            if (y[r] == T{0}) continue;
                            const T s = go[r] / y[r];
                            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += s * xv[r * n + c];
                        }
                    });
    }

    // Scale every row of x[m,n] to unit Euclidean norm.
    Var normalize_rows(Var x) {
        detail::require_matrix(shape(x), "normalize_rows");
        const std::size_t m = shape(x)[0], n = shape(x)[1];
        const auto& xv = value(x);
        Array<T> out(Shape{m, n});
        auto norms = std::make_shared<std::vector<T>>(m);
        for (std::size_t r = 0; r < m; ++r) {
            T ss{0};
            for (std::size_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
            const T nr = std::sqrt(ss);
            if (nr == T{0}) throw NumericError("normalize_rows: zero-norm row " + std::to_string(r));
            (*norms)[r] = nr;
            for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] / nr;
        }
        return push(OpKind::normalize_rows, {x.id}, std::move(out),
                    [m, n, norms](const Graph& g, std::size_t self, const Array<T>& go,
                                  std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        const auto& y = g.nodes_[self].value();
                        Array<T>& gx = g.grad_slot(grads, in0);
                        for (std::size_t r = 0; r < m; ++r) {
                            T dot{0};
                            for (std::size_t c = 0; c < n; ++c) dot += go[r * n + c] * y[r * n + c];
                            const T inv = T(1) / (*norms)[r];
                            for (std::size_t c = 0; c < n; ++c)
                                gx[r * n + c] += inv * (go[r * n + c] - dot * y[r * n + c]);
                        }
                    });
    }

    Var sum(Var x) {
        T total{0};
        for (const T v : value(x).flat()) total += v;
        return push(OpKind::sum, {x.id}, Array<T>::scalar(total),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gx = g.grad_slot(grads, in0);
                        for (auto& v : gx.storage()) v += go[0];
                    });
    }

    Var mean(Var x) {
        const auto& xv = value(x);
        if (xv.size() == 0) throw ShapeError("mean of empty array");
        T total{0};
        for (const T v : xv.flat()) total += v;
        const T count = T(xv.size());
        return push(OpKind::mean, {x.id}, Array<T>::scalar(total / count),
                    [count](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gx = g.grad_slot(grads, in0);
                        const T s = go[0] / count;
                        for (auto& v : gx.storage()) v += s;
                    });
    }

    // Mean token cross-entropy of logits[L,V] against targets; entries < 0 are ignored.
    Var cross_entropy(Var logits, std::span<const int> targets) {
        detail::require_matrix(shape(logits), "cross_entropy");
        const std::size_t m = shape(logits)[0], n = shape(logits)[1];
        if (targets.size() != m) throw ShapeError("cross_entropy: target count mismatch");
        auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
        auto probs = std::make_shared<std::vector<T>>(m * n);
        const auto& lv = value(logits);
        T total{0};
        std::size_t count = 0;
        for (std::size_t r = 0; r < m; ++r) {
            const int t = (*tg)[r];
            if (t < 0) continue;
            if (static_cast<std::size_t>(t) >= n) throw DataError("cross_entropy: target out of range");
            T mx = lv[r * n];
            for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, lv[r * n + c]);
            T z{0};
            for (std::size_t c = 0; c < n; ++c) {
                const T e = std::exp(lv[r * n + c] - mx);
                (*probs)[r * n + c] = e;
                z += e;
            }
            for (std::size_t c = 0; c < n; ++c) (*probs)[r * n + c] /= z;
            total += -(lv[r * n + static_cast<std::size_t>(t)] - mx - std::log(z));
            ++count;
        }
        if (count == 0) throw DataError("cross_entropy: no targets");
        const T denom = T(count);
        return push(OpKind::cross_entropy, {logits.id}, Array<T>::scalar(total / denom),
                    [m, n, tg, probs, denom](const Graph& g, std::size_t self, const Array<T>& go,
                                             std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gx = g.grad_slot(grads, in0);
                        const T s = go[0] / denom;
                        for (std::size_t r = 0; r < m; ++r) {
                            const int t = (*tg)[r];
                            if (t < 0) continue;
                            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += s * (*probs)[r * n + c];
                            gx[r * n + static_cast<std::size_t>(t)] -= s;
                        }
                    });
    }

    // Structural --------------------------------------------------------------

    Var slice_rows(Var x, std::size_t begin, std::size_t end) {
        const Shape& s = shape(x);
        if (s.empty() || begin >= end || end > s[0]) {
            throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_str(s));
        }
        const std::size_t row = shape_size(s) / s[0];
        Shape os = s;
        os[0] = end - begin;
        const auto& xv = value(x);
        Array<T> out(os);
        std::copy_n(xv.data() + begin * row, (end - begin) * row, out.data());
        return push(OpKind::slice_rows, {x.id}, std::move(out),
                    [begin, row](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gx = g.grad_slot(grads, in0);
                        T* dst = gx.data() + begin * row;
                        for (std::size_t i = 0; i < go.size(); ++i) dst[i] += go[i];
                    });
    }

    Var slice_cols(Var x, std::size_t begin, std::size_t end) {
        detail::require_matrix(shape(x), "slice_cols");
        const std::size_t m = shape(x)[0], n = shape(x)[1];
        if (begin >= end || end > n) throw ShapeError("slice_cols out of range");
        const std::size_t w = end - begin;
        const auto& xv = value(x);
        Array<T> out(Shape{m, w});
        for (std::size_t r = 0; r < m; ++r) std::copy_n(xv.data() + r * n + begin, w, out.data() + r * w);
        return push(OpKind::slice_cols, {x.id}, std::move(out),
                    [m, n, begin, w](const Graph& g, std::size_t self, const Array<T>& go,
                                     std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gx = g.grad_slot(grads, in0);
                        for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < w; ++c) gx[r * n + begin + c] += go[r * w + c];
                    });
    }

    Var concat_cols(std::span<const Var> parts) {
        if (parts.empty()) throw ShapeError("concat_cols of nothing");
        const std::size_t m = shape(parts[0])[0];
        std::vector<std::size_t> ids, widths;
        std::size_t n = 0;
        for (const Var p : parts) {
            detail::require_matrix(shape(p), "concat_cols");
            if (shape(p)[0] != m) throw ShapeError("concat_cols: row mismatch");
            ids.push_back(p.id);
            widths.push_back(shape(p)[1]);
            n += shape(p)[1];
        }
        Array<T> out(Shape{m, n});
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const auto& pv = value(parts[k]);
            for (std::size_t r = 0; r < m; ++r) std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * n + off);
            off += widths[k];
        }
        return push(OpKind::concat_cols, std::move(ids), std::move(out),
                    [m, n, widths](const Graph& g, std::size_t self, const Array<T>& go,
                                   std::vector<Array<T>>& grads) {
                        const auto& in = g.nodes_[self].inputs;
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < in.size(); ++k) {
                            if (g.nodes_[in[k]].requires_grad) {
                                Array<T>& gp = g.grad_slot(grads, in[k]);
                                for (std::size_t r = 0; r < m; ++r)
                                    for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += go[r * n + off + c];
                            }
                            off += widths[k];
                        }
                    });
    }

    Var reshape(Var x, Shape s) {
        Array<T> out = value(x).reshaped(std::move(s));
        return push(OpKind::reshape, {x.id}, std::move(out),
                    [](const Graph& g, std::size_t self, const Array<T>& go, std::vector<Array<T>>& grads) {
                        const auto in0 = g.nodes_[self].inputs[0];
                        if (!g.nodes_[in0].requires_grad) return;
                        Array<T>& gx = g.grad_slot(grads, in0);
                        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
                    });
    }

    // Value passes through; no gradient flows back.
    Var detach(Var x) {
        Var out = push(OpKind::detach, {x.id}, value(x), nullptr);
        nodes_[out.id].requires_grad = false;
        return out;
    }

    // Backward ----------------------------------------------------------------

    // Gradient of the scalar `loss` with respect to every parameter node.
    // Parameters the loss does not depend on get an all-zero entry.
    GradientMap<T> backward(Var loss) const {
        const auto& lv = value(loss);
        if (!lv.shape().empty()) throw ShapeError("backward: loss must be a scalar, got " + shape_str(lv.shape()));
        std::vector<Array<T>> grads(loss.id + 1, Array<T>(Shape{0}));
        if (nodes_[loss.id].requires_grad) {
            grads[loss.id] = Array<T>::scalar(T{1});
            for (std::size_t i = loss.id + 1; i-- > 0;) {
                const Node& nd = nodes_[i];
                if (!nd.requires_grad || !nd.backward || !allocated_(grads[i], nd)) continue;
                nd.backward(*this, i, grads[i], grads);
            }
        }
        GradientMap<T> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].kind != OpKind::parameter) continue;
            if (i <= loss.id && allocated_(grads[i], nodes_[i])) {
                out.emplace(i, std::move(grads[i]));
            } else {
                out.emplace(i, Array<T>(nodes_[i].value().shape()));
            }
        }
        return out;
    }

private:
    struct Node {
        OpKind kind = OpKind::constant;
        std::vector<std::size_t> inputs;
        Array<T> owned;
        const Array<T>* view = nullptr;
        bool requires_grad = false;
        Backward backward;

        const Array<T>& value() const { return view ? *view : owned; }
    };

    // Gradient slots start as shape [0] placeholders.
    static bool allocated_(const Array<T>& slot, const Node& nd) { return slot.shape() == nd.value().shape(); }

    const Node& node(std::size_t id) const {
        if (id >= nodes_.size()) throw ShapeError("invalid node id " + std::to_string(id));
        return nodes_[id];
    }

    void same_shape(Var a, Var b, std::string_view op) const {
        if (shape(a) != shape(b)) {
            throw ShapeError(std::string(op) + ": " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
        }
    }

    Var push_leaf(OpKind kind, Array<T> owned, const Array<T>* view, bool param) {
        const Array<T>& v = view ? *view : owned;
        if (!v.all_finite()) throw NumericError("leaf holds non-finite values");
        Node nd;
        nd.kind = kind;
        nd.owned = std::move(owned);
        nd.view = view;
        nd.requires_grad = param;
        nodes_.push_back(std::move(nd));
        return Var{nodes_.size() - 1};
    }

    Var push(OpKind kind, std::vector<std::size_t> inputs, Array<T> out, Backward bw) {
        if (!out.all_finite()) throw NumericError(std::string(op_name(kind)) + " produced non-finite values");
        Node nd;
        nd.kind = kind;
        for (const auto i : inputs) nd.requires_grad = nd.requires_grad || nodes_[i].requires_grad;
        nd.inputs = std::move(inputs);
        nd.owned = std::move(out);
        if (nd.requires_grad) nd.backward = std::move(bw);
        nodes_.push_back(std::move(nd));
        return Var{nodes_.size() - 1};
    }

    Array<T>& grad_slot(std::vector<Array<T>>& grads, std::size_t id) const {
        Array<T>& slot = grads[id];
        if (!allocated_(slot, nodes_[id])) slot = Array<T>(nodes_[id].value().shape());
        return slot;
    }

    void accumulate(std::vector<Array<T>>& grads, std::size_t id, const Array<T>& go) const {
        if (!nodes_[id].requires_grad) return;
        Array<T>& slot = grad_slot(grads, id);
        for (std::size_t i = 0; i < go.size(); ++i) slot[i] += go[i];
    }

    void accumulate_scaled(std::vector<Array<T>>& grads, std::size_t id, const Array<T>& go, T c) const {
        if (!nodes_[id].requires_grad) return;
        Array<T>& slot = grad_slot(grads, id);
        for (std::size_t i = 0; i < go.size(); ++i) slot[i] += c * go[i];
    }

    std::vector<Node> nodes_;
};

// Finite-difference gradient checking ---------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

template <typename T>
using MultiParamFn = std::function<Var(Graph<T>&, std::span<const Var>)>;

// Compares backward() against central differences for every coordinate of
// every parameter. Relative error denominator: max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckReport check_gradients(const MultiParamFn<T>& f, const std::vector<Array<T>>& params, double step,
                                double tol) {
    if (!(step > 0.0) || !(tol > 0.0)) throw ConfigError("check_gradients: step and tol must be positive");
    auto evaluate = [&](const std::vector<Array<T>>& ps) {
        Graph<T> g;
        std::vector<Var> vars;
        for (const auto& p : ps) vars.push_back(g.constant(p));
        const T v = g.value(f(g, vars)).item();
        if (!std::isfinite(v)) throw NumericError("check_gradients: non-finite probe value");
        return v;
    };

    Graph<T> g;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(g.parameter(p));
    const Var loss = f(g, vars);
    if (!std::isfinite(g.value(loss).item())) throw NumericError("check_gradients: non-finite value");
    const auto grads = g.backward(loss);

    GradCheckReport rep;
    std::vector<Array<T>> probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Array<T>& analytic = grads.at(vars[p].id);
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const T orig = probe[p][i];
            probe[p][i] = orig + T(step);
            const T up = evaluate(probe);
            probe[p][i] = orig - T(step);
            const T down = evaluate(probe);
            probe[p][i] = orig;
            const double numeric = (double(up) - double(down)) / (2.0 * step);
            const double a = double(analytic[i]);
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_param = p;
                rep.worst_index = i;
                rep.analytic_at_worst = a;
                rep.numeric_at_worst = numeric;
            }
        }
    }
    rep.pass = rep.max_rel_error <= tol;
    return rep;
}

template <typename T>
GradCheckReport check_gradients(const std::function<Var(Graph<T>&, Var)>& f, const Array<T>& params, double step,
                                double tol) {
    MultiParamFn<T> wrapped = [&f](Graph<T>& g, std::span<const Var> vs) { return f(g, vs[0]); };
    return check_gradients<T>(wrapped, std::vector<Array<T>>{params}, step, tol);
}

}  // namespace repsteer
