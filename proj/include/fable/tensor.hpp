#pragma once

// Dense double-precision tensors with a recorded forward tape and
// reverse-mode gradient propagation. The primitive set is closed:
// everything higher level is composed from the ops in this file.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fable {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct UnsupportedOpError : std::runtime_error {
    explicit UnsupportedOpError(const std::string& m) : std::runtime_error(m) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error(m) {}
};

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + ")";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> v;  // row-major values
    std::vector<double> g;  // gradient, same extent as v (empty until needed)
    bool requires_grad = false;
    const char* kind = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(Node&)> fwd;   // recomputes v from parents (replay)
    std::function<void(Node&)> back;  // accumulates into parents' g

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0);
    }
};

// Ordered record of primitive applications. Creation order is a valid
// topological order, so backward is a single reverse sweep.
struct Tape {
    std::vector<NodePtr> order;

    Tape() { push_scope(this); }
    ~Tape() { pop_scope(this); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active() {
        thread_local Tape* t = nullptr;
        return t;
    }

    // Re-executes every recorded application in order.
    void replay() {
        for (auto& n : order)
            if (n->fwd) n->fwd(*n);
    }

  private:
    static void push_scope(Tape* t) {
        t->prev_ = active();
        active() = t;
    }
    static void pop_scope(Tape* t) { active() = t->prev_; }
    Tape* prev_ = nullptr;
};

struct Tensor {
    NodePtr n;

    Tensor() = default;
    explicit Tensor(NodePtr p) : n(std::move(p)) {}

    static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("leaf: values length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->v = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(node);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(numel_of(shape)), 0.0);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }
    static Tensor scalar(double x) { return leaf({1}, {x}); }

    const Shape& shape() const { return n->shape; }
    int64_t numel() const { return n->numel(); }
    int dim(int i) const { return n->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(n->shape.size()); }
    double item() const {
        if (numel() != 1) throw ContractError("item(): tensor is not scalar-shaped");
        return n->v[0];
    }
    std::vector<double>& values() { return n->v; }
    const std::vector<double>& values() const { return n->v; }
    std::vector<double>& grad() { return n->g; }
    const std::vector<double>& grad() const { return n->g; }
    bool defined() const { return static_cast<bool>(n); }
    void zero_grad() { n->g.assign(n->v.size(), 0.0); }
};

namespace detail {

inline NodePtr make_op(const char* kind, Shape shape, std::vector<NodePtr> parents,
                       std::function<void(Node&)> fwd, std::function<void(Node&)> back) {
    auto node = std::make_shared<Node>();
    node->kind = kind;
    node->shape = std::move(shape);
    node->v.assign(static_cast<size_t>(numel_of(node->shape)), 0.0);
    node->requires_grad = false;
    for (auto& p : parents)
        if (p->requires_grad) node->requires_grad = true;
    node->parents = std::move(parents);
    node->fwd = std::move(fwd);
    node->fwd(*node);
    if (Tape* t = Tape::active()) {
        if (node->requires_grad) {
            node->back = std::move(back);
            node->ensure_grad();
        }
        t->order.push_back(node);
    }
    return node;
}

// C (m x n) = op(A) * op(B), where op transposes when the flag is set.
// Accumulates into C when acc is true.
inline void mm_kernel(const double* a, const double* b, double* c, int m, int k, int n,
                      bool ta, bool tb, bool acc) {
    if (!acc) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
    if (!ta && !tb) {
        for (int i = 0; i < m; ++i) {
            const double* ai = a + static_cast<size_t>(i) * k;
            double* ci = c + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const double aip = ai[p];
                const double* bp = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
            }
        }
    } else if (!ta && tb) {
        for (int i = 0; i < m; ++i) {
            const double* ai = a + static_cast<size_t>(i) * k;
            double* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* bj = b + static_cast<size_t>(j) * k;
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
                ci[j] += s;
            }
        }
    } else if (ta && !tb) {
        for (int p = 0; p < k; ++p) {
            const double* ap = a + static_cast<size_t>(p) * m;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const double api = ap[i];
                double* ci = c + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            double* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int p = 0; p < k; ++p)
                    s += a[static_cast<size_t>(p) * m + i] * b[static_cast<size_t>(j) * k + p];
                ci[j] += s;
            }
        }
    }
}

}  // namespace detail

// ---- primitives ----

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = trans_a ? a.dim(1) : a.dim(0);
    const int k = trans_a ? a.dim(0) : a.dim(1);
    const int kb = trans_b ? b.dim(1) : b.dim(0);
    const int n = trans_b ? b.dim(0) : b.dim(1);
    if (k != kb)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto an = a.n, bn = b.n;
    auto node = detail::make_op(
        "matmul", {m, n}, {an, bn},
        [an, bn, m, k, n, trans_a, trans_b](Node& out) {
            detail::mm_kernel(an->v.data(), bn->v.data(), out.v.data(), m, k, n, trans_a, trans_b,
                              false);
        },
        [an, bn, m, k, n, trans_a, trans_b](Node& out) {
            // dA = dC op(B)^T, dB = op(A)^T dC in the untransposed case;
            // transposed operands swap the roles accordingly.
            if (an->requires_grad) {
                an->ensure_grad();
                if (!trans_a)
                    detail::mm_kernel(out.g.data(), bn->v.data(), an->g.data(), m, n, k, false,
                                      !trans_b, true);
                else
                    detail::mm_kernel(bn->v.data(), out.g.data(), an->g.data(), k, n, m, trans_b,
                                      true, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (!trans_b)
                    detail::mm_kernel(an->v.data(), out.g.data(), bn->g.data(), k, m, n, !trans_a,
                                      false, true);
                else
                    detail::mm_kernel(out.g.data(), an->v.data(), bn->g.data(), n, m, k, true,
                                      trans_a, true);
            }
        });
    return Tensor(node);
}

// add supports equal shapes and broadcasting a rank-1 (d) vector over the
// rows of a rank-2 (n, d) matrix (bias addition).
inline Tensor add(const Tensor& a, const Tensor& b) {
    auto an = a.n, bn = b.n;
    const bool same = a.shape() == b.shape();
    const bool bias = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    if (!same && !bias)
        throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    auto node = detail::make_op(
        "add", a.shape(), {an, bn},
        [an, bn, same](Node& out) {
            const auto& av = an->v;
            const auto& bv = bn->v;
            if (same) {
                for (size_t i = 0; i < av.size(); ++i) out.v[i] = av[i] + bv[i];
            } else {
                const size_t d = bv.size();
                for (size_t i = 0; i < av.size(); ++i) out.v[i] = av[i] + bv[i % d];
            }
        },
        [an, bn, same](Node& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < out.g.size(); ++i) an->g[i] += out.g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (same) {
                    for (size_t i = 0; i < out.g.size(); ++i) bn->g[i] += out.g[i];
                } else {
                    const size_t d = bn->v.size();
                    for (size_t i = 0; i < out.g.size(); ++i) bn->g[i % d] += out.g[i];
                }
            }
        });
    return Tensor(node);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("elementwise-multiply: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto an = a.n, bn = b.n;
    auto node = detail::make_op(
        "elementwise-multiply", a.shape(), {an, bn},
        [an, bn](Node& out) {
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = an->v[i] * bn->v[i];
        },
        [an, bn](Node& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < out.g.size(); ++i) an->g[i] += out.g[i] * bn->v[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < out.g.size(); ++i) bn->g[i] += out.g[i] * an->v[i];
            }
        });
    return Tensor(node);
}

inline Tensor scale(const Tensor& a, double c) {
    auto an = a.n;
    auto node = detail::make_op(
        "scale", a.shape(), {an},
        [an, c](Node& out) {
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = an->v[i] * c;
        },
        [an, c](Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < out.g.size(); ++i) an->g[i] += out.g[i] * c;
        });
    return Tensor(node);
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

// Softmax over the last axis of a rank-1 or rank-2 tensor.
inline Tensor softmax_last(const Tensor& a) {
    if (a.rank() < 1 || a.rank() > 2) throw ShapeError("softmax-over-last-axis: rank must be 1 or 2");
    auto an = a.n;
    const int cols = a.dim(a.rank() - 1);
    const int rows = static_cast<int>(a.numel()) / cols;
    auto node = detail::make_op(
        "softmax-over-last-axis", a.shape(), {an},
        [an, rows, cols](Node& out) {
            for (int r = 0; r < rows; ++r) {
                const double* x = an->v.data() + static_cast<size_t>(r) * cols;
                double* y = out.v.data() + static_cast<size_t>(r) * cols;
                double mx = x[0];
                for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                double z = 0.0;
                for (int j = 0; j < cols; ++j) {
                    y[j] = std::exp(x[j] - mx);
                    z += y[j];
                }
                for (int j = 0; j < cols; ++j) y[j] /= z;
            }
        },
        [an, rows, cols](Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const double* y = out.v.data() + static_cast<size_t>(r) * cols;
                const double* dy = out.g.data() + static_cast<size_t>(r) * cols;
                double* dx = an->g.data() + static_cast<size_t>(r) * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
                for (int j = 0; j < cols; ++j) dx[j] += (dy[j] - dot) * y[j];
            }
        });
    return Tensor(node);
}

// Layer normalization over the last axis with affine parameters.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    const int cols = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols)
        throw ShapeError("layer-normalization: affine parameters must be rank-1 of extent " +
                         std::to_string(cols));
    auto xn = x.n, gn = gamma.n, bn = beta.n;
    const int rows = static_cast<int>(x.numel()) / cols;
    auto node = detail::make_op(
        "layer-normalization", x.shape(), {xn, gn, bn},
        [xn, gn, bn, rows, cols, eps](Node& out) {
            for (int r = 0; r < rows; ++r) {
                const double* xi = xn->v.data() + static_cast<size_t>(r) * cols;
                double* y = out.v.data() + static_cast<size_t>(r) * cols;
                double mu = 0.0;
                for (int j = 0; j < cols; ++j) mu += xi[j];
                mu /= cols;
                double var = 0.0;
                for (int j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                var /= cols;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (int j = 0; j < cols; ++j)
                    y[j] = (xi[j] - mu) * inv * gn->v[static_cast<size_t>(j)] +
                           bn->v[static_cast<size_t>(j)];
            }
        },
        [xn, gn, bn, rows, cols, eps](Node& out) {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const double* xi = xn->v.data() + static_cast<size_t>(r) * cols;
                const double* dy = out.g.data() + static_cast<size_t>(r) * cols;
                double mu = 0.0;
                for (int j = 0; j < cols; ++j) mu += xi[j];
                mu /= cols;
                double var = 0.0;
                for (int j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                var /= cols;
                const double inv = 1.0 / std::sqrt(var + eps);
                if (gn->requires_grad || bn->requires_grad) {
                    for (int j = 0; j < cols; ++j) {
                        const double xhat = (xi[j] - mu) * inv;
                        if (gn->requires_grad) gn->g[static_cast<size_t>(j)] += dy[j] * xhat;
                        if (bn->requires_grad) bn->g[static_cast<size_t>(j)] += dy[j];
                    }
                }
                if (xn->requires_grad) {
                    double* dx = xn->g.data() + static_cast<size_t>(r) * cols;
                    double sum_dg = 0.0, sum_dgx = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double dg = dy[j] * gn->v[static_cast<size_t>(j)];
                        sum_dg += dg;
                        sum_dgx += dg * (xi[j] - mu) * inv;
                    }
                    for (int j = 0; j < cols; ++j) {
                        const double dg = dy[j] * gn->v[static_cast<size_t>(j)];
                        const double xhat = (xi[j] - mu) * inv;
                        dx[j] += inv * (dg - sum_dg / cols - xhat * sum_dgx / cols);
                    }
                }
            }
        });
    return Tensor(node);
}

inline Tensor gelu(const Tensor& a) {
    auto an = a.n;
    auto node = detail::make_op(
        "gelu", a.shape(), {an},
        [an](Node& out) {
            for (size_t i = 0; i < out.v.size(); ++i) {
                const double x = an->v[i];
                out.v[i] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
            }
        },
        [an](Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            static const double kInvSqrt2Pi = 0.3989422804014327;
            for (size_t i = 0; i < out.g.size(); ++i) {
                const double x = an->v[i];
                const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                an->g[i] += out.g[i] * (cdf + x * pdf);
            }
        });
    return Tensor(node);
}

// Gathers rows of a (V, d) table by token id, producing (n, d).
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding-lookup: table must be rank-2");
    const int vocab = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw ShapeError("embedding-lookup: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(vocab) + ")");
    auto tn = table.n;
    const int n = static_cast<int>(ids.size());
    auto node = detail::make_op(
        "embedding-lookup", {n, d}, {tn},
        [tn, ids, d](Node& out) {
            for (size_t i = 0; i < ids.size(); ++i)
                std::copy_n(tn->v.data() + static_cast<size_t>(ids[i]) * d, d,
                            out.v.data() + i * d);
        },
        [tn, ids, d](Node& out) {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = tn->g.data() + static_cast<size_t>(ids[i]) * d;
                const double* src = out.g.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    return Tensor(node);
}

// Concatenation of rank-2 tensors along dim 0 or 1.
inline Tensor concat(const std::vector<Tensor>& parts, int dim) {
    if (parts.empty()) throw ShapeError("concat: empty input list");
    if (dim != 0 && dim != 1) throw ShapeError("concat: dim must be 0 or 1");
    const int other = 1 - dim;
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2) throw ShapeError("concat: expects rank-2 parts");
        if (p.dim(other) != parts[0].dim(other))
            throw ShapeError("concat: mismatched extent on dim " + std::to_string(other));
        total += p.dim(dim);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<size_t>(dim)] = total;
    std::vector<NodePtr> ps;
    for (const auto& p : parts) ps.push_back(p.n);
    const int rows = out_shape[0], cols = out_shape[1];
    auto node = detail::make_op(
        "concat", out_shape, ps,
        [ps, dim, rows, cols](Node& out) {
            if (dim == 0) {
                size_t off = 0;
                for (auto& p : ps) {
                    std::copy(p->v.begin(), p->v.end(), out.v.begin() + static_cast<long>(off));
                    off += p->v.size();
                }
            } else {
                int col0 = 0;
                for (auto& p : ps) {
                    const int pc = p->shape[1];
                    for (int r = 0; r < rows; ++r)
                        std::copy_n(p->v.data() + static_cast<size_t>(r) * pc, pc,
                                    out.v.data() + static_cast<size_t>(r) * cols + col0);
                    col0 += pc;
                }
            }
        },
        [ps, dim, rows, cols](Node& out) {
            if (dim == 0) {
                size_t off = 0;
                for (auto& p : ps) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (size_t i = 0; i < p->v.size(); ++i) p->g[i] += out.g[off + i];
                    }
                    off += p->v.size();
                }
            } else {
                int col0 = 0;
                for (auto& p : ps) {
                    const int pc = p->shape[1];
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (int r = 0; r < rows; ++r)
                            for (int j = 0; j < pc; ++j)
                                p->g[static_cast<size_t>(r) * pc + j] +=
                                    out.g[static_cast<size_t>(r) * cols + col0 + j];
                    }
                    col0 += pc;
                }
            }
        });
    return Tensor(node);
}

// Contiguous slice of a rank-1 or rank-2 tensor along one dim.
inline Tensor slice(const Tensor& a, int dim, int start, int len) {
    if (a.rank() == 1) {
        if (dim != 0 || start < 0 || len < 0 || start + len > a.dim(0))
            throw ShapeError("slice: range out of bounds for " + shape_str(a.shape()));
        auto an = a.n;
        auto node = detail::make_op(
            "slice", {len}, {an},
            [an, start, len](Node& out) {
                std::copy_n(an->v.data() + start, len, out.v.data());
            },
            [an, start, len](Node& out) {
                if (!an->requires_grad) return;
                an->ensure_grad();
                for (int i = 0; i < len; ++i) an->g[static_cast<size_t>(start + i)] += out.g[static_cast<size_t>(i)];
            });
        return Tensor(node);
    }
    if (a.rank() != 2 || dim < 0 || dim > 1 || start < 0 || len < 0 || start + len > a.dim(dim))
        throw ShapeError("slice: range out of bounds for " + shape_str(a.shape()));
    auto an = a.n;
    const int rows = a.dim(0), cols = a.dim(1);
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(dim)] = len;
    auto node = detail::make_op(
        "slice", out_shape, {an},
        [an, dim, start, len, rows, cols](Node& out) {
            if (dim == 0) {
                std::copy_n(an->v.data() + static_cast<size_t>(start) * cols,
                            static_cast<size_t>(len) * cols, out.v.data());
            } else {
                for (int r = 0; r < rows; ++r)
                    std::copy_n(an->v.data() + static_cast<size_t>(r) * cols + start, len,
                                out.v.data() + static_cast<size_t>(r) * len);
            }
        },
        [an, dim, start, len, rows, cols](Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            if (dim == 0) {
                for (size_t i = 0; i < out.g.size(); ++i)
                    an->g[static_cast<size_t>(start) * cols + i] += out.g[i];
            } else {
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < len; ++j)
                        an->g[static_cast<size_t>(r) * cols + start + j] +=
                            out.g[static_cast<size_t>(r) * len + j];
            }
        });
    return Tensor(node);
}

// Extracts row i of a rank-2 tensor as a rank-1 vector.
inline Tensor row(const Tensor& a, int i) {
    Tensor s = slice(a, 0, i, 1);
    s.n->shape = {a.dim(1)};
    return s;
}

namespace detail {
inline Tensor reduce(const Tensor& a, const char* kind, double denom) {
    auto an = a.n;
    auto node = make_op(
        kind, {1}, {an},
        [an, denom](Node& out) {
            double s = 0.0;
            for (double x : an->v) s += x;
            out.v[0] = s / denom;
        },
        [an, denom](Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const double d = out.g[0] / denom;
            for (size_t i = 0; i < an->g.size(); ++i) an->g[i] += d;
        });
    return Tensor(node);
}
}  // namespace detail

inline Tensor sum(const Tensor& a) { return detail::reduce(a, "sum", 1.0); }
inline Tensor mean(const Tensor& a) {
    return detail::reduce(a, "mean", static_cast<double>(a.numel()));
}

inline Tensor squared_norm(const Tensor& a) {
    auto an = a.n;
    auto node = detail::make_op(
        "squared-norm", {1}, {an},
        [an](Node& out) {
            double s = 0.0;
            for (double x : an->v) s += x * x;
            out.v[0] = s;
        },
        [an](Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < an->g.size(); ++i) an->g[i] += 2.0 * an->v[i] * out.g[0];
        });
    return Tensor(node);
}

// Sum over rows of -log softmax(logits)[target]; logits is (m, V).
// Stable log-sum-exp forward; backward is softmax minus one-hot per row.
inline Tensor nll_logits(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw ShapeError("negative-log-likelihood: logits must be rank-2");
    const int m = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<int>(targets.size()) != m)
        throw ShapeError("negative-log-likelihood: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(m) + " rows");
    for (int t : targets)
        if (t < 0 || t >= vocab) throw ShapeError("negative-log-likelihood: target id out of range");
    auto ln = logits.n;
    auto node = detail::make_op(
        "negative-log-likelihood", {1}, {ln},
        [ln, targets, m, vocab](Node& out) {
            double loss = 0.0;
            for (int r = 0; r < m; ++r) {
                const double* x = ln->v.data() + static_cast<size_t>(r) * vocab;
                double mx = x[0];
                for (int j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
                double z = 0.0;
                for (int j = 0; j < vocab; ++j) z += std::exp(x[j] - mx);
                loss += mx + std::log(z) - x[targets[static_cast<size_t>(r)]];
            }
            out.v[0] = loss;
        },
        [ln, targets, m, vocab](Node& out) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            const double go = out.g[0];
            for (int r = 0; r < m; ++r) {
                const double* x = ln->v.data() + static_cast<size_t>(r) * vocab;
                double* dx = ln->g.data() + static_cast<size_t>(r) * vocab;
                double mx = x[0];
                for (int j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
                double z = 0.0;
                for (int j = 0; j < vocab; ++j) z += std::exp(x[j] - mx);
                for (int j = 0; j < vocab; ++j) dx[j] += go * std::exp(x[j] - mx) / z;
                dx[targets[static_cast<size_t>(r)]] -= go;
            }
        });
    return Tensor(node);
}

// Reverse sweep over the active record. Populates grads of every leaf
// reachable from `loss`; forward values are left untouched.
inline void backward(const Tensor& loss, Tape& tape) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar-shaped");
    if (!loss.n->requires_grad) return;
    loss.n->ensure_grad();
    loss.n->g[0] = 1.0;
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        Node& node = **it;
        if (node.back && !node.g.empty()) node.back(node);
    }
}

// Generic dispatcher over the closed primitive set; `scalars` and `ints`
// carry the per-primitive attributes (scale factor, slice bounds, ids...).
inline Tensor apply_primitive(const std::string& kind, const std::vector<Tensor>& inputs,
                              const std::vector<double>& scalars = {},
                              const std::vector<int>& ints = {}) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            throw ShapeError(kind + ": expected " + std::to_string(n) + " inputs, got " +
                             std::to_string(inputs.size()));
    };
    if (kind == "matmul") {
        need(2);
        return matmul(inputs[0], inputs[1]);
    }
    if (kind == "add") {
        need(2);
        return add(inputs[0], inputs[1]);
    }
    if (kind == "elementwise-multiply") {
        need(2);
        return mul(inputs[0], inputs[1]);
    }
    if (kind == "scale") {
        need(1);
        return scale(inputs[0], scalars.at(0));
    }
    if (kind == "softmax-over-last-axis") {
        need(1);
        return softmax_last(inputs[0]);
    }
    if (kind == "layer-normalization") {
        need(3);
        return layer_norm(inputs[0], inputs[1], inputs[2]);
    }
    if (kind == "gelu") {
        need(1);
        return gelu(inputs[0]);
    }
    if (kind == "embedding-lookup") {
        need(1);
        return embedding(inputs[0], ints);
    }
    if (kind == "concat") {
        return concat(inputs, ints.at(0));
    }
    if (kind == "slice") {
        need(1);
        return slice(inputs[0], ints.at(0), ints.at(1), ints.at(2));
    }
    if (kind == "sum") {
        need(1);
        return sum(inputs[0]);
    }
    if (kind == "mean") {
        need(1);
        return mean(inputs[0]);
    }
    if (kind == "squared-norm") {
        need(1);
        return squared_norm(inputs[0]);
    }
    if (kind == "negative-log-likelihood") {
        need(1);
        return nll_logits(inputs[0], ints);
    }
    throw UnsupportedOpError("unknown primitive: " + kind);
}

}  // namespace fable
