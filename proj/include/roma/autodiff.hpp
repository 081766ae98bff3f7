#pragma once

// Tape-free reverse-mode autodiff over roma::Tensor. Each op returns a Var
// holding a value plus a closure that pulls the output gradient back into the
// parents' gradients. Graphs are rebuilt every step; leaves (parameters) are
// the only nodes whose grads persist across steps.
//
// Image tensors use CHW layout; token matrices are row-major [rows, cols].
// Dense products go through Eigen maps, everything else is plain loops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "roma/errors.hpp"
#include "roma/tensor.hpp"

namespace roma::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EMat>;
using MutMap = Eigen::Map<EMat>;

struct Node {
    Tensor value;
    Tensor grad; // allocated on first use
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad() {
        if (grad.size() != value.size()) grad = Tensor(value.shape());
        return grad;
    }
};

class Var {
public:
    Var() = default;

    static Var constant(Tensor v) {
        Var out;
        out.n_ = std::make_shared<Node>();
        out.n_->value = std::move(v);
        return out;
    }

    static Var param(Tensor v) {
        Var out = constant(std::move(v));
        out.n_->requires_grad = true;
        return out;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& value() const { return n_->value; }
    Tensor& value_mut() { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }

    const Tensor& grad() const {
        const_cast<Node*>(n_.get())->ensure_grad();
        return n_->grad;
    }
    Tensor& grad_mut() { return n_->ensure_grad(); }
    void zero_grad() { n_->ensure_grad().fill(0.0); }

    Var detach() const { return constant(n_->value); }

    const std::vector<int>& shape() const { return n_->value.shape(); }
    int dim(int i) const { return n_->value.dim(i); }
    int rank() const { return n_->value.rank(); }

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// Grad recording is on by default; a NoGradGuard turns ops into plain value
// computations for the current thread (inference / detached passes).
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline Var make_op(Tensor out, std::vector<Var> parents, std::function<void(Node&)> bp) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || p.requires_grad();
    Var v = Var::constant(std::move(out));
    if (needs && grad_mode()) {
        v.node()->requires_grad = true;
        for (const Var& p : parents) v.node()->parents.push_back(p.node());
        v.node()->backprop = std::move(bp);
    }
    return v;
}

// Accumulate g into parent i's grad if it participates in the backward pass.
inline void accum(Node& self, std::size_t i, const std::function<void(Tensor&)>& add) {
    Node& p = *self.parents[i];
    if (!p.requires_grad && !p.backprop && p.parents.empty()) {
        // constant leaf: grads still flow through interior nodes, but a pure
        // constant with no upstream needs nothing
        if (!p.requires_grad) return;
    }
    if (p.requires_grad || p.backprop) add(p.ensure_grad());
}

inline bool parent_needs(const Node& self, std::size_t i) {
    const Node& p = *self.parents[i];
    return p.requires_grad;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(const Var& root) {
    if (!root.defined()) throw ArgumentError("backward: undefined variable");
    if (root.value().size() != 1) throw ArgumentError("backward: root must be scalar");
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is child-after-parent; walk it reversed so every node's grad is
    // complete before it pushes to its parents
    root.node()->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw ArgumentError(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                            " vs " + b.value().shape_str());
}

inline void require_rank2(const Var& a, const char* op) {
    if (a.rank() != 2) throw ArgumentError(std::string(op) + ": expected rank-2 tensor");
}

// ---------------------------------------------------------------------------
// elementwise & scalar ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t pi = 0; pi < 2; ++pi) {
            if (!parent_needs(self, pi) && !self.parents[pi]->backprop) continue;
            Tensor& g = self.parents[pi]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (parent_needs(self, 1) || self.parents[1]->backprop) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (parent_needs(self, 1) || self.parents[1]->backprop) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
    return make_op(std::move(out), {a}, [s](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + s;
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// s - a
inline Var rsub_scalar(double s, const Var& a) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s - a.value()[i];
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// unary math
// ---------------------------------------------------------------------------

namespace detail {
// dfn receives (x, y) and returns dy/dx
template <class F, class DF>
Var unary(const Var& a, F fn, DF dfn) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a.value()[i]);
    return make_op(std::move(out), {a}, [dfn](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        const Tensor& x = self.parents[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * dfn(x[i], self.value[i]);
    });
}
} // namespace detail

inline Var tanh_(const Var& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
    return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; },
                         [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& a, double slope = 0.2) {
    return detail::unary(a, [slope](double x) { return x > 0 ? x : slope * x; },
                         [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline double softplus_val(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid_val(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// log(1 + e^x), numerically stable at both tails
inline Var softplus(const Var& a) {
    return detail::unary(a, [](double x) { return softplus_val(x); },
                         [](double x, double) { return sigmoid_val(x); });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(a, [](double x) { return sigmoid_val(x); },
                         [](double, double y) { return y * (1.0 - y); });
}

inline Var exp_(const Var& a) {
    return detail::unary(a, [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

inline Var log_(const Var& a) {
    return detail::unary(a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

// subgradient 0 at the origin so zero-norm rows stay NaN-free
inline Var sqrt_(const Var& a) {
    return detail::unary(a, [](double x) { return std::sqrt(x); },
                         [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var gelu(const Var& a) {
    constexpr double kA = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kB = 0.044715;
    return detail::unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kA * (x + kB * x * x * x))); },
        [](double x, double) {
            double t = std::tanh(kA * (x + kB * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kA * (1.0 + 3.0 * kB * x * x);
        });
}

// ---------------------------------------------------------------------------
// reductions & broadcasts
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
    return make_op(Tensor::scalar(s), {a}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        double gs = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs;
    });
}

inline Var mean(const Var& a) {
    std::size_t n = a.value().size();
    if (n == 0) throw ArgumentError("mean: empty tensor");
    return mul_scalar(sum(a), 1.0 / static_cast<double>(n));
}

// [n,m] -> [n,1]
inline Var row_sum(const Var& a) {
    require_rank2(a, "row_sum");
    int n = a.dim(0), m = a.dim(1);
    Tensor out({n, 1});
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int c = 0; c < m; ++c) s += a.value().at(r, c);
        out.at(r, 0) = s;
    }
    return make_op(std::move(out), {a}, [n, m](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            double gs = self.grad.at(r, 0);
            for (int c = 0; c < m; ++c) g.at(r, c) += gs;
        }
    });
}

// [n,m] * [n,1] broadcast over columns
inline Var colvec_mul(const Var& a, const Var& c) {
    require_rank2(a, "colvec_mul");
    if (c.rank() != 2 || c.dim(0) != a.dim(0) || c.dim(1) != 1)
        throw ArgumentError("colvec_mul: scale must be [n,1]");
    int n = a.dim(0), m = a.dim(1);
    Tensor out({n, m});
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < m; ++j) out.at(r, j) = a.value().at(r, j) * c.value().at(r, 0);
    return make_op(std::move(out), {a, c}, [n, m](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& cv = self.parents[1]->value;
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < m; ++j) g.at(r, j) += self.grad.at(r, j) * cv.at(r, 0);
        }
        if (parent_needs(self, 1) || self.parents[1]->backprop) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int r = 0; r < n; ++r) {
                double s = 0.0;
                for (int j = 0; j < m; ++j) s += self.grad.at(r, j) * av.at(r, j);
                g.at(r, 0) += s;
            }
        }
    });
}

// [n,m] / [n,1]
inline Var colvec_div(const Var& a, const Var& c) {
    require_rank2(a, "colvec_div");
    if (c.rank() != 2 || c.dim(0) != a.dim(0) || c.dim(1) != 1)
        throw ArgumentError("colvec_div: divisor must be [n,1]");
    int n = a.dim(0), m = a.dim(1);
    Tensor out({n, m});
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < m; ++j) out.at(r, j) = a.value().at(r, j) / c.value().at(r, 0);
    return make_op(std::move(out), {a, c}, [n, m](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& cv = self.parents[1]->value;
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < m; ++j) g.at(r, j) += self.grad.at(r, j) / cv.at(r, 0);
        }
        if (parent_needs(self, 1) || self.parents[1]->backprop) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int r = 0; r < n; ++r) {
                double s = 0.0, inv = 1.0 / cv.at(r, 0);
                for (int j = 0; j < m; ++j) s += self.grad.at(r, j) * av.at(r, j);
                g.at(r, 0) -= s * inv * inv;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra & layout
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ArgumentError("matmul: inner dimension mismatch " + a.value().shape_str() +
                            " x " + b.value().shape_str());
    int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor out({n, m});
    {
        ConstMap A(a.value().data(), n, k), B(b.value().data(), k, m);
        MutMap O(out.data(), n, m);
        O.noalias() = A * B;
    }
    return make_op(std::move(out), {a, b}, [n, k, m](Node& self) {
        ConstMap G(self.grad.data(), n, m);
        ConstMap A(self.parents[0]->value.data(), n, k);
        ConstMap B(self.parents[1]->value.data(), k, m);
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            MutMap GA(self.parents[0]->ensure_grad().data(), n, k);
            GA.noalias() += G * B.transpose();
        }
        if (parent_needs(self, 1) || self.parents[1]->backprop) {
            MutMap GB(self.parents[1]->ensure_grad().data(), k, m);
            GB.noalias() += A.transpose() * G;
        }
    });
}

inline Var transpose2d(const Var& a) {
    require_rank2(a, "transpose2d");
    int n = a.dim(0), m = a.dim(1);
    Tensor out({m, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c) out.at(c, r) = a.value().at(r, c);
    return make_op(std::move(out), {a}, [n, m](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c) g.at(r, c) += self.grad.at(c, r);
    });
}

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a.value().reshaped(shape);
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Var gather_rows(const Var& a, std::vector<int> idx) {
    require_rank2(a, "gather_rows");
    int n = a.dim(0), m = a.dim(1);
    for (int i : idx)
        if (i < 0 || i >= n) throw ArgumentError("gather_rows: row index out of range");
    Tensor out({static_cast<int>(idx.size()), m});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < m; ++c) out.at(static_cast<int>(r), c) = a.value().at(idx[r], c);
    return make_op(std::move(out), {a}, [idx, m](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < m; ++c)
                g.at(idx[r], c) += self.grad.at(static_cast<int>(r), c);
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    int m = parts[0].dim(1), total = 0;
    for (const Var& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != m) throw ArgumentError("concat_rows: column count mismatch");
        total += p.dim(0);
    }
    Tensor out({total, m});
    int row = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data(), p.value().data() + p.value().size(),
                  out.data() + static_cast<std::size_t>(row) * m);
        row += p.dim(0);
    }
    return make_op(std::move(out), parts, [m](Node& self) {
        int row = 0;
        for (auto& parent : self.parents) {
            int pn = parent->value.dim(0);
            if (parent->requires_grad || parent->backprop) {
                Tensor& g = parent->ensure_grad();
                for (int r = 0; r < pn; ++r)
                    for (int c = 0; c < m; ++c) g.at(r, c) += self.grad.at(row + r, c);
            }
            row += pn;
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
    int n = parts[0].dim(0), total = 0;
    for (const Var& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.dim(0) != n) throw ArgumentError("concat_cols: row count mismatch");
        total += p.dim(1);
    }
    Tensor out({n, total});
    int col = 0;
    for (const Var& p : parts) {
        int m = p.dim(1);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c) out.at(r, col + c) = p.value().at(r, c);
        col += m;
    }
    return make_op(std::move(out), parts, [n](Node& self) {
        int col = 0;
        for (auto& parent : self.parents) {
            int m = parent->value.dim(1);
            if (parent->requires_grad || parent->backprop) {
                Tensor& g = parent->ensure_grad();
                for (int r = 0; r < n; ++r)
                    for (int c = 0; c < m; ++c) g.at(r, c) += self.grad.at(r, col + c);
            }
            col += m;
        }
    });
}

inline Var col_slice(const Var& a, int c0, int count) {
    require_rank2(a, "col_slice");
    int n = a.dim(0), m = a.dim(1);
    if (c0 < 0 || count <= 0 || c0 + count > m)
        throw ArgumentError("col_slice: slice out of range");
    Tensor out({n, count});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < count; ++c) out.at(r, c) = a.value().at(r, c0 + c);
    return make_op(std::move(out), {a}, [n, c0, count](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < count; ++c) g.at(r, c0 + c) += self.grad.at(r, c);
    });
}

// [n,m] + broadcast [1,m] (or flat [m])
inline Var add_rowvec(const Var& a, const Var& r) {
    require_rank2(a, "add_rowvec");
    int n = a.dim(0), m = a.dim(1);
    if (static_cast<int>(r.value().size()) != m)
        throw ArgumentError("add_rowvec: vector length mismatch");
    Tensor out({n, m});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < m; ++c) out.at(i, c) = a.value().at(i, c) + r.value()[c];
    return make_op(std::move(out), {a, r}, [n, m](Node& self) {
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (parent_needs(self, 1) || self.parents[1]->backprop) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < m; ++c) g[c] += self.grad.at(i, c);
        }
    });
}

inline Var softmax_rows(const Var& a) {
    require_rank2(a, "softmax_rows");
    int n = a.dim(0), m = a.dim(1);
    Tensor out({n, m});
    for (int r = 0; r < n; ++r) {
        double mx = -1e300;
        for (int c = 0; c < m; ++c) mx = std::max(mx, a.value().at(r, c));
        double s = 0.0;
        for (int c = 0; c < m; ++c) {
            double e = std::exp(a.value().at(r, c) - mx);
            out.at(r, c) = e;
            s += e;
        }
        for (int c = 0; c < m; ++c) out.at(r, c) /= s;
    }
    return make_op(std::move(out), {a}, [n, m](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int c = 0; c < m; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
            for (int c = 0; c < m; ++c)
                g.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
        }
    });
}

// per-row layer norm with affine [m] params
inline Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5) {
    require_rank2(a, "layer_norm_rows");
    int n = a.dim(0), m = a.dim(1);
    if (static_cast<int>(gamma.value().size()) != m || static_cast<int>(beta.value().size()) != m)
        throw ArgumentError("layer_norm_rows: affine parameter length mismatch");
    Tensor out({n, m});
    for (int r = 0; r < n; ++r) {
        double mu = 0.0;
        for (int c = 0; c < m; ++c) mu += a.value().at(r, c);
        mu /= m;
        double var = 0.0;
        for (int c = 0; c < m; ++c) {
            double d = a.value().at(r, c) - mu;
            var += d * d;
        }
        var /= m;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < m; ++c)
            out.at(r, c) = gamma.value()[c] * (a.value().at(r, c) - mu) * inv + beta.value()[c];
    }
    return make_op(std::move(out), {a, gamma, beta}, [n, m, eps](Node& self) {
        const Tensor& x = self.parents[0]->value;
        const Tensor& gm = self.parents[1]->value;
        for (int r = 0; r < n; ++r) {
            double mu = 0.0;
            for (int c = 0; c < m; ++c) mu += x.at(r, c);
            mu /= m;
            double var = 0.0;
            for (int c = 0; c < m; ++c) {
                double d = x.at(r, c) - mu;
                var += d * d;
            }
            var /= m;
            double inv = 1.0 / std::sqrt(var + eps);
            // h = dy * gamma; dx = inv * (h - mean(h) - xhat * mean(h .* xhat))
            double mh = 0.0, mhx = 0.0;
            for (int c = 0; c < m; ++c) {
                double xhat = (x.at(r, c) - mu) * inv;
                double h = self.grad.at(r, c) * gm[c];
                mh += h;
                mhx += h * xhat;
            }
            mh /= m;
            mhx /= m;
            if (parent_needs(self, 0) || self.parents[0]->backprop) {
                Tensor& gx = self.parents[0]->ensure_grad();
                for (int c = 0; c < m; ++c) {
                    double xhat = (x.at(r, c) - mu) * inv;
                    double h = self.grad.at(r, c) * gm[c];
                    gx.at(r, c) += inv * (h - mh - xhat * mhx);
                }
            }
            if (parent_needs(self, 1) || self.parents[1]->backprop) {
                Tensor& gg = self.parents[1]->ensure_grad();
                for (int c = 0; c < m; ++c)
                    gg[c] += self.grad.at(r, c) * (x.at(r, c) - mu) * inv;
            }
            if (parent_needs(self, 2) || self.parents[2]->backprop) {
                Tensor& gb = self.parents[2]->ensure_grad();
                for (int c = 0; c < m; ++c) gb[c] += self.grad.at(r, c);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// image ops (CHW)
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const Tensor& x, int k, int stride, int pad, Tensor& col, int ho, int wo) {
    int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    // col: [c_in*k*k, ho*wo]
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                int row = (c * k + ky) * k + kx;
                double* dst = col.data() + static_cast<std::size_t>(row) * ho * wo;
                const double* src = x.data() + static_cast<std::size_t>(c) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        dst[oy * wo + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_add(const Tensor& col, int k, int stride, int pad, Tensor& gx, int ho, int wo) {
    int c_in = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                int row = (c * k + ky) * k + kx;
                const double* src = col.data() + static_cast<std::size_t>(row) * ho * wo;
                double* dst = gx.data() + static_cast<std::size_t>(c) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[iy * w + ix] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

// x: [C,H,W], w: [O,C,k,k], b: [O]; zero padding
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x.rank() != 3) throw ArgumentError("conv2d: input must be CHW");
    if (w.rank() != 4) throw ArgumentError("conv2d: weight must be [O,C,k,k]");
    int c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int o = w.dim(0), k = w.dim(2);
    if (w.dim(1) != c_in) throw ArgumentError("conv2d: channel mismatch");
    if (w.dim(3) != k) throw ArgumentError("conv2d: kernel must be square");
    if (static_cast<int>(b.value().size()) != o) throw ArgumentError("conv2d: bias length mismatch");
    int ho = (h + 2 * pad - k) / stride + 1;
    int wo = (wd + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ArgumentError("conv2d: output would be empty");

    int ckk = c_in * k * k, hw = ho * wo;
    Tensor col({ckk, hw});
    detail::im2col(x.value(), k, stride, pad, col, ho, wo);
    Tensor out({o, ho, wo});
    {
        ConstMap W(w.value().data(), o, ckk), C(col.data(), ckk, hw);
        MutMap O(out.data(), o, hw);
        O.noalias() = W * C;
        for (int i = 0; i < o; ++i) O.row(i).array() += b.value()[i];
    }
    return make_op(std::move(out), {x, w, b},
                   [k, stride, pad, c_in, o, ho, wo, ckk, hw](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& wv = self.parents[1]->value;
        ConstMap G(self.grad.data(), o, hw);
        if (parent_needs(self, 1) || self.parents[1]->backprop ||
            parent_needs(self, 2) || self.parents[2]->backprop) {
            Tensor col({ckk, hw});
            detail::im2col(xv, k, stride, pad, col, ho, wo);
            if (parent_needs(self, 1) || self.parents[1]->backprop) {
                MutMap GW(self.parents[1]->ensure_grad().data(), o, ckk);
                ConstMap C(col.data(), ckk, hw);
                GW.noalias() += G * C.transpose();
            }
            if (parent_needs(self, 2) || self.parents[2]->backprop) {
                Tensor& gb = self.parents[2]->ensure_grad();
                for (int i = 0; i < o; ++i) gb[i] += G.row(i).sum();
            }
        }
        if (parent_needs(self, 0) || self.parents[0]->backprop) {
            Tensor gcol({ckk, hw});
            {
                ConstMap W(wv.data(), o, ckk);
                MutMap GC(gcol.data(), ckk, hw);
                GC.noalias() = W.transpose() * G;
            }
            detail::col2im_add(gcol, k, stride, pad, self.parents[0]->ensure_grad(), ho, wo);
        }
    });
}

inline Var upsample_nearest2(const Var& x) {
    if (x.rank() != 3) throw ArgumentError("upsample_nearest2: input must be CHW");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx] =
                    x.value()[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
    return make_op(std::move(out), {x}, [c, h, w](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    g[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] +=
                        self.grad[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx];
    });
}

// per-channel normalization over H*W, affine [C] params
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    if (x.rank() != 3) throw ArgumentError("instance_norm: input must be CHW");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    int n = h * w;
    if (static_cast<int>(gamma.value().size()) != c || static_cast<int>(beta.value().size()) != c)
        throw ArgumentError("instance_norm: affine parameter length mismatch");
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        const double* src = x.value().data() + static_cast<std::size_t>(ci) * n;
        double* dst = out.data() + static_cast<std::size_t>(ci) * n;
        double mu = 0.0;
        for (int i = 0; i < n; ++i) mu += src[i];
        mu /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= n;
        double inv = 1.0 / std::sqrt(var + eps);
        double g = gamma.value()[ci], bt = beta.value()[ci];
        for (int i = 0; i < n; ++i) dst[i] = g * (src[i] - mu) * inv + bt;
    }
    return make_op(std::move(out), {x, gamma, beta}, [c, n, eps](Node& self) {
        const Tensor& x = self.parents[0]->value;
        const Tensor& gm = self.parents[1]->value;
        for (int ci = 0; ci < c; ++ci) {
            const double* src = x.data() + static_cast<std::size_t>(ci) * n;
            const double* gout = self.grad.data() + static_cast<std::size_t>(ci) * n;
            double mu = 0.0;
            for (int i = 0; i < n; ++i) mu += src[i];
            mu /= n;
            double var = 0.0;
            for (int i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
            var /= n;
            double inv = 1.0 / std::sqrt(var + eps);
            double mh = 0.0, mhx = 0.0;
            for (int i = 0; i < n; ++i) {
                double xhat = (src[i] - mu) * inv;
                mh += gout[i];
                mhx += gout[i] * xhat;
            }
            mh /= n;
            mhx /= n;
            if (parent_needs(self, 0) || self.parents[0]->backprop) {
                double* gx = self.parents[0]->ensure_grad().data() + static_cast<std::size_t>(ci) * n;
                double g = gm[ci];
                for (int i = 0; i < n; ++i) {
                    double xhat = (src[i] - mu) * inv;
                    gx[i] += g * inv * (gout[i] - mh - xhat * mhx);
                }
            }
            if (parent_needs(self, 1) || self.parents[1]->backprop) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += gout[i] * (src[i] - mu) * inv;
                self.parents[1]->ensure_grad()[ci] += s;
            }
            if (parent_needs(self, 2) || self.parents[2]->backprop) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += gout[i];
                self.parents[2]->ensure_grad()[ci] += s;
            }
        }
    });
}

// bilinear, half-pixel centers
inline Var bilinear_resize(const Var& x, int oh, int ow) {
    if (x.rank() != 3) throw ArgumentError("bilinear_resize: input must be CHW");
    if (oh <= 0 || ow <= 0) throw ArgumentError("bilinear_resize: bad target size");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    struct Tap {
        int y0, y1, x0, x1;
        double wy, wx;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->resize(static_cast<std::size_t>(oh) * ow);
    double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    for (int oy = 0; oy < oh; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
        for (int ox = 0; ox < ow; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            (*taps)[static_cast<std::size_t>(oy) * ow + ox] = {
                y0c, y1c, std::clamp(x0, 0, w - 1), std::clamp(x0 + 1, 0, w - 1), wy, wx};
        }
    }
    Tensor out({c, oh, ow});
    for (int ci = 0; ci < c; ++ci) {
        const double* src = x.value().data() + static_cast<std::size_t>(ci) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(ci) * oh * ow;
        for (std::size_t i = 0; i < taps->size(); ++i) {
            const Tap& t = (*taps)[i];
            dst[i] = (1 - t.wy) * ((1 - t.wx) * src[t.y0 * w + t.x0] + t.wx * src[t.y0 * w + t.x1]) +
                     t.wy * ((1 - t.wx) * src[t.y1 * w + t.x0] + t.wx * src[t.y1 * w + t.x1]);
        }
    }
    return make_op(std::move(out), {x}, [taps, c, h, w, oh, ow](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            double* gx = g.data() + static_cast<std::size_t>(ci) * h * w;
            const double* go = self.grad.data() + static_cast<std::size_t>(ci) * oh * ow;
            for (std::size_t i = 0; i < taps->size(); ++i) {
                const Tap& t = (*taps)[i];
                gx[t.y0 * w + t.x0] += go[i] * (1 - t.wy) * (1 - t.wx);
                gx[t.y0 * w + t.x1] += go[i] * (1 - t.wy) * t.wx;
                gx[t.y1 * w + t.x0] += go[i] * t.wy * (1 - t.wx);
                gx[t.y1 * w + t.x1] += go[i] * t.wy * t.wx;
            }
        }
    });
}

inline Var replicate_channels(const Var& x, int n) {
    if (x.rank() != 3 || x.dim(0) != 1)
        throw ArgumentError("replicate_channels: input must be [1,H,W]");
    int h = x.dim(1), w = x.dim(2);
    Tensor out({n, h, w});
    for (int ci = 0; ci < n; ++ci)
        std::copy(x.value().data(), x.value().data() + static_cast<std::size_t>(h) * w,
                  out.data() + static_cast<std::size_t>(ci) * h * w);
    return make_op(std::move(out), {x}, [n, h, w](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int ci = 0; ci < n; ++ci) {
            const double* go = self.grad.data() + static_cast<std::size_t>(ci) * h * w;
            for (int i = 0; i < h * w; ++i) g[i] += go[i];
        }
    });
}

// [C,H,W] -> [N_r, r*r*C] rows of flattened non-overlapping regions in raster
// order; within a region the layout is (channel, dy, dx)
inline Var extract_regions(const Var& x, int region) {
    if (x.rank() != 3) throw ArgumentError("extract_regions: input must be CHW");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (region <= 0 || h % region != 0 || w % region != 0)
        throw ArgumentError("extract_regions: region size must divide frame dimensions");
    int gr = h / region, gc = w / region;
    int flat = c * region * region;
    Tensor out({gr * gc, flat});
    for (int ry = 0; ry < gr; ++ry)
        for (int rx = 0; rx < gc; ++rx) {
            double* dst = out.data() + static_cast<std::size_t>(ry * gc + rx) * flat;
            for (int ci = 0; ci < c; ++ci)
                for (int dy = 0; dy < region; ++dy)
                    for (int dx = 0; dx < region; ++dx)
                        dst[(ci * region + dy) * region + dx] =
                            x.value()[(static_cast<std::size_t>(ci) * h + ry * region + dy) * w +
                                      rx * region + dx];
        }
    return make_op(std::move(out), {x}, [c, h, w, region, gr, gc, flat](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int ry = 0; ry < gr; ++ry)
            for (int rx = 0; rx < gc; ++rx) {
                const double* src = self.grad.data() + static_cast<std::size_t>(ry * gc + rx) * flat;
                for (int ci = 0; ci < c; ++ci)
                    for (int dy = 0; dy < region; ++dy)
                        for (int dx = 0; dx < region; ++dx)
                            g[(static_cast<std::size_t>(ci) * h + ry * region + dy) * w +
                              rx * region + dx] += src[(ci * region + dy) * region + dx];
            }
    });
}

// mean over non-overlapping k x k blocks of a [rows*cols, d] token matrix laid
// out in raster order; trailing rows/cols that do not fill a block are dropped
inline Var block_mean_pool(const Var& tokens, int rows, int cols, int k) {
    require_rank2(tokens, "block_mean_pool");
    if (k <= 0) throw ArgumentError("block_mean_pool: scale must be positive");
    if (tokens.dim(0) != rows * cols)
        throw ArgumentError("block_mean_pool: token count does not match grid");
    if (k > rows || k > cols) throw ArgumentError("block_mean_pool: scale exceeds grid");
    int d = tokens.dim(1);
    int orows = rows / k, ocols = cols / k;
    double inv = 1.0 / (k * k);
    Tensor out({orows * ocols, d});
    for (int by = 0; by < orows; ++by)
        for (int bx = 0; bx < ocols; ++bx) {
            double* dst = out.data() + static_cast<std::size_t>(by * ocols + bx) * d;
            for (int iy = 0; iy < k; ++iy)
                for (int ix = 0; ix < k; ++ix) {
                    const double* src = tokens.value().data() +
                        static_cast<std::size_t>((by * k + iy) * cols + bx * k + ix) * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j] * inv;
                }
        }
    return make_op(std::move(out), {tokens}, [rows, cols, k, d, orows, ocols, inv](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int by = 0; by < orows; ++by)
            for (int bx = 0; bx < ocols; ++bx) {
                const double* src = self.grad.data() + static_cast<std::size_t>(by * ocols + bx) * d;
                for (int iy = 0; iy < k; ++iy)
                    for (int ix = 0; ix < k; ++ix) {
                        double* dst = g.data() +
                            static_cast<std::size_t>((by * k + iy) * cols + bx * k + ix) * d;
                        for (int j = 0; j < d; ++j) dst[j] += src[j] * inv;
                    }
            }
    });
}

} // namespace roma::ad
