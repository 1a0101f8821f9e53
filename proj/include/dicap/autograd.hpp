#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// Nodes are appended in evaluation order, so the tape is already a
// topological sort; backward() walks it once in reverse. The operator set is
// fixed to what the training losses need.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "dicap/matrix.hpp"

namespace dicap {

class tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct var {
    tape* owner = nullptr;
    std::size_t id = 0;
};

class tape {
public:
    using backward_fn = std::function<void(tape&, std::size_t self)>;

    var constant(matrix value) { return push(std::move(value), false, nullptr); }
    var variable(matrix value) { return push(std::move(value), true, nullptr); }

    const matrix& value(var v) const { return nodes_.at(v.id).value; }
    const matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(var v) const { return nodes_.at(v.id).requires_grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient of the last backward() root with respect to v. Zero-filled when
    // v did not influence the root.
    matrix grad(var v) const {
        const node& n = nodes_.at(v.id);
        if (n.grad.empty() && !n.value.empty()) return matrix(n.value.rows, n.value.cols);
        return n.grad;
    }

    // Accumulation target for a parent's gradient; allocated on first touch.
    matrix& grad_ref(std::size_t id) {
        node& n = nodes_[id];
        if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols) n.grad = matrix(n.value.rows, n.value.cols);
        return n.grad;
    }
    const matrix& upstream(std::size_t id) const { return nodes_[id].grad; }

    void backward(var root) {
        const matrix& rv = value(root);
        if (rv.rows != 1 || rv.cols != 1) throw std::invalid_argument("backward: root must be a 1x1 scalar");
        for (auto& n : nodes_) n.grad = matrix();
        grad_ref(root.id).data[0] = 1.0;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            node& n = nodes_[i];
            if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
            n.backward(*this, i);
        }
    }

    var push(matrix value, bool requires_grad, backward_fn fn) {
        nodes_.push_back(node{std::move(value), matrix(), requires_grad, std::move(fn)});
        return var{this, nodes_.size() - 1};
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct node {
        matrix value;
        matrix grad;
        bool requires_grad = false;
        backward_fn backward;
    };
    std::vector<node> nodes_;
};

namespace detail {

inline tape& owner_of(var a) {
    if (!a.owner) throw std::logic_error("var is not attached to a tape");
    return *a.owner;
}

inline tape& owner_of(var a, var b) {
    if (a.owner != b.owner) throw std::logic_error("vars belong to different tapes");
    return owner_of(a);
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
var unary(var a, F f, D dfdx) {
    tape& t = owner_of(a);
    const matrix& x = t.value(a);
    matrix y(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
    const bool rg = t.requires_grad(a);
    const std::size_t ia = a.id;
    return t.push(std::move(y), rg, [ia, dfdx](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const matrix& g = tp.upstream(self);
        const matrix& xv = tp.value(ia);
        const matrix& yv = tp.value(self);
        matrix& ga = tp.grad_ref(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * dfdx(xv.data[i], yv.data[i]);
    });
}

}  // namespace detail

inline var matmul(var a, var b) {
    tape& t = detail::owner_of(a, b);
    const matrix& av = t.value(a);
    const matrix& bv = t.value(b);
    if (av.cols != bv.rows)
        throw std::invalid_argument("matmul: shape mismatch " + shape_string(av) + " * " + shape_string(bv));
    matrix y(av.rows, bv.cols);
    gemm_accumulate(av, false, bv, false, y);
    const std::size_t ia = a.id, ib = b.id;
    return t.push(std::move(y), t.requires_grad(a) || t.requires_grad(b), [ia, ib](tape& tp, std::size_t self) {
        const matrix& g = tp.upstream(self);
        if (tp.requires_grad(ia)) gemm_accumulate(g, false, tp.value(ib), true, tp.grad_ref(ia));
        if (tp.requires_grad(ib)) gemm_accumulate(tp.value(ia), true, g, false, tp.grad_ref(ib));
    });
}

// a * b^T
inline var matmul_nt(var a, var b) {
    tape& t = detail::owner_of(a, b);
    const matrix& av = t.value(a);
    const matrix& bv = t.value(b);
    if (av.cols != bv.cols)
        throw std::invalid_argument("matmul_nt: shape mismatch " + shape_string(av) + " * " + shape_string(bv) + "^T");
    matrix y(av.rows, bv.rows);
    gemm_accumulate(av, false, bv, true, y);
    const std::size_t ia = a.id, ib = b.id;
    return t.push(std::move(y), t.requires_grad(a) || t.requires_grad(b), [ia, ib](tape& tp, std::size_t self) {
        const matrix& g = tp.upstream(self);
        if (tp.requires_grad(ia)) gemm_accumulate(g, false, tp.value(ib), false, tp.grad_ref(ia));
        if (tp.requires_grad(ib)) gemm_accumulate(g, true, tp.value(ia), false, tp.grad_ref(ib));
    });
}

// Same-shape sum, or b broadcast over rows when b is 1 x cols.
inline var add(var a, var b) {
    tape& t = detail::owner_of(a, b);
    const matrix& av = t.value(a);
    const matrix& bv = t.value(b);
    const bool broadcast = !av.same_shape(bv);
    if (broadcast && !(bv.rows == 1 && bv.cols == av.cols))
        throw std::invalid_argument("add: shape mismatch " + shape_string(av) + " + " + shape_string(bv));
    matrix y = av;
    for (std::size_t r = 0; r < y.rows; ++r)
        for (std::size_t c = 0; c < y.cols; ++c) y(r, c) += broadcast ? bv.data[c] : bv(r, c);
    const std::size_t ia = a.id, ib = b.id;
    return t.push(std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib, broadcast](tape& tp, std::size_t self) {
                      const matrix& g = tp.upstream(self);
                      if (tp.requires_grad(ia)) {
                          matrix& ga = tp.grad_ref(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
                      }
                      if (tp.requires_grad(ib)) {
                          matrix& gb = tp.grad_ref(ib);
                          if (broadcast) {
                              for (std::size_t r = 0; r < g.rows; ++r)
                                  for (std::size_t c = 0; c < g.cols; ++c) gb.data[c] += g(r, c);
                          } else {
                              for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
                          }
                      }
                  });
}

inline var mul(var a, var b) {
    tape& t = detail::owner_of(a, b);
    const matrix& av = t.value(a);
    const matrix& bv = t.value(b);
    require_same_shape(av, bv, "mul");
    matrix y(av.rows, av.cols);
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = av.data[i] * bv.data[i];
    const std::size_t ia = a.id, ib = b.id;
    return t.push(std::move(y), t.requires_grad(a) || t.requires_grad(b), [ia, ib](tape& tp, std::size_t self) {
        const matrix& g = tp.upstream(self);
        if (tp.requires_grad(ia)) {
            const matrix& bv2 = tp.value(ib);
            matrix& ga = tp.grad_ref(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
        }
        if (tp.requires_grad(ib)) {
            const matrix& av2 = tp.value(ia);
            matrix& gb = tp.grad_ref(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av2.data[i];
        }
    });
}

inline var scale(var a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline var add_scalar(var a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline var sigmoid(var a) {
    return detail::unary(a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline var relu(var a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline var log(var a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline var exp(var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// Elementwise x^e for x >= 0. The derivative at x = 0 is taken as 0 for e > 1.
inline var pow(var a, double e) {
    return detail::unary(a, [e](double x) { return std::pow(x, e); },
                         [e](double x, double) { return x == 0.0 ? (e == 1.0 ? 1.0 : 0.0) : e * std::pow(x, e - 1.0); });
}

// Clamp with zero gradient outside [lo, hi].
inline var clamp(var a, double lo, double hi) {
    return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                         [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// Each row divided by its L2 norm.
inline var row_normalize(var a) {
    tape& t = detail::owner_of(a);
    const matrix& x = t.value(a);
    matrix y(x.rows, x.cols);
    std::vector<double> norms(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
        double s = 0.0;
        for (double v : x.row(r)) s += v * v;
        const double n = std::sqrt(s);
        norms[r] = n;
        if (!(n > 0.0)) {
            // A zero row has no direction; emit e_0 with no gradient.
            if (x.cols > 0) y(r, 0) = 1.0;
            continue;
        }
        for (std::size_t c = 0; c < x.cols; ++c) y(r, c) = x(r, c) / n;
    }
    const std::size_t ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, norms = std::move(norms)](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const matrix& g = tp.upstream(self);
        const matrix& yv = tp.value(self);
        matrix& ga = tp.grad_ref(ia);
        // d(x/|x|) = (g - y (y . g)) / |x|
        for (std::size_t r = 0; r < g.rows; ++r) {
            if (!(norms[r] > 0.0)) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < g.cols; ++c) dot += yv(r, c) * g(r, c);
            for (std::size_t c = 0; c < g.cols; ++c) ga(r, c) += (g(r, c) - yv(r, c) * dot) / norms[r];
        }
    });
}

inline var sum(var a) {
    tape& t = detail::owner_of(a);
    double s = 0.0;
    for (double v : t.value(a).data) s += v;
    const std::size_t ia = a.id;
    return t.push(matrix::scalar(s), t.requires_grad(a), [ia](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const double g = tp.upstream(self).data[0];
        for (double& v : tp.grad_ref(ia).data) v += g;
    });
}

inline var mean(var a) {
    const std::size_t n = detail::owner_of(a).value(a).size();
    if (n == 0) throw std::invalid_argument("mean: empty input");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// rows x cols -> rows x 1
inline var row_sum(var a) {
    tape& t = detail::owner_of(a);
    const matrix& x = t.value(a);
    matrix y(x.rows, 1);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (double v : x.row(r)) y.data[r] += v;
    const std::size_t ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const matrix& g = tp.upstream(self);
        matrix& ga = tp.grad_ref(ia);
        for (std::size_t r = 0; r < ga.rows; ++r)
            for (std::size_t c = 0; c < ga.cols; ++c) ga(r, c) += g.data[r];
    });
}

// Stable log-sum-exp of each row over entries where mask(r, c) != 0.
// A row with an empty mask is an error.
inline var row_logsumexp(var a, const matrix& mask) {
    tape& t = detail::owner_of(a);
    const matrix& x = t.value(a);
    require_same_shape(x, mask, "row_logsumexp");
    matrix y(x.rows, 1);
    for (std::size_t r = 0; r < x.rows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols; ++c)
            if (mask(r, c) != 0.0) m = std::max(m, x(r, c));
        if (!std::isfinite(m)) throw std::invalid_argument("row_logsumexp: row has no unmasked entries");
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols; ++c)
            if (mask(r, c) != 0.0) s += std::exp(x(r, c) - m);
        y.data[r] = m + std::log(s);
    }
    const std::size_t ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, mask](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const matrix& g = tp.upstream(self);
        const matrix& xv = tp.value(ia);
        const matrix& yv = tp.value(self);
        matrix& ga = tp.grad_ref(ia);
        for (std::size_t r = 0; r < xv.rows; ++r)
            for (std::size_t c = 0; c < xv.cols; ++c)
                if (mask(r, c) != 0.0) ga(r, c) += g.data[r] * std::exp(xv(r, c) - yv.data[r]);
    });
}

inline var gather_rows(var a, std::vector<std::size_t> idx) {
    tape& t = detail::owner_of(a);
    matrix y = gather_rows(t.value(a), idx);
    const std::size_t ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, idx = std::move(idx)](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const matrix& g = tp.upstream(self);
        matrix& ga = tp.grad_ref(ia);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < g.cols; ++c) ga(idx[i], c) += g(i, c);
    });
}

// One element per row: y(r) = a(r, cols[r]).
inline var pick(var a, std::vector<std::size_t> cols) {
    tape& t = detail::owner_of(a);
    const matrix& x = t.value(a);
    if (cols.size() != x.rows) throw std::invalid_argument("pick: one column index per row required");
    matrix y(x.rows, 1);
    for (std::size_t r = 0; r < x.rows; ++r) {
        if (cols[r] >= x.cols) throw std::out_of_range("pick: column out of range");
        y.data[r] = x(r, cols[r]);
    }
    const std::size_t ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, cols = std::move(cols)](tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const matrix& g = tp.upstream(self);
        matrix& ga = tp.grad_ref(ia);
        for (std::size_t r = 0; r < cols.size(); ++r) ga(r, cols[r]) += g.data[r];
    });
}

inline var concat_rows(var a, var b) {
    tape& t = detail::owner_of(a, b);
    const matrix& av = t.value(a);
    const matrix& bv = t.value(b);
    if (av.cols != bv.cols) throw std::invalid_argument("concat_rows: column mismatch");
    matrix y(av.rows + bv.rows, av.cols);
    std::copy(av.data.begin(), av.data.end(), y.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(av.size()));
    const std::size_t ia = a.id, ib = b.id, split = av.size();
    return t.push(std::move(y), t.requires_grad(a) || t.requires_grad(b), [ia, ib, split](tape& tp, std::size_t self) {
        const matrix& g = tp.upstream(self);
        if (tp.requires_grad(ia)) {
            matrix& ga = tp.grad_ref(ia);
            for (std::size_t i = 0; i < split; ++i) ga.data[i] += g.data[i];
        }
        if (tp.requires_grad(ib)) {
            matrix& gb = tp.grad_ref(ib);
            for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += g.data[split + i];
        }
    });
}

inline var operator+(var a, var b) { return add(a, b); }
inline var operator*(var a, var b) { return mul(a, b); }

}  // namespace dicap
