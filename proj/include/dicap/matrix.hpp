#pragma once

// Dense row-major matrix of doubles. Deliberately small: the library only
// needs a handful of shapes (batches of features, score matrices, weights).

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dicap {

struct matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    matrix() = default;
    matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) throw std::invalid_argument("matrix: data length does not match shape");
    }
    matrix(std::size_t r, std::size_t c, std::initializer_list<double> values)
        : matrix(r, c, std::vector<double>(values)) {}

    static matrix scalar(double v) { return matrix(1, 1, v); }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const matrix&) const = default;
};

inline std::string shape_string(const matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline void require_same_shape(const matrix& a, const matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                                    shape_string(b));
    }
}

inline bool all_finite(const matrix& m) {
    for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// out += op(a) * op(b), with optional transposes. Plain triple loop ordered
// for contiguous access in the innermost dimension.
inline void gemm_accumulate(const matrix& a, bool trans_a, const matrix& b, bool trans_b, matrix& out) {
    const std::size_t m = trans_a ? a.cols : a.rows;
    const std::size_t k = trans_a ? a.rows : a.cols;
    const std::size_t kb = trans_b ? b.cols : b.rows;
    const std::size_t n = trans_b ? b.rows : b.cols;
    if (k != kb) throw std::invalid_argument("gemm: inner dimension mismatch");
    if (out.rows != m || out.cols != n) throw std::invalid_argument("gemm: output shape mismatch");
    if (m == 0 || n == 0 || k == 0) return;

    using row_major = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using const_map = Eigen::Map<const row_major>;
    const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    const const_map ea(a.data.data(), ei(a.rows), ei(a.cols));
    const const_map eb(b.data.data(), ei(b.rows), ei(b.cols));
    Eigen::Map<row_major> eo(out.data.data(), ei(m), ei(n));
    if (!trans_a && !trans_b)
        eo.noalias() += ea * eb;
    else if (!trans_a && trans_b)
        eo.noalias() += ea * eb.transpose();
    else if (trans_a && !trans_b)
        eo.noalias() += ea.transpose() * eb;
    else
        eo.noalias() += ea.transpose() * eb.transpose();
}

inline matrix matmul(const matrix& a, const matrix& b) {
    matrix out(a.rows, b.cols);
    gemm_accumulate(a, false, b, false, out);
    return out;
}

inline matrix gather_rows(const matrix& m, std::span<const std::size_t> idx) {
    matrix out(idx.size(), m.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m.rows) throw std::out_of_range("gather_rows: index out of range");
        auto src = m.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace dicap
