#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "dicap/matrix.hpp"

namespace dicap {

// Per-class dual thresholds: the mid-range of positive-labeled and of
// negative-labeled scores on the supervised set.
struct class_thresholds {
    std::vector<double> tau_pos;
    std::vector<double> tau_neg;
    std::vector<std::uint64_t> n_pos_support;
    std::vector<std::uint64_t> n_neg_support;
    // Valid when both groups were non-empty.
    std::vector<bool> valid;
    // Set when the raw mid-ranges crossed and were swapped.
    std::vector<bool> swapped;

    std::size_t num_classes() const { return tau_pos.size(); }

    static class_thresholds constant(std::size_t classes, double pos, double neg) {
        class_thresholds t;
        t.tau_pos.assign(classes, pos);
        t.tau_neg.assign(classes, neg);
        t.n_pos_support.assign(classes, 0);
        t.n_neg_support.assign(classes, 0);
        t.valid.assign(classes, true);
        t.swapped.assign(classes, false);
        return t;
    }
};

inline class_thresholds derive_thresholds(const matrix& sup_preds, const matrix& sup_labels) {
    require_same_shape(sup_preds, sup_labels, "derive_thresholds");
    if (sup_preds.rows == 0) throw std::invalid_argument("derive_thresholds: empty supervised set");
    const std::size_t C = sup_preds.cols;
    class_thresholds t = class_thresholds::constant(C, 1.0, 0.0);
    constexpr double inf = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
        double pmin = inf, pmax = -inf, nmin = inf, nmax = -inf;
        for (std::size_t i = 0; i < sup_preds.rows; ++i) {
            const double p = sup_preds(i, c);
            if (sup_labels(i, c) == 1.0) {
                pmin = std::min(pmin, p);
                pmax = std::max(pmax, p);
                ++t.n_pos_support[c];
            } else {
                nmin = std::min(nmin, p);
                nmax = std::max(nmax, p);
                ++t.n_neg_support[c];
            }
        }
        // Missing evidence: no confident label of that polarity is ever emitted.
        t.tau_pos[c] = t.n_pos_support[c] ? (pmax + pmin) / 2.0 : 1.0;
        t.tau_neg[c] = t.n_neg_support[c] ? (nmax + nmin) / 2.0 : 0.0;
        t.valid[c] = t.n_pos_support[c] > 0 && t.n_neg_support[c] > 0;
        if (t.tau_pos[c] < t.tau_neg[c]) {
            std::swap(t.tau_pos[c], t.tau_neg[c]);
            t.swapped[c] = true;
        }
    }
    return t;
}

inline constexpr std::int8_t pseudo_positive = 1;
inline constexpr std::int8_t pseudo_negative = 0;
inline constexpr std::int8_t pseudo_uncertain = -1;

struct pseudo_label_matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> values;

    std::int8_t operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

    std::size_t count(std::int8_t v) const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), v)); }
    std::size_t confident() const { return count(pseudo_positive) + count(pseudo_negative); }
    std::size_t uncertain() const { return count(pseudo_uncertain); }

    pseudo_label_matrix select_rows(const std::vector<std::size_t>& idx) const {
        pseudo_label_matrix out{idx.size(), cols, std::vector<std::int8_t>(idx.size() * cols)};
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols), cols,
                        out.values.begin() + static_cast<std::ptrdiff_t>(i * cols));
        return out;
    }
};

// 1 above tau_pos, 0 below tau_neg, -1 on the closed band in between.
inline pseudo_label_matrix assign_pseudo_labels(const matrix& preds, const class_thresholds& t) {
    if (preds.cols != t.num_classes()) throw std::invalid_argument("assign_pseudo_labels: class count mismatch");
    pseudo_label_matrix out{preds.rows, preds.cols, std::vector<std::int8_t>(preds.size())};
    for (std::size_t i = 0; i < preds.rows; ++i)
        for (std::size_t c = 0; c < preds.cols; ++c) {
            const double p = preds(i, c);
            if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("assign_pseudo_labels: score outside [0, 1]");
            std::int8_t v = pseudo_uncertain;
            if (p > t.tau_pos[c])
                v = pseudo_positive;
            else if (p < t.tau_neg[c])
                v = pseudo_negative;
            out.values[i * preds.cols + c] = v;
        }
    return out;
}

inline void write_thresholds_csv(std::ostream& os, const class_thresholds& t) {
    os << "class,tau_pos,tau_neg,n_pos_support,n_neg_support\n" << std::setprecision(17);
    for (std::size_t c = 0; c < t.num_classes(); ++c)
        os << c << ',' << t.tau_pos[c] << ',' << t.tau_neg[c] << ',' << t.n_pos_support[c] << ',' << t.n_neg_support[c]
           << '\n';
}

}  // namespace dicap
