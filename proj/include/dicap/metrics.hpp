#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dicap/matrix.hpp"

namespace dicap {

// Mean over positives of precision at each positive's rank, scores sorted in
// descending order with ties kept in original order. std::nullopt when there
// are no positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double hits = 0.0, total = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (labels[order[r]] != 1.0) continue;
        hits += 1.0;
        total += hits / static_cast<double>(r + 1);
    }
    if (hits == 0.0) return std::nullopt;
    return total / hits;
}

struct map_result {
    double map = 0.0;
    std::vector<std::optional<double>> per_class;
    std::vector<std::size_t> skipped_classes;
};

inline map_result mean_average_precision_detail(const matrix& scores, const matrix& labels) {
    require_same_shape(scores, labels, "mean_average_precision");
    map_result out;
    std::vector<double> s(scores.rows), l(scores.rows);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < scores.cols; ++c) {
        for (std::size_t i = 0; i < scores.rows; ++i) {
            s[i] = scores(i, c);
            l[i] = labels(i, c);
        }
        auto ap = average_precision(s, l);
        out.per_class.push_back(ap);
        if (ap) {
            sum += *ap;
            ++n;
        } else {
            out.skipped_classes.push_back(c);
        }
    }
    if (n == 0) throw std::invalid_argument("mean_average_precision: no class has a positive label");
    out.map = sum / static_cast<double>(n);
    return out;
}

inline double mean_average_precision(const matrix& scores, const matrix& labels) {
    return mean_average_precision_detail(scores, labels).map;
}

}  // namespace dicap
