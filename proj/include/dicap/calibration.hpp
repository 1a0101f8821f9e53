#pragma once

// Confidence-binned correctness estimation.
//
// The unit interval is split into K bins B_k = [k/K, (k+1)/K) (the last bin
// also holds p = 1). For every (sample, class) pair of an evaluation pool the
// ground-truth label is counted into its score's bin; the positive proportion
// r_pos[k] estimates P(y = 1 | p in B_k), which is the probability that a
// positive pseudo-label in that bin is correct (and r_neg = 1 - r_pos for
// negatives). Lookups interpolate linearly between the left edges of bins k
// and k+1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dicap/matrix.hpp"

namespace dicap {

inline constexpr double default_bin_epsilon = 1e-12;
inline constexpr std::size_t default_bins = 20;

inline std::size_t bin_index(double p, std::size_t bins) {
    if (bins == 0) throw std::invalid_argument("bin_index: bin count must be positive");
    if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("bin_index: score outside [0, 1]");
    const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(bins)));
    return std::min(k, bins - 1);
}

struct bin_stats {
    std::size_t bins = 0;
    double epsilon = default_bin_epsilon;
    std::vector<std::uint64_t> n_pos;
    std::vector<std::uint64_t> n_neg;
    std::vector<double> r_pos;
    std::vector<double> r_neg;
    // Occupancy is tracked per side: for estimated tables both sides share it,
    // for oracle tables a bin can hold positive pseudo-labels but no negatives.
    std::vector<bool> occupied_pos;
    std::vector<bool> occupied_neg;

    explicit bin_stats(std::size_t k = default_bins, double eps = default_bin_epsilon)
        : bins(k), epsilon(eps), n_pos(k), n_neg(k), r_pos(k), r_neg(k), occupied_pos(k), occupied_neg(k) {
        if (k < 2) throw std::invalid_argument("bin_stats: need at least 2 bins");
    }

    double lower_edge(std::size_t k) const { return static_cast<double>(k) / static_cast<double>(bins); }
    double upper_edge(std::size_t k) const { return static_cast<double>(k + 1) / static_cast<double>(bins); }
};

// Counts every (row, class) pair of preds/labels into its bin.
inline bin_stats accumulate_bin_stats(const matrix& preds, const matrix& labels, std::size_t bins,
                                      double epsilon = default_bin_epsilon) {
    require_same_shape(preds, labels, "accumulate_bin_stats");
    if (preds.empty()) throw std::invalid_argument("accumulate_bin_stats: empty evaluation pool");
    bin_stats s(bins, epsilon);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double y = labels.data[i];
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("accumulate_bin_stats: labels must be 0 or 1");
        const auto k = bin_index(preds.data[i], bins);
        (y == 1.0 ? s.n_pos : s.n_neg)[k] += 1;
    }
    for (std::size_t k = 0; k < bins; ++k) {
        const double total = static_cast<double>(s.n_pos[k] + s.n_neg[k]);
        const bool occupied = s.n_pos[k] + s.n_neg[k] > 0;
        s.occupied_pos[k] = s.occupied_neg[k] = occupied;
        s.r_pos[k] = static_cast<double>(s.n_pos[k]) / (total + epsilon);
        s.r_neg[k] = 1.0 - s.r_pos[k];
    }
    return s;
}

inline bin_stats accumulate_bin_stats(std::span<const double> preds, std::span<const double> labels,
                                      std::size_t bins, double epsilon = default_bin_epsilon) {
    if (preds.size() != labels.size()) throw std::invalid_argument("accumulate_bin_stats: length mismatch");
    return accumulate_bin_stats(matrix(preds.size(), 1, std::vector<double>(preds.begin(), preds.end())),
                                matrix(labels.size(), 1, std::vector<double>(labels.begin(), labels.end())), bins,
                                epsilon);
}

enum class table_source { estimated_from_est, estimated_from_labeled, oracle, uniform, confidence };

inline const char* to_string(table_source s) {
    switch (s) {
        case table_source::estimated_from_est: return "estimated-from-est";
        case table_source::estimated_from_labeled: return "estimated-from-labeled";
        case table_source::oracle: return "oracle";
        case table_source::uniform: return "uniform";
        case table_source::confidence: return "confidence";
    }
    return "unknown";
}

enum class weight_mode { interpolated, uniform, confidence };

namespace detail {

// Empty bins take the value of the nearest occupied bin, lower index on ties.
// Returns false when no bin is occupied.
inline bool resolve_empty(const std::vector<double>& raw, const std::vector<bool>& occupied, std::vector<double>& out) {
    const std::size_t n = raw.size();
    out.assign(n, 0.0);
    bool any = false;
    for (bool o : occupied) any = any || o;
    if (!any) return false;
    for (std::size_t k = 0; k < n; ++k) {
        if (occupied[k]) {
            out[k] = raw[k];
            continue;
        }
        for (std::size_t d = 1; d < n; ++d) {
            if (d <= k && occupied[k - d]) {
                out[k] = raw[k - d];
                break;
            }
            if (k + d < n && occupied[k + d]) {
                out[k] = raw[k + d];
                break;
            }
        }
    }
    return true;
}

}  // namespace detail

// Correctness-likelihood lookup w(p, y_hat) in [0, 1].
class weight_table {
public:
    static weight_table from_stats(bin_stats stats, table_source source) {
        weight_table t;
        t.mode_ = weight_mode::interpolated;
        t.source_ = source;
        t.has_pos_ = detail::resolve_empty(stats.r_pos, stats.occupied_pos, t.pos_);
        t.has_neg_ = detail::resolve_empty(stats.r_neg, stats.occupied_neg, t.neg_);
        if (!t.has_pos_ && !t.has_neg_) throw std::invalid_argument("weight_table: every bin is empty");
        t.stats_ = std::move(stats);
        return t;
    }

    // w == 1 everywhere.
    static weight_table uniform(std::size_t bins = default_bins) {
        weight_table t;
        t.mode_ = weight_mode::uniform;
        t.source_ = table_source::uniform;
        t.stats_ = bin_stats(bins);
        t.pos_.assign(bins, 1.0);
        t.neg_.assign(bins, 1.0);
        return t;
    }

    // w = p for positive pseudo-labels and 1 - p for negative ones.
    static weight_table confidence(std::size_t bins = default_bins) {
        weight_table t = uniform(bins);
        t.mode_ = weight_mode::confidence;
        t.source_ = table_source::confidence;
        return t;
    }

    double lookup(double p, int y_hat) const {
        if (y_hat != 0 && y_hat != 1) throw std::invalid_argument("weight_table: pseudo-label must be 0 or 1");
        const std::size_t K = stats_.bins;
        const std::size_t k = bin_index(p, K);
        switch (mode_) {
            case weight_mode::uniform: return 1.0;
            case weight_mode::confidence: return y_hat == 1 ? p : 1.0 - p;
            case weight_mode::interpolated: break;
        }
        if (y_hat == 1 && !has_pos_) throw std::logic_error("weight_table: no positive-side bins occupied");
        if (y_hat == 0 && !has_neg_) throw std::logic_error("weight_table: no negative-side bins occupied");
        const auto& r = y_hat == 1 ? pos_ : neg_;
        const double left = r[k];
        const double right = k + 1 < K ? r[k + 1] : r[k];
        // K * [((k+1)/K - p) r_k + (p - k/K) r_{k+1}], i.e. a convex combination.
        const double frac = std::clamp(p * static_cast<double>(K) - static_cast<double>(k), 0.0, 1.0);
        return std::clamp((1.0 - frac) * left + frac * right, 0.0, 1.0);
    }

    weight_mode mode() const { return mode_; }
    table_source source() const { return source_; }
    const bin_stats& stats() const { return stats_; }
    std::size_t bins() const { return stats_.bins; }
    // Per-bin values after empty-bin resolution.
    const std::vector<double>& resolved_pos() const { return pos_; }
    const std::vector<double>& resolved_neg() const { return neg_; }

private:
    weight_table() = default;

    weight_mode mode_ = weight_mode::uniform;
    table_source source_ = table_source::uniform;
    bin_stats stats_{};
    std::vector<double> pos_;
    std::vector<double> neg_;
    bool has_pos_ = true;
    bool has_neg_ = true;
};

inline weight_table estimate_weight_table(const matrix& preds, const matrix& labels, std::size_t bins,
                                          table_source source = table_source::estimated_from_est) {
    return weight_table::from_stats(accumulate_bin_stats(preds, labels, bins), source);
}

// Per-bin fraction of correct pseudo-labels, from ground truth. Positive and
// negative pseudo-labels are scored separately; uncertain entries (-1) are
// ignored. In the returned stats n_pos / n_neg count the positive / negative
// pseudo-labels that landed in each bin.
inline weight_table oracle_weight_table(const matrix& preds, const matrix& true_labels,
                                        std::span<const std::int8_t> pseudo_labels, std::size_t bins) {
    require_same_shape(preds, true_labels, "oracle_weight_table");
    if (pseudo_labels.size() != preds.size()) throw std::invalid_argument("oracle_weight_table: pseudo-label size mismatch");
    if (preds.empty()) throw std::invalid_argument("oracle_weight_table: empty pool");
    bin_stats s(bins, 0.0);
    std::vector<std::uint64_t> pos_correct(bins), neg_correct(bins);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int yh = pseudo_labels[i];
        if (yh < 0) continue;
        const auto k = bin_index(preds.data[i], bins);
        const bool correct = static_cast<double>(yh) == true_labels.data[i];
        if (yh == 1) {
            s.n_pos[k] += 1;
            pos_correct[k] += correct;
        } else {
            s.n_neg[k] += 1;
            neg_correct[k] += correct;
        }
    }
    for (std::size_t k = 0; k < bins; ++k) {
        s.occupied_pos[k] = s.n_pos[k] > 0;
        s.occupied_neg[k] = s.n_neg[k] > 0;
        s.r_pos[k] = s.n_pos[k] ? static_cast<double>(pos_correct[k]) / static_cast<double>(s.n_pos[k]) : 0.0;
        s.r_neg[k] = s.n_neg[k] ? static_cast<double>(neg_correct[k]) / static_cast<double>(s.n_neg[k]) : 0.0;
    }
    return weight_table::from_stats(std::move(s), table_source::oracle);
}

// Mean binary cross-entropy between a constant weight w and correctness flags.
inline double bce_weight_objective(double w, std::span<const int> correct) {
    if (!(w > 0.0 && w < 1.0)) throw std::domain_error("bce_weight_objective: w must lie strictly inside (0, 1)");
    if (correct.empty()) throw std::invalid_argument("bce_weight_objective: no flags");
    double s = 0.0;
    for (int f : correct) s -= f ? std::log(w) : std::log(1.0 - w);
    return s / static_cast<double>(correct.size());
}

inline void write_weight_table_csv(std::ostream& os, const weight_table& t) {
    const auto& s = t.stats();
    os << "k,lower_edge,upper_edge,n_pos,n_neg,r_pos,r_neg,provenance\n";
    os << std::setprecision(17);
    for (std::size_t k = 0; k < s.bins; ++k) {
        os << k << ',' << s.lower_edge(k) << ',' << s.upper_edge(k) << ',' << s.n_pos[k] << ',' << s.n_neg[k] << ','
           << t.resolved_pos()[k] << ',' << t.resolved_neg()[k] << ',' << to_string(t.source()) << '\n';
    }
}

}  // namespace dicap
