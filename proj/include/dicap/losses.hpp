#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "dicap/autograd.hpp"
#include "dicap/calibration.hpp"
#include "dicap/matrix.hpp"
#include "dicap/thresholding.hpp"

namespace dicap {

// Asymmetric loss: positives -(1-p)^g+ log p, negatives -(p_m)^g- log(1-p_m)
// with the shifted probability p_m = max(p - m, 0).
struct asl_config {
    double gamma_pos = 0.0;
    double gamma_neg = 4.0;
    double margin = 0.05;

    void validate() const {
        if (!(gamma_pos >= 0.0) || !(gamma_neg >= 0.0)) throw std::invalid_argument("asl_config: gammas must be >= 0");
        if (!(margin >= 0.0 && margin < 1.0)) throw std::invalid_argument("asl_config: margin must lie in [0, 1)");
    }
};

inline double asl(double p, int y, const asl_config& cfg) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("asl: score must lie strictly inside (0, 1)");
    if (y == 1) return -std::pow(1.0 - p, cfg.gamma_pos) * std::log(p);
    if (y != 0) throw std::invalid_argument("asl: label must be 0 or 1");
    const double pm = std::max(p - cfg.margin, 0.0);
    if (pm == 0.0) return 0.0;
    return -std::pow(pm, cfg.gamma_neg) * std::log(1.0 - pm);
}

namespace detail {
inline constexpr double log_floor = 1e-12;
}

// Elementwise ASL of a score matrix against 0/1 targets.
inline var asl_elementwise(var scores, const matrix& targets, const asl_config& cfg) {
    tape& t = *scores.owner;
    require_same_shape(t.value(scores), targets, "asl_elementwise");
    var log_p = log(clamp(scores, detail::log_floor, 1.0));
    var pos = scale(log_p, -1.0);
    if (cfg.gamma_pos != 0.0) pos = mul(pos, pow(add_scalar(scale(scores, -1.0), 1.0), cfg.gamma_pos));

    var shifted = cfg.margin > 0.0 ? relu(add_scalar(scores, -cfg.margin)) : scores;
    var neg = scale(log(clamp(add_scalar(scale(shifted, -1.0), 1.0), detail::log_floor, 1.0)), -1.0);
    if (cfg.gamma_neg != 0.0) neg = mul(neg, pow(shifted, cfg.gamma_neg));

    matrix not_targets(targets.rows, targets.cols);
    for (std::size_t i = 0; i < targets.size(); ++i) not_targets.data[i] = 1.0 - targets.data[i];
    return add(mul(pos, t.constant(targets)), mul(neg, t.constant(std::move(not_targets))));
}

// Mean ASL over every entry; the supervised and fine-tuning objective.
inline var asl_mean(var scores, const matrix& labels, const asl_config& cfg) {
    return mean(asl_elementwise(scores, labels, cfg));
}

inline double asl_mean(const matrix& scores, const matrix& labels, const asl_config& cfg) {
    require_same_shape(scores, labels, "asl_mean");
    if (scores.empty()) throw std::invalid_argument("asl_mean: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) s += asl(scores.data[i], static_cast<int>(labels.data[i]), cfg);
    return s / static_cast<double>(scores.size());
}

// Per-entry weights for the pseudo-label loss: w(p, y_hat) on confident
// entries, 0 on uncertain ones. The lookup scores are treated as constants.
inline matrix pseudo_weights(const matrix& lookup_scores, const pseudo_label_matrix& pseudo, const weight_table& table) {
    if (lookup_scores.rows != pseudo.rows || lookup_scores.cols != pseudo.cols)
        throw std::invalid_argument("pseudo_weights: shape mismatch");
    matrix w(pseudo.rows, pseudo.cols);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const int y = pseudo.values[i];
        if (y >= 0) w.data[i] = table.lookup(lookup_scores.data[i], y);
    }
    return w;
}

inline matrix pseudo_targets(const pseudo_label_matrix& pseudo) {
    matrix t(pseudo.rows, pseudo.cols);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = pseudo.values[i] == pseudo_positive ? 1.0 : 0.0;
    return t;
}

// (1/|conf|) * sum over confident entries of w * ASL(p, y_hat). Zero when
// nothing is confident.
inline var pseudo_loss(var scores, const pseudo_label_matrix& pseudo, const matrix& weights, const asl_config& cfg) {
    tape& t = *scores.owner;
    const std::size_t conf = pseudo.confident();
    if (conf == 0) return t.constant(matrix::scalar(0.0));
    var per_entry = asl_elementwise(scores, pseudo_targets(pseudo), cfg);
    return scale(sum(mul(per_entry, t.constant(weights))), 1.0 / static_cast<double>(conf));
}

// Value-only form; weights are looked up at the same scores.
inline double pseudo_loss(const matrix& preds, const pseudo_label_matrix& pseudo, const weight_table& table,
                          const asl_config& cfg) {
    if (preds.rows != pseudo.rows || preds.cols != pseudo.cols) throw std::invalid_argument("pseudo_loss: shape mismatch");
    double s = 0.0;
    std::size_t conf = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int y = pseudo.values[i];
        if (y < 0) continue;
        s += table.lookup(preds.data[i], y) * asl(preds.data[i], y, cfg);
        ++conf;
    }
    return conf ? s / static_cast<double>(conf) : 0.0;
}

struct contrastive_batch {
    matrix embeddings;               // 2B x dim, unit rows
    std::vector<std::size_t> partner;  // involution without fixed points
    double temperature = 0.5;

    // Rows [0, B) paired with rows [B, 2B).
    static contrastive_batch from_views(const matrix& first, const matrix& second, double temperature) {
        require_same_shape(first, second, "contrastive_batch");
        contrastive_batch b;
        b.embeddings = matrix(first.rows * 2, first.cols);
        std::copy(first.data.begin(), first.data.end(), b.embeddings.data.begin());
        std::copy(second.data.begin(), second.data.end(),
                  b.embeddings.data.begin() + static_cast<std::ptrdiff_t>(first.size()));
        b.partner = view_partners(first.rows);
        b.temperature = temperature;
        return b;
    }

    static std::vector<std::size_t> view_partners(std::size_t pairs) {
        std::vector<std::size_t> p(2 * pairs);
        for (std::size_t i = 0; i < pairs; ++i) {
            p[i] = i + pairs;
            p[i + pairs] = i;
        }
        return p;
    }
};

namespace detail {

inline void validate_partners(const std::vector<std::size_t>& partner, std::size_t n) {
    if (partner.size() != n) throw std::invalid_argument("class_infonce: one partner per embedding required");
    for (std::size_t i = 0; i < n; ++i) {
        if (partner[i] >= n || partner[i] == i || partner[partner[i]] != i)
            throw std::invalid_argument("class_infonce: partner relation must be a fixed-point-free involution");
    }
}

}  // namespace detail

// -(1/2B) sum_i log[ exp(z_i.z_i+/tau) / sum_{j != i} exp(z_i.z_j/tau) ]
//
// A single tape node: the (2B)^2 similarity and softmax matrices live only
// inside it. With S = Z Z^T / tau and P the row softmax over j != i,
// dL/dS = (P - E) / 2B with E the partner indicator, and dL/dZ = (G + G^T) Z / tau.
inline var class_infonce(var embeddings, const std::vector<std::size_t>& partner, double temperature) {
    tape& t = *embeddings.owner;
    const matrix& z = t.value(embeddings);
    const std::size_t n = z.rows;
    if (n < 2) throw std::invalid_argument("class_infonce: need at least one pair (2B >= 2)");
    if (!(temperature > 0.0)) throw std::invalid_argument("class_infonce: temperature must be positive");
    detail::validate_partners(partner, n);

    matrix sim(n, n);
    gemm_accumulate(z, false, z, true, sim);
    const double inv_t = 1.0 / temperature;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double* row = sim.data.data() + i * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            row[j] *= inv_t;
            if (j != i) m = std::max(m, row[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) s += std::exp(row[j] - m);
        const double lse = m + std::log(s);
        total += lse - row[partner[i]];
        // Keep the softmax for the backward pass.
        for (std::size_t j = 0; j < n; ++j) row[j] = j == i ? 0.0 : std::exp(row[j] - lse);
    }
    const std::size_t iz = embeddings.id;
    return t.push(matrix::scalar(total / static_cast<double>(n)), t.requires_grad(embeddings),
                  [iz, partner, inv_t, soft = std::move(sim)](tape& tp, std::size_t self) {
                      if (!tp.requires_grad(iz)) return;
                      const std::size_t n = soft.rows;
                      const double g = tp.upstream(self).data[0] * inv_t / static_cast<double>(n);
                      // (dL/dS + dL/dS^T) / tau, scaled by the upstream gradient.
                      matrix sym(n, n);
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < n; ++j) sym(i, j) = (soft(i, j) + soft(j, i)) * g;
                      for (std::size_t i = 0; i < n; ++i) {
                          sym(i, partner[i]) -= g;
                          sym(partner[i], i) -= g;
                      }
                      gemm_accumulate(sym, false, tp.value(iz), false, tp.grad_ref(iz));
                  });
}

inline double class_infonce(const contrastive_batch& batch) {
    tape t;
    return t.value(class_infonce(t.constant(batch.embeddings), batch.partner, batch.temperature)).data[0];
}

inline double total_loss(double sup, double pseudo, double uncer) {
    if (!std::isfinite(sup) || !std::isfinite(pseudo) || !std::isfinite(uncer))
        throw std::domain_error("total_loss: non-finite term");
    return sup + pseudo + uncer;
}

inline var total_loss(var sup, var pseudo, var uncer) { return add(add(sup, pseudo), uncer); }

}  // namespace dicap
