#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dicap/calibration.hpp"
#include "dicap/metrics.hpp"
#include "dicap/trainer.hpp"

namespace dicap {

struct reliability_row {
    std::size_t bin = 0;
    double lower_edge = 0.0;
    double upper_edge = 0.0;
    // Raw per-bin values (before empty-bin resolution) for y_hat = 1 and 0.
    double estimated_pos = 0.0;
    double estimated_neg = 0.0;
    double oracle_pos = 0.0;
    double oracle_neg = 0.0;
    std::uint64_t estimated_count = 0;  // n_pos + n_neg of the estimated table
    std::uint64_t oracle_pos_count = 0;
    std::uint64_t oracle_neg_count = 0;
    bool co_occupied_pos = false;
    bool co_occupied_neg = false;
};

struct reliability_report {
    std::vector<reliability_row> rows;
    double linf_pos = 0.0;
    double linf_neg = 0.0;
    double linf_gap = 0.0;
    std::size_t co_occupied = 0;  // bins compared, both sides counted
};

// Compares the two tables bin by bin. A bin counts on a side when the
// estimated table saw any entry there and the oracle saw a pseudo-label of
// that polarity there.
inline reliability_report make_reliability_report(const weight_table& estimated, const weight_table& oracle) {
    if (estimated.bins() != oracle.bins())
        throw std::invalid_argument("reliability_report: bin count mismatch (" + std::to_string(estimated.bins()) +
                                    " vs " + std::to_string(oracle.bins()) + ")");
    const auto& e = estimated.stats();
    const auto& o = oracle.stats();
    reliability_report rep;
    for (std::size_t k = 0; k < e.bins; ++k) {
        reliability_row r;
        r.bin = k;
        r.lower_edge = e.lower_edge(k);
        r.upper_edge = e.upper_edge(k);
        r.estimated_pos = e.r_pos[k];
        r.estimated_neg = e.r_neg[k];
        r.oracle_pos = o.r_pos[k];
        r.oracle_neg = o.r_neg[k];
        r.estimated_count = e.n_pos[k] + e.n_neg[k];
        r.oracle_pos_count = o.n_pos[k];
        r.oracle_neg_count = o.n_neg[k];
        r.co_occupied_pos = e.occupied_pos[k] && o.occupied_pos[k];
        r.co_occupied_neg = e.occupied_neg[k] && o.occupied_neg[k];
        if (r.co_occupied_pos) {
            rep.linf_pos = std::max(rep.linf_pos, std::abs(r.estimated_pos - r.oracle_pos));
            ++rep.co_occupied;
        }
        if (r.co_occupied_neg) {
            rep.linf_neg = std::max(rep.linf_neg, std::abs(r.estimated_neg - r.oracle_neg));
            ++rep.co_occupied;
        }
        rep.rows.push_back(r);
    }
    rep.linf_gap = std::max(rep.linf_pos, rep.linf_neg);
    return rep;
}

inline void write_reliability_csv(std::ostream& os, const reliability_report& rep) {
    os << "bin,lower_edge,upper_edge,estimated_pos,oracle_pos,estimated_neg,oracle_neg,estimated_count,"
          "oracle_pos_count,oracle_neg_count,co_occupied_pos,co_occupied_neg\n"
       << std::setprecision(17);
    for (const auto& r : rep.rows)
        os << r.bin << ',' << r.lower_edge << ',' << r.upper_edge << ',' << r.estimated_pos << ',' << r.oracle_pos << ','
           << r.estimated_neg << ',' << r.oracle_neg << ',' << r.estimated_count << ',' << r.oracle_pos_count << ','
           << r.oracle_neg_count << ',' << int(r.co_occupied_pos) << ',' << int(r.co_occupied_neg) << '\n';
}

// L-infinity distance between two correctness curves (same semantics on both
// sides, e.g. two estimated tables) over bins occupied in both.
inline double curve_gap(const weight_table& a, const weight_table& b) {
    if (a.bins() != b.bins()) throw std::invalid_argument("curve_gap: bin count mismatch");
    double gap = 0.0;
    const auto& sa = a.stats();
    const auto& sb = b.stats();
    for (std::size_t k = 0; k < sa.bins; ++k) {
        if (sa.occupied_pos[k] && sb.occupied_pos[k]) gap = std::max(gap, std::abs(sa.r_pos[k] - sb.r_pos[k]));
        if (sa.occupied_neg[k] && sb.occupied_neg[k]) gap = std::max(gap, std::abs(sa.r_neg[k] - sb.r_neg[k]));
    }
    return gap;
}

struct policy_run {
    weight_policy policy = weight_policy::ours;
    std::uint64_t seed = 0;
    double final_map = 0.0;
    std::vector<double> map_trace;  // one entry per epoch, all stages
};

struct policy_summary {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation, 0 for a single seed
};

struct policy_report {
    std::vector<policy_run> runs;
    std::vector<std::uint64_t> seeds;

    std::vector<double> maps(weight_policy p) const {
        std::vector<double> out;
        for (const auto& r : runs)
            if (r.policy == p) out.push_back(r.final_map);
        return out;
    }

    policy_summary summary(weight_policy p) const {
        const auto v = maps(p);
        if (v.empty()) throw std::invalid_argument(std::string("policy_report: no runs for ") + to_string(p));
        policy_summary s;
        for (double x : v) s.mean += x;
        s.mean /= static_cast<double>(v.size());
        if (v.size() > 1) {
            double ss = 0.0;
            for (double x : v) ss += (x - s.mean) * (x - s.mean);
            s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
        return s;
    }
};

// Runs the pipeline once per (seed, policy); only the weight source differs
// between runs sharing a seed.
inline policy_report compare_policies(const ssmll_data& data, const dataset& test, const train_config& cfg,
                                      const std::vector<std::uint64_t>& seeds, bool trace = false,
                                      std::span<const weight_policy> policies = all_policies) {
    if (seeds.empty()) throw std::invalid_argument("compare_policies: at least one seed required");
    policy_report rep;
    rep.seeds = seeds;
    for (auto seed : seeds) {
        for (auto p : policies) {
            train_config c = cfg;
            c.seed = seed;
            c.policy = p;
            c.pseudo_labeling = true;
            const run_result r = run_pipeline(data, test, c, {trace, {}});
            policy_run pr{p, seed, r.test_map, {}};
            for (const auto& e : r.reports)
                if (e.test_map) pr.map_trace.push_back(*e.test_map);
            rep.runs.push_back(std::move(pr));
        }
    }
    return rep;
}

inline void write_policy_csv(std::ostream& os, const policy_report& rep) {
    os << "policy,seed,final_map,map_trace\n" << std::setprecision(17);
    for (const auto& r : rep.runs) {
        os << to_string(r.policy) << ',' << r.seed << ',' << r.final_map << ',';
        for (std::size_t i = 0; i < r.map_trace.size(); ++i) os << (i ? ";" : "") << r.map_trace[i];
        os << '\n';
    }
}

inline nlohmann::json policy_summary_json(const policy_report& rep) {
    nlohmann::json j;
    j["seeds"] = rep.seeds;
    for (auto p : all_policies) {
        if (rep.maps(p).empty()) continue;
        const auto s = rep.summary(p);
        j["policies"][to_string(p)] = {{"mean_map", s.mean}, {"std_map", s.stddev}, {"maps", rep.maps(p)}};
    }
    return j;
}

}  // namespace dicap
