#pragma once

// Synthetic multi-label data, the labeled/estimation/unlabeled split and
// feature-space augmentations.
//
// Generator: a latent h ~ N(0, I) drives both labels and features.
//   label c = 1  iff  sigmoid(a_c . h + b_c) > u_ic,  u_ic ~ U(0, 1)
//   x       = W h + sigma * noise
// a_c, b_c and W are drawn once per seed, so the train and test draws share
// them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dicap/autograd.hpp"
#include "dicap/matrix.hpp"
#include "dicap/rng.hpp"

namespace dicap {

struct gen_config {
    std::size_t samples = 20000;
    std::size_t test_samples = 5000;
    std::size_t input_dim = 64;
    std::size_t num_classes = 10;
    std::size_t latent_dim = 16;
    double bias_min = -4.0;
    double bias_max = -0.5;
    // Norm scale of the label directions a_c; larger means less label noise.
    double label_scale = 12.0;
    double noise_sigma = 1.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (samples == 0 || input_dim == 0 || num_classes == 0 || latent_dim == 0)
            throw std::invalid_argument("gen_config: dimensions must be >= 1");
        if (!(noise_sigma >= 0.0)) throw std::invalid_argument("gen_config: noise_sigma must be >= 0");
        if (!(bias_min <= bias_max)) throw std::invalid_argument("gen_config: bias_min must not exceed bias_max");
        if (!(label_scale >= 0.0)) throw std::invalid_argument("gen_config: label_scale must be >= 0");
    }
};

struct dataset {
    matrix features;  // N x d
    matrix labels;    // N x C, entries 0/1
    std::uint64_t seed = 0;

    std::size_t size() const { return features.rows; }
    std::size_t num_classes() const { return labels.cols; }

    bool operator==(const dataset&) const = default;
};

namespace detail {

struct generator_model {
    matrix mixing;      // d x latent
    matrix directions;  // C x latent
    std::vector<double> biases;
};

inline generator_model draw_generator_model(const gen_config& cfg) {
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> bias(cfg.bias_min, cfg.bias_max);
    generator_model g;
    g.mixing = matrix(cfg.input_dim, cfg.latent_dim);
    const double mix_scale = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
    for (double& v : g.mixing.data) v = normal(rng) * mix_scale;
    g.directions = matrix(cfg.num_classes, cfg.latent_dim);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        double norm = 0.0;
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
            g.directions(c, j) = normal(rng);
            norm += g.directions(c, j) * g.directions(c, j);
        }
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) g.directions(c, j) *= cfg.label_scale / norm;
    }
    for (std::size_t c = 0; c < cfg.num_classes; ++c) g.biases.push_back(bias(rng));
    return g;
}

inline dataset sample_dataset(const gen_config& cfg, const generator_model& g, std::size_t n, std::uint64_t stream) {
    auto rng = make_rng({cfg.seed, stream + 1});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    dataset ds;
    ds.seed = cfg.seed;
    ds.features = matrix(n, cfg.input_dim);
    ds.labels = matrix(n, cfg.num_classes);
    std::vector<double> h(cfg.latent_dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (double& v : h) v = normal(rng);
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            double a = g.biases[c];
            for (std::size_t j = 0; j < cfg.latent_dim; ++j) a += g.directions(c, j) * h[j];
            ds.labels(i, c) = sigmoid(a) > unif(rng) ? 1.0 : 0.0;
        }
        for (std::size_t r = 0; r < cfg.input_dim; ++r) {
            double x = 0.0;
            for (std::size_t j = 0; j < cfg.latent_dim; ++j) x += g.mixing(r, j) * h[j];
            ds.features(i, r) = x + cfg.noise_sigma * normal(rng);
        }
    }
    return ds;
}

}  // namespace detail

inline dataset generate_synthetic(const gen_config& cfg) {
    cfg.validate();
    return detail::sample_dataset(cfg, detail::draw_generator_model(cfg), cfg.samples, 0);
}

// Held-out draw from the same generator (shared a_c, b_c, W; fresh samples).
inline dataset generate_test_set(const gen_config& cfg) {
    cfg.validate();
    return detail::sample_dataset(cfg, detail::draw_generator_model(cfg), cfg.test_samples, 1);
}

inline dataset select_rows(const dataset& ds, const std::vector<std::size_t>& idx) {
    return dataset{gather_rows(ds.features, idx), gather_rows(ds.labels, idx), ds.seed};
}

// ---------------------------------------------------------------------------
// Splits

struct ssmll_splits {
    std::vector<std::size_t> sup;
    std::vector<std::size_t> est;
    std::vector<std::size_t> unlabeled;  // D_u
    std::vector<std::size_t> unsup;      // D_u followed by D_est
    double rho = 0.0;
    double est_fraction = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const ssmll_splits&) const = default;
};

namespace detail {
// ceil() that ignores representation noise such as 0.05 * 1000 = 50.000000000000007.
inline std::size_t robust_ceil(double x) { return static_cast<std::size_t>(std::ceil(x - 1e-9)); }
}

inline ssmll_splits split_ssmll(std::size_t n, double rho, double est_fraction, std::uint64_t seed) {
    if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("split_ssmll: rho must lie in (0, 1)");
    if (!(est_fraction > 0.0 && est_fraction < 1.0))
        throw std::invalid_argument("split_ssmll: est_fraction must lie in (0, 1)");
    const std::size_t labeled = std::min(n, detail::robust_ceil(rho * static_cast<double>(n)));
    const auto est_count = static_cast<std::size_t>(std::llround(est_fraction * static_cast<double>(labeled)));
    if (est_count == 0 || est_count >= labeled)
        throw std::invalid_argument("split_ssmll: split leaves D_sup or D_est empty (labeled=" +
                                    std::to_string(labeled) + ")");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    ssmll_splits s;
    s.rho = rho;
    s.est_fraction = est_fraction;
    s.seed = seed;
    const std::size_t sup_count = labeled - est_count;
    s.sup.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sup_count));
    s.est.assign(perm.begin() + static_cast<std::ptrdiff_t>(sup_count), perm.begin() + static_cast<std::ptrdiff_t>(labeled));
    s.unlabeled.assign(perm.begin() + static_cast<std::ptrdiff_t>(labeled), perm.end());
    std::sort(s.sup.begin(), s.sup.end());
    std::sort(s.est.begin(), s.est.end());
    std::sort(s.unlabeled.begin(), s.unlabeled.end());
    s.unsup = s.unlabeled;
    s.unsup.insert(s.unsup.end(), s.est.begin(), s.est.end());
    return s;
}

inline ssmll_splits split_ssmll(const dataset& ds, double rho, double est_fraction, std::uint64_t seed) {
    return split_ssmll(ds.size(), rho, est_fraction, seed);
}

// Checks disjointness, coverage of [0, n) and D_unsup = D_u + D_est.
inline void validate_splits(const ssmll_splits& s, std::size_t n) {
    std::vector<int> seen(n, 0);
    for (const auto* part : {&s.sup, &s.est, &s.unlabeled})
        for (auto i : *part) {
            if (i >= n) throw std::invalid_argument("splits: index out of range");
            if (seen[i]++) throw std::invalid_argument("splits: index assigned to more than one subset");
        }
    if (std::count(seen.begin(), seen.end(), 0) != 0) throw std::invalid_argument("splits: subsets do not cover the dataset");
    if (s.sup.empty() || s.est.empty()) throw std::invalid_argument("splits: D_sup and D_est must be non-empty");
    auto a = s.unsup;
    auto b = s.unlabeled;
    b.insert(b.end(), s.est.begin(), s.est.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b) throw std::invalid_argument("splits: D_unsup must equal D_u plus D_est");
}

// ---------------------------------------------------------------------------
// Label access audit. Training code must go through ssmll_data to read
// labels; every read is logged so tests can check that D_est labels are used
// for gradient supervision only in the fine-tuning stage.

enum class label_subset { sup, est, unlabeled };
enum class label_purpose { supervision, weight_estimation, oracle, evaluation };

struct label_access {
    label_subset subset;
    label_purpose purpose;
    std::string stage;
};

class ssmll_data {
public:
    ssmll_data(const dataset& train, ssmll_splits splits) : train_(&train), splits_(std::move(splits)) {
        validate_splits(splits_, train.size());
        sup_x_ = gather_rows(train.features, splits_.sup);
        est_x_ = gather_rows(train.features, splits_.est);
        u_x_ = gather_rows(train.features, splits_.unlabeled);
        unsup_x_ = gather_rows(train.features, splits_.unsup);
    }

    const ssmll_splits& splits() const { return splits_; }
    const dataset& train() const { return *train_; }
    std::size_t num_classes() const { return train_->num_classes(); }

    const matrix& sup_features() const { return sup_x_; }
    const matrix& est_features() const { return est_x_; }
    const matrix& unlabeled_features() const { return u_x_; }
    const matrix& unsup_features() const { return unsup_x_; }

    matrix labels(label_subset subset, label_purpose purpose) const {
        log_.push_back({subset, purpose, stage_});
        switch (subset) {
            case label_subset::sup: return gather_rows(train_->labels, splits_.sup);
            case label_subset::est: return gather_rows(train_->labels, splits_.est);
            case label_subset::unlabeled: return gather_rows(train_->labels, splits_.unlabeled);
        }
        throw std::logic_error("unreachable");
    }

    void set_stage(std::string stage) const { stage_ = std::move(stage); }
    const std::string& stage() const { return stage_; }
    const std::vector<label_access>& access_log() const { return log_; }

    // True when D_est labels fed gradients only during the fine-tuning stage.
    bool est_supervision_confined_to(const std::string& stage) const {
        for (const auto& a : log_)
            if (a.subset == label_subset::est && a.purpose == label_purpose::supervision && a.stage != stage) return false;
        return true;
    }

private:
    const dataset* train_;
    ssmll_splits splits_;
    matrix sup_x_, est_x_, u_x_, unsup_x_;
    mutable std::string stage_ = "init";
    mutable std::vector<label_access> log_;
};

// ---------------------------------------------------------------------------
// Augmentation surrogates

enum class augment_strength { weak, strong };

struct augment_config {
    double weak_sigma = 0.05;
    double strong_sigma = 0.2;
    double strong_dropout = 0.2;
};

inline matrix augment(const matrix& features, augment_strength strength, std::uint64_t seed,
                      const augment_config& cfg = {}) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution drop(strength == augment_strength::strong ? cfg.strong_dropout : 0.0);
    const double sigma = strength == augment_strength::strong ? cfg.strong_sigma : cfg.weak_sigma;
    matrix out = features;
    for (double& v : out.data) {
        if (!std::isfinite(v)) throw std::domain_error("augment: non-finite feature");
        if (sigma > 0.0) v += sigma * normal(rng);
        if (strength == augment_strength::strong && cfg.strong_dropout > 0.0 && drop(rng)) v = 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// File formats
//
// <prefix>.features.csv : "# N,d,C,seed" header line, then N rows of d values
// <prefix>.labels.csv   : N rows of C values in {0,1}
// Values are printed with 17 significant digits so they parse back exactly.

inline void write_dataset(const std::string& prefix, const dataset& ds) {
    std::ofstream f(prefix + ".features.csv");
    std::ofstream l(prefix + ".labels.csv");
    if (!f || !l) throw std::runtime_error("write_dataset: cannot open output files for '" + prefix + "'");
    f << "# " << ds.features.rows << ',' << ds.features.cols << ',' << ds.labels.cols << ',' << ds.seed << '\n';
    f << std::setprecision(17);
    for (std::size_t i = 0; i < ds.features.rows; ++i) {
        for (std::size_t j = 0; j < ds.features.cols; ++j) f << (j ? "," : "") << ds.features(i, j);
        f << '\n';
    }
    for (std::size_t i = 0; i < ds.labels.rows; ++i) {
        for (std::size_t j = 0; j < ds.labels.cols; ++j) l << (j ? "," : "") << static_cast<int>(ds.labels(i, j));
        l << '\n';
    }
    if (!f || !l) throw std::runtime_error("write_dataset: write failed");
}

namespace detail {

inline std::vector<double> parse_csv_row(const std::string& line, std::size_t expect, const std::string& where) {
    std::vector<double> out;
    out.reserve(expect);
    const char* p = line.c_str();
    while (*p) {
        char* end = nullptr;
        const double v = std::strtod(p, &end);
        if (end == p) throw std::runtime_error(where + ": malformed number");
        out.push_back(v);
        p = end;
        if (*p == ',') ++p;
        else if (*p && *p != '\r') throw std::runtime_error(where + ": unexpected character");
        else break;
    }
    if (out.size() != expect)
        throw std::runtime_error(where + ": expected " + std::to_string(expect) + " columns, got " + std::to_string(out.size()));
    return out;
}

}  // namespace detail

inline dataset read_dataset(const std::string& prefix) {
    std::ifstream f(prefix + ".features.csv");
    std::ifstream l(prefix + ".labels.csv");
    if (!f) throw std::runtime_error("read_dataset: missing file '" + prefix + ".features.csv'");
    if (!l) throw std::runtime_error("read_dataset: missing file '" + prefix + ".labels.csv'");
    std::string line;
    if (!std::getline(f, line) || line.rfind("# ", 0) != 0) throw std::runtime_error("read_dataset: missing header line");
    std::size_t n = 0, d = 0, c = 0;
    unsigned long long seed = 0;
    if (std::sscanf(line.c_str(), "# %zu,%zu,%zu,%llu", &n, &d, &c, &seed) != 4)
        throw std::runtime_error("read_dataset: malformed header '" + line + "'");
    dataset ds;
    ds.seed = seed;
    ds.features = matrix(n, d);
    ds.labels = matrix(n, c);
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(f, line)) throw std::runtime_error("read_dataset: features file truncated");
        auto row = detail::parse_csv_row(line, d, "features row " + std::to_string(i));
        std::copy(row.begin(), row.end(), ds.features.row(i).begin());
        if (!std::getline(l, line)) throw std::runtime_error("read_dataset: labels file truncated");
        auto lab = detail::parse_csv_row(line, c, "labels row " + std::to_string(i));
        for (double v : lab)
            if (v != 0.0 && v != 1.0) throw std::runtime_error("read_dataset: labels must be 0 or 1");
        std::copy(lab.begin(), lab.end(), ds.labels.row(i).begin());
    }
    return ds;
}

inline nlohmann::json splits_to_json(const ssmll_splits& s) {
    return nlohmann::json{{"sup", s.sup},   {"est", s.est},   {"unlabeled", s.unlabeled},
                          {"unsup", s.unsup}, {"rho", s.rho}, {"est_fraction", s.est_fraction},
                          {"seed", s.seed}};
}

inline ssmll_splits splits_from_json(const nlohmann::json& j) {
    ssmll_splits s;
    j.at("sup").get_to(s.sup);
    j.at("est").get_to(s.est);
    j.at("unlabeled").get_to(s.unlabeled);
    j.at("unsup").get_to(s.unsup);
    j.at("rho").get_to(s.rho);
    j.at("est_fraction").get_to(s.est_fraction);
    j.at("seed").get_to(s.seed);
    return s;
}

inline void write_splits(const std::string& path, const ssmll_splits& s) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_splits: cannot open '" + path + "'");
    os << splits_to_json(s).dump(2) << '\n';
}

inline ssmll_splits read_splits(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_splits: missing file '" + path + "'");
    return splits_from_json(nlohmann::json::parse(is));
}

}  // namespace dicap
