#pragma once

// Training pipeline: warm-up, per-epoch weight/threshold refresh with
// pseudo-label training, and head fine-tuning on the estimation set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dicap/autograd.hpp"
#include "dicap/calibration.hpp"
#include "dicap/data.hpp"
#include "dicap/losses.hpp"
#include "dicap/metrics.hpp"
#include "dicap/model.hpp"
#include "dicap/optim.hpp"
#include "dicap/rng.hpp"
#include "dicap/thresholding.hpp"

namespace dicap {

enum class weight_policy { uniform, confidence, labeled, ours, optimal };

inline const char* to_string(weight_policy p) {
    switch (p) {
        case weight_policy::uniform: return "uniform";
        case weight_policy::confidence: return "confidence";
        case weight_policy::labeled: return "labeled";
        case weight_policy::ours: return "ours";
        case weight_policy::optimal: return "optimal";
    }
    return "unknown";
}

inline weight_policy parse_weight_policy(const std::string& s) {
    for (auto p : {weight_policy::uniform, weight_policy::confidence, weight_policy::labeled, weight_policy::ours,
                   weight_policy::optimal})
        if (s == to_string(p)) return p;
    throw std::invalid_argument("unknown weight policy '" + s + "'");
}

inline constexpr weight_policy all_policies[] = {weight_policy::uniform, weight_policy::confidence,
                                                 weight_policy::labeled, weight_policy::ours, weight_policy::optimal};

struct train_config {
    std::size_t warmup_epochs = 5;
    std::size_t main_epochs = 20;
    std::size_t finetune_epochs = 20;
    std::size_t batch_size = 64;
    std::size_t finetune_batch_size = 32;
    adamw_config optim{};
    double ema_decay = 0.9997;
    bool ema_warmup = true;
    std::size_t bins = default_bins;
    double temperature = 0.5;
    asl_config asl{};
    bool warmup_contrastive = true;
    bool uncertain_contrastive = true;
    // false turns the main stage into plain supervised training on D_sup.
    bool pseudo_labeling = true;
    std::size_t contrastive_cap = 256;
    weight_policy policy = weight_policy::ours;
    augment_config augment{};
    model_config model{};
    std::uint64_t seed = 1;

    void validate() const {
        if (batch_size == 0 || finetune_batch_size == 0) throw std::invalid_argument("train_config: batch sizes must be >= 1");
        if (bins < 2) throw std::invalid_argument("train_config: bins must be >= 2");
        if (!(temperature > 0.0)) throw std::invalid_argument("train_config: temperature must be > 0");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("train_config: ema_decay must lie in [0, 1)");
        if (contrastive_cap == 0) throw std::invalid_argument("train_config: contrastive_cap must be >= 1");
        asl.validate();
        model.validate();
    }
};

struct epoch_report {
    std::size_t epoch = 0;
    std::string stage;
    double l_sup = 0.0;
    double l_pseudo = 0.0;
    double l_uncer = 0.0;
    double l_total = 0.0;
    std::size_t steps = 0;
    std::size_t confident = 0;
    std::size_t uncertain = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
    std::vector<double> weight_pos;
    std::vector<double> weight_neg;
    std::vector<double> tau_pos;
    std::vector<double> tau_neg;
    std::optional<double> test_map;

    bool operator==(const epoch_report&) const = default;
};

inline nlohmann::json to_json(const epoch_report& r) {
    nlohmann::json j{{"epoch", r.epoch},         {"stage", r.stage},         {"l_sup", r.l_sup},
                     {"l_pseudo", r.l_pseudo},   {"l_uncer", r.l_uncer},     {"l_total", r.l_total},
                     {"steps", r.steps},         {"confident", r.confident}, {"uncertain", r.uncertain},
                     {"positive", r.positive},   {"negative", r.negative},   {"weight_pos", r.weight_pos},
                     {"weight_neg", r.weight_neg}, {"tau_pos", r.tau_pos},   {"tau_neg", r.tau_neg}};
    j["test_map"] = r.test_map ? nlohmann::json(*r.test_map) : nlohmann::json(nullptr);
    return j;
}

// Everything derived from the EMA model at the start of a pseudo-labeling
// epoch.
struct epoch_plan {
    weight_table table = weight_table::uniform();
    class_thresholds thresholds;
    pseudo_label_matrix pseudo;  // rows follow D_unsup
    matrix unsup_scores;         // EMA scores on D_unsup, used for weight lookup
};

// Test hooks: pin thresholds or the weight table instead of deriving them.
struct epoch_overrides {
    std::optional<class_thresholds> thresholds;
    std::optional<weight_table> table;
};

namespace detail {

inline std::vector<std::size_t> iota_vec(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

// Endless reshuffled pass over [0, n).
class batch_cycler {
public:
    batch_cycler(std::size_t n, std::mt19937_64& rng) : order_(iota_vec(n)), rng_(&rng) { reshuffle(); }

    std::vector<std::size_t> next(std::size_t b) {
        std::vector<std::size_t> out;
        if (order_.empty()) return out;
        out.reserve(b);
        while (out.size() < b) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), *rng_);
        pos_ = 0;
    }
    std::vector<std::size_t> order_;
    std::mt19937_64* rng_;
    std::size_t pos_ = 0;
};

inline std::size_t steps_per_epoch(std::size_t sup, std::size_t unsup, std::size_t batch) {
    const std::size_t n = std::max(sup, unsup);
    return std::max<std::size_t>(1, (n + batch - 1) / batch);
}

// Weak/strong embedding pairs for the chosen (row, class) entries, capped.
inline var contrastive_term(tape& t, const model_graph& g, var hidden_weak, var hidden_strong,
                            std::vector<std::size_t> rows, std::vector<std::size_t> classes,
                            const train_config& cfg, std::mt19937_64& rng) {
    if (rows.size() > cfg.contrastive_cap) {
        std::vector<std::size_t> pick_idx = iota_vec(rows.size());
        std::shuffle(pick_idx.begin(), pick_idx.end(), rng);
        pick_idx.resize(cfg.contrastive_cap);
        std::sort(pick_idx.begin(), pick_idx.end());
        std::vector<std::size_t> r2, c2;
        for (auto i : pick_idx) {
            r2.push_back(rows[i]);
            c2.push_back(classes[i]);
        }
        rows = std::move(r2);
        classes = std::move(c2);
    }
    if (rows.empty()) return t.constant(matrix::scalar(0.0));
    var zw = g.embeddings(hidden_weak, rows, classes);
    var zs = g.embeddings(hidden_strong, rows, classes);
    return class_infonce(concat_rows(zw, zs), contrastive_batch::view_partners(rows.size()), cfg.temperature);
}

inline void apply_step(model_state& model, tape& t, std::span<const var> bound, var loss) {
    t.backward(loss);
    const auto grads = gradients(t, bound);
    for (const auto& g : grads)
        if (!all_finite(g)) throw std::domain_error("training: non-finite gradient");
    adamw_step(model.params, grads, model.optim);
    ema_update(model.ema, model.params);
}

inline std::uint64_t stage_code(const std::string& stage) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char ch : stage) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
    return h;
}

}  // namespace detail

// Called once per finished epoch of every stage.
using epoch_callback = std::function<void(const epoch_report&, const model_state&)>;

inline model_state make_model(const ssmll_data& data, const train_config& cfg) {
    cfg.validate();
    model_config mc = cfg.model;
    mc.input_dim = data.train().features.cols;
    mc.num_classes = data.num_classes();
    return init_model(mc, cfg.seed, cfg.optim, cfg.ema_decay, cfg.ema_warmup);
}

inline epoch_plan plan_epoch(const model_state& model, const ssmll_data& data, const train_config& cfg,
                             const epoch_overrides& overrides = {}) {
    epoch_plan plan;
    const matrix sup_scores = predict_scores(model, data.sup_features(), true);
    plan.unsup_scores = predict_scores(model, data.unsup_features(), true);
    plan.thresholds = overrides.thresholds
                          ? *overrides.thresholds
                          : derive_thresholds(sup_scores, data.labels(label_subset::sup, label_purpose::supervision));
    plan.pseudo = assign_pseudo_labels(plan.unsup_scores, plan.thresholds);

    if (overrides.table) {
        plan.table = *overrides.table;
        return plan;
    }
    switch (cfg.policy) {
        case weight_policy::uniform: plan.table = weight_table::uniform(cfg.bins); break;
        case weight_policy::confidence: plan.table = weight_table::confidence(cfg.bins); break;
        case weight_policy::labeled:
            plan.table = estimate_weight_table(sup_scores, data.labels(label_subset::sup, label_purpose::weight_estimation),
                                               cfg.bins, table_source::estimated_from_labeled);
            break;
        case weight_policy::ours: {
            const matrix est_scores = predict_scores(model, data.est_features(), true);
            plan.table = estimate_weight_table(est_scores, data.labels(label_subset::est, label_purpose::weight_estimation),
                                               cfg.bins, table_source::estimated_from_est);
            break;
        }
        case weight_policy::optimal: {
            // D_u occupies the leading rows of D_unsup.
            const std::size_t nu = data.splits().unlabeled.size();
            matrix u_scores(nu, plan.unsup_scores.cols);
            std::copy_n(plan.unsup_scores.data.begin(), u_scores.size(), u_scores.data.begin());
            std::span<const std::int8_t> u_pseudo(plan.pseudo.values.data(), u_scores.size());
            plan.table = oracle_weight_table(u_scores, data.labels(label_subset::unlabeled, label_purpose::oracle),
                                             u_pseudo, cfg.bins);
            break;
        }
    }
    return plan;
}

inline void fill_plan_report(epoch_report& r, const epoch_plan& plan) {
    r.positive = plan.pseudo.count(pseudo_positive);
    r.negative = plan.pseudo.count(pseudo_negative);
    r.confident = r.positive + r.negative;
    r.uncertain = plan.pseudo.uncertain();
    r.weight_pos = plan.table.resolved_pos();
    r.weight_neg = plan.table.resolved_neg();
    r.tau_pos = plan.thresholds.tau_pos;
    r.tau_neg = plan.thresholds.tau_neg;
}

inline double evaluate_map(const model_state& model, const dataset& test) {
    return mean_average_precision(predict_scores(model, test.features, true), test.labels);
}

// Supervised ASL on D_sup; with warmup_contrastive also class-wise InfoNCE over
// weak/strong views of samples from D_sup and D_unsup.
inline model_state warmup(const ssmll_data& data, model_state model, const train_config& cfg,
                          const epoch_callback& on_epoch = {}, const dataset* test = nullptr) {
    data.set_stage("warmup");
    const matrix sup_labels = data.labels(label_subset::sup, label_purpose::supervision);
    const std::size_t n_sup = data.sup_features().rows;
    const std::size_t n_unsup = data.unsup_features().rows;
    const std::size_t C = data.num_classes();
    for (std::size_t epoch = 0; epoch < cfg.warmup_epochs; ++epoch) {
        auto rng = make_rng({cfg.seed, detail::stage_code("warmup"), epoch});
        detail::batch_cycler sup_cycle(n_sup, rng);
        detail::batch_cycler all_cycle(cfg.warmup_contrastive ? n_sup + n_unsup : 0, rng);
        const std::size_t steps = detail::steps_per_epoch(n_sup, n_unsup, cfg.batch_size);
        epoch_report rep;
        rep.epoch = epoch;
        rep.stage = "warmup";
        rep.steps = steps;
        for (std::size_t step = 0; step < steps; ++step) {
            tape t;
            const auto bound = bind(t, model.params);
            const model_graph g{&model.config, bound};
            const auto sb = sup_cycle.next(cfg.batch_size);
            const matrix sx = augment(gather_rows(data.sup_features(), sb), augment_strength::weak, rng(), cfg.augment);
            var l_sup = asl_mean(g.scores(g.encode(t, sx)), gather_rows(sup_labels, sb), cfg.asl);
            var l_uncer = t.constant(matrix::scalar(0.0));
            if (cfg.warmup_contrastive) {
                const auto ab = all_cycle.next(cfg.batch_size);
                matrix ax(ab.size(), data.sup_features().cols);
                for (std::size_t i = 0; i < ab.size(); ++i) {
                    const auto src = ab[i] < n_sup ? data.sup_features().row(ab[i])
                                                   : data.unsup_features().row(ab[i] - n_sup);
                    std::copy(src.begin(), src.end(), ax.row(i).begin());
                }
                var hw = g.encode(t, augment(ax, augment_strength::weak, rng(), cfg.augment));
                var hs = g.encode(t, augment(ax, augment_strength::strong, rng(), cfg.augment));
                std::vector<std::size_t> rows, classes;
                for (std::size_t i = 0; i < ab.size(); ++i)
                    for (std::size_t c = 0; c < C; ++c) {
                        rows.push_back(i);
                        classes.push_back(c);
                    }
                l_uncer = detail::contrastive_term(t, g, hw, hs, std::move(rows), std::move(classes), cfg, rng);
            }
            var loss = add(l_sup, l_uncer);
            rep.l_sup += t.value(l_sup).data[0];
            rep.l_uncer += t.value(l_uncer).data[0];
            rep.l_total += t.value(loss).data[0];
            detail::apply_step(model, t, bound, loss);
        }
        rep.l_sup /= static_cast<double>(steps);
        rep.l_uncer /= static_cast<double>(steps);
        rep.l_total /= static_cast<double>(steps);
        if (test) rep.test_map = evaluate_map(model, *test);
        if (on_epoch) on_epoch(rep, model);
    }
    return model;
}

// One pseudo-labeling epoch: refresh weights and thresholds from the EMA
// model, label D_unsup, then minimise L_sup + L_pseudo + L_uncer.
inline epoch_report train_epoch(model_state& model, const ssmll_data& data, const train_config& cfg,
                                std::size_t epoch, const dataset* test = nullptr,
                                const epoch_overrides& overrides = {}) {
    data.set_stage("main");
    const matrix sup_labels = data.labels(label_subset::sup, label_purpose::supervision);
    const std::size_t n_sup = data.sup_features().rows;
    const std::size_t n_unsup = data.unsup_features().rows;
    const bool pseudo_on = cfg.pseudo_labeling && n_unsup > 0;

    epoch_report rep;
    rep.epoch = epoch;
    rep.stage = "main";
    epoch_plan plan;
    if (pseudo_on) {
        try {
            plan = plan_epoch(model, data, cfg, overrides);
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error("epoch " + std::to_string(epoch) + ": " + e.what());
        }
        fill_plan_report(rep, plan);
    }

    auto rng = make_rng({cfg.seed, detail::stage_code("main"), epoch});
    detail::batch_cycler sup_cycle(n_sup, rng);
    detail::batch_cycler unsup_cycle(pseudo_on ? n_unsup : 0, rng);
    const std::size_t steps = detail::steps_per_epoch(n_sup, n_unsup, cfg.batch_size);
    rep.steps = steps;
    const std::size_t C = data.num_classes();

    for (std::size_t step = 0; step < steps; ++step) {
        tape t;
        const auto bound = bind(t, model.params);
        const model_graph g{&model.config, bound};
        const auto sb = sup_cycle.next(cfg.batch_size);
        const matrix sx = augment(gather_rows(data.sup_features(), sb), augment_strength::weak, rng(), cfg.augment);
        var l_sup = asl_mean(g.scores(g.encode(t, sx)), gather_rows(sup_labels, sb), cfg.asl);
        var l_pseudo = t.constant(matrix::scalar(0.0));
        var l_uncer = t.constant(matrix::scalar(0.0));
        if (pseudo_on) {
            const auto ub = unsup_cycle.next(cfg.batch_size);
            const matrix ux = gather_rows(data.unsup_features(), ub);
            var hw = g.encode(t, augment(ux, augment_strength::weak, rng(), cfg.augment));
            const pseudo_label_matrix pb = plan.pseudo.select_rows(ub);
            const matrix weights = pseudo_weights(gather_rows(plan.unsup_scores, ub), pb, plan.table);
            l_pseudo = pseudo_loss(g.scores(hw), pb, weights, cfg.asl);
            if (cfg.uncertain_contrastive && pb.uncertain() > 0) {
                var hs = g.encode(t, augment(ux, augment_strength::strong, rng(), cfg.augment));
                std::vector<std::size_t> rows, classes;
                for (std::size_t i = 0; i < ub.size(); ++i)
                    for (std::size_t c = 0; c < C; ++c)
                        if (pb(i, c) == pseudo_uncertain) {
                            rows.push_back(i);
                            classes.push_back(c);
                        }
                l_uncer = detail::contrastive_term(t, g, hw, hs, std::move(rows), std::move(classes), cfg, rng);
            }
        }
        var loss = total_loss(l_sup, l_pseudo, l_uncer);
        rep.l_sup += t.value(l_sup).data[0];
        rep.l_pseudo += t.value(l_pseudo).data[0];
        rep.l_uncer += t.value(l_uncer).data[0];
        rep.l_total += t.value(loss).data[0];
        detail::apply_step(model, t, bound, loss);
    }
    const double s = static_cast<double>(steps);
    rep.l_sup /= s;
    rep.l_pseudo /= s;
    rep.l_uncer /= s;
    rep.l_total /= s;
    if (test) rep.test_map = evaluate_map(model, *test);
    return rep;
}

// Load the EMA shadow into the raw parameters (and leave the shadow equal to them).
inline void adopt_ema(model_state& model) {
    for (std::size_t i = 0; i < model.params.size(); ++i) model.params[i].value = model.ema.shadow.at(i);
}

inline void sync_ema(model_state& model) {
    for (std::size_t i = 0; i < model.params.size(); ++i) model.ema.shadow.at(i) = model.params[i].value;
}

// Mean ASL of the raw model on D_est (the fine-tuning objective).
inline double finetune_objective(const model_state& model, const matrix& est_x, const matrix& est_y, const asl_config& cfg) {
    return asl_mean(predict_scores(model, est_x, false), est_y, cfg);
}

// Head-only ASL training on D_est; backbone parameters stay bitwise fixed.
inline model_state finetune_head(const ssmll_data& data, model_state model, const train_config& cfg,
                                 const epoch_callback& on_epoch = {}, const dataset* test = nullptr) {
    if (data.est_features().rows == 0) throw std::invalid_argument("finetune_head: empty D_est");
    if (cfg.finetune_epochs == 0) return model;
    data.set_stage("finetune");
    const matrix est_y = data.labels(label_subset::est, label_purpose::supervision);
    const matrix& est_x = data.est_features();
    trainable_mask(model, true);
    for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        auto rng = make_rng({cfg.seed, detail::stage_code("finetune"), epoch});
        auto order = detail::iota_vec(est_x.rows);
        std::shuffle(order.begin(), order.end(), rng);
        epoch_report rep;
        rep.epoch = epoch;
        rep.stage = "finetune";
        for (std::size_t start = 0; start < order.size(); start += cfg.finetune_batch_size) {
            const std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(
                                                                 std::min(order.size(), start + cfg.finetune_batch_size)));
            tape t;
            const auto bound = bind(t, model.params);
            const model_graph g{&model.config, bound};
            var loss = asl_mean(g.scores(g.encode(t, gather_rows(est_x, b))), gather_rows(est_y, b), cfg.asl);
            rep.l_sup += t.value(loss).data[0];
            rep.steps += 1;
            detail::apply_step(model, t, bound, loss);
        }
        rep.l_sup /= static_cast<double>(rep.steps);
        rep.l_total = rep.l_sup;
        // Keep evaluation (EMA) in step with the head being fitted.
        sync_ema(model);
        if (test) rep.test_map = evaluate_map(model, *test);
        if (on_epoch) on_epoch(rep, model);
    }
    trainable_mask(model, false);
    return model;
}

// D_est-estimated table next to the oracle table of the same pseudo-labels on
// D_u, both from the EMA model.
struct calibration_snapshot {
    weight_table estimated = weight_table::uniform();
    weight_table oracle = weight_table::uniform();
};

inline calibration_snapshot snapshot_calibration(const model_state& model, const ssmll_data& data,
                                                 const train_config& cfg) {
    train_config c = cfg;
    calibration_snapshot out;
    c.policy = weight_policy::ours;
    out.estimated = plan_epoch(model, data, c).table;
    c.policy = weight_policy::optimal;
    out.oracle = plan_epoch(model, data, c).table;
    return out;
}

struct run_result {
    model_state model;
    std::vector<epoch_report> reports;
    double test_map = 0.0;
    // Taken after the last main epoch; empty for the supervised baseline.
    std::optional<calibration_snapshot> calibration;
};

struct pipeline_options {
    bool eval_each_epoch = false;
    epoch_callback on_epoch;
};

// Full pipeline. With pseudo_labeling off this is the supervised-only
// baseline: same schedule, no pseudo-labels, no contrastive terms, no
// fine-tuning.
inline run_result run_pipeline(const ssmll_data& data, const dataset& test, const train_config& cfg,
                               const pipeline_options& opts = {}) {
    cfg.validate();
    run_result out;
    const dataset* probe = opts.eval_each_epoch ? &test : nullptr;
    train_config c = cfg;
    if (!c.pseudo_labeling) {
        c.warmup_contrastive = false;
        c.uncertain_contrastive = false;
    }
    const epoch_callback record = [&](const epoch_report& r, const model_state& m) {
        out.reports.push_back(r);
        if (opts.on_epoch) opts.on_epoch(r, m);
    };
    out.model = warmup(data, make_model(data, c), c, record, probe);
    for (std::size_t e = 0; e < c.main_epochs; ++e) record(train_epoch(out.model, data, c, e, probe), out.model);
    if (c.pseudo_labeling && c.main_epochs > 0) out.calibration = snapshot_calibration(out.model, data, c);
    if (c.pseudo_labeling) {
        // Fine-tune on top of the averaged backbone.
        adopt_ema(out.model);
        out.model = finetune_head(data, std::move(out.model), c, record, probe);
    }
    out.test_map = evaluate_map(out.model, test);
    return out;
}

}  // namespace dicap
