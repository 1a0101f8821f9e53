#pragma once

// JSON run configuration. Every section is optional except for the three
// seeds; unknown keys are rejected and errors name the offending field.

#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dicap/data.hpp"
#include "dicap/trainer.hpp"

namespace dicap {

class config_error : public std::runtime_error {
public:
    config_error(const std::string& field, const std::string& msg)
        : std::runtime_error("config field '" + field + "': " + msg), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct run_config {
    gen_config data{};
    double rho = 0.05;
    double est_fraction = 0.2;
    std::uint64_t split_seed = 1;
    train_config train{};
    std::vector<std::uint64_t> compare_seeds{1, 2, 3};
    bool eval_each_epoch = false;
    std::string output_dir = "out";

    void validate() const;
};

// The desk-scale reference benchmark: 20000 samples, d=64, C=10, rho=0.05,
// est_fraction=0.2, seed 1. Differs from the plain defaults only in the
// learning rate; at 1e-3 the small D_sup is overfit within the warm-up.
inline run_config reference_run_config() {
    run_config c;
    c.train.optim.lr = 1e-4;
    return c;
}

namespace detail {

// Reads the fields of one JSON object, remembering which keys were consumed.
class section {
public:
    section(const nlohmann::json& j, std::string path) : j_(&j), path_(std::move(path)) {
        if (!j.is_object()) throw config_error(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) const { return j_->contains(key); }

    template <class T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_->contains(key)) return;
        read_value(key, out);
    }

    template <class T>
    void require(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_->contains(key)) throw config_error(field(key), "is required");
        read_value(key, out);
    }

    section child(const std::string& key) {
        seen_.insert(key);
        static const nlohmann::json empty = nlohmann::json::object();
        return section(j_->contains(key) ? j_->at(key) : empty, field(key));
    }

    void finish() const {
        for (auto it = j_->begin(); it != j_->end(); ++it)
            if (!seen_.count(it.key())) throw config_error(field(it.key()), "unknown key");
    }

private:
    template <class T>
    void read_value(const std::string& key, T& out) {
        const auto& v = j_->at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw config_error(field(key), "expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
                    throw config_error(field(key), "expected a non-negative integer");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw config_error(field(key), "expected a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw config_error(field(key), "expected a string");
            }
            out = v.get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw config_error(field(key), e.what());
        }
    }

    const nlohmann::json* j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& field, const std::string& msg) {
    if (!ok) throw config_error(field, msg);
}

}  // namespace detail

inline void run_config::validate() const {
    using detail::check;
    check(data.samples >= 1, "data.samples", "must be >= 1");
    check(data.test_samples >= 1, "data.test_samples", "must be >= 1");
    check(data.input_dim >= 1, "data.input_dim", "must be >= 1");
    check(data.num_classes >= 1, "data.num_classes", "must be >= 1");
    check(data.latent_dim >= 1, "data.latent_dim", "must be >= 1");
    check(data.noise_sigma >= 0.0, "data.noise_sigma", "must be >= 0");
    check(data.label_scale >= 0.0, "data.label_scale", "must be >= 0");
    check(data.bias_min <= data.bias_max, "data.bias_min", "must not exceed data.bias_max");
    check(rho > 0.0 && rho < 1.0, "split.rho", "must lie in (0, 1), got " + std::to_string(rho));
    check(est_fraction > 0.0 && est_fraction < 1.0, "split.est_fraction",
          "must lie in (0, 1), got " + std::to_string(est_fraction));
    const auto& t = train;
    check(t.batch_size >= 1, "train.batch_size", "must be >= 1");
    check(t.finetune_batch_size >= 1, "train.finetune_batch_size", "must be >= 1");
    check(t.bins >= 2, "train.bins", "must be >= 2");
    check(t.temperature > 0.0, "train.temperature", "must be > 0");
    check(t.ema_decay >= 0.0 && t.ema_decay < 1.0, "train.ema_decay", "must lie in [0, 1)");
    check(t.contrastive_cap >= 1, "train.contrastive_cap", "must be >= 1");
    check(t.optim.lr > 0.0, "train.optimizer.lr", "must be > 0");
    check(t.optim.beta1 >= 0.0 && t.optim.beta1 < 1.0, "train.optimizer.beta1", "must lie in [0, 1)");
    check(t.optim.beta2 >= 0.0 && t.optim.beta2 < 1.0, "train.optimizer.beta2", "must lie in [0, 1)");
    check(t.optim.eps > 0.0, "train.optimizer.eps", "must be > 0");
    check(t.optim.weight_decay >= 0.0, "train.optimizer.weight_decay", "must be >= 0");
    check(t.asl.gamma_pos >= 0.0, "train.asl.gamma_pos", "must be >= 0");
    check(t.asl.gamma_neg >= 0.0, "train.asl.gamma_neg", "must be >= 0");
    check(t.asl.margin >= 0.0 && t.asl.margin < 1.0, "train.asl.margin", "must lie in [0, 1)");
    check(t.augment.weak_sigma >= 0.0, "train.augment.weak_sigma", "must be >= 0");
    check(t.augment.strong_sigma >= 0.0, "train.augment.strong_sigma", "must be >= 0");
    check(t.augment.strong_dropout >= 0.0 && t.augment.strong_dropout < 1.0, "train.augment.strong_dropout",
          "must lie in [0, 1)");
    check(t.model.hidden_dim >= 1, "model.hidden_dim", "must be >= 1");
    check(t.model.embedding_dim >= 1, "model.embedding_dim", "must be >= 1");
    check(t.model.hidden_layers >= 1, "model.hidden_layers", "must be >= 1");
    check(!compare_seeds.empty(), "eval.seeds", "needs at least one seed");
    check(!output_dir.empty(), "output_dir", "must not be empty");
}

inline run_config parse_run_config(const nlohmann::json& j) {
    run_config c;
    detail::section root(j, "");

    auto d = root.child("data");
    d.read("samples", c.data.samples);
    d.read("test_samples", c.data.test_samples);
    d.read("input_dim", c.data.input_dim);
    d.read("num_classes", c.data.num_classes);
    d.read("latent_dim", c.data.latent_dim);
    d.read("bias_min", c.data.bias_min);
    d.read("bias_max", c.data.bias_max);
    d.read("label_scale", c.data.label_scale);
    d.read("noise_sigma", c.data.noise_sigma);
    d.require("seed", c.data.seed);
    d.finish();

    auto s = root.child("split");
    s.read("rho", c.rho);
    s.read("est_fraction", c.est_fraction);
    s.require("seed", c.split_seed);
    s.finish();

    auto m = root.child("model");
    m.read("hidden_dim", c.train.model.hidden_dim);
    m.read("embedding_dim", c.train.model.embedding_dim);
    m.read("hidden_layers", c.train.model.hidden_layers);
    m.finish();

    auto t = root.child("train");
    auto& tc = c.train;
    t.read("warmup_epochs", tc.warmup_epochs);
    t.read("main_epochs", tc.main_epochs);
    t.read("finetune_epochs", tc.finetune_epochs);
    t.read("batch_size", tc.batch_size);
    t.read("finetune_batch_size", tc.finetune_batch_size);
    t.read("ema_decay", tc.ema_decay);
    t.read("ema_warmup", tc.ema_warmup);
    t.read("bins", tc.bins);
    t.read("temperature", tc.temperature);
    t.read("warmup_contrastive", tc.warmup_contrastive);
    t.read("uncertain_contrastive", tc.uncertain_contrastive);
    t.read("pseudo_labeling", tc.pseudo_labeling);
    t.read("contrastive_cap", tc.contrastive_cap);
    std::string policy = to_string(tc.policy);
    t.read("policy", policy);
    try {
        tc.policy = parse_weight_policy(policy);
    } catch (const std::invalid_argument& e) {
        throw config_error(t.field("policy"), e.what());
    }
    t.require("seed", tc.seed);
    auto o = t.child("optimizer");
    o.read("lr", tc.optim.lr);
    o.read("beta1", tc.optim.beta1);
    o.read("beta2", tc.optim.beta2);
    o.read("eps", tc.optim.eps);
    o.read("weight_decay", tc.optim.weight_decay);
    o.finish();
    auto a = t.child("asl");
    a.read("gamma_pos", tc.asl.gamma_pos);
    a.read("gamma_neg", tc.asl.gamma_neg);
    a.read("margin", tc.asl.margin);
    a.finish();
    auto g = t.child("augment");
    g.read("weak_sigma", tc.augment.weak_sigma);
    g.read("strong_sigma", tc.augment.strong_sigma);
    g.read("strong_dropout", tc.augment.strong_dropout);
    g.finish();
    t.finish();

    auto e = root.child("eval");
    e.read("seeds", c.compare_seeds);
    e.read("eval_each_epoch", c.eval_each_epoch);
    e.finish();

    root.read("output_dir", c.output_dir);
    root.finish();

    c.validate();
    return c;
}

// Every field materialised; parse_run_config(to_json(c)) == c.
inline nlohmann::json to_json(const run_config& c) {
    const auto& t = c.train;
    return {
        {"data",
         {{"samples", c.data.samples},
          {"test_samples", c.data.test_samples},
          {"input_dim", c.data.input_dim},
          {"num_classes", c.data.num_classes},
          {"latent_dim", c.data.latent_dim},
          {"bias_min", c.data.bias_min},
          {"bias_max", c.data.bias_max},
          {"label_scale", c.data.label_scale},
          {"noise_sigma", c.data.noise_sigma},
          {"seed", c.data.seed}}},
        {"split", {{"rho", c.rho}, {"est_fraction", c.est_fraction}, {"seed", c.split_seed}}},
        {"model",
         {{"hidden_dim", t.model.hidden_dim},
          {"embedding_dim", t.model.embedding_dim},
          {"hidden_layers", t.model.hidden_layers}}},
        {"train",
         {{"warmup_epochs", t.warmup_epochs},
          {"main_epochs", t.main_epochs},
          {"finetune_epochs", t.finetune_epochs},
          {"batch_size", t.batch_size},
          {"finetune_batch_size", t.finetune_batch_size},
          {"ema_decay", t.ema_decay},
          {"ema_warmup", t.ema_warmup},
          {"bins", t.bins},
          {"temperature", t.temperature},
          {"warmup_contrastive", t.warmup_contrastive},
          {"uncertain_contrastive", t.uncertain_contrastive},
          {"pseudo_labeling", t.pseudo_labeling},
          {"contrastive_cap", t.contrastive_cap},
          {"policy", to_string(t.policy)},
          {"seed", t.seed},
          {"optimizer",
           {{"lr", t.optim.lr},
            {"beta1", t.optim.beta1},
            {"beta2", t.optim.beta2},
            {"eps", t.optim.eps},
            {"weight_decay", t.optim.weight_decay}}},
          {"asl", {{"gamma_pos", t.asl.gamma_pos}, {"gamma_neg", t.asl.gamma_neg}, {"margin", t.asl.margin}}},
          {"augment",
           {{"weak_sigma", t.augment.weak_sigma},
            {"strong_sigma", t.augment.strong_sigma},
            {"strong_dropout", t.augment.strong_dropout}}}}},
        {"eval", {{"seeds", c.compare_seeds}, {"eval_each_epoch", c.eval_each_epoch}}},
        {"output_dir", c.output_dir},
    };
}

inline run_config load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("malformed config '" + path + "': " + e.what());
    }
    return parse_run_config(j);
}

}  // namespace dicap
