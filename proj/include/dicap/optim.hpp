#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dicap/autograd.hpp"
#include "dicap/matrix.hpp"

namespace dicap {

enum class param_role : std::uint8_t { backbone = 0, head = 1 };

struct parameter {
    std::string name;
    matrix value;
    param_role role = param_role::backbone;
    bool trainable = true;

    bool operator==(const parameter&) const = default;
};

// Ordered collection of named parameters. Order is the binding order used by
// gradients, optimizer accumulators and EMA shadows.
class param_set {
public:
    parameter& add(std::string name, matrix value, param_role role) {
        if (find(name)) throw std::invalid_argument("param_set: duplicate parameter name '" + name + "'");
        items_.push_back(parameter{std::move(name), std::move(value), role, true});
        return items_.back();
    }

    const parameter* find(const std::string& name) const {
        for (const auto& p : items_)
            if (p.name == name) return &p;
        return nullptr;
    }
    parameter* find(const std::string& name) {
        for (auto& p : items_)
            if (p.name == name) return &p;
        return nullptr;
    }
    const parameter& at(const std::string& name) const {
        if (auto* p = find(name)) return *p;
        throw std::out_of_range("param_set: no parameter '" + name + "'");
    }

    std::size_t size() const { return items_.size(); }
    parameter& operator[](std::size_t i) { return items_[i]; }
    const parameter& operator[](std::size_t i) const { return items_[i]; }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    bool operator==(const param_set&) const = default;

private:
    std::vector<parameter> items_;
};

// Places every parameter on the tape as a differentiable leaf (trainable or
// not; the optimizer is what honours the trainable flag).
inline std::vector<var> bind(tape& t, const param_set& params) {
    std::vector<var> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(t.variable(p.value));
    return out;
}

inline std::vector<matrix> gradients(const tape& t, std::span<const var> bound) {
    std::vector<matrix> out;
    out.reserve(bound.size());
    for (var v : bound) out.push_back(t.grad(v));
    return out;
}

struct adamw_config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;

    bool operator==(const adamw_config&) const = default;
};

struct adamw_state {
    adamw_config config;
    std::vector<matrix> first_moment;
    std::vector<matrix> second_moment;
    std::uint64_t step = 0;

    bool operator==(const adamw_state&) const = default;
};

inline adamw_state make_adamw_state(const param_set& params, adamw_config cfg = {}) {
    adamw_state s;
    s.config = cfg;
    for (const auto& p : params) {
        s.first_moment.emplace_back(p.value.rows, p.value.cols);
        s.second_moment.emplace_back(p.value.rows, p.value.cols);
    }
    return s;
}

// Bias-corrected Adam step with decoupled weight decay theta *= (1 - lr*lambda).
// Non-trainable parameters and their accumulators are left untouched.
inline void adamw_step(param_set& params, std::span<const matrix> grads, adamw_state& state) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size())
        throw std::invalid_argument("adamw_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(params[i].value, grads[i], "adamw_step gradient");
        require_same_shape(params[i].value, state.first_moment[i], "adamw_step state");
    }
    const auto& c = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        auto& theta = params[i].value.data;
        auto& m = state.first_moment[i].data;
        auto& v = state.second_moment[i].data;
        const auto& g = grads[i].data;
        for (std::size_t j = 0; j < theta.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            theta[j] *= 1.0 - c.lr * c.weight_decay;
            theta[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
        }
    }
}

struct ema_state {
    std::vector<matrix> shadow;
    double decay = 0.9997;
    // When set, the effective decay is min(decay, (1 + n) / (10 + n)) after n
    // prior updates, so the shadow tracks early training instead of the init.
    bool warmup = false;
    std::uint64_t updates = 0;

    bool operator==(const ema_state&) const = default;
};

inline ema_state make_ema_state(const param_set& params, double decay, bool warmup = false) {
    if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must lie in [0, 1)");
    ema_state e;
    e.decay = decay;
    e.warmup = warmup;
    for (const auto& p : params) e.shadow.push_back(p.value);
    return e;
}

inline double effective_decay(const ema_state& ema) {
    if (!ema.warmup) return ema.decay;
    const double n = static_cast<double>(ema.updates);
    return std::min(ema.decay, (1.0 + n) / (10.0 + n));
}

inline void ema_update(ema_state& ema, const param_set& params) {
    if (ema.shadow.size() != params.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) require_same_shape(ema.shadow[i], params[i].value, "ema_update");
    const double d = effective_decay(ema);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& s = ema.shadow[i].data;
        const auto& th = params[i].value.data;
        for (std::size_t j = 0; j < s.size(); ++j) s[j] = d * s[j] + (1.0 - d) * th[j];
    }
    ema.updates += 1;
}

// Copy of params with values replaced by the EMA shadow.
inline param_set with_shadow(const param_set& params, const ema_state& ema) {
    param_set out = params;
    for (std::size_t i = 0; i < out.size(); ++i) out[i].value = ema.shadow[i];
    return out;
}

using loss_builder = std::function<var(tape&, std::span<const var>)>;

// Maximum relative error between reverse-mode gradients and central
// differences over every scalar of every parameter.
inline double grad_check(const loss_builder& loss_fn, const param_set& params, double eps) {
    tape t;
    auto bound = bind(t, params);
    var loss = loss_fn(t, bound);
    const double base = t.value(loss).data.at(0);
    if (!std::isfinite(base)) throw std::domain_error("grad_check: non-finite loss at base point");
    t.backward(loss);
    const auto analytic = gradients(t, bound);

    auto evaluate = [&](const param_set& probe) {
        tape pt;
        auto pb = bind(pt, probe);
        const double v = pt.value(loss_fn(pt, pb)).data.at(0);
        if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite loss at probe point");
        return v;
    };

    param_set probe = params;
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].value.size(); ++j) {
            const double orig = params[i].value.data[j];
            probe[i].value.data[j] = orig + eps;
            const double up = evaluate(probe);
            probe[i].value.data[j] = orig - eps;
            const double down = evaluate(probe);
            probe[i].value.data[j] = orig;
            const double fd = (up - down) / (2.0 * eps);
            const double an = analytic[i].data[j];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
            worst = std::max(worst, std::abs(an - fd) / denom);
        }
    }
    return worst;
}

}  // namespace dicap
