#pragma once

// Desk-scale multi-label network: an MLP encoder, one sigmoid score per class
// and one unit-norm embedding per (sample, class).
//
//   h      = relu(... relu(x W1 + b1) ...)
//   score  = sigmoid(h U^T + b)
//   z_ic   = normalize(W_p (h * e_c))
//
// Embeddings for n samples are laid out as an (n*C) x embedding_dim matrix,
// row i*C + c.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dicap/autograd.hpp"
#include "dicap/matrix.hpp"
#include "dicap/optim.hpp"

namespace dicap {

struct model_config {
    std::size_t input_dim = 64;
    std::size_t hidden_dim = 64;
    std::size_t num_classes = 10;
    std::size_t embedding_dim = 16;
    std::size_t hidden_layers = 2;

    void validate() const {
        if (input_dim == 0 || hidden_dim == 0 || num_classes == 0 || embedding_dim == 0 || hidden_layers == 0)
            throw std::invalid_argument("model_config: all dimensions must be >= 1");
    }
    bool operator==(const model_config&) const = default;
};

struct model_state {
    model_config config;
    param_set params;
    adamw_state optim;
    ema_state ema;

    bool operator==(const model_state&) const = default;
};

namespace detail {

inline matrix glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t rows, std::size_t cols,
                             std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

}  // namespace detail

inline model_state init_model(const model_config& cfg, std::uint64_t seed, adamw_config optim = {},
                              double ema_decay = 0.9997, bool ema_warmup = false) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    model_state s;
    s.config = cfg;
    std::size_t in = cfg.input_dim;
    for (std::size_t l = 0; l < cfg.hidden_layers; ++l) {
        const std::string tag = std::to_string(l + 1);
        s.params.add("encoder.w" + tag, detail::glorot_uniform(in, cfg.hidden_dim, in, cfg.hidden_dim, rng),
                     param_role::backbone);
        s.params.add("encoder.b" + tag, matrix(1, cfg.hidden_dim), param_role::backbone);
        in = cfg.hidden_dim;
    }
    const std::size_t H = cfg.hidden_dim, C = cfg.num_classes, E = cfg.embedding_dim;
    s.params.add("embed.class", detail::glorot_uniform(C, H, C, H, rng), param_role::backbone);
    s.params.add("embed.proj", detail::glorot_uniform(H, E, H, E, rng), param_role::backbone);
    s.params.add("head.w", detail::glorot_uniform(H, C, C, H, rng), param_role::head);
    s.params.add("head.b", matrix(1, C), param_role::head);
    s.optim = make_adamw_state(s.params, optim);
    s.ema = make_ema_state(s.params, ema_decay, ema_warmup);
    return s;
}

// Graph-level view of a bound parameter set. Indices follow init_model order.
struct model_graph {
    const model_config* config = nullptr;
    std::span<const var> bound;

    var encoder_w(std::size_t l) const { return bound[2 * l]; }
    var encoder_b(std::size_t l) const { return bound[2 * l + 1]; }
    var class_embed() const { return bound[2 * config->hidden_layers]; }
    var projection() const { return bound[2 * config->hidden_layers + 1]; }
    var head_w() const { return bound[2 * config->hidden_layers + 2]; }
    var head_b() const { return bound[2 * config->hidden_layers + 3]; }

    var encode(tape& t, const matrix& features) const {
        if (features.cols != config->input_dim)
            throw std::invalid_argument("model: expected " + std::to_string(config->input_dim) +
                                        " feature columns, got " + std::to_string(features.cols));
        var h = t.constant(features);
        for (std::size_t l = 0; l < config->hidden_layers; ++l) h = relu(add(matmul(h, encoder_w(l)), encoder_b(l)));
        return h;
    }

    var logits(var hidden) const { return add(matmul_nt(hidden, head_w()), head_b()); }
    var scores(var hidden) const { return sigmoid(logits(hidden)); }

    // Unit embeddings for the listed (sample row, class) pairs.
    var embeddings(var hidden, const std::vector<std::size_t>& sample_rows,
                   const std::vector<std::size_t>& classes) const {
        if (sample_rows.size() != classes.size()) throw std::invalid_argument("embeddings: index length mismatch");
        var hs = gather_rows(hidden, sample_rows);
        var es = gather_rows(class_embed(), classes);
        return row_normalize(matmul(mul(hs, es), projection()));
    }

    var all_embeddings(var hidden) const {
        const std::size_t n = hidden.owner->value(hidden).rows;
        const std::size_t C = config->num_classes;
        std::vector<std::size_t> rows(n * C), cls(n * C);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < C; ++c) {
                rows[i * C + c] = i;
                cls[i * C + c] = c;
            }
        return embeddings(hidden, rows, cls);
    }
};

inline void check_bound(const model_state& s, std::span<const var> bound) {
    if (bound.size() != s.params.size()) throw std::invalid_argument("model: bound parameter count mismatch");
}

// Parameters (raw or EMA shadow) as non-differentiable tape constants.
inline std::vector<var> bind_constant(tape& t, const model_state& s, bool use_ema) {
    std::vector<var> bound;
    bound.reserve(s.params.size());
    for (std::size_t i = 0; i < s.params.size(); ++i)
        bound.push_back(t.constant(use_ema ? s.ema.shadow.at(i) : s.params[i].value));
    return bound;
}

struct forward_result {
    matrix scores;      // n x C, every entry in (0, 1)
    matrix embeddings;  // (n*C) x embedding_dim, unit rows
};

// Row-wise sigmoid scores only; cheaper than forward() when embeddings are not needed.
inline matrix predict_scores(const model_state& s, const matrix& features, bool use_ema) {
    if (features.cols != s.config.input_dim)
        throw std::invalid_argument("model: expected " + std::to_string(s.config.input_dim) +
                                    " feature columns, got " + std::to_string(features.cols));
    if (features.rows == 0) return matrix(0, s.config.num_classes);
    tape t;
    const auto bound = bind_constant(t, s, use_ema);
    model_graph g{&s.config, bound};
    return t.value(g.scores(g.encode(t, features)));
}

inline forward_result forward(const model_state& s, const matrix& features, bool use_ema) {
    if (features.cols != s.config.input_dim)
        throw std::invalid_argument("model: expected " + std::to_string(s.config.input_dim) +
                                    " feature columns, got " + std::to_string(features.cols));
    if (features.rows == 0) return {matrix(0, s.config.num_classes), matrix(0, s.config.embedding_dim)};
    tape t;
    const auto bound = bind_constant(t, s, use_ema);
    model_graph g{&s.config, bound};
    var h = g.encode(t, features);
    return {t.value(g.scores(h)), t.value(g.all_embeddings(h))};
}

inline void trainable_mask(model_state& s, bool head_only) {
    for (auto& p : s.params) p.trainable = !head_only || p.role == param_role::head;
}

inline std::vector<bool> trainable_flags(const model_state& s) {
    std::vector<bool> out;
    for (const auto& p : s.params) out.push_back(p.trainable);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: little-endian binary, magic "DICAPCKP", version 1.

namespace detail {

inline constexpr char checkpoint_magic[8] = {'D', 'I', 'C', 'A', 'P', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct writer {
    std::ostream& os;
    template <typename T>
    void pod(const T& v) { os.write(reinterpret_cast<const char*>(&v), sizeof(T)); }
    void u64(std::uint64_t v) { pod(v); }
    void f64(double v) { pod(v); }
    void str(const std::string& s) { u64(s.size()); os.write(s.data(), static_cast<std::streamsize>(s.size())); }
    void mat(const matrix& m) {
        u64(m.rows);
        u64(m.cols);
        os.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
};

struct reader {
    std::istream& is;
    template <typename T>
    T pod() {
        T v{};
        is.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!is) throw std::runtime_error("checkpoint: truncated file");
        return v;
    }
    std::uint64_t u64() { return pod<std::uint64_t>(); }
    double f64() { return pod<double>(); }
    std::string str() {
        const auto n = u64();
        if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
        std::string s(n, '\0');
        is.read(s.data(), static_cast<std::streamsize>(n));
        if (!is) throw std::runtime_error("checkpoint: truncated file");
        return s;
    }
    matrix mat() {
        const auto r = u64(), c = u64();
        if (r * c > (std::uint64_t{1} << 32)) throw std::runtime_error("checkpoint: implausible matrix size");
        matrix m(r, c);
        is.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated file");
        return m;
    }
};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const model_state& s) {
    detail::writer w{os};
    os.write(detail::checkpoint_magic, sizeof(detail::checkpoint_magic));
    w.pod(detail::checkpoint_version);
    const auto& c = s.config;
    for (auto v : {c.input_dim, c.hidden_dim, c.num_classes, c.embedding_dim, c.hidden_layers}) w.u64(v);
    w.u64(s.params.size());
    for (const auto& p : s.params) {
        w.str(p.name);
        w.pod(static_cast<std::uint8_t>(p.role));
        w.pod(static_cast<std::uint8_t>(p.trainable));
        w.mat(p.value);
    }
    const auto& o = s.optim;
    for (double v : {o.config.lr, o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay}) w.f64(v);
    w.u64(o.step);
    for (const auto& m : o.first_moment) w.mat(m);
    for (const auto& m : o.second_moment) w.mat(m);
    w.f64(s.ema.decay);
    w.pod(static_cast<std::uint8_t>(s.ema.warmup));
    w.u64(s.ema.updates);
    for (const auto& m : s.ema.shadow) w.mat(m);
    if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline model_state read_checkpoint(std::istream& is) {
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::checkpoint_magic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    detail::reader r{is};
    if (const auto ver = r.pod<std::uint32_t>(); ver != detail::checkpoint_version)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ver));
    model_state s;
    s.config.input_dim = r.u64();
    s.config.hidden_dim = r.u64();
    s.config.num_classes = r.u64();
    s.config.embedding_dim = r.u64();
    s.config.hidden_layers = r.u64();
    s.config.validate();
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        auto name = r.str();
        const auto role = static_cast<param_role>(r.pod<std::uint8_t>());
        const bool trainable = r.pod<std::uint8_t>() != 0;
        auto& p = s.params.add(std::move(name), r.mat(), role);
        p.trainable = trainable;
    }
    auto& o = s.optim;
    o.config.lr = r.f64();
    o.config.beta1 = r.f64();
    o.config.beta2 = r.f64();
    o.config.eps = r.f64();
    o.config.weight_decay = r.f64();
    o.step = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) o.first_moment.push_back(r.mat());
    for (std::uint64_t i = 0; i < n; ++i) o.second_moment.push_back(r.mat());
    s.ema.decay = r.f64();
    s.ema.warmup = r.pod<std::uint8_t>() != 0;
    s.ema.updates = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) s.ema.shadow.push_back(r.mat());

    // The parameter list must be exactly what init_model builds for this config.
    const param_set expected = init_model(s.config, 0).params;
    if (expected.size() != s.params.size()) throw std::runtime_error("checkpoint: parameter count does not match config");
    for (std::size_t i = 0; i < n; ++i) {
        const auto& want = expected[i];
        const auto& got = s.params[i];
        if (got.name != want.name || got.role != want.role || !got.value.same_shape(want.value) ||
            !o.first_moment[i].same_shape(want.value) || !o.second_moment[i].same_shape(want.value) ||
            !s.ema.shadow[i].same_shape(want.value))
            throw std::runtime_error("checkpoint: parameter '" + got.name + "' does not match the model layout");
    }
    return s;
}

inline void save_checkpoint(const std::string& path, const model_state& s) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    write_checkpoint(os, s);
}

inline model_state load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    return read_checkpoint(is);
}

}  // namespace dicap
