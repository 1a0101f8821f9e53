#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "dicap/autograd.hpp"
#include "dicap/optim.hpp"
#include "dicap/rng.hpp"

using namespace dicap;
using Catch::Approx;

namespace {

matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    matrix m(r, c);
    for (double& v : m.data) v = u(rng);
    return m;
}

// Plain triple loop, written against the definition of op(a) op(b).
matrix naive_product(const matrix& a, bool ta, const matrix& b, bool tb) {
    const std::size_t m = ta ? a.cols : a.rows, k = ta ? a.rows : a.cols, n = tb ? b.rows : b.cols;
    matrix out(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) out(i, j) += (ta ? a(p, i) : a(i, p)) * (tb ? b(j, p) : b(p, j));
    return out;
}

param_set one_param(matrix m) {
    param_set p;
    p.add("x", std::move(m), param_role::backbone);
    return p;
}

}  // namespace

TEST_CASE("matrix construction checks the data length") {
    CHECK_THROWS_AS(matrix(2, 2, std::vector<double>{1, 2, 3}), std::invalid_argument);
    matrix m(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(m(1, 2) == 6.0);
    CHECK(m.row(1)[0] == 4.0);
    CHECK(shape_string(m) == "2x3");
}

TEST_CASE("gemm agrees with a triple loop for every transpose combination") {
    auto rng = make_rng({11});
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            const matrix a = ta ? random_matrix(4, 3, rng) : random_matrix(3, 4, rng);
            const matrix b = tb ? random_matrix(5, 4, rng) : random_matrix(4, 5, rng);
            matrix out(3, 5, 1.0);
            gemm_accumulate(a, ta, b, tb, out);
            const matrix ref = naive_product(a, ta, b, tb);
            for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data[i] == Approx(ref.data[i] + 1.0).margin(1e-12));
        }
    matrix bad(2, 2);
    CHECK_THROWS_AS(gemm_accumulate(matrix(2, 3), false, matrix(2, 3), false, bad), std::invalid_argument);
}

TEST_CASE("grad_check is exact on a quadratic") {
    param_set p = one_param(matrix::scalar(3.0));
    auto f = [](tape&, std::span<const var> b) { return sum(mul(b[0], b[0])); };
    CHECK(grad_check(f, p, 1e-4) <= 1e-8);
}

TEST_CASE("grad_check rejects a non-finite loss") {
    param_set p = one_param(matrix::scalar(0.0));
    auto f = [](tape&, std::span<const var> b) { return sum(log(b[0])); };
    CHECK_THROWS_AS(grad_check(f, p, 1e-4), std::domain_error);
}

TEST_CASE("every operator passes a finite-difference check") {
    auto rng = make_rng({12});
    const double tol = 1e-6;
    for (int trial = 0; trial < 5; ++trial) {
        param_set p;
        p.add("a", random_matrix(3, 4, rng), param_role::backbone);
        p.add("b", random_matrix(4, 2, rng), param_role::backbone);
        p.add("row", random_matrix(1, 4, rng), param_role::head);
        p.add("pos", random_matrix(3, 4, rng, 0.2, 1.5), param_role::head);

        SECTION("linear algebra and broadcasting") {
            auto g = [](tape&, std::span<const var> v) {
                var y = add(v[0], v[2]);
                var s = sum(mul(matmul(y, v[1]), matmul(y, v[1])));
                return add(s, sum(matmul_nt(v[0], v[3])));
            };
            CHECK(grad_check(g, p, 1e-6) <= tol);
        }
        SECTION("smooth elementwise ops") {
            auto g = [](tape&, std::span<const var> v) {
                var s = sigmoid(v[0]);
                var l = log(v[3]);
                var e = exp(scale(v[0], 0.5));
                var pw = pow(v[3], 2.5);
                return mean(add(add(mul(s, l), e), add_scalar(pw, 1.0)));
            };
            CHECK(grad_check(g, p, 1e-6) <= tol);
        }
        SECTION("relu and clamp away from their kinks") {
            auto g = [](tape& t, std::span<const var> v) {
                const matrix& x = t.value(v[0]);
                matrix keep(x.rows, x.cols);
                for (std::size_t i = 0; i < x.size(); ++i) keep.data[i] = std::abs(x.data[i]) > 1e-3 ? 1.0 : 0.0;
                var r = mul(relu(v[0]), t.constant(keep));
                var c = clamp(v[3], 0.0, 1.0);
                return add(sum(mul(r, r)), sum(mul(c, v[3])));
            };
            CHECK(grad_check(g, p, 1e-7) <= 1e-5);
        }
        SECTION("row normalisation and reductions") {
            auto g = [](tape& t, std::span<const var> v) {
                var n = row_normalize(v[0]);
                matrix w(3, 4);
                for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = 0.1 * static_cast<double>(i) - 0.4;
                var rs = row_sum(mul(n, t.constant(w)));
                return sum(mul(rs, rs));
            };
            CHECK(grad_check(g, p, 1e-6) <= tol);
        }
        SECTION("masked log-sum-exp, gather, pick and concat") {
            auto g = [](tape&, std::span<const var> v) {
                matrix mask(6, 4, 1.0);
                mask(0, 1) = 0.0;
                mask(4, 3) = 0.0;
                var stacked = concat_rows(v[0], gather_rows(v[3], {2, 0, 2}));
                var lse = row_logsumexp(stacked, mask);
                var picked = pick(stacked, {0, 2, 3, 1, 0, 2});
                return sum(add(lse, scale(picked, -0.5)));
            };
            CHECK(grad_check(g, p, 1e-6) <= tol);
        }
    }
}

TEST_CASE("backward requires a scalar root and a shared tape") {
    tape t;
    var a = t.variable(matrix(2, 2, 1.0));
    CHECK_THROWS_AS(t.backward(a), std::invalid_argument);
    tape other;
    var b = other.variable(matrix(2, 2, 1.0));
    CHECK_THROWS_AS(add(a, b), std::logic_error);
}

TEST_CASE("unused variables receive a zero gradient") {
    tape t;
    var a = t.variable(matrix(2, 2, 1.0));
    var unused = t.variable(matrix(3, 1, 5.0));
    t.backward(sum(a));
    CHECK(t.grad(unused) == matrix(3, 1, 0.0));
    CHECK(t.grad(a) == matrix(2, 2, 1.0));
}

TEST_CASE("row_normalize yields unit rows and tolerates a zero row") {
    tape t;
    var a = t.variable(matrix(2, 3, {3, 4, 0, 0, 0, 0}));
    var n = row_normalize(a);
    const matrix& y = t.value(n);
    CHECK(y(0, 0) == Approx(0.6));
    CHECK(y(0, 1) == Approx(0.8));
    CHECK(y(1, 0) == 1.0);
    t.backward(sum(n));
    CHECK(all_finite(t.grad(a)));
}

TEST_CASE("row_logsumexp is stable for large inputs and rejects empty rows") {
    tape t;
    var a = t.constant(matrix(1, 3, {1000.0, 1000.0, -5.0}));
    matrix mask(1, 3, {1, 1, 0});
    CHECK(t.value(row_logsumexp(a, mask)).data[0] == Approx(1000.0 + std::log(2.0)));
    CHECK_THROWS_AS(row_logsumexp(a, matrix(1, 3, 0.0)), std::invalid_argument);
}

TEST_CASE("adamw: zero gradient without decay is the identity") {
    param_set p = one_param(matrix(2, 2, {1, -2, 3, 0.5}));
    const param_set before = p;
    adamw_config cfg;
    cfg.weight_decay = 0.0;
    auto st = make_adamw_state(p, cfg);
    const std::vector<matrix> g{matrix(2, 2, 0.0)};
    for (int i = 0; i < 5; ++i) adamw_step(p, g, st);
    CHECK(p == before);
    CHECK(st.step == 5);
}

TEST_CASE("adamw: zero gradient applies decoupled decay only") {
    param_set p = one_param(matrix::scalar(1.0));
    adamw_config cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    auto st = make_adamw_state(p, cfg);
    const std::vector<matrix> g{matrix::scalar(0.0)};
    adamw_step(p, g, st);
    CHECK(p[0].value.data[0] == Approx(0.999).epsilon(1e-15));
}

TEST_CASE("adamw: the first step has magnitude close to lr") {
    param_set p = one_param(matrix::scalar(0.0));
    adamw_config cfg;
    cfg.weight_decay = 0.0;
    auto st = make_adamw_state(p, cfg);
    const std::vector<matrix> g{matrix::scalar(2.0)};
    adamw_step(p, g, st);
    // m_hat = 2, v_hat = 4, so the step is lr * 2 / (2 + eps).
    CHECK(std::abs(p[0].value.data[0]) == Approx(cfg.lr).epsilon(1e-7));
}

TEST_CASE("adamw matches a scalar reference implementation over many steps") {
    auto rng = make_rng({13});
    std::normal_distribution<double> nd;
    param_set p = one_param(matrix::scalar(0.7));
    adamw_config cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.05;
    auto st = make_adamw_state(p, cfg);
    double theta = 0.7, m = 0.0, v = 0.0;
    for (int step = 1; step <= 50; ++step) {
        const double g = nd(rng);
        adamw_step(p, std::vector<matrix>{matrix::scalar(g)}, st);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, step));
        const double vh = v / (1.0 - std::pow(0.999, step));
        theta = theta * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    CHECK(p[0].value.data[0] == Approx(theta).epsilon(1e-12));
}

TEST_CASE("adamw skips frozen parameters and checks shapes") {
    param_set p;
    p.add("frozen", matrix(1, 2, 1.0), param_role::backbone).trainable = false;
    p.add("live", matrix(1, 2, 1.0), param_role::head);
    auto st = make_adamw_state(p);
    adamw_step(p, std::vector<matrix>{matrix(1, 2, 3.0), matrix(1, 2, 3.0)}, st);
    CHECK(p[0].value == matrix(1, 2, 1.0));
    CHECK(st.first_moment[0] == matrix(1, 2, 0.0));
    CHECK(p[1].value.data[0] < 1.0);
    CHECK_THROWS_AS(adamw_step(p, std::vector<matrix>{matrix(2, 1), matrix(1, 2)}, st), std::invalid_argument);
    CHECK_THROWS_AS(adamw_step(p, std::vector<matrix>{matrix(1, 2)}, st), std::invalid_argument);
}

TEST_CASE("param_set rejects duplicate names") {
    param_set p;
    p.add("w", matrix(1, 1), param_role::head);
    CHECK_THROWS_AS(p.add("w", matrix(1, 1), param_role::head), std::invalid_argument);
    CHECK_THROWS_AS(p.at("missing"), std::out_of_range);
}

TEST_CASE("ema_update closed forms") {
    SECTION("decay 0 copies the parameters") {
        param_set p = one_param(matrix(1, 3, {1, 2, 3}));
        auto e = make_ema_state(one_param(matrix(1, 3, 9.0)), 0.0);
        ema_update(e, p);
        CHECK(e.shadow[0] == p[0].value);
    }
    SECTION("shadow equal to the parameters is a fixed point") {
        param_set p = one_param(matrix(1, 3, {1, 2, 3}));
        auto e = make_ema_state(p, 0.9997);
        ema_update(e, p);
        CHECK(e.shadow[0] == p[0].value);
    }
    SECTION("one update from 1 toward 0") {
        auto e = make_ema_state(one_param(matrix::scalar(1.0)), 0.9997);
        ema_update(e, one_param(matrix::scalar(0.0)));
        CHECK(e.shadow[0].data[0] == Approx(0.9997).epsilon(1e-15));
    }
    SECTION("decay outside [0, 1) is rejected") {
        CHECK_THROWS_AS(make_ema_state(one_param(matrix::scalar(0.0)), 1.0), std::invalid_argument);
        CHECK_THROWS_AS(make_ema_state(one_param(matrix::scalar(0.0)), -0.1), std::invalid_argument);
    }
}

TEST_CASE("ema_update contracts toward the parameters by exactly d") {
    auto rng = make_rng({14});
    for (int trial = 0; trial < 20; ++trial) {
        const double d = std::uniform_real_distribution<double>(0.0, 0.999)(rng);
        param_set theta = one_param(random_matrix(3, 3, rng));
        auto e = make_ema_state(one_param(random_matrix(3, 3, rng)), d);
        const matrix before = e.shadow[0];
        ema_update(e, theta);
        for (std::size_t i = 0; i < before.size(); ++i) {
            const double lhs = std::abs(e.shadow[0].data[i] - theta[0].value.data[i]);
            const double rhs = d * std::abs(before.data[i] - theta[0].value.data[i]);
            CHECK(lhs == Approx(rhs).margin(1e-14));
        }
    }
}

TEST_CASE("ema warm-up caps the effective decay early on") {
    auto e = make_ema_state(one_param(matrix::scalar(0.0)), 0.9997, true);
    CHECK(effective_decay(e) == Approx(0.1));
    e.updates = 90;
    CHECK(effective_decay(e) == Approx(0.91));
    e.updates = 1000000;
    CHECK(effective_decay(e) == 0.9997);
    e.warmup = false;
    e.updates = 0;
    CHECK(effective_decay(e) == 0.9997);
}
