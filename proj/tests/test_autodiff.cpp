#include "catch_amalgamated.hpp"

#include "modalflow/autodiff.hpp"

#include <functional>

using namespace modalflow;
using Ref = TapeD::Ref;

namespace {

MatD randn(Rng& rng, int r, int c, double scale = 1.0) {
    MatD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); i++) m.data()[i] = scale * rng.normal();
    return m;
}

// Central-difference check of d(loss)/d(theta) against the tape gradient.
// build() must construct the same graph for any theta value.
void check_grad(const MatD& theta, const std::function<Ref(TapeD&, Ref)>& build,
                double tol = 1e-5, double h = 1e-5) {
    MatD analytic;
    {
        TapeD t;
        Ref p = t.param(theta);
        Ref loss = build(t, p);
        t.backward(loss);
        analytic = t.grad_touched(p) ? t.grad(p) : MatD(MatD::Zero(theta.rows(), theta.cols()));
    }
    auto eval = [&](const MatD& th) {
        TapeD t;
        Ref p = t.param(th);
        return t.val(build(t, p))(0, 0);
    };
    for (Eigen::Index i = 0; i < theta.size(); i++) {
        MatD tp = theta, tm = theta;
        tp.data()[i] += h;
        tm.data()[i] -= h;
        double fd = (eval(tp) - eval(tm)) / (2 * h);
        double an = analytic.data()[i];
        double denom = std::max(1e-4, std::abs(fd) + std::abs(an));
        INFO("element " << i << " fd=" << fd << " analytic=" << an);
        REQUIRE(std::abs(fd - an) / denom < tol);
    }
}

}  // namespace

TEST_CASE("elementwise ops pass finite-difference checks", "[autodiff]") {
    Rng rng(1);
    MatD x = randn(rng, 3, 4);
    MatD other = randn(rng, 3, 4);

    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.add(p, t.constant(other))); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.mul(p, t.constant(other))); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.mul(p, p)); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.scale(p, -2.5)); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.add_scalar(p, 3.0)); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.silu(p)); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mean_all(t.gelu(p)); });
    check_grad(x, [&](TapeD& t, Ref p) { return t.mse(t.silu(p), t.constant(other)); });
}

TEST_CASE("matmul gradients for both operands", "[autodiff]") {
    Rng rng(2);
    MatD a = randn(rng, 3, 5), b = randn(rng, 5, 2);
    check_grad(a, [&](TapeD& t, Ref p) { return t.mean_all(t.matmul(p, t.constant(b))); });
    check_grad(b, [&](TapeD& t, Ref p) { return t.mean_all(t.matmul(t.constant(a), p)); });

    // hand oracle: mean(ones(2x2) * B), dA = (1/4) ones * B^T
    MatD A1 = MatD::Ones(2, 2);
    MatD B1(2, 2);
    B1 << 1, 2, 3, 4;
    TapeD t;
    Ref pa = t.param(A1);
    Ref loss = t.mean_all(t.matmul(pa, t.constant(B1)));
    CHECK(t.val(loss)(0, 0) == Catch::Approx(5.0));
    t.backward(loss);
    CHECK(t.grad(pa)(0, 0) == Catch::Approx(0.75));
    CHECK(t.grad(pa)(0, 1) == Catch::Approx(1.75));
    CHECK(t.grad(pa)(1, 0) == Catch::Approx(0.75));
    CHECK(t.grad(pa)(1, 1) == Catch::Approx(1.75));
}

TEST_CASE("bias broadcast and linear", "[autodiff]") {
    Rng rng(3);
    MatD x = randn(rng, 4, 3), w = randn(rng, 3, 2), b = randn(rng, 1, 2);
    check_grad(b, [&](TapeD& t, Ref p) {
        return t.mean_all(t.add_rowvec(t.constant(x * w), p));
    });
    check_grad(w, [&](TapeD& t, Ref p) {
        return t.mean_all(t.linear(t.constant(x), p, t.constant(b)));
    });
    check_grad(x, [&](TapeD& t, Ref p) {
        return t.mean_all(t.linear(p, t.constant(w), t.constant(b)));
    });
}

TEST_CASE("expand_groups repeats rows and sums gradients", "[autodiff]") {
    MatD a(2, 3);
    a << 1, 2, 3, 4, 5, 6;
    TapeD t;
    Ref p = t.param(a);
    Ref e = t.expand_groups(p, 2);
    REQUIRE(t.val(e).rows() == 4);
    CHECK(t.val(e)(0, 0) == 1);
    CHECK(t.val(e)(1, 0) == 1);
    CHECK(t.val(e)(2, 0) == 4);
    CHECK(t.val(e)(3, 2) == 6);
    Ref loss = t.mean_all(e);
    t.backward(loss);
    for (Eigen::Index i = 0; i < 6; i++)
        CHECK(t.grad(p).data()[i] == Catch::Approx(2.0 / 12.0));

    Rng rng(4);
    MatD x = randn(rng, 3, 2);
    check_grad(x, [&](TapeD& t2, Ref q) { return t2.mean_all(t2.silu(t2.expand_groups(q, 3))); });
}

TEST_CASE("concat and slice round trip gradients", "[autodiff]") {
    Rng rng(5);
    MatD a = randn(rng, 3, 2), b = randn(rng, 3, 4);
    check_grad(a, [&](TapeD& t, Ref p) {
        return t.mean_all(t.silu(t.concat_cols({p, t.constant(b)})));
    });
    check_grad(b, [&](TapeD& t, Ref p) {
        return t.mean_all(t.silu(t.concat_cols({t.constant(a), p})));
    });
    check_grad(b, [&](TapeD& t, Ref p) { return t.mean_all(t.mul(t.slice_cols(p, 1, 2), t.slice_cols(p, 2, 2))); });

    TapeD t;
    Ref pa = t.param(a);
    Ref cat = t.concat_cols({pa, t.constant(b)});
    REQUIRE(t.val(cat).cols() == 6);
    Ref sl = t.slice_cols(cat, 0, 2);
    CHECK((t.val(sl) - a).norm() == 0.0);
}

TEST_CASE("embedding gather scatter-adds into the table", "[autodiff]") {
    MatD table(4, 2);
    table << 1, 2, 3, 4, 5, 6, 7, 8;
    TapeD t;
    Ref p = t.param(table);
    Ref out = t.embedding_rows(p, {1, 1, 3});
    REQUIRE(t.val(out).rows() == 3);
    CHECK(t.val(out)(0, 0) == 3);
    CHECK(t.val(out)(2, 1) == 8);
    Ref loss = t.mean_all(out);
    t.backward(loss);
    CHECK(t.grad(p)(0, 0) == 0.0);
    CHECK(t.grad(p)(1, 0) == Catch::Approx(2.0 / 6.0));
    CHECK(t.grad(p)(3, 1) == Catch::Approx(1.0 / 6.0));
    CHECK(t.grad(p)(2, 1) == 0.0);

    CHECK_THROWS_AS(t.embedding_rows(p, {4}), ValidationError);
    CHECK_THROWS_AS(t.embedding_rows(p, {-1}), ValidationError);

    Rng rng(6);
    MatD tb = randn(rng, 5, 3);
    check_grad(tb, [&](TapeD& t2, Ref q) {
        return t2.mean_all(t2.silu(t2.embedding_rows(q, {0, 2, 2, 4})));
    });
}

TEST_CASE("layernorm normalizes rows and matches finite differences", "[autodiff]") {
    Rng rng(7);
    MatD x = randn(rng, 4, 8, 2.0);
    TapeD t;
    Ref p = t.param(x);
    Ref y = t.layernorm(p);
    for (Eigen::Index r = 0; r < 4; r++) {
        CHECK(std::abs(t.val(y).row(r).mean()) < 1e-12);
        CHECK(t.val(y).row(r).squaredNorm() == Catch::Approx(8.0).epsilon(1e-3));
    }
    // shift invariance: gradient of the row mean vanishes
    Ref loss = t.mean_all(y);
    t.backward(loss);
    CHECK(t.grad(p).cwiseAbs().maxCoeff() < 1e-12);

    check_grad(x, [&](TapeD& t2, Ref q) {
        return t2.mse(t2.layernorm(q), t2.constant(MatD::Ones(4, 8)));
    }, 1e-5, 1e-6);
}

TEST_CASE("attention reduces to value passthrough for single-token blocks", "[autodiff]") {
    Rng rng(8);
    MatD q = randn(rng, 3, 4), k = randn(rng, 3, 4), v = randn(rng, 3, 4);
    TapeD t;
    Ref pv = t.param(v);
    Ref out = t.attention(t.constant(q), t.constant(k), pv, 2, 1);
    CHECK((t.val(out) - v).cwiseAbs().maxCoeff() < 1e-12);
    Ref loss = t.mean_all(out);
    t.backward(loss);
    CHECK((t.grad(pv).array() - 1.0 / 12.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("attention with zero queries averages values", "[autodiff]") {
    Rng rng(9);
    MatD k = randn(rng, 4, 4), v = randn(rng, 4, 4);
    TapeD t;
    Ref out = t.attention(t.constant(MatD::Zero(4, 4)), t.constant(k), t.constant(v), 1, 4);
    MatD mean_row = v.colwise().mean();
    for (Eigen::Index r = 0; r < 4; r++)
        CHECK((t.val(out).row(r) - mean_row).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention gradients match finite differences", "[autodiff]") {
    Rng rng(10);
    MatD q = randn(rng, 4, 4), k = randn(rng, 4, 4), v = randn(rng, 4, 4);
    MatD tgt = randn(rng, 4, 4);
    auto loss_with = [&](TapeD& t, Ref qq, Ref kk, Ref vv) {
        return t.mse(t.attention(qq, kk, vv, 2, 2), t.constant(tgt));
    };
    check_grad(q, [&](TapeD& t, Ref p) { return loss_with(t, p, t.constant(k), t.constant(v)); });
    check_grad(k, [&](TapeD& t, Ref p) { return loss_with(t, t.constant(q), p, t.constant(v)); });
    check_grad(v, [&](TapeD& t, Ref p) { return loss_with(t, t.constant(q), t.constant(k), p); });
}

TEST_CASE("attention validates shapes", "[autodiff]") {
    TapeD t;
    Ref a = t.constant(MatD::Zero(4, 4));
    Ref b = t.constant(MatD::Zero(4, 6));
    CHECK_THROWS_AS(t.attention(a, b, a, 2, 2), ValidationError);
    CHECK_THROWS_AS(t.attention(a, a, a, 3, 2), ValidationError);
    CHECK_THROWS_AS(t.attention(a, a, a, 2, 3), ValidationError);
}

TEST_CASE("masked mse oracle", "[autodiff]") {
    MatD p(2, 2), tgt = MatD::Zero(2, 2);
    p << 1, 2, 3, 4;
    TapeD t;
    Ref pp = t.param(p);
    Ref loss = t.masked_mse(pp, t.constant(tgt), {1.0, 0.0});
    CHECK(t.val(loss)(0, 0) == Catch::Approx(2.5));
    t.backward(loss);
    CHECK(t.grad(pp)(0, 0) == Catch::Approx(1.0));
    CHECK(t.grad(pp)(0, 1) == Catch::Approx(2.0));
    CHECK(t.grad(pp)(1, 0) == 0.0);
    CHECK(t.grad(pp)(1, 1) == 0.0);

    // all-zero weights: constant zero, no gradient flows
    TapeD t2;
    Ref q = t2.param(p);
    Ref z = t2.masked_mse(q, t2.constant(tgt), {0.0, 0.0});
    CHECK(t2.val(z)(0, 0) == 0.0);
    t2.backward(z);
    CHECK_FALSE(t2.grad_touched(q));

    Rng rng(11);
    MatD x = randn(rng, 3, 4);
    MatD y = randn(rng, 3, 4);
    check_grad(x, [&](TapeD& tt, Ref r) {
        return tt.masked_mse(tt.silu(r), tt.constant(y), {0.5, 0.0, 2.0});
    });
}

TEST_CASE("mse of identical inputs is zero", "[autodiff]") {
    Rng rng(12);
    MatD x = randn(rng, 3, 3);
    TapeD t;
    CHECK(t.val(t.mse(t.constant(x), t.constant(x)))(0, 0) == 0.0);
}

TEST_CASE("cosine alignment oracle", "[autodiff]") {
    MatD p(2, 2), q(2, 2);
    p << 1, 0, 0, 2;
    q << 1, 0, 1, 0;  // row0 parallel, row1 orthogonal
    TapeD t;
    Ref pp = t.param(p);
    Ref loss = t.neg_mean_cosine(pp, t.constant(q), {1.0, 1.0});
    CHECK(t.val(loss)(0, 0) == Catch::Approx(-0.5));
    t.backward(loss);
    // the parallel row is at the optimum: zero gradient
    CHECK(std::abs(t.grad(pp)(0, 0)) < 1e-12);
    CHECK(std::abs(t.grad(pp)(0, 1)) < 1e-12 + 0.5);  // only direction row1 moves

    Rng rng(13);
    MatD x = randn(rng, 4, 5);
    MatD y = randn(rng, 4, 5);
    check_grad(x, [&](TapeD& tt, Ref r) {
        return tt.neg_mean_cosine(tt.silu(r), tt.constant(y), {1.0, 0.0, 0.5, 2.0});
    });

    // scale invariance in the prediction
    TapeD t3;
    Ref a1 = t3.neg_mean_cosine(t3.constant(p), t3.constant(q), {1.0, 1.0});
    Ref a2 = t3.neg_mean_cosine(t3.constant(MatD(3.0 * p)), t3.constant(q), {1.0, 1.0});
    CHECK(t3.val(a1)(0, 0) == Catch::Approx(t3.val(a2)(0, 0)));
}

TEST_CASE("gradients accumulate across shared nodes", "[autodiff]") {
    MatD x(1, 1);
    x << 3.0;
    TapeD t;
    Ref p = t.param(x);
    Ref y = t.add(p, p);  // 2x
    Ref loss = t.mean_all(y);
    t.backward(loss);
    CHECK(t.grad(p)(0, 0) == Catch::Approx(2.0));

    TapeD t2;
    Ref p2 = t2.param(x);
    Ref sq = t2.mul(p2, p2);
    t2.backward(t2.mean_all(sq));
    CHECK(t2.grad(p2)(0, 0) == Catch::Approx(6.0));
}

TEST_CASE("constants receive no gradients and backward skips them", "[autodiff]") {
    Rng rng(14);
    MatD x = randn(rng, 2, 2);
    TapeD t;
    Ref c = t.constant(x);
    Ref p = t.param(x);
    Ref loss = t.mean_all(t.mul(c, p));
    t.backward(loss);
    CHECK_FALSE(t.grad_touched(c));
    CHECK(t.grad_touched(p));
    CHECK_FALSE(t.needs_grad(c));
}

TEST_CASE("backward requires a scalar loss", "[autodiff]") {
    TapeD t;
    Ref p = t.param(MatD::Ones(2, 2));
    CHECK_THROWS_AS(t.backward(p), ValidationError);
}

TEST_CASE("a small mlp composite passes finite differences", "[autodiff]") {
    Rng rng(15);
    MatD x = randn(rng, 6, 4);
    MatD w1 = randn(rng, 4, 8, 0.5), b1 = randn(rng, 1, 8, 0.1);
    MatD w2 = randn(rng, 8, 4, 0.5), b2 = randn(rng, 1, 4, 0.1);
    MatD tgt = randn(rng, 6, 4);

    auto net = [&](TapeD& t, Ref xin, Ref pw1, Ref pb1, Ref pw2, Ref pb2) {
        Ref h = t.gelu(t.linear(xin, pw1, pb1));
        Ref o = t.linear(h, pw2, pb2);
        return t.mse(o, t.constant(tgt));
    };
    check_grad(w1, [&](TapeD& t, Ref p) {
        return net(t, t.constant(x), p, t.constant(b1), t.constant(w2), t.constant(b2));
    });
    check_grad(b1, [&](TapeD& t, Ref p) {
        return net(t, t.constant(x), t.constant(w1), p, t.constant(w2), t.constant(b2));
    });
    check_grad(w2, [&](TapeD& t, Ref p) {
        return net(t, t.constant(x), t.constant(w1), t.constant(b1), p, t.constant(b2));
    });
    check_grad(x, [&](TapeD& t, Ref p) {
        return net(t, p, t.constant(w1), t.constant(b1), t.constant(w2), t.constant(b2));
    });
}
