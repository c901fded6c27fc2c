#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "mavos/gradcheck.hpp"
#include "mavos/graph.hpp"
#include "mavos/kernels.hpp"
#include "mavos/rng.hpp"
#include "mavos/tensor.hpp"
#include "test_util.hpp"

using namespace mavos;

namespace {

// Sizes straddling the SIMD vector widths (4 doubles / 8 floats per AVX2
// register) so remainder tails get exercised.
const std::vector<size_t> kSizes{1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 32, 33, 63, 64, 67};

template <typename T>
std::vector<T> rand_vec(size_t n, Rng& rng, double scale = 1.0) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-scale, scale));
    return v;
}

// Pins the scalar path for one scope, restoring the previous setting even if
// an assertion throws.
struct ScalarGuard {
    bool was;
    ScalarGuard() : was(kern::force_scalar()) { kern::set_force_scalar(true); }
    ~ScalarGuard() { kern::set_force_scalar(was); }
};

}  // namespace

TEST_CASE("isa dispatch is visible and forceable") {
    kern::Isa active = kern::active_isa();
    CHECK(std::string(kern::isa_name(active)).size() > 0);
    CHECK(std::string(kern::isa_name(kern::Isa::scalar)) == "scalar");
    {
        ScalarGuard guard;
        CHECK(kern::active_isa() == kern::Isa::scalar);
    }
    CHECK(kern::active_isa() == active);
}

TEST_CASE_TEMPLATE("vector kernels agree with the scalar reference", T, float, double) {
    // Reductions may differ by summation order; elementwise ops by fused
    // rounding. Both stay within a few ulps at these magnitudes.
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
    Rng rng(301);
    for (size_t n : kSizes) {
        std::vector<T> a = rand_vec<T>(n, rng);
        std::vector<T> b = rand_vec<T>(n, rng);
        std::vector<T> y0 = rand_vec<T>(n, rng);
        T alpha = static_cast<T>(rng.uniform(-2.0, 2.0));

        T dot_v = kern::dot(a.data(), b.data(), n);
        T sum_v = kern::sum(a.data(), n);
        T max_v = kern::max(a.data(), n);
        std::vector<T> axpy_v = y0;
        kern::axpy(axpy_v.data(), alpha, a.data(), n);
        std::vector<T> vmadd_v = y0;
        kern::vmadd(vmadd_v.data(), a.data(), b.data(), n);
        std::vector<T> add_v(n), mul_v(n);
        kern::add(add_v.data(), a.data(), b.data(), n);
        kern::mul(mul_v.data(), a.data(), b.data(), n);
        std::vector<T> scal_v = y0;
        kern::scal(scal_v.data(), alpha, n);

        ScalarGuard guard;
        CHECK(std::abs(static_cast<double>(dot_v - kern::dot(a.data(), b.data(), n))) < tol);
        CHECK(std::abs(static_cast<double>(sum_v - kern::sum(a.data(), n))) < tol);
        CHECK(max_v == kern::max(a.data(), n));
        std::vector<T> axpy_s = y0;
        kern::axpy(axpy_s.data(), alpha, a.data(), n);
        std::vector<T> vmadd_s = y0;
        kern::vmadd(vmadd_s.data(), a.data(), b.data(), n);
        std::vector<T> add_s(n), mul_s(n);
        kern::add(add_s.data(), a.data(), b.data(), n);
        kern::mul(mul_s.data(), a.data(), b.data(), n);
        std::vector<T> scal_s = y0;
        kern::scal(scal_s.data(), alpha, n);
        for (size_t i = 0; i < n; ++i) {
            CHECK(std::abs(static_cast<double>(axpy_v[i] - axpy_s[i])) < tol);
            CHECK(std::abs(static_cast<double>(vmadd_v[i] - vmadd_s[i])) < tol);
            CHECK(add_v[i] == add_s[i]);
            CHECK(mul_v[i] == mul_s[i]);
            CHECK(scal_v[i] == scal_s[i]);
        }
    }
}

TEST_CASE("max ignores NaN entries") {
    double x[4] = {1.0, std::numeric_limits<double>::quiet_NaN(), 3.0, 2.0};
    CHECK(kern::max(x, 4) == 3.0);
    float xf[3] = {std::numeric_limits<float>::quiet_NaN(), -2.0f, -5.0f};
    CHECK(kern::max(xf, 3) == -2.0f);
}

TEST_CASE_TEMPLATE("matmul variants match the triple loop", T, float, double) {
    const double tol = std::is_same_v<T, float> ? 2e-4 : 1e-10;
    Rng rng(302);
    for (int it = 0; it < 30; ++it) {
        size_t m = 1 + rng.uniform_int(9);
        size_t k = 1 + rng.uniform_int(33);
        size_t n = 1 + rng.uniform_int(9);
        std::vector<T> a = rand_vec<T>(m * k, rng);
        std::vector<T> b = rand_vec<T>(k * n, rng);

        std::vector<long double> ref(m * n, 0.0L);
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = 0; j < n; ++j) {
                long double acc = 0.0L;
                for (size_t p = 0; p < k; ++p) acc += static_cast<long double>(a[i * k + p]) * b[p * n + j];
                ref[i * n + j] = acc;
            }
        }

        std::vector<T> c_nn(m * n);
        kern::matmul_nn(c_nn.data(), a.data(), b.data(), m, k, n);

        // B^T laid out [n x k] feeds matmul_nt; A laid out [m x k] transposed
        // feeds matmul_tn with swapped roles.
        std::vector<T> bt(n * k);
        for (size_t p = 0; p < k; ++p) {
            for (size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
        }
        std::vector<T> c_nt(m * n);
        kern::matmul_nt(c_nt.data(), a.data(), bt.data(), m, k, n);

        std::vector<T> at(k * m);
        for (size_t i = 0; i < m; ++i) {
            for (size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
        }
        // C[K'=m x n] = AT[k x m]^T * B'[k x n] with (M,K,N) = (k, m, n).
        std::vector<T> c_tn(m * n);
        kern::matmul_tn(c_tn.data(), at.data(), b.data(), k, m, n);

        for (size_t i = 0; i < m * n; ++i) {
            CHECK(std::abs(static_cast<double>(static_cast<long double>(c_nn[i]) - ref[i])) < tol);
            CHECK(std::abs(static_cast<double>(static_cast<long double>(c_nt[i]) - ref[i])) < tol);
            CHECK(std::abs(static_cast<double>(static_cast<long double>(c_tn[i]) - ref[i])) < tol);
        }
    }
}

TEST_CASE("tensor construction validates its shape") {
    CHECK_THROWS_AS(Tensor<double>(std::vector<int>{}), DimensionError);
    CHECK_THROWS_AS(Tensor<double>({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor<double>({2, -1}), DimensionError);
    CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);

    Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rank() == 2);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at2(1, 0) == 4.0);

    Tensor<double> u({2, 2, 2});
    u.at3(1, 0, 1) = 9.0;
    CHECK(u[5] == 9.0);

    Tensor<double> z = Tensor<double>::zeros({3});
    CHECK(z[0] == 0.0);
    Tensor<double> f = Tensor<double>::full({3}, 2.5);
    CHECK(f[2] == 2.5);
}

TEST_CASE("graph linear algebra matches the long double loops") {
    Rng rng(303);
    Graph<double> g;
    Tensor<double> a = oracle::rand_tensor({5, 7}, rng);
    Tensor<double> b = oracle::rand_tensor({7, 4}, rng);
    Tensor<double> bt = oracle::rand_tensor({4, 7}, rng);
    Tensor<double> w = oracle::rand_tensor({7, 3}, rng);
    Tensor<double> bias = oracle::rand_tensor({3}, rng);

    oracle::Mat ref_mm = oracle::matmul(oracle::from_tensor(a), oracle::from_tensor(b));
    CHECK(oracle::max_abs_diff(g.val(g.matmul(g.input(a), g.input(b))), ref_mm) < 1e-12);

    oracle::Mat ref_nt = oracle::matmul_nt(oracle::from_tensor(a), oracle::from_tensor(bt));
    CHECK(oracle::max_abs_diff(g.val(g.matmul_nt(g.input(a), g.input(bt))), ref_nt) < 1e-12);

    LinearProjection<double> p{w, bias};
    oracle::Mat ref_lin = oracle::linear(oracle::from_tensor(a), p);
    Var lin = g.linear(g.input(a), g.input(w), g.input(bias));
    CHECK(oracle::max_abs_diff(g.val(lin), ref_lin) < 1e-12);

    // Bias skipped via an invalid Var.
    LinearProjection<double> p0{w, Tensor<double>::zeros({3})};
    oracle::Mat ref_nb = oracle::linear(oracle::from_tensor(a), p0);
    CHECK(oracle::max_abs_diff(g.val(g.linear(g.input(a), g.input(w), Var{})), ref_nb) < 1e-12);
}

TEST_CASE("softmax is stable, exact, and loud about non-finite input") {
    Graph<double> g;
    // Large shifts must not overflow: rows are invariant to constant offsets.
    Tensor<double> big({2, 3}, {1000.0, 1000.5, 999.0, -1000.0, -1000.5, -999.0});
    Tensor<double> sm = g.val(g.softmax_rows(g.input(big)));
    oracle::Mat ref = oracle::softmax_rows(oracle::from_tensor(big));
    CHECK(oracle::max_abs_diff(sm, ref) < 1e-12);

    Tensor<double> bad({2, 2}, {0.0, 1.0, 2.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS_WITH_AS((void)g.softmax_rows(g.input(bad)),
                         doctest::Contains("row 1"), NumericError);
    Tensor<double> inf({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS_AS((void)g.softmax_rows(g.input(inf)), NumericError);
}

TEST_CASE("layer norm standardizes rows and keeps zero rows at zero") {
    Rng rng(304);
    Graph<double> g;
    Tensor<double> x = oracle::rand_tensor({6, 9}, rng, 3.0);
    for (int j = 0; j < 9; ++j) x.at2(2, j) = 0.0;
    Tensor<double> y = g.val(g.layer_norm_rows(g.input(x)));

    for (int i = 0; i < 6; ++i) {
        long double mu = 0.0L, var = 0.0L;
        for (int j = 0; j < 9; ++j) mu += x.at2(i, j);
        mu /= 9;
        for (int j = 0; j < 9; ++j) {
            long double d = x.at2(i, j) - mu;
            var += d * d;
        }
        var /= 9;
        for (int j = 0; j < 9; ++j) {
            long double want = (x.at2(i, j) - mu) / std::sqrt(var + 1e-5L);
            CHECK(std::abs(static_cast<double>(y.at2(i, j) - want)) < 1e-12);
        }
    }
    for (int j = 0; j < 9; ++j) CHECK(y.at2(2, j) == 0.0);
}

TEST_CASE("shape plumbing ops move data where they claim") {
    Rng rng(305);
    Graph<double> g;
    Tensor<double> x = oracle::rand_tensor({4, 6}, rng);

    Var r = g.reshape(g.input(x), {2, 12});
    CHECK(g.val(r).dim(0) == 2);
    CHECK(g.val(r)[7] == x[7]);

    Var s = g.slice_rows(g.input(x), 1, 3);
    CHECK(g.val(s).dim(0) == 2);
    CHECK(g.val(s).at2(0, 2) == x.at2(1, 2));

    Var cat = g.concat_rows({g.input(x), g.input(x)});
    CHECK(g.val(cat).dim(0) == 8);
    CHECK(g.val(cat).at2(5, 3) == x.at2(1, 3));

    Tensor<double> y = oracle::rand_tensor({4, 2}, rng);
    Var cc = g.concat_cols(g.input(x), g.input(y));
    CHECK(g.val(cc).dim(1) == 8);
    CHECK(g.val(cc).at2(2, 6) == y.at2(2, 0));
    CHECK(g.val(cc).at2(2, 1) == x.at2(2, 1));

    Tensor<double> sc({4}, {2.0, -1.0, 0.5, 3.0});
    Var sr = g.scale_rows(g.input(x), g.input(sc));
    CHECK(g.val(sr).at2(1, 4) == doctest::Approx(-x.at2(1, 4)).epsilon(1e-15));

    Var c1 = g.col(g.input(x), 5);
    CHECK(g.val(c1).numel() == 4);
    CHECK(g.val(c1)[3] == x.at2(3, 5));
    CHECK_THROWS_AS((void)g.col(g.input(x), 6), DimensionError);

    Tensor<double> v({1, 1, 3}, {7.0, 8.0, 9.0});
    Var bc = g.broadcast_rows(g.input(v), {2, 2, 3});
    CHECK(g.val(bc).at3(1, 1, 2) == 9.0);

    Tensor<double> table({3, 2}, {1, 2, 3, 4, 5, 6});
    Var ga = g.gather_rows(g.input(table), {2, -1, 0});
    CHECK(g.val(ga).at2(0, 1) == 6.0);
    CHECK(g.val(ga).at2(1, 0) == 0.0);
    CHECK(g.val(ga).at2(1, 1) == 0.0);
    CHECK(g.val(ga).at2(2, 0) == 1.0);
    CHECK_THROWS_AS((void)g.gather_rows(g.input(table), {3}), DimensionError);
    CHECK_THROWS_AS((void)g.gather_rows(g.input(table), {-2}), DimensionError);
}

TEST_CASE("spatial ops match explicit references") {
    Rng rng(306);
    Graph<double> g;

    // Depthwise conv against the oracle loop.
    Tensor<double> x = oracle::rand_tensor({5, 4, 3}, rng);
    Tensor<double> k = oracle::rand_tensor({3, 3, 3}, rng);
    Var dw = g.depthwise_conv(g.input(x), g.input(k));
    oracle::Mat xm(20, 3);
    for (int i = 0; i < 20; ++i) {
        for (int f = 0; f < 3; ++f) xm.at(i, f) = x[static_cast<int64_t>(i) * 3 + f];
    }
    oracle::Mat ref = oracle::dwconv3(xm, 5, 4, k);
    CHECK(oracle::max_abs_diff(g.val(dw), ref) < 1e-12);

    // Dense conv against a fresh quad loop.
    Tensor<double> ci = oracle::rand_tensor({5, 5, 2}, rng);
    Tensor<double> cw = oracle::rand_tensor({3, 3, 2, 4}, rng);
    Tensor<double> cb = oracle::rand_tensor({4}, rng);
    Var cv = g.conv2d(g.input(ci), g.input(cw), g.input(cb), 2, 1);
    const Tensor<double>& cvv = g.val(cv);
    REQUIRE(cvv.dim(0) == 3);
    REQUIRE(cvv.dim(1) == 3);
    REQUIRE(cvv.dim(2) == 4);
    for (int oy = 0; oy < 3; ++oy) {
        for (int ox = 0; ox < 3; ++ox) {
            for (int oc = 0; oc < 4; ++oc) {
                long double acc = cb[oc];
                for (int dy = 0; dy < 3; ++dy) {
                    for (int dx = 0; dx < 3; ++dx) {
                        int sy = oy * 2 + dy - 1, sx = ox * 2 + dx - 1;
                        if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
                        for (int c = 0; c < 2; ++c) {
                            acc += static_cast<long double>(ci.at3(sy, sx, c)) *
                                   cw[((static_cast<int64_t>(dy) * 3 + dx) * 2 + c) * 4 + oc];
                        }
                    }
                }
                CHECK(std::abs(static_cast<double>(cvv.at3(oy, ox, oc) - acc)) < 1e-12);
            }
        }
    }

    // Pooling is the plain mean.
    Var gp = g.global_avg_pool(g.input(x));
    for (int f = 0; f < 3; ++f) {
        long double acc = 0.0L;
        for (int p = 0; p < 20; ++p) acc += x[static_cast<int64_t>(p) * 3 + f];
        CHECK(std::abs(static_cast<double>(g.val(gp)[f] - acc / 20.0L)) < 1e-14);
    }

    // Upsampling doubles both spatial dims, preserves constants, and matches
    // the half-pixel taps on a ramp.
    Tensor<double> flat = Tensor<double>::full({3, 3, 2}, 1.25);
    Var upf = g.upsample2x(g.input(flat));
    REQUIRE(g.val(upf).dim(0) == 6);
    for (int64_t i = 0; i < g.val(upf).numel(); ++i) CHECK(g.val(upf)[i] == doctest::Approx(1.25));

    Tensor<double> ramp({1, 3, 1}, {0.0, 1.0, 2.0});
    const Tensor<double>& upr = g.val(g.upsample2x(g.input(ramp)));
    REQUIRE(upr.dim(1) == 6);
    CHECK(upr[0] == doctest::Approx(0.0));     // clamped edge
    CHECK(upr[1] == doctest::Approx(0.25));
    CHECK(upr[2] == doctest::Approx(0.75));
    CHECK(upr[3] == doctest::Approx(1.25));
    CHECK(upr[4] == doctest::Approx(1.75));
    CHECK(upr[5] == doctest::Approx(2.0));
}

TEST_CASE("losses match hand computations") {
    Graph<double> g;
    // Zero logits score log(2) under BCE regardless of the target.
    Tensor<double> z0 = Tensor<double>::zeros({2, 3});
    Tensor<double> tgt({2, 3}, {1, 0, 1, 0, 0, 1});
    CHECK(g.val(g.bce_with_logits_mean(g.input(z0), g.input(tgt)))[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Confident correct logits drive both losses toward zero.
    Tensor<double> sharp({2, 3}, {30, -30, 30, -30, -30, 30});
    CHECK(g.val(g.bce_with_logits_mean(g.input(sharp), g.input(tgt)))[0] < 1e-9);
    CHECK(g.val(g.soft_jaccard_mean(g.input(sharp), g.input(tgt)))[0] < 1e-6);

    // Random instance against a long double re-computation.
    Rng rng(307);
    Tensor<double> logits = oracle::rand_tensor({6, 4}, rng, 2.0);
    Tensor<double> targets({6, 4});
    for (int i = 0; i < 6; ++i) targets.at2(i, static_cast<int>(rng.uniform_int(4))) = 1.0;

    long double bce = 0.0L;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        long double x = logits[i], t = targets[i];
        bce += std::max(x, 0.0L) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    bce /= logits.numel();
    CHECK(std::abs(static_cast<double>(
              g.val(g.bce_with_logits_mean(g.input(logits), g.input(targets)))[0] - bce)) < 1e-12);

    long double jac = 0.0L;
    for (int ch = 0; ch < 4; ++ch) {
        long double s1 = 0.0L, s2 = 0.0L;
        for (int i = 0; i < 6; ++i) {
            long double x = logits.at2(i, ch);
            long double p = x >= 0 ? 1.0L / (1.0L + std::exp(-x)) : std::exp(x) / (1.0L + std::exp(x));
            long double t = targets.at2(i, ch);
            s1 += p * t;
            s2 += p + t - p * t;
        }
        jac += 1.0L - (s1 + 1e-7L) / (s2 + 1e-7L);
    }
    jac /= 4;
    CHECK(std::abs(static_cast<double>(
              g.val(g.soft_jaccard_mean(g.input(logits), g.input(targets)))[0] - jac)) < 1e-12);
}

TEST_CASE("every op's backward survives central differences") {
    Rng rng(308);
    auto fd = [&](auto&& build, std::vector<gradcheck::Leaf<double>> leaves) {
        auto r = gradcheck::check<double>(leaves, build);
        CHECK(r.max_rel < 1e-4);
        return r.max_rel;
    };

    Tensor<double> a = oracle::rand_tensor({3, 4}, rng);
    Tensor<double> b = oracle::rand_tensor({3, 4}, rng);
    Rng d1 = rng.split(1);
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var av = g.input(a, true), bv = g.input(b, true);
        Rng d = d1;
        Var y = g.add(g.mul(av, bv), g.sub(g.scale(av, 0.7), bv));
        return {gradcheck::detail::project(g, y, d), {av, bv}};
    }, {{"a", &a}, {"b", &b}});

    Tensor<double> m = oracle::rand_tensor({3, 5}, rng);
    Rng d2 = rng.split(2);
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var mv = g.input(m, true);
        Rng d = d2;
        Var y = g.concat_cols(g.slice_rows(mv, 0, 2), g.slice_rows(mv, 1, 3));
        Var z = g.concat_rows({y, y});
        return {gradcheck::detail::project(g, g.reshape(z, {4, 10}), d), {mv}};
    }, {{"m", &m}});

    Tensor<double> sx = oracle::rand_tensor({4, 3}, rng);
    Tensor<double> ss = oracle::rand_tensor({4}, rng);
    Rng d3 = rng.split(3);
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var xv = g.input(sx, true), sv = g.input(ss, true);
        Rng d = d3;
        Var y = g.scale_rows(xv, sv);
        Var z = g.broadcast_rows(g.col(y, 1), {4, 3, 4});
        return {gradcheck::detail::project(g, z, d), {xv, sv}};
    }, {{"x", &sx}, {"s", &ss}});

    Tensor<double> table = oracle::rand_tensor({4, 3}, rng);
    Rng d4 = rng.split(4);
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var tv = g.input(table, true);
        Rng d = d4;
        Var y = g.gather_rows(tv, {0, 2, 2, -1, 3});
        return {gradcheck::detail::project(g, y, d), {tv}};
    }, {{"table", &table}});

    Tensor<double> ci = oracle::rand_tensor({5, 5, 2}, rng);
    Tensor<double> cw = oracle::rand_tensor({3, 3, 2, 3}, rng);
    Tensor<double> cb = oracle::rand_tensor({3}, rng);
    Rng d5 = rng.split(5);
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var xv = g.input(ci, true), wv = g.input(cw, true), bv = g.input(cb, true);
        Rng d = d5;
        Var y = g.upsample2x(g.conv2d(xv, wv, bv, 2, 1));
        Var z = g.add(gradcheck::detail::project(g, y, d),
                      gradcheck::detail::project(g, g.global_avg_pool(y), d));
        return {z, {xv, wv, bv}};
    }, {{"x", &ci}, {"w", &cw}, {"b", &cb}});

    Tensor<double> lg = oracle::rand_tensor({4, 3}, rng, 1.5);
    Tensor<double> tg({4, 3});
    for (int i = 0; i < 4; ++i) tg.at2(i, static_cast<int>(rng.uniform_int(3))) = 1.0;
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var lv = g.input(lg, true);
        Var y = g.add(g.bce_with_logits_mean(lv, g.input(tg)),
                      g.soft_jaccard_mean(lv, g.input(tg)));
        return {y, {lv}};
    }, {{"logits", &lg}});

    Tensor<double> smx = oracle::rand_tensor({3, 5}, rng, 2.0);
    Rng d6 = rng.split(6);
    fd([&](Graph<double>& g) -> std::pair<Var, std::vector<Var>> {
        Var xv = g.input(smx, true);
        Rng d = d6;
        return {gradcheck::detail::project(g, g.softmax_rows(xv), d), {xv}};
    }, {{"x", &smx}});
}

TEST_CASE("the packaged gradient suite passes and its corruption hook trips") {
    auto rep = gradcheck::run_suite<double>(19, 2);
    CHECK(rep.all_pass());
    for (const auto& c : rep.components) {
        INFO(c.name);
        CHECK(c.max_rel < rep.tol);
        CHECK(c.coords > 0);
    }
    // A deliberately corrupted analytic gradient must be caught, or the suite
    // proves nothing.
    auto bad = gradcheck::run_suite<double>(19, 2, 1e-4, 0.05);
    CHECK(!bad.all_pass());
    CHECK_THROWS_AS((void)gradcheck::run_suite<double>(19, 0), ConfigError);
}

TEST_CASE("inference graphs carry no gradient machinery") {
    Rng rng(309);
    Tensor<double> x = oracle::rand_tensor({3, 3}, rng);
    Graph<double> g;
    Var frozen = g.input(x, false);
    Var y = g.sum_all(g.mul(frozen, frozen));
    CHECK_THROWS_AS(g.backward(y), UsageError);

    Var live = g.input(x, true);
    Var mixed = g.sum_all(g.mul(live, frozen));
    g.backward(mixed);
    const Tensor<double>& gl = g.grad(live);
    bool nonzero = false;
    for (int64_t i = 0; i < gl.numel(); ++i) nonzero |= gl[i] != 0.0;
    CHECK(nonzero);
    const Tensor<double>& gf = g.grad(frozen);
    for (int64_t i = 0; i < gf.numel(); ++i) CHECK(gf[i] == 0.0);

    CHECK_THROWS_AS(g.backward(g.mul(live, live)), UsageError);
}

TEST_CASE("work counters are exact and deterministic") {
    Rng rng(310);
    Tensor<double> a = oracle::rand_tensor({3, 5}, rng);
    Tensor<double> b = oracle::rand_tensor({5, 4}, rng);

    Graph<double> g;
    g.reset_counters();
    (void)g.matmul(g.input(a), g.input(b));
    CHECK(g.macs() == 3.0 * 5.0 * 4.0);
    CHECK(g.softmax_calls() == 0);

    (void)g.softmax_rows(g.input(a));
    CHECK(g.softmax_calls() == 1);
    (void)g.softmax_rows(g.input(a));
    CHECK(g.softmax_calls() == 2);

    g.reset_counters();
    CHECK(g.macs() == 0.0);
    CHECK(g.softmax_calls() == 0);

    auto run = [&] {
        Graph<double> h;
        (void)h.softmax_rows(h.matmul(h.input(a), h.input(b)));
        return std::pair<double, size_t>{h.macs(), h.softmax_calls()};
    };
    CHECK(run() == run());
}

TEST_CASE("graphs are distinguishable by uid") {
    Graph<double> a, b;
    CHECK(a.uid() != b.uid());
}

TEST_CASE("rng streams are deterministic and splittable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(42);
    for (int i = 0; i < 1000; ++i) {
        double u = c.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(c.uniform_int(7) < 7);
    }

    Rng p(7);
    Rng q(7);
    Rng c1 = p.split(1);
    Rng c2 = q.split(2);
    int differ = 0;
    for (int i = 0; i < 64; ++i) differ += c1.next_u64() != c2.next_u64();
    CHECK(differ > 60);

    double mean = 0.0;
    Rng n(11);
    for (int i = 0; i < 10000; ++i) mean += n.normal();
    mean /= 10000;
    CHECK(std::abs(mean) < 0.05);
}
