#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "moecl/gradcheck.hpp"
#include "moecl/gradsuite.hpp"
#include "moecl/tape.hpp"
#include "moecl/tensor.hpp"

using namespace moecl;

using Td = Tensor<double>;

namespace {

double at(const Td& t, int64_t r, int64_t c) { return t.at(r, c); }

}  // namespace

TEST_CASE("matmul matches the hand-computed 2x2 product") {
    Td a{{1, 2}, {3, 4}};
    Td b{{5, 6}, {7, 8}};
    Td c = kernels::matmul(a, b);
    // 1*5+2*7 = 19, 1*6+2*8 = 22, 3*5+4*7 = 43, 3*6+4*8 = 50
    CHECK(at(c, 0, 0) == 19.0);
    CHECK(at(c, 0, 1) == 22.0);
    CHECK(at(c, 1, 0) == 43.0);
    CHECK(at(c, 1, 1) == 50.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions and names both shapes") {
    Td a(2, 3), b(2, 3);
    try {
        kernels::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2x3)") != std::string::npos);
    }
}

TEST_CASE("matmul backward matches central finite differences") {
    Rng rng(11);
    Td b(4, 3);
    rng.fill_gaussian(b, 1.0);
    Td point(2, 4);
    rng.fill_gaussian(point, 1.0);
    auto rep = finite_diff_check(
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(x, ctx.leaf(b))); }, point, 1e-6);
    CHECK(rep.max_rel_err <= 1e-6);

    Td a(3, 2);
    rng.fill_gaussian(a, 1.0);
    Td point2(2, 4);
    rng.fill_gaussian(point2, 1.0);
    auto rep2 = finite_diff_check(
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.leaf(a), x)); }, point2, 1e-6);
    CHECK(rep2.max_rel_err <= 1e-6);
}

TEST_CASE("softmax of [ln 1, ln 2, ln 3] is [1/6, 2/6, 3/6]") {
    Td x(1, 3);
    x.at(0, 0) = std::log(1.0);
    x.at(0, 1) = std::log(2.0);
    x.at(0, 2) = std::log(3.0);
    Td y = kernels::softmax_rows(x);
    CHECK(at(y, 0, 0) == Catch::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(at(y, 0, 1) == Catch::Approx(2.0 / 6.0).epsilon(1e-12));
    CHECK(at(y, 0, 2) == Catch::Approx(3.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one for random inputs") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Td x(4, 7);
        rng.fill_gaussian(x, 3.0);
        Td y = kernels::softmax_rows(x);
        for (int64_t r = 0; r < y.rows(); ++r) {
            double s = 0;
            for (int64_t j = 0; j < y.cols(); ++j) {
                s += y.at(r, j);
                CHECK(y.at(r, j) >= 0.0);
            }
            CHECK(std::fabs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax is shift invariant and stable for large logits") {
    Td x{{1000.0, 1000.0, 999.0}};
    Td y = kernels::softmax_rows(x);
    CHECK(y.all_finite());
    Td x2{{1.0, 1.0, 0.0}};
    Td y2 = kernels::softmax_rows(x2);
    for (int64_t j = 0; j < 3; ++j) CHECK(at(y, 0, j) == Catch::Approx(at(y2, 0, j)).epsilon(1e-12));
}

TEST_CASE("softmax rejects NaN input") {
    Td x(1, 3);
    x.at(0, 1) = std::nan("");
    CHECK_THROWS_AS(kernels::softmax_rows(x), NumericError);
}

TEST_CASE("cross entropy of uniform logits is ln K") {
    Td logits(2, 3);
    double loss = kernels::cross_entropy(logits, {0, 2});
    CHECK(loss == Catch::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy of confident correct logits is log1p(exp(-margin))") {
    Td logits{{10.0, 0.0}};
    double loss = kernels::cross_entropy(logits, {0});
    CHECK(loss == Catch::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
    CHECK(loss < 1e-4);
}

TEST_CASE("cross entropy rejects out-of-range labels") {
    Td logits(2, 3);
    CHECK_THROWS_AS(kernels::cross_entropy(logits, {0, 3}), IndexError);
    CHECK_THROWS_AS(kernels::cross_entropy(logits, {-1, 0}), IndexError);
}

TEST_CASE("cross entropy gradient matches finite differences at 1e-6") {
    Rng rng(17);
    Td point(4, 5);
    rng.fill_gaussian(point, 2.0);
    std::vector<int> labels{1, 0, 4, 2};
    auto rep = finite_diff_check(
        [&](auto& ctx, auto x) { return ctx.cross_entropy(x, labels); }, point, 1e-6);
    CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("grad_reverse is a bit-exact identity forward") {
    Rng rng(3);
    Td x(3, 4);
    rng.fill_gaussian(x, 1.0);
    Tape<double> tape;
    auto v = tape.leaf(x, true);
    auto y = tape.grad_reverse(v, 0.7);
    CHECK(tape.value(y).bit_equal(x));

    EvalCtx<double> ev;
    auto ve = ev.leaf(x);
    auto ye = ev.grad_reverse(ve, 0.7);
    CHECK(ev.value(ye).bit_equal(x));
}

TEST_CASE("grad_reverse scales the upstream gradient by minus lambda") {
    Td x(2, 2);
    for (double lambda : {1.0, 0.5, 0.0}) {
        Tape<double> tape;
        auto v = tape.leaf(x, true);
        auto loss = tape.sum_all(tape.grad_reverse(v, lambda));
        tape.backward(loss);
        Td g = tape.grad(v);
        for (int64_t i = 0; i < g.numel(); ++i) CHECK(g.data()[i] == -lambda);
    }
}

TEST_CASE("backward accumulates fan-out contributions exactly once each") {
    Td x{{1.0, 2.0}};
    Tape<double> tape;
    auto v = tape.leaf(x, true);
    auto y = tape.add(v, v);
    auto loss = tape.sum_all(y);
    tape.backward(loss);
    Td g = tape.grad(v);
    CHECK(g.at(0, 0) == 2.0);
    CHECK(g.at(0, 1) == 2.0);
}

TEST_CASE("backward requires a scalar loss") {
    Tape<double> tape;
    auto v = tape.leaf(Td(2, 3), true);
    CHECK_THROWS_AS(tape.backward(v), ContractError);
}

TEST_CASE("frozen leaves receive no gradient") {
    Td x{{1.0, 2.0}};
    Tape<double> tape;
    auto frozen = tape.leaf(x, false);
    auto live = tape.leaf(x, true);
    auto loss = tape.sum_all(tape.add(frozen, live));
    tape.backward(loss);
    CHECK(tape.grad_ptr(frozen) == nullptr);
    REQUIRE(tape.grad_ptr(live) != nullptr);
    CHECK(tape.grad(live).at(0, 0) == 1.0);
}

TEST_CASE("identical tapes produce bit-identical gradients") {
    Rng rng(23);
    Td a(3, 4), w(5, 4);
    rng.fill_gaussian(a, 1.0);
    rng.fill_gaussian(w, 1.0);
    auto build = [&](Tape<double>& tape) {
        auto va = tape.leaf(a, true);
        auto vw = tape.leaf(w, true);
        auto h = tape.relu(tape.matmul_nt(va, vw));
        auto s = tape.softmax_rows(h);
        auto loss = tape.cross_entropy(s, {1, 0, 3});
        tape.backward(loss);
        return std::pair(tape.grad(va), tape.grad(vw));
    };
    Tape<double> t1, t2;
    auto [g1a, g1w] = build(t1);
    auto [g2a, g2w] = build(t2);
    CHECK(g1a.bit_equal(g2a));
    CHECK(g1w.bit_equal(g2w));
}

TEST_CASE("eval context computes the same forward values as the tape") {
    Rng rng(29);
    Td a(3, 4), w(5, 4);
    rng.fill_gaussian(a, 1.0);
    rng.fill_gaussian(w, 1.0);

    Tape<double> tape;
    auto yt = tape.softmax_rows(tape.relu(tape.matmul_nt(tape.leaf(a, true), tape.leaf(w, true))));

    EvalCtx<double> ev;
    auto ye = ev.softmax_rows(ev.relu(ev.matmul_nt(ev.leaf(a), ev.leaf(w))));

    CHECK(tape.value(yt).bit_equal(ev.value(ye)));
}

TEST_CASE("relu subgradient at exactly zero is zero") {
    Td x{{0.0, -1.0, 2.0}};
    Tape<double> tape;
    auto v = tape.leaf(x, true);
    auto loss = tape.sum_all(tape.relu(v));
    tape.backward(loss);
    Td g = tape.grad(v);
    CHECK(g.at(0, 0) == 0.0);
    CHECK(g.at(0, 1) == 0.0);
    CHECK(g.at(0, 2) == 1.0);
}

TEST_CASE("finite_diff_check scores a smooth function tightly") {
    Rng rng(31);
    Td point(3, 3);
    rng.fill_gaussian(point, 1.0);
    auto rep = finite_diff_check(
        [](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul_nt(x, x)); }, point, 1e-6);
    CHECK(rep.checked == 9);
    CHECK(rep.excluded == 0);
    CHECK(rep.max_rel_err <= 1e-7);
}

TEST_CASE("finite_diff_check reports excluded kink coordinates without scoring them") {
    Td point{{0.0, 1.0, -1.0}};
    auto rep = finite_diff_check(
        [](auto& ctx, auto x) { return ctx.sum_all(ctx.relu(x)); }, point, 1e-6,
        [&](int64_t i) { return point.data()[i] == 0.0; });
    CHECK(rep.excluded == 1);
    CHECK(rep.checked == 2);
    CHECK(rep.max_rel_err <= 1e-8);
}

TEST_CASE("gradient suite passes every backward rule at 1e-5") {
    auto checks = run_gradient_suite(202601);
    for (const auto& c : checks) {
        INFO(c.name << " max rel err " << c.report.max_rel_err << " checked " << c.report.checked);
        CHECK(c.report.checked > 0);
        CHECK(c.ok(1e-5));
    }
    CHECK(gradient_suite_ok(checks));
}

TEST_CASE("rng streams are deterministic and fork-independent") {
    Rng a(99), b(99);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(99);
    Rng f1 = c.fork(7);
    for (int i = 0; i < 50; ++i) c.next_u64();
    Rng f2 = c.fork(7);
    for (int i = 0; i < 20; ++i) REQUIRE(f1.next_u64() == f2.next_u64());
}

TEST_CASE("rng uniform stays in the half-open unit interval") {
    Rng rng(123);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("gaussian draws have roughly unit scale") {
    Rng rng(7);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double g = rng.gauss();
        sum += g;
        sq += g * g;
    }
    CHECK(std::fabs(sum / n) < 0.05);
    CHECK(std::fabs(sq / n - 1.0) < 0.05);
}

TEST_CASE("tensor hash changes with any single bit of content") {
    Td a(2, 2), b(2, 2);
    CHECK(tensor_hash(a) == tensor_hash(b));
    b.at(1, 1) = 1e-300;
    CHECK(tensor_hash(a) != tensor_hash(b));
    Td c(1, 4);
    CHECK(tensor_hash(a) != tensor_hash(c));
}
