#pragma once

#include <string>
#include <vector>

#include "moecl/gradcheck.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

struct RuleCheck {
    std::string name;
    GradCheckReport report;

    bool ok(double tol) const { return report.ok(tol); }
};

// Finite-difference sweep over every backward rule, each probed at `points`
// random points per operand position. relu excludes coordinates within 100*h of
// its kink. grad_reverse is deliberately not the gradient of its forward value,
// so its numeric oracle is the function it is defined to differentiate like:
// the tape side evaluates sum(grad_reverse(x, lambda)) while the numeric side
// differentiates -lambda * sum(x).
inline std::vector<RuleCheck> run_gradient_suite(uint64_t seed, int points = 10, double h = 1e-6) {
    std::vector<RuleCheck> out;
    Rng master(seed);

    auto gaussian = [](Rng& rng, int64_t r, int64_t c, double sd = 1.0) {
        Tensor<double> t(r, c);
        rng.fill_gaussian(t, sd);
        return t;
    };

    auto run = [&](const std::string& name, auto make_point, auto fn,
                   std::function<bool(const Tensor<double>&, int64_t)> exclude = {}) {
        GradCheckReport worst;
        Rng rng = master.fork(static_cast<uint64_t>(out.size()) + 1);
        for (int p = 0; p < points; ++p) {
            Tensor<double> x = make_point(rng);
            std::function<bool(int64_t)> ex;
            if (exclude) ex = [&exclude, &x](int64_t i) { return exclude(x, i); };
            GradCheckReport rep = finite_diff_check(fn, x, h, ex);
            worst.checked += rep.checked;
            worst.excluded += rep.excluded;
            if (rep.max_rel_err > worst.max_rel_err) {
                worst.max_rel_err = rep.max_rel_err;
                worst.worst_index = rep.worst_index;
                worst.worst_analytic = rep.worst_analytic;
                worst.worst_numeric = rep.worst_numeric;
            }
        }
        out.push_back(RuleCheck{name, worst});
    };

    Rng cr(seed ^ 0xabcdef12345ull);
    const Tensor<double> c34 = gaussian(cr, 3, 4);
    const Tensor<double> c43 = gaussian(cr, 4, 3);
    const Tensor<double> c58 = gaussian(cr, 5, 8);
    const Tensor<double> c31 = gaussian(cr, 3, 1);
    const Tensor<double> c33 = gaussian(cr, 3, 3);
    const Tensor<double> gain = gaussian(cr, 1, 4);
    const Tensor<double> bias = gaussian(cr, 1, 4);
    const std::vector<int> labels{1, 0, 3};
    const std::vector<int> ids{2, 0, 2, 5, 1};

    run("matmul.lhs", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(x, ctx.leaf(c43))); });
    run("matmul.rhs", [&](Rng& r) { return gaussian(r, 4, 3); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.leaf(c34), x)); });
    run("matmul_nt.lhs", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul_nt(x, ctx.leaf(c34))); });
    run("matmul_nt.rhs", [&](Rng& r) { return gaussian(r, 5, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul_nt(ctx.leaf(c34), x)); });
    run("add.both", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.add(x, ctx.scale(x, 2.0))); });
    run("add_rows.m", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.add_rows(x, ctx.leaf(gain)), ctx.leaf(c43))); });
    run("add_rows.row", [&](Rng& r) { return gaussian(r, 1, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.add_rows(ctx.leaf(c34), x), ctx.leaf(c43))); });
    run("scale", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.scale(x, -1.7)); });
    run("relu", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.relu(x), ctx.leaf(c43))); },
        [h](const Tensor<double>& x, int64_t i) { return std::fabs(x.data()[i]) <= 100.0 * h; });
    run("log", [&](Rng& r) {
            Tensor<double> t(3, 4);
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.5 + 1.5 * r.uniform();
            return t;
        },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.log_ew(x), ctx.leaf(c43))); });
    run("softmax_rows", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.softmax_rows(x), ctx.leaf(c43))); });
    run("cross_entropy", [&](Rng& r) { return gaussian(r, 3, 5); },
        [&](auto& ctx, auto x) { return ctx.cross_entropy(x, labels); });
    run("grad_reverse", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) {
            if constexpr (std::remove_reference_t<decltype(ctx)>::recording)
                return ctx.sum_all(ctx.grad_reverse(x, 0.7));
            else
                return ctx.scale(ctx.sum_all(x), -0.7);
        });
    run("layer_norm.x", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) {
            return ctx.sum_all(ctx.matmul(ctx.layer_norm_rows(x, ctx.leaf(gain), ctx.leaf(bias), 1e-5), ctx.leaf(c43)));
        });
    run("layer_norm.gain", [&](Rng& r) { return gaussian(r, 1, 4); },
        [&](auto& ctx, auto x) {
            return ctx.sum_all(ctx.matmul(ctx.layer_norm_rows(ctx.leaf(c34), x, ctx.leaf(bias), 1e-5), ctx.leaf(c43)));
        });
    run("layer_norm.bias", [&](Rng& r) { return gaussian(r, 1, 4); },
        [&](auto& ctx, auto x) {
            return ctx.sum_all(ctx.matmul(ctx.layer_norm_rows(ctx.leaf(c34), ctx.leaf(gain), x, 1e-5), ctx.leaf(c43)));
        });
    run("embedding_rows", [&](Rng& r) { return gaussian(r, 6, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.embedding_rows(x, ids), ctx.leaf(c43))); });
    run("mean_rows", [&](Rng& r) { return gaussian(r, 5, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.mean_rows(x), ctx.leaf(c43))); });
    run("rows_scale.m", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.rows_scale(x, ctx.leaf(c31)), ctx.leaf(c43))); });
    run("rows_scale.v", [&](Rng& r) { return gaussian(r, 3, 1); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.rows_scale(ctx.leaf(c34), x), ctx.leaf(c43))); });
    run("slice_cols", [&](Rng& r) { return gaussian(r, 3, 5); },
        [&](auto& ctx, auto x) { return ctx.sum_all(ctx.matmul(ctx.slice_cols(x, 1, 4), ctx.leaf(c33))); });
    run("concat_cols", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) {
            return ctx.sum_all(ctx.matmul_nt(ctx.concat_cols({x, ctx.scale(x, 0.5)}), ctx.leaf(c58)));
        });
    run("sum_all", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.scale(ctx.sum_all(x), 2.0); });
    run("pick", [&](Rng& r) { return gaussian(r, 3, 4); },
        [&](auto& ctx, auto x) { return ctx.pick(x, 1, 2); });

    return out;
}

inline bool gradient_suite_ok(const std::vector<RuleCheck>& checks, double tol = 1e-5) {
    for (const RuleCheck& c : checks)
        if (!c.ok(tol)) return false;
    return true;
}

}  // namespace moecl
