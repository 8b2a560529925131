#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "moecl/tape.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t checked = 0;
    int64_t excluded = 0;
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    bool ok(double tol) const { return checked == 0 || max_rel_err <= tol; }
};

// Compares the tape gradient of a scalar-valued function against central finite
// differences, coordinate by coordinate. `f(ctx, var) -> var` must be generic
// over the execution context: the analytic side runs it on a Tape<double>, the
// numeric side on EvalCtx<double>, so the check also pins both contexts to the
// same forward math. Relative error uses max(|analytic|, |numeric|, 1e-8) as
// denominator. `exclude(i)` marks coordinates sitting on kinks (e.g. relu at
// exactly 0); they are counted but not scored.
template <typename F>
GradCheckReport finite_diff_check(F&& f, const Tensor<double>& point, double h = 1e-6,
                                  const std::function<bool(int64_t)>& exclude = {}) {
    Tape<double> tape;
    typename Tape<double>::Var x = tape.leaf(point, true);
    typename Tape<double>::Var loss = f(tape, x);
    tape.backward(loss);
    Tensor<double> analytic = tape.grad(x);

    EvalCtx<double> ev;
    Tensor<double> p = point;
    GradCheckReport rep;
    for (int64_t i = 0; i < p.numel(); ++i) {
        if (exclude && exclude(i)) {
            ++rep.excluded;
            continue;
        }
        const double orig = p.data()[i];
        p.data()[i] = orig + h;
        const double fp = ev.value(f(ev, ev.leaf(p))).at(0, 0);
        p.data()[i] = orig - h;
        const double fm = ev.value(f(ev, ev.leaf(p))).at(0, 0);
        p.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double ana = analytic.data()[i];
        const double denom = std::max({std::fabs(ana), std::fabs(numeric), 1e-8});
        const double rel = std::fabs(ana - numeric) / denom;
        ++rep.checked;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.worst_analytic = ana;
            rep.worst_numeric = numeric;
        }
    }
    return rep;
}

}  // namespace moecl
