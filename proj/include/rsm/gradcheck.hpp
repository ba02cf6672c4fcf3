#pragma once

#include <cmath>
#include <functional>

#include "rsm/ops.hpp"

namespace rsm {

// Central-difference gradient of a scalar-valued function, evaluated
// elementwise: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). Used as the
// independent oracle for every analytic gradient in the test suites; runs in
// f64 only.
inline Tensord finite_difference_grad(const std::function<double(const Tensord&)>& f,
                                      const Tensord& x, double eps = 1e-6) {
    if (eps <= 0.0) fail("finite_difference_grad: eps must be positive");
    const i64 n = x.numel();
    std::vector<double> grad(static_cast<std::size_t>(n));
    std::vector<double> work(*x.data);
    for (i64 i = 0; i < n; ++i) {
        const double orig = work[static_cast<std::size_t>(i)];
        work[static_cast<std::size_t>(i)] = orig + eps;
        const double fp = f(Tensord::from(x.shape, work));
        work[static_cast<std::size_t>(i)] = orig - eps;
        const double fm = f(Tensord::from(x.shape, work));
        work[static_cast<std::size_t>(i)] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            fail("finite_difference_grad: non-finite function value at element " +
                 std::to_string(i));
        grad[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * eps);
    }
    return Tensord::from(x.shape, std::move(grad));
}

// Worst relative error between an analytic gradient and its
// finite-difference estimate, with denominator max(1, |analytic|).
inline double grad_rel_error(const Tensord& analytic, const Tensord& numeric) {
    if (analytic.shape != numeric.shape)
        fail("grad_rel_error: shape mismatch " + shape_str(analytic.shape) + " vs " +
             shape_str(numeric.shape));
    double worst = 0.0;
    for (i64 i = 0; i < analytic.numel(); ++i) {
        const double a = analytic.at(i);
        const double d = std::abs(a - numeric.at(i)) / std::max(1.0, std::abs(a));
        worst = std::max(worst, d);
    }
    return worst;
}

// Convenience: checks d(f)/dx against finite differences where `f` builds a
// scalar loss on the given tape from a tape-bound copy of `x`. Returns the
// worst relative error.
inline double check_gradient(
    const std::function<Tensord(Tape<double>&, const Tensord& bound_x)>& build, const Tensord& x,
    double eps = 1e-6) {
    Tape<double> tape;
    Tensord bx = tape.leaf(x);
    Tensord loss = build(tape, bx);
    auto grads = tape.backward(loss);
    Tensord analytic = grads.grad(bx);
    Tensord numeric = finite_difference_grad(
        [&](const Tensord& xv) {
            Tape<double> fresh;
            Tensord b = fresh.leaf(xv);
            return build(fresh, b).at(0);
        },
        x, eps);
    return grad_rel_error(analytic, numeric);
}

}  // namespace rsm
