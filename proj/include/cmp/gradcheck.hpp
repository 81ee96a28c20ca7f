#pragma once

#include <functional>
#include <stdexcept>

#include "cmp/autodiff.hpp"
#include "cmp/matrix.hpp"

namespace cmp::ad {

/// A differentiable scalar function of one Matrix: builds a fresh graph,
/// returns the loss node for the given input node.
using ScalarFn = std::function<Node*(Graph&, Node*)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    Matrix analytic;
    Matrix numeric;
};

/// Central finite differences against the tape gradient. Per coordinate
/// h_i = h * max(1, |x_i|); relative error |fd - an| / max(1, |an|).
/// Only meaningful for fully differentiable f: a stop-gradient on the
/// tested variable shows up as a large reported error (analytic is zero
/// while the finite difference is not), which is the intended flag.
inline GradCheckReport grad_check(const ScalarFn& f, const Matrix& x0, double h = 1e-5) {
    if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");

    auto eval = [&](const Matrix& x) {
        Graph g;
        Node* in = g.input(x);
        Node* loss = f(g, in);
        if (!loss->is_scalar())
            throw std::invalid_argument("grad_check: f must return a scalar node");
        double v = loss->scalar();
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: f returned non-finite value");
        return v;
    };

    GradCheckReport rep;
    {
        Graph g;
        Node* in = g.input(x0);
        Node* loss = f(g, in);
        g.backward(loss);
        rep.analytic = in->grad;
    }
    rep.numeric = Matrix(x0.rows(), x0.cols());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        double hi = h * std::max(1.0, std::fabs(x0[i]));
        Matrix xp = x0, xm = x0;
        xp[i] += hi;
        xm[i] -= hi;
        double fd = (eval(xp) - eval(xm)) / (2.0 * hi);
        rep.numeric[i] = fd;
        double rel = std::fabs(fd - rep.analytic[i]) / std::max(1.0, std::fabs(rep.analytic[i]));
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
    }
    return rep;
}

}  // namespace cmp::ad
