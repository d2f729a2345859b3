#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "headkd/autograd.hpp"
#include "headkd/tensor.hpp"

namespace testutil {

using headkd::real;
using headkd::Rng;
using headkd::Shape;
using headkd::Tensor;
using headkd::Var;

inline Tensor uniform_tensor(Shape s, Rng& rng, real lo = -1, real hi = 1) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline real rel_err(real a, real b) {
    const real m = std::max(std::abs(a), std::abs(b));
    if (m < 1e-9) return 0;
    return std::abs(a - b) / m;
}

inline bool close_rel(real a, real b, real tol, real absolute_floor = 1e-9) {
    if (std::abs(a - b) <= absolute_floor) return true;
    return rel_err(a, b) <= tol;
}

struct GradCheckResult {
    int checked = 0;
    int failed = 0;
    real worst = 0;
    std::string detail;

    bool ok() const { return checked > 0 && failed == 0; }
};

/// Central-difference check of d(loss)/d(leaf) at n_probes random entries of
/// the leaf. loss_fn must rebuild the scalar loss from the leaf's current
/// value each call. Gradients below the noise floor of the difference
/// quotient are compared absolutely.
inline GradCheckResult check_gradient(const std::function<Var()>& loss_fn, Var leaf, int n_probes,
                                      Rng& rng, real h = 1e-5, real tol = 1e-4) {
    GradCheckResult res;
    leaf.zero_grad();
    Var loss = loss_fn();
    if (loss.rank() != 0) {
        res.failed = 1;
        res.detail = "loss is not scalar";
        return res;
    }
    headkd::backward(loss);
    const Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor(leaf.shape());
    leaf.zero_grad();
    const int64_t n = leaf.val().numel();
    std::ostringstream msg;
    for (int p = 0; p < n_probes; ++p) {
        const int64_t i = rng.uniform_int(0, n - 1);
        const real orig = leaf.val()[i];
        leaf.val_mut()[i] = orig + h;
        const real fp = loss_fn().val().item();
        leaf.val_mut()[i] = orig - h;
        const real fm = loss_fn().val().item();
        leaf.val_mut()[i] = orig;
        const real numeric = (fp - fm) / (2 * h);
        const real a = analytic[i];
        ++res.checked;
        const real err = std::max(std::abs(a), std::abs(numeric)) < 1e-6
                             ? std::abs(a - numeric)
                             : rel_err(a, numeric);
        res.worst = std::max(res.worst, err);
        if (err > tol) {
            ++res.failed;
            msg << "entry " << i << ": analytic " << a << " vs numeric " << numeric << " (err "
                << err << "); ";
        }
    }
    res.detail = msg.str();
    return res;
}

}  // namespace testutil
