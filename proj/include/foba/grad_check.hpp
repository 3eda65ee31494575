#pragma once

#include <functional>
#include <string>

#include "foba/param.hpp"

namespace foba {

// Result of comparing analytic gradients against central finite differences.
struct GradCheckReport {
    double max_rel_err = 0.0;   // worst symmetric relative error
    double max_abs_err = 0.0;
    std::string worst_param;    // parameter holding the worst element
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int64_t n_checked = 0;
    int64_t n_below_atol = 0;   // differences inside the absolute noise floor

    bool ok(double tol) const { return n_checked > 0 && max_rel_err <= tol; }
    std::string to_string() const;
};

// Compares the gradients a model writes into `params` against central finite
// differences of `loss_fn`.
//
// `loss_fn(with_grad)` must evaluate the scalar loss from the store's current
// values; when `with_grad` is true it must also run a backward pass that
// accumulates into ParamTensor::grad (the checker zeroes grads first).
//
// Non-trainable parameters are skipped. When a parameter has more than
// `max_elems_per_param` elements (and the cap is positive), a deterministic
// strided subset is probed so large tensors stay cheap while every region is
// still touched. Throws NonFiniteGradient if an analytic gradient is not
// finite.
//
// `atol` is the absolute noise floor of the central-difference estimate
// itself (piecewise-linear activation crossings contribute up to
// |slope jump| * step / 4, roundoff about eps * |loss| / step). A difference
// no larger than that floor carries no information about the analytic
// gradient, so it is excluded from the relative comparison and only counted;
// 0 disables the floor and compares every element relatively.
GradCheckReport check_gradients(ParamStore<double>& params,
                                const std::function<double(bool with_grad)>& loss_fn,
                                double step = 1e-4,
                                int64_t max_elems_per_param = -1,
                                double atol = 0.0);

}  // namespace foba
