#include "foba/grad_check.hpp"

#include <cmath>
#include <sstream>
#include <vector>

#include "foba/errors.hpp"

namespace foba {

std::string GradCheckReport::to_string() const {
    std::ostringstream os;
    os << "grad check: " << n_checked << " elements, max rel err " << max_rel_err
       << " (abs " << max_abs_err << ", " << n_below_atol
       << " inside the absolute floor)";
    if (worst_index >= 0)
        os << " at " << worst_param << "[" << worst_index << "] analytic "
           << worst_analytic << " numeric " << worst_numeric;
    return os.str();
}

GradCheckReport check_gradients(ParamStore<double>& params,
                                const std::function<double(bool with_grad)>& loss_fn,
                                double step, int64_t max_elems_per_param, double atol) {
    params.zero_grads();
    (void)loss_fn(true);

    // Snapshot the analytic gradients before the probing passes overwrite
    // anything.
    std::vector<std::vector<double>> analytic(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const ParamTensor<double>& p = params[i];
        if (!p.requires_grad) continue;
        analytic[i].assign(p.grad.data(), p.grad.data() + p.grad.numel());
        for (double g : analytic[i])
            if (!std::isfinite(g))
                throw NonFiniteGradient("analytic gradient of " + p.name +
                                        " is not finite");
    }

    GradCheckReport rep;
    for (size_t i = 0; i < params.size(); ++i) {
        ParamTensor<double>& p = params[i];
        if (!p.requires_grad) continue;
        const int64_t n = p.value.numel();
        int64_t stride = 1;
        if (max_elems_per_param > 0 && n > max_elems_per_param)
            stride = (n + max_elems_per_param - 1) / max_elems_per_param;
        for (int64_t j = 0; j < n; j += stride) {
            const double saved = p.value[j];
            p.value[j] = saved + step;
            const double up = loss_fn(false);
            p.value[j] = saved - step;
            const double down = loss_fn(false);
            p.value[j] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double an = analytic[i][static_cast<size_t>(j)];
            const double abs_err = std::abs(an - numeric);
            const double rel_err =
                abs_err / std::max({1e-8, std::abs(an), std::abs(numeric)});
            ++rep.n_checked;
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            if (abs_err <= atol) {
                ++rep.n_below_atol;
                continue;
            }
            if (rel_err > rep.max_rel_err) {
                rep.max_rel_err = rel_err;
                rep.worst_param = p.name;
                rep.worst_index = j;
                rep.worst_analytic = an;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace foba
