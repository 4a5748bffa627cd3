#pragma once

#include <cmath>
#include <functional>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

/// Central finite-difference check of an analytic gradient. `f` is evaluated
/// at param±h per entry; returns the max over entries of
/// |analytic - numeric| / max(1, |numeric|).
inline double check_gradient(const std::function<double(const Matrix&)>& f, Matrix param,
                             const Matrix& analytic_grad, double step = 1e-5) {
    param.require_same_shape(analytic_grad, "check_gradient");
    double worst = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double saved = param.data()[i];
        param.data()[i] = saved + step;
        const double up = f(param);
        param.data()[i] = saved - step;
        const double down = f(param);
        param.data()[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw numeric_error("check_gradient: function returned NaN/Inf at perturbed point");
        const double numeric = (up - down) / (2.0 * step);
        const double err =
            std::abs(analytic_grad.data()[i] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace ckv
