#pragma once

#include <cmath>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

/// Bias-corrected Adam state for one parameter tensor.
struct AdamState {
    Matrix first_moment;
    Matrix second_moment;
    long step_count = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    AdamState(std::size_t rows, std::size_t cols, double lr)
        : first_moment(rows, cols), second_moment(rows, cols), learning_rate(lr) {}
};

inline void adam_step(Matrix& param, const Matrix& grad, AdamState& state) {
    param.require_same_shape(grad, "adam_step");
    if (state.first_moment.empty()) {
        state.first_moment = Matrix(param.rows(), param.cols());
        state.second_moment = Matrix(param.rows(), param.cols());
    }
    param.require_same_shape(state.first_moment, "adam_step(state)");

    state.step_count += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));

    double* p = param.data();
    double* m = state.first_moment.data();
    double* v = state.second_moment.data();
    const double* g = grad.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = m[i] / corr1;
        const double vhat = v[i] / corr2;
        p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

}  // namespace ckv
