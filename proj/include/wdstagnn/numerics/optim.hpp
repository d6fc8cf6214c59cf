#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "wdstagnn/error.hpp"
#include "wdstagnn/numerics/autodiff.hpp"

namespace wdstagnn {

/// Bias-corrected Adam moments and settings.
struct AdamState {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    GradientStore first_moment;
    GradientStore second_moment;
};

/// One Adam update of every parameter that has a gradient entry.
/// Gradients are validated before any parameter is touched.
inline void adam_step(ParameterStore &params, const GradientStore &grads, AdamState &state) {
    for (const auto &[name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) {
            throw ContractError("adam_step: gradient for unknown parameter '" + name + "'");
        }
        it->second.require_same_shape(g, "adam_step");
        if (!g.all_finite()) {
            throw TrainingError("non-finite gradient for parameter '" + name + "'");
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (const auto &[name, g] : grads) {
        Tensor &p = params.at(name);
        auto [m_it, m_new] = state.first_moment.try_emplace(name, g.shape());
        auto [v_it, v_new] = state.second_moment.try_emplace(name, g.shape());
        Tensor &m = m_it->second;
        Tensor &v = v_it->second;
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

/// Weight initialisation: uniform(±sqrt(1/fan_in)).
inline Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64 &rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double &v : t.values()) {
        v = dist(rng);
    }
    return t;
}

} // namespace wdstagnn
