#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wdstagnn/numerics/autodiff.hpp"

namespace wdstagnn::gradcheck {

/// An entry passes when |analytic - numeric| <= max(rel * max(|a|, |n|), abs).
struct Tolerance {
    double step = 1e-5;
    double rel = 1e-4;
    double abs = 1e-6;
};

struct Report {
    std::size_t checked = 0;
    std::size_t failures = 0;
    double worst_ratio = 0.0; // |a - n| / allowed, > 1 means failure
    std::string worst;        // "<tensor>[<index>]: analytic vs numeric"

    bool ok() const { return failures == 0; }
};

namespace detail {

inline void compare(Report &r, const std::string &name, std::size_t i, double a, double n, const Tolerance &tol) {
    ++r.checked;
    const double allowed = std::max(tol.rel * std::max(std::abs(a), std::abs(n)), tol.abs);
    const double ratio = std::abs(a - n) / allowed;
    if (!(ratio <= 1.0)) {
        ++r.failures;
    }
    if (!(ratio <= r.worst_ratio)) {
        r.worst_ratio = ratio;
        r.worst = name + "[" + std::to_string(i) + "]: " + std::to_string(a) + " vs " + std::to_string(n);
    }
}

} // namespace detail

/// Loss built on a fresh graph from leaf variables holding `inputs`.
using InputLoss = std::function<Var(Graph &, const std::vector<Var> &)>;

/// Central differences for every entry of every input tensor.
inline Report check_inputs(std::vector<Tensor> inputs, const InputLoss &loss, Tolerance tol = {}) {
    auto eval = [&](bool with_grad, std::vector<Tensor> *grads) {
        Graph g;
        std::vector<Var> vars;
        for (const Tensor &t : inputs) {
            vars.push_back(g.variable(t));
        }
        Var out = loss(g, vars);
        if (with_grad) {
            g.backward(out);
            for (const Var &v : vars) {
                grads->push_back(g.grad(v));
            }
        }
        return out.value().item();
    };
    std::vector<Tensor> analytic;
    eval(true, &analytic);
    Report r;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double keep = inputs[k][i];
            inputs[k][i] = keep + tol.step;
            const double up = eval(false, nullptr);
            inputs[k][i] = keep - tol.step;
            const double down = eval(false, nullptr);
            inputs[k][i] = keep;
            detail::compare(r, "input" + std::to_string(k), i, analytic[k][i], (up - down) / (2.0 * tol.step), tol);
        }
    }
    return r;
}

/// Loss built on a graph bound to a parameter store.
using ParameterLoss = std::function<Var(Graph &)>;

/// Central differences for every entry of every parameter tensor.
inline Report check_parameters(ParameterStore params, const ParameterLoss &loss, Tolerance tol = {}) {
    GradientStore analytic;
    {
        Graph g(&params);
        Var out = loss(g);
        g.backward(out);
        analytic = g.gradients();
    }
    auto eval = [&] {
        Graph g(&params);
        return loss(g).value().item();
    };
    Report r;
    for (auto &[name, t] : params) {
        const Tensor &ga = analytic.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + tol.step;
            const double up = eval();
            t[i] = keep - tol.step;
            const double down = eval();
            t[i] = keep;
            detail::compare(r, name, i, ga[i], (up - down) / (2.0 * tol.step), tol);
        }
    }
    return r;
}

} // namespace wdstagnn::gradcheck
