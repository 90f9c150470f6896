#pragma once

// Adaptive-moment gradient descent over leaf tensors, plus the central
// finite-difference gradient check used as the test oracle.

#include <cmath>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fable/tensor.hpp"

namespace fable {

struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    // per-parameter first/second moment accumulators, keyed by node
    std::unordered_map<Node*, std::pair<std::vector<double>, std::vector<double>>> moments;

    explicit OptimizerState(double learning_rate = 1e-3) : lr(learning_rate) {}
};

// One adaptive-moment step over `params`. Every parameter must carry a
// populated grad; grads are cleared afterwards.
inline void optimizer_step(OptimizerState& state, const std::vector<Tensor>& params) {
    for (const auto& p : params)
        if (p.grad().size() != p.values().size())
            throw ContractError("optimizer_step: parameter is missing its grad");
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (const auto& p : params) {
        auto& [m, v] = state.moments[p.n.get()];
        if (m.size() != p.values().size()) {
            m.assign(p.values().size(), 0.0);
            v.assign(p.values().size(), 0.0);
        }
        auto& val = p.n->v;
        auto& g = p.n->g;
        for (size_t i = 0; i < val.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            val[i] -= state.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
        }
        std::fill(g.begin(), g.end(), 0.0);
    }
}

inline void zero_grads(const std::vector<Tensor>& params) {
    for (const auto& p : params) p.n->g.assign(p.n->v.size(), 0.0);
}

struct OracleError : std::runtime_error {
    explicit OracleError(const std::string& m) : std::runtime_error(m) {}
};

// Max over coordinates of |analytic - central difference| / (|analytic| +
// |central| + step) for a deterministic scalar-valued f.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                      double step = 1e-5) {
    if (step <= 0.0) throw ContractError("finite_difference_check: step must be positive");
    x.n->requires_grad = true;

    auto eval = [&](const Tensor& in) {
        Tape tape;
        Tensor out = f(in);
        if (out.numel() != 1) throw ContractError("finite_difference_check: f must be scalar-valued");
        return out.item();
    };
    const double y0 = eval(x);
    if (eval(x) != y0)
        throw OracleError("finite_difference_check: f is not deterministic");

    std::vector<double> analytic(x.values().size(), 0.0);
    {
        Tape tape;
        Tensor out = f(x);
        x.zero_grad();
        backward(out, tape);
        analytic = x.grad();
    }

    double worst = 0.0;
    for (size_t i = 0; i < x.values().size(); ++i) {
        const double keep = x.values()[i];
        x.values()[i] = keep + step;
        const double up = eval(x);
        x.values()[i] = keep - step;
        const double down = eval(x);
        x.values()[i] = keep;
        const double central = (up - down) / (2.0 * step);
        const double err =
            std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + step);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace fable
