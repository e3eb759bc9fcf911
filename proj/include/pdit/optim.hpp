#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pdit/errors.hpp"
#include "pdit/tensor.hpp"

namespace pdit {

// Adam with bias correction and optional global gradient-norm clipping.
// Moment buffers are held parallel to a fixed parameter list; the step
// counter increases by exactly one per apply.
template <typename T>
struct OptimizerState {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T clip_norm = T(0);  // <= 0 disables clipping
    long step = 0;

    std::vector<std::vector<T>> m, v;

    static OptimizerState for_params(const std::vector<Tensor<T>>& params, T lr,
                                     T clip_norm = T(0)) {
        OptimizerState st;
        st.lr = lr;
        st.clip_norm = clip_norm;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& p : params) {
            st.m.emplace_back(p.size(), T(0));
            st.v.emplace_back(p.size(), T(0));
        }
        return st;
    }
};

// Applies one Adam update using the gradients accumulated in each parameter.
// Clipping rescales the gradients (shared factor min(1, clip/||g||) over the
// concatenation of all gradients) before they enter the moment estimates.
template <typename T>
void optimizer_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state) {
    if (params.size() != state.m.size()) {
        throw ContractError("optimizer_step: state tracks " + std::to_string(state.m.size()) +
                            " parameters, got " + std::to_string(params.size()));
    }
    T clip_scale = T(1);
    if (state.clip_norm > T(0)) {
        T sq = T(0);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (T g : p.grad()) sq += g * g;
        }
        const T norm = std::sqrt(sq);
        if (norm > state.clip_norm) clip_scale = state.clip_norm / norm;
    }

    state.step += 1;
    const T bc1 = T(1) - std::pow(state.beta1, T(state.step));
    const T bc2 = T(1) - std::pow(state.beta2, T(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.size() != state.m[i].size()) {
            throw ShapeError("optimizer_step: parameter " + std::to_string(i) + " has " +
                             std::to_string(p.size()) + " elements, state has " +
                             std::to_string(state.m[i].size()));
        }
        if (!p.has_grad()) continue;
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& grad = p.grad();
        auto& val = p.value();
        for (std::size_t j = 0; j < val.size(); ++j) {
            const T g = grad[j] * clip_scale;
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g * g;
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            val[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace pdit
