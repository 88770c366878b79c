// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "mhgd/common.hpp"
#include "mhgd/tensor.hpp"

namespace mhgd {

// Nesterov-momentum SGD state for one parameter tensor.
template <class T>
struct OptimizerStateT {
    std::vector<T> velocity;
    double momentum = 0.9;
    double learning_rate = 0.1;
    double weight_decay = 0.0;
};

using OptimizerState = OptimizerStateT<float>;

// One update with decoupled-from-nothing classic L2 decay folded into the
// gradient:
//   g' = g + wd * w;  v = mu * v + g';  w = w - lr * (g' + mu * v)
template <class T>
void sgd_nesterov_step(TensorT<T>& param, const TensorT<T>& grad,
                       OptimizerStateT<T>& state) {
    if (param.shape() != grad.shape()) {
        throw ShapeError("sgd_nesterov_step: param " + shape_str(param.shape()) +
                         " vs grad " + shape_str(grad.shape()));
    }
    if (state.velocity.size() != param.size()) {
        if (!state.velocity.empty()) {
            throw ShapeError("sgd_nesterov_step: velocity size " +
                             std::to_string(state.velocity.size()) +
                             " does not match param " + shape_str(param.shape()));
        }
        state.velocity.assign(param.size(), T(0));
    }
    const T mu = T(state.momentum);
    const T lr = T(state.learning_rate);
    const T wd = T(state.weight_decay);
    T* w = param.data();
    const T* g = grad.data();
    T* v = state.velocity.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T gp = g[i] + wd * w[i];
        v[i] = mu * v[i] + gp;
        w[i] -= lr * (gp + mu * v[i]);
    }
}

}  // namespace mhgd
