// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of analytic gradients. Used by the
// test suites and the `gradcheck` CLI command; always run at double precision.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mhgd/tensor.hpp"

namespace mhgd {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coordinates = 0;
};

// `loss` maps a flat coordinate vector to a scalar; it must be deterministic.
// The analytic gradient is compared coordinate by coordinate against
// (f(x+h) - f(x-h)) / 2h.
inline GradCheckReport finite_difference_check(
    const std::function<double(const std::vector<double>&)>& loss,
    const std::vector<double>& x0, const std::vector<double>& analytic,
    double h = 1e-5) {
    GradCheckReport report;
    report.coordinates = x0.size();
    std::vector<double> probe = x0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        probe[i] = x0[i] + h;
        const double up = loss(probe);
        probe[i] = x0[i] - h;
        const double down = loss(probe);
        probe[i] = x0[i];
        const double fd = (up - down) / (2.0 * h);
        // The floor keeps central-difference roundoff on exactly-zero
        // gradients (e.g. biases ahead of batch norm) from registering as
        // relative error.
        const double denom =
            std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-3});
        const double rel = std::fabs(fd - analytic[i]) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    return report;
}

// Convenience wrapper: builds the loss from tensor inputs, backprops once for
// the analytic gradients, then sweeps all coordinates of all inputs.
//
// `build` receives freshly constructed requires-grad tensors holding the
// given coordinates and must return the scalar loss tensor.
inline GradCheckReport gradcheck(
    const std::function<TensorT<double>(const std::vector<TensorT<double>>&)>& build,
    const std::vector<Shape>& shapes, const std::vector<double>& coords,
    double h = 1e-5) {
    auto make_inputs = [&](const std::vector<double>& flat) {
        std::vector<TensorT<double>> inputs;
        std::size_t off = 0;
        for (const auto& s : shapes) {
            const std::size_t n = numel(s);
            std::vector<double> vals(flat.begin() + off, flat.begin() + off + n);
            off += n;
            inputs.push_back(TensorT<double>::from(s, std::move(vals)));
            inputs.back().set_requires_grad(true);
        }
        return inputs;
    };

    auto inputs = make_inputs(coords);
    TensorT<double> root = build(inputs);
    backprop(root);
    std::vector<double> analytic;
    analytic.reserve(coords.size());
    for (auto& in : inputs) {
        auto g = in.grad();
        analytic.insert(analytic.end(), g.values().begin(), g.values().end());
    }

    auto loss = [&](const std::vector<double>& flat) {
        NoGradGuard ng;
        auto probe_inputs = make_inputs(flat);
        return build(probe_inputs).item();
    };
    return finite_difference_check(loss, coords, analytic, h);
}

}  // namespace mhgd
