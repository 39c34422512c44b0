#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "l0drop/ops.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"

namespace testutil {

using l0drop::RngState;
using l0drop::Shape;
using l0drop::Tensor;

inline Tensor<double> random_tensor(Shape shape, RngState& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
    std::vector<double> v(l0drop::shape_numel(shape));
    for (auto& x : v) {
        x = lo + (hi - lo) * rng.uniform();
    }
    return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero in magnitude, for kinked ops.
inline Tensor<double> random_away_from_zero(Shape shape, RngState& rng, double margin = 0.05) {
    std::vector<double> v(l0drop::shape_numel(shape));
    for (auto& x : v) {
        const double m = margin + (1.0 - margin) * rng.uniform();
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return Tensor<double>(std::move(shape), std::move(v), true);
}

inline double rel_err(double a, double n, double floor = 1e-4) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct GradReport {
    double max_rel = 0.0;
    std::string worst;
};

// Central differences of `loss` (rebuilt from `inputs` on each call) against
// the reverse pass, over every element of every input.
inline GradReport gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                            double h = 1e-5, double floor = 1e-4) {
    for (auto& t : inputs) {
        t.zero_grad();
    }
    l0drop::backward(loss());
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
    }
    GradReport rep;
    l0drop::NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double x0 = data[i];
            data[i] = x0 + h;
            const double fp = loss().item();
            data[i] = x0 - h;
            const double fm = loss().item();
            data[i] = x0;
            const double num = (fp - fm) / (2.0 * h);
            const double e = rel_err(analytic[k][i], num, floor);
            if (e > rep.max_rel) {
                rep.max_rel = e;
                rep.worst = "input " + std::to_string(k) + " element " + std::to_string(i) + " analytic " +
                            std::to_string(analytic[k][i]) + " numeric " + std::to_string(num);
            }
        }
    }
    return rep;
}

// Contracts an arbitrary output with fixed random weights into a scalar.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& weights) {
    return l0drop::sum(l0drop::mul(out, weights));
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("l0drop_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
