#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/ops.hpp"
#include "l0drop/tensor.hpp"

namespace l0drop {

// Shape parameters of the HardConcrete distribution. eps is the stretch
// magnitude: samples are stretched onto (-eps, 1 + eps) before rectification.
struct HardConcreteParams {
    double beta = 2.0 / 3.0;
    double eps = 0.1;

    void validate() const {
        if (!(beta > 0.0) || !(eps > 0.0) || !std::isfinite(beta) || !std::isfinite(eps)) {
            throw ConfigError("HardConcrete needs beta > 0 and eps > 0, got beta=" + std::to_string(beta) +
                              " eps=" + std::to_string(eps));
        }
    }

    // beta * log(eps / (1 + eps)); the shift shared by both point-mass formulas.
    double log_ratio_shift() const { return beta * std::log(eps / (1.0 + eps)); }
};

struct GateSample {
    double s = 0.0;      // BinaryConcrete sample in (0, 1)
    double s_bar = 0.0;  // stretched into (-eps, 1 + eps)
    double g = 0.0;      // rectified gate in [0, 1]
};

inline double logistic_noise(double u) {
    if (!(u > 0.0 && u < 1.0)) {
        throw DomainError("uniform draw must lie strictly inside (0,1), got " + std::to_string(u));
    }
    return std::log(u) - std::log1p(-u);
}

// Reparameterized draw: s = sigmoid((log u - log(1-u) + log_alpha) / beta),
// then stretch and clamp to [0, 1].
inline GateSample sample_gate(double log_alpha, const HardConcreteParams& p, double u) {
    GateSample out;
    out.s = sigmoid_scalar((logistic_noise(u) + log_alpha) / p.beta);
    out.s_bar = out.s * (1.0 + 2.0 * p.eps) - p.eps;
    out.g = std::min(1.0, std::max(0.0, out.s_bar));
    return out;
}

// P(g = 0) = sigmoid(beta * log(eps / (1 + eps)) - log_alpha).
inline double prob_zero(double log_alpha, const HardConcreteParams& p) {
    return sigmoid_scalar(p.log_ratio_shift() - log_alpha);
}

// P(g = 1) = sigmoid(log_alpha + beta * log(eps / (1 + eps))), from the
// BinaryConcrete CDF evaluated at the upper stretch threshold (1+eps)/(1+2eps).
inline double prob_one(double log_alpha, const HardConcreteParams& p) {
    return sigmoid_scalar(log_alpha + p.log_ratio_shift());
}

// Test-time gate: clamp(sigmoid(log_alpha) * (1 + 2 eps) - eps, 0, 1).
inline double expected_gate(double log_alpha, const HardConcreteParams& p) {
    const double v = sigmoid_scalar(log_alpha) * (1.0 + 2.0 * p.eps) - p.eps;
    return std::min(1.0, std::max(0.0, v));
}

// Expected number of open gates, sum_i 1 - P(g_i = 0).
inline double expected_l0(std::span<const double> log_alphas, const HardConcreteParams& p) {
    double total = 0.0;
    for (const double la : log_alphas) {
        total += 1.0 - prob_zero(la, p);
    }
    return total;
}

// d expected_l0 / d log_alpha_i.
inline std::vector<double> expected_l0_grad(std::span<const double> log_alphas, const HardConcreteParams& p) {
    std::vector<double> g;
    g.reserve(log_alphas.size());
    for (const double la : log_alphas) {
        const double q = prob_zero(la, p);
        g.push_back(q * (1.0 - q));
    }
    return g;
}

// Differentiable counterparts over a column of log alphas [N x 1].

template <class T>
Tensor<T> expected_l0(const Tensor<T>& log_alpha, const HardConcreteParams& p) {
    // 1 - sigmoid(c - x) == sigmoid(x - c)
    return sum(sigmoid(add_scalar(log_alpha, static_cast<T>(-p.log_ratio_shift()))));
}

// Gates from frozen logistic noise (one uniform per row).
template <class T>
Tensor<T> sample_gates(const Tensor<T>& log_alpha, std::span<const double> uniforms, const HardConcreteParams& p) {
    if (uniforms.size() != log_alpha.numel()) {
        throw DimensionError("sample_gates: " + std::to_string(uniforms.size()) + " noise draws for " +
                             std::to_string(log_alpha.numel()) + " gates");
    }
    std::vector<T> noise(uniforms.size());
    for (std::size_t i = 0; i < uniforms.size(); ++i) {
        noise[i] = static_cast<T>(logistic_noise(uniforms[i]));
    }
    auto s = sigmoid(scale(add(log_alpha, Tensor<T>(log_alpha.shape(), std::move(noise))),
                           static_cast<T>(1.0 / p.beta)));
    auto s_bar = add_scalar(scale(s, static_cast<T>(1.0 + 2.0 * p.eps)), static_cast<T>(-p.eps));
    return clamp(s_bar, T(0), T(1));
}

template <class T>
Tensor<T> expected_gates(const Tensor<T>& log_alpha, const HardConcreteParams& p) {
    auto v = add_scalar(scale(sigmoid(log_alpha), static_cast<T>(1.0 + 2.0 * p.eps)), static_cast<T>(-p.eps));
    return clamp(v, T(0), T(1));
}

}  // namespace l0drop
