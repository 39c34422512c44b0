#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

// d^-0.5 * min(step^-0.5, step * warmup^-1.5); step counts from 1.
inline double lr_schedule(std::size_t step, std::size_t d, std::size_t warmup) {
    if (step == 0) {
        throw ConfigError("learning-rate schedule starts at step 1");
    }
    const double s = static_cast<double>(step);
    const double dm = std::pow(static_cast<double>(d), -0.5);
    if (warmup == 0) {
        return dm * std::pow(s, -0.5);
    }
    return dm * std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

// Linear ramp 0 -> lambda over `warmup` steps, then constant. warmup 0 means
// lambda from the first step.
inline double lambda_schedule(std::size_t step, double lambda, std::size_t warmup) {
    if (warmup == 0 || step >= warmup) {
        return lambda;
    }
    return lambda * static_cast<double>(step) / static_cast<double>(warmup);
}

// Global L2 norm over every parameter gradient; rescales all of them when it
// exceeds max_norm (max_norm <= 0 disables clipping). Returns the norm
// before clipping.
template <class T>
double clip_grad_norm(ModelParams<T>& p, double max_norm) {
    double sq = 0.0;
    for (auto& [_, t] : p.tensors) {
        if (t.has_grad()) {
            for (const T g : t.grad()) {
                sq += static_cast<double>(g) * static_cast<double>(g);
            }
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [_, t] : p.tensors) {
            if (t.has_grad()) {
                for (T& g : t.grad()) {
                    g *= s;
                }
            }
        }
    }
    return norm;
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

// Adam with bias correction. Parameters that never received a gradient are
// left untouched and carry no state.
template <class T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_{cfg} {}

    void step(ModelParams<T>& p, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& [name, param] : p.tensors) {
            if (!param.has_grad()) {
                continue;
            }
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(param.numel(), T(0));
                v.assign(param.numel(), T(0));
            }
            auto g = param.grad();
            auto x = param.data();
            for (std::size_t i = 0; i < x.size(); ++i) {
                m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
                v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
                const double mh = m[i] / c1;
                const double vh = v[i] / c2;
                x[i] = static_cast<T>(x[i] - lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

    std::size_t steps() const { return t_; }
    void set_steps(std::size_t t) { t_ = t; }
    std::map<std::string, std::vector<T>>& first_moments() { return m_; }
    std::map<std::string, std::vector<T>>& second_moments() { return v_; }
    const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<T>> m_, v_;
};

}  // namespace l0drop
