#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/hardconcrete.hpp"
#include "l0drop/ops.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"

namespace l0drop {

// Per-position gate state for one sentence.
template <class T>
struct GateSet {
    std::vector<T> log_alphas;
    std::vector<T> gates;
    std::vector<unsigned char> open_mask;
    std::vector<unsigned char> pad_mask;  // 1 marks padding

    std::size_t size() const { return gates.size(); }
    std::size_t non_pad() const {
        std::size_t n = 0;
        for (auto p : pad_mask) {
            n += !p;
        }
        return n;
    }
    std::size_t closed() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < gates.size(); ++i) {
            n += !pad_mask[i] && !open_mask[i];
        }
        return n;
    }
};

// Scores each position as log alpha_i = x_i . w (no bias).
template <class T>
struct GatePredictor {
    Tensor<T> w;  // [d x 1]

    static GatePredictor zeros(std::size_t d) { return {Tensor<T>::zeros({d, 1}, true)}; }
};

// Result of running a gate layer: the gated encodings plus everything the
// objective and the decoder need.
template <class T>
struct GateOutput {
    Tensor<T> gated;      // [N x d]
    Tensor<T> gates;      // [N x 1]
    Tensor<T> log_alpha;  // [N x 1]
    Tensor<T> penalty;    // scalar expected L0 over non-pad positions
    GateSet<T> set;
};

template <class T>
Tensor<T> predict_log_alpha(const Tensor<T>& encodings, const GatePredictor<T>& predictor) {
    if (encodings.rank() != 2 || predictor.w.rank() != 2 || predictor.w.rows() != encodings.cols() ||
        predictor.w.cols() != 1) {
        throw DimensionError("predict_log_alpha: encodings " + shape_str(encodings.shape()) + " vs predictor " +
                             shape_str(predictor.w.shape()));
    }
    return matmul(encodings, predictor.w);
}

namespace detail {

template <class T>
std::vector<unsigned char> resolve_pad(std::span<const unsigned char> pad_mask, std::size_t n) {
    if (pad_mask.empty()) {
        return std::vector<unsigned char>(n, 0);
    }
    if (pad_mask.size() != n) {
        throw DimensionError("gate pad mask length does not match the number of positions");
    }
    return {pad_mask.begin(), pad_mask.end()};
}

// Multiplies rows by gates with padding forced to zero; fills the GateSet.
template <class T>
GateOutput<T> finish_gates(const Tensor<T>& encodings, Tensor<T> log_alpha, Tensor<T> gates,
                           const std::vector<unsigned char>& pad, const HardConcreteParams* hc) {
    const std::size_t n = encodings.rows();
    bool any_pad = false;
    for (auto p : pad) {
        any_pad = any_pad || p;
    }
    if (any_pad) {
        std::vector<T> keep(n);
        for (std::size_t i = 0; i < n; ++i) {
            keep[i] = pad[i] ? T(0) : T(1);
        }
        gates = mul(gates, Tensor<T>({n, 1}, std::move(keep)));
    }
    GateOutput<T> out;
    out.gated = mul(encodings, gates);
    out.set.gates = gates.values();
    out.set.log_alphas = log_alpha.defined() ? log_alpha.values() : std::vector<T>(n, T(0));
    out.set.pad_mask = pad;
    out.set.open_mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.set.open_mask[i] = out.set.gates[i] > T(0);
    }
    if (hc && log_alpha.defined()) {
        if (any_pad) {
            std::vector<std::size_t> keep_idx;
            for (std::size_t i = 0; i < n; ++i) {
                if (!pad[i]) {
                    keep_idx.push_back(i);
                }
            }
            out.penalty = keep_idx.empty() ? Tensor<T>::scalar(T(0))
                                           : expected_l0(index_select(log_alpha, std::span<const std::size_t>(keep_idx)), *hc);
        } else {
            out.penalty = expected_l0(log_alpha, *hc);
        }
    } else {
        out.penalty = Tensor<T>::scalar(T(0));
    }
    out.gates = std::move(gates);
    out.log_alpha = std::move(log_alpha);
    return out;
}

}  // namespace detail

// Training-time gating with frozen uniform noise (one draw per position).
template <class T>
GateOutput<T> apply_gates_train(const Tensor<T>& encodings, const GatePredictor<T>& predictor,
                                const HardConcreteParams& params, std::span<const double> uniforms,
                                std::span<const unsigned char> pad_mask = {}) {
    auto la = predict_log_alpha(encodings, predictor);
    auto g = sample_gates(la, uniforms, params);
    return detail::finish_gates(encodings, std::move(la), std::move(g),
                                detail::resolve_pad<T>(pad_mask, encodings.rows()), &params);
}

// Training-time gating drawing one uniform per position from `rng`.
template <class T>
GateOutput<T> apply_gates_train(const Tensor<T>& encodings, const GatePredictor<T>& predictor,
                                const HardConcreteParams& params, RngState& rng,
                                std::span<const unsigned char> pad_mask = {}) {
    std::vector<double> u(encodings.rows());
    for (auto& x : u) {
        x = rng.uniform();
    }
    return apply_gates_train(encodings, predictor, params, std::span<const double>(u), pad_mask);
}

// Deterministic test-time gating with the expected gate value.
template <class T>
GateOutput<T> apply_gates_eval(const Tensor<T>& encodings, const GatePredictor<T>& predictor,
                               const HardConcreteParams& params, std::span<const unsigned char> pad_mask = {}) {
    auto la = predict_log_alpha(encodings, predictor);
    auto g = expected_gates(la, params);
    return detail::finish_gates(encodings, std::move(la), std::move(g),
                                detail::resolve_pad<T>(pad_mask, encodings.rows()), &params);
}

// Gating with caller-supplied gate values (rule-based patterns, disabled gates).
// Carries no penalty.
template <class T>
GateOutput<T> apply_fixed_gates(const Tensor<T>& encodings, std::span<const T> gate_values,
                                std::span<const unsigned char> pad_mask = {}) {
    if (gate_values.size() != encodings.rows()) {
        throw DimensionError("apply_fixed_gates: gate count does not match positions");
    }
    Tensor<T> g({encodings.rows(), 1}, std::vector<T>(gate_values.begin(), gate_values.end()));
    return detail::finish_gates(encodings, Tensor<T>{}, std::move(g),
                                detail::resolve_pad<T>(pad_mask, encodings.rows()), nullptr);
}

// Corpus-level fraction of non-pad positions whose gate is exactly zero.
template <class T>
double sparsity_rate(std::span<const GateSet<T>> gate_sets) {
    std::size_t closed = 0, total = 0;
    for (const auto& gs : gate_sets) {
        closed += gs.closed();
        total += gs.non_pad();
    }
    if (total == 0) {
        throw DataError("sparsity rate is undefined for an empty corpus");
    }
    return static_cast<double>(closed) / static_cast<double>(total);
}

// Which encoder layer outputs carry a gate layer. Layer indices are 1-based
// (gate after layer l); the last entry always gates the decoder's memory.
struct GatePlacement {
    enum class Kind { top, per_layer, custom };
    Kind kind = Kind::top;
    std::vector<std::size_t> layers;

    std::size_t count() const { return layers.size(); }
    std::size_t top_layer() const { return layers.back(); }
};

inline std::string gate_param_name(std::size_t layer) { return "gate.layer" + std::to_string(layer) + ".w"; }

inline GatePlacement place_gates(GatePlacement::Kind kind, std::size_t encoder_layers,
                                 std::vector<std::size_t> custom = {}) {
    GatePlacement plan;
    plan.kind = kind;
    switch (kind) {
        case GatePlacement::Kind::top:
            plan.layers = {encoder_layers};
            break;
        case GatePlacement::Kind::per_layer:
            if (encoder_layers == 0) {
                plan.layers = {0};
            }
            for (std::size_t l = 1; l <= encoder_layers; ++l) {
                plan.layers.push_back(l);
            }
            break;
        case GatePlacement::Kind::custom:
            if (custom.empty()) {
                throw ConfigError("custom gate placement needs at least one layer");
            }
            std::sort(custom.begin(), custom.end());
            custom.erase(std::unique(custom.begin(), custom.end()), custom.end());
            for (auto l : custom) {
                if (l > encoder_layers || (l == 0 && encoder_layers > 0)) {
                    throw ConfigError("gate layer index " + std::to_string(l) + " outside encoder depth " +
                                      std::to_string(encoder_layers));
                }
            }
            if (custom.back() != encoder_layers) {
                throw ConfigError("custom gate placement must include the top encoder layer");
            }
            plan.layers = std::move(custom);
            break;
    }
    return plan;
}

inline GatePlacement::Kind parse_placement(const std::string& s) {
    if (s == "top") {
        return GatePlacement::Kind::top;
    }
    if (s == "per_layer" || s == "per-layer") {
        return GatePlacement::Kind::per_layer;
    }
    throw ConfigError("unknown gate placement '" + s + "' (expected top or per_layer)");
}

// One line per sentence: space-separated items token|log_alpha|gate|open.
template <class T>
std::string gate_report_line(std::span<const std::string> tokens, const GateSet<T>& gs) {
    if (tokens.size() != gs.size()) {
        throw DimensionError("gate report: token count does not match gate count");
    }
    std::ostringstream os;
    os << std::setprecision(9);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        os << (i ? " " : "") << tokens[i] << '|' << gs.log_alphas[i] << '|' << gs.gates[i] << '|'
           << (gs.open_mask[i] ? 1 : 0);
    }
    return os.str();
}

struct GateReportEntry {
    std::string token;
    double log_alpha = 0.0;
    double gate = 0.0;
    bool open = false;
};

inline std::vector<GateReportEntry> parse_gate_report_line(const std::string& line) {
    std::vector<GateReportEntry> out;
    std::istringstream is(line);
    std::string item;
    while (is >> item) {
        const auto p3 = item.rfind('|');
        const auto p2 = p3 == std::string::npos ? p3 : item.rfind('|', p3 - 1);
        const auto p1 = p2 == std::string::npos ? p2 : item.rfind('|', p2 - 1);
        if (p1 == std::string::npos || p1 == 0) {
            throw DataError("malformed gate report item '" + item + "'");
        }
        try {
            out.push_back({item.substr(0, p1), std::stod(item.substr(p1 + 1, p2 - p1 - 1)),
                           std::stod(item.substr(p2 + 1, p3 - p2 - 1)), item.substr(p3 + 1) == "1"});
        } catch (const std::logic_error&) {
            throw DataError("malformed gate report item '" + item + "'");
        }
    }
    return out;
}

}  // namespace l0drop
