#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/hardconcrete.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/ops.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

enum class GateMode {
    disabled,  // plain Transformer: memory is the raw encoder output
    train,     // sampled HardConcrete gates
    eval,      // expected gates
    fixed,     // caller-supplied gates on the top layer (rule-based patterns)
};

// Transformer plus gate predictors. Gate weights live in `params` under
// gate_param_name(l) so they are saved, optimized and clipped with the rest.
template <class T>
struct Model {
    ModelConfig cfg;
    HardConcreteParams hc;
    GatePlacement placement;
    ModelParams<T> params;

    GatePredictor<T> predictor(std::size_t layer) const { return {params.get(gate_param_name(layer))}; }
    bool has_gates() const { return params.contains(gate_param_name(placement.top_layer())); }
};

// Gate predictors start at zero and consume no random draws, so the
// Transformer weights match init_transformer_params for the same rng.
template <class T>
Model<T> init_model(const ModelConfig& cfg, RngState& rng, GatePlacement placement = {},
                    const HardConcreteParams& hc = {}) {
    hc.validate();
    if (placement.layers.empty()) {
        placement = place_gates(GatePlacement::Kind::top, cfg.layers);
    }
    Model<T> m{cfg, hc, std::move(placement), init_transformer_params<T>(cfg, rng)};
    for (auto l : m.placement.layers) {
        m.params.tensors.emplace(gate_param_name(l), GatePredictor<T>::zeros(cfg.d).w);
    }
    return m;
}

template <class T>
struct GateOptions {
    GateMode mode = GateMode::disabled;
    RngState* gate_rng = nullptr;
    // Frozen noise, one vector per gate layer in placement order (train mode).
    const std::vector<std::vector<double>>* uniforms = nullptr;
    // Top-layer gate values for fixed mode.
    std::span<const T> fixed;
};

template <class T>
struct EncodeResult {
    Tensor<T> raw;     // ungated top-layer output
    Tensor<T> memory;  // what the decoder attends to
    std::vector<unsigned char> memory_mask;
    std::vector<GateOutput<T>> gate_layers;
    Tensor<T> penalty;  // summed expected L0 over gate layers
    GateSet<T> gates;   // top-layer gate state

    bool gated() const { return !gate_layers.empty(); }
};

namespace detail {

template <class T>
GateSet<T> open_gate_set(const std::vector<unsigned char>& pad) {
    GateSet<T> gs;
    const std::size_t n = pad.size();
    gs.pad_mask = pad;
    gs.log_alphas.assign(n, T(0));
    gs.gates.resize(n);
    gs.open_mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        gs.gates[i] = pad[i] ? T(0) : T(1);
        gs.open_mask[i] = !pad[i];
    }
    return gs;
}

template <class T>
GateOutput<T> run_gate(const Model<T>& m, std::size_t slot, const Tensor<T>& x, const GateOptions<T>& opt,
                       std::span<const unsigned char> pad) {
    const auto pred = m.predictor(m.placement.layers[slot]);
    switch (opt.mode) {
        case GateMode::train:
            if (opt.uniforms) {
                if (slot >= opt.uniforms->size()) {
                    throw DimensionError("frozen gate noise missing for gate layer " + std::to_string(slot));
                }
                return apply_gates_train(x, pred, m.hc, std::span<const double>((*opt.uniforms)[slot]), pad);
            }
            if (!opt.gate_rng) {
                throw ContractError("train-mode gating needs an RngState or frozen noise");
            }
            return apply_gates_train(x, pred, m.hc, *opt.gate_rng, pad);
        case GateMode::eval:
            return apply_gates_eval(x, pred, m.hc, pad);
        default:
            throw ContractError("run_gate: gate mode has no predictor");
    }
}

}  // namespace detail

// Encoder forward pass with gate layers at the configured placement. Gates
// below the top layer scale their layer's output before it feeds the next
// layer; every gated position stays in the sequence.
template <class T>
EncodeResult<T> encode_gated(const Model<T>& m, std::span<const int> src, const ForwardContext& ctx,
                             const GateOptions<T>& opt, AttentionTrace<T>* trace = nullptr) {
    EncodeResult<T> r;
    r.memory_mask = non_pad_mask(src);
    std::vector<unsigned char> pad(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        pad[i] = !r.memory_mask[i];
    }
    const bool learned = opt.mode == GateMode::train || opt.mode == GateMode::eval;
    if (learned && !m.has_gates()) {
        throw ConfigError("model has no gate predictor for the requested gate mode");
    }
    const std::size_t top = m.placement.top_layer();
    const std::size_t slots = m.placement.count();
    EncoderHook<T> hook;
    if (learned && slots > 1) {
        hook = [&](std::size_t layer, const Tensor<T>& out) -> Tensor<T> {
            const std::size_t one_based = layer + 1;
            for (std::size_t s = 0; s + 1 < slots; ++s) {
                if (m.placement.layers[s] == one_based && one_based != top) {
                    r.gate_layers.push_back(detail::run_gate(m, s, out, opt, pad));
                    return r.gate_layers.back().gated;
                }
            }
            return out;
        };
    }
    r.raw = encode(m.params, m.cfg, src, ctx, hook, trace);
    switch (opt.mode) {
        case GateMode::disabled:
            r.memory = r.raw;
            r.gates = detail::open_gate_set<T>(pad);
            break;
        case GateMode::fixed: {
            if (opt.fixed.size() != src.size()) {
                throw DimensionError("fixed gates: " + std::to_string(opt.fixed.size()) + " values for " +
                                     std::to_string(src.size()) + " positions");
            }
            auto out = apply_fixed_gates(r.raw, opt.fixed, pad);
            r.memory = out.gated;
            r.gates = out.set;
            r.gate_layers.push_back(std::move(out));
            break;
        }
        default: {
            auto out = detail::run_gate(m, slots - 1, r.raw, opt, pad);
            r.memory = out.gated;
            r.gates = out.set;
            r.gate_layers.push_back(std::move(out));
            break;
        }
    }
    r.penalty = Tensor<T>::scalar(T(0));
    if (learned) {
        std::vector<Tensor<T>> parts;
        for (const auto& g : r.gate_layers) {
            parts.push_back(g.penalty);
        }
        r.penalty = parts.size() == 1 ? parts[0] : sum(concat(parts, 0));
    }
    return r;
}

// Per-sentence loss terms: summed label-smoothed NLL over target + EOS and
// the summed expected L0 of all gate layers.
template <class T>
struct SentenceLoss {
    Tensor<T> nll;
    Tensor<T> penalty;
    std::size_t target_tokens = 0;
    GateSet<T> gates;
};

template <class T>
SentenceLoss<T> sentence_loss(const Model<T>& m, std::span<const int> src, std::span<const int> tgt,
                              const ForwardContext& ctx, const GateOptions<T>& opt) {
    auto enc = encode_gated(m, src, ctx, opt);
    const auto tin = shift_right(tgt);
    const auto tout = append_eos(tgt);
    auto logits = decode_train(m.params, m.cfg, tin, enc.memory, enc.memory_mask, ctx);
    SentenceLoss<T> out;
    out.nll = cross_entropy(logits, tout, static_cast<T>(m.cfg.label_smoothing), kPadId);
    out.penalty = enc.penalty;
    out.target_tokens = tout.size();
    out.gates = std::move(enc.gates);
    return out;
}

}  // namespace l0drop
