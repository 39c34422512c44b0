#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "l0drop/corpus.hpp"
#include "l0drop/errors.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/model.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

// Summed cross-attention weight per source word: attention matrices are
// averaged over decoder layers and heads, then summed over target steps
// (teacher-forced on the reference). Only words whose gate is open count.
struct AttentionMassReport {
    std::vector<double> masses;  // one per retained source word, corpus order
    double mean = 0.0;
    double fraction_below = 0.0;  // share of masses under `threshold`
    double threshold = 0.6;
};

template <class T>
std::vector<double> sentence_attention_mass(const Model<T>& m, std::span<const int> src, std::span<const int> tgt,
                                            GateMode mode, GateSet<T>* gates_out = nullptr) {
    NoGradGuard no_grad;
    GateOptions<T> opt;
    opt.mode = mode;
    auto enc = encode_gated(m, src, ForwardContext{}, opt);
    AttentionTrace<T> trace;
    const auto tin = shift_right(tgt);
    decode_train(m.params, m.cfg, tin, enc.memory, enc.memory_mask, ForwardContext{}, &trace);
    const std::size_t n = src.size(), steps = tin.size(), heads = m.cfg.heads;
    std::vector<double> mass(n, 0.0);
    if (trace.cross.empty()) {
        return mass;
    }
    const double norm = 1.0 / static_cast<double>(trace.cross.size() * heads);
    for (const auto& layer : trace.cross) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < steps; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    mass[i] += norm * static_cast<double>(layer[(h * steps + j) * n + i]);
                }
            }
        }
    }
    if (gates_out) {
        *gates_out = enc.gates;
    }
    return mass;
}

template <class T>
AttentionMassReport attention_mass(const Model<T>& m, const Corpus& c, GateMode mode, std::size_t limit = 0,
                                   double threshold = 0.6) {
    const std::size_t n = limit ? std::min(limit, c.size()) : c.size();
    if (n == 0) {
        throw DataError("attention-mass analysis needs at least one sentence");
    }
    AttentionMassReport rep;
    rep.threshold = threshold;
    std::size_t below = 0;
    for (std::size_t s = 0; s < n; ++s) {
        GateSet<T> gs;
        const auto mass = sentence_attention_mass(m, c.src[s], c.tgt[s], mode, &gs);
        for (std::size_t i = 0; i < mass.size(); ++i) {
            if (gs.pad_mask[i] || !gs.open_mask[i]) {
                continue;
            }
            rep.masses.push_back(mass[i]);
            rep.mean += mass[i];
            below += mass[i] < threshold;
        }
    }
    if (rep.masses.empty()) {
        throw DataError("no retained source words to analyse");
    }
    rep.mean /= static_cast<double>(rep.masses.size());
    rep.fraction_below = static_cast<double>(below) / static_cast<double>(rep.masses.size());
    return rep;
}

// Shannon entropy (nats) of one attention distribution.
inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double x : p) {
        if (x > 0.0) {
            h -= x * std::log(x);
        }
    }
    return h;
}

// Entropy of each source position's self-attention row in the last encoder
// layer, computed per head and averaged over heads.
template <class T>
std::vector<double> encoder_row_entropies(const Model<T>& m, std::span<const int> src) {
    if (m.cfg.layers == 0) {
        throw ConfigError("entropy analysis needs at least one encoder layer");
    }
    NoGradGuard no_grad;
    AttentionTrace<T> trace;
    encode(m.params, m.cfg, src, ForwardContext{}, EncoderHook<T>{}, &trace);
    const auto& a = trace.encoder_self.back();
    const std::size_t n = src.size(), heads = m.cfg.heads;
    std::vector<double> out(n, 0.0), row(n);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = static_cast<double>(a[(h * n + i) * n + j]);
            }
            out[i] += entropy(row) / static_cast<double>(heads);
        }
    }
    return out;
}

struct EntropyReport {
    double retained_mean = 0.0;
    double pruned_mean = 0.0;
    std::size_t retained = 0;
    std::size_t pruned = 0;
};

// Mean row entropy of `m`'s last encoder layer, split by `split` (one
// expected-gate set per sentence, usually from a gated model): positions with
// a nonzero gate count as retained. Empty groups report NaN.
template <class T>
EntropyReport entropy_split(const Model<T>& m, const Corpus& c, const std::vector<GateSet<T>>& split) {
    if (split.empty() || split.size() > c.size()) {
        throw DataError("entropy analysis: gate sets do not match the corpus");
    }
    EntropyReport r;
    for (std::size_t s = 0; s < split.size(); ++s) {
        const auto ent = encoder_row_entropies(m, c.src[s]);
        if (split[s].size() != ent.size()) {
            throw DataError("entropy analysis: gate set length differs from sentence " + std::to_string(s));
        }
        for (std::size_t i = 0; i < ent.size(); ++i) {
            if (split[s].pad_mask[i]) {
                continue;
            }
            if (split[s].open_mask[i]) {
                r.retained_mean += ent[i];
                ++r.retained;
            } else {
                r.pruned_mean += ent[i];
                ++r.pruned;
            }
        }
    }
    r.retained_mean = r.retained ? r.retained_mean / static_cast<double>(r.retained) : std::nan("");
    r.pruned_mean = r.pruned ? r.pruned_mean / static_cast<double>(r.pruned) : std::nan("");
    return r;
}

// Expected-gate sets of a gated model over the first `limit` sentences.
template <class T>
std::vector<GateSet<T>> expected_gate_sets(const Model<T>& m, const Corpus& c, std::size_t limit = 0) {
    const std::size_t n = limit ? std::min(limit, c.size()) : c.size();
    NoGradGuard no_grad;
    std::vector<GateSet<T>> out;
    for (std::size_t s = 0; s < n; ++s) {
        GateOptions<T> opt;
        opt.mode = GateMode::eval;
        out.push_back(encode_gated(m, c.src[s], ForwardContext{}, opt).gates);
    }
    return out;
}

}  // namespace l0drop
