#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/kernels.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/model.hpp"
#include "l0drop/sparse_decode.hpp"
#include "l0drop/tensor.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

namespace detail {

// Same arithmetic as layer_norm() on one row.
template <class T>
void layer_norm_row(std::span<T> x, const T* gain, const T* bias, T eps = T(1e-6)) {
    const std::size_t d = x.size();
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) {
        mu += x[j];
    }
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
        var += (x[j] - mu) * (x[j] - mu);
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
        x[j] = (x[j] - mu) * is * gain[j] + bias[j];
    }
}

template <class T>
std::vector<T> log_softmax(std::span<const T> z) {
    const T mx = *std::max_element(z.begin(), z.end());
    T s = T(0);
    for (const T v : z) {
        s += std::exp(v - mx);
    }
    const T lse = mx + std::log(s);
    std::vector<T> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = z[i] - lse;
    }
    return out;
}

}  // namespace detail

// Step-at-a-time decoder with a self-attention key/value cache. Cross-attention
// reads a prebuilt memory (dense or compacted) shared between copies, so beam
// hypotheses can fork by copying the decoder.
template <class T>
class IncrementalDecoder {
public:
    IncrementalDecoder(const Model<T>& m, std::shared_ptr<const CrossMemory<T>> memory)
        : cfg_{&m.cfg}, memory_{std::move(memory)} {
        view_ = view_of(*memory_);
        const auto& p = m.params;
        auto ptr = [&](const std::string& n) { return p.get(n).values().data(); };
        tgt_embed_ = ptr("tgt_embed");
        out_w_ = cfg_->tie_target_embeddings ? nullptr : ptr("out_proj.W");
        out_b_ = ptr("out_proj.b");
        for (std::size_t l = 0; l < cfg_->layers; ++l) {
            const auto pre = layer_prefix("decoder", l);
            layers_.push_back({ptr(pre + ".self_attn.Wq"), ptr(pre + ".self_attn.Wk"), ptr(pre + ".self_attn.Wv"),
                               ptr(pre + ".self_attn.Wo"), ptr(pre + ".cross_attn.Wq"), ptr(pre + ".cross_attn.Wo"),
                               ptr(pre + ".ln1.gain"), ptr(pre + ".ln1.bias"), ptr(pre + ".ln2.gain"),
                               ptr(pre + ".ln2.bias"), ptr(pre + ".ln3.gain"), ptr(pre + ".ln3.bias"),
                               ptr(pre + ".ffn.W1"), ptr(pre + ".ffn.b1"), ptr(pre + ".ffn.W2"),
                               ptr(pre + ".ffn.b2")});
        }
        keys_.resize(cfg_->layers);
        values_.resize(cfg_->layers);
        if (view_.layers->size() != cfg_->layers) {
            throw DimensionError("decoder memory was projected for a different layer count");
        }
    }

    std::size_t position() const { return pos_; }
    const CrossMemory<T>& memory() const { return *memory_; }

    // Feeds `token` at the current position and returns next-token logits.
    // `cross_weights`, when given, receives heads x rows weights per layer.
    std::vector<T> step(int token, std::vector<std::vector<T>>* cross_weights = nullptr) {
        const std::size_t d = cfg_->d, heads = cfg_->heads;
        if (token < 0 || static_cast<std::size_t>(token) >= cfg_->tgt_vocab) {
            throw DomainError("decoder token id out of range");
        }
        if (pos_ > cfg_->max_len) {
            throw DimensionError("decode: target length exceeds max_len");
        }
        std::vector<T> y(tgt_embed_ + static_cast<std::size_t>(token) * d,
                         tgt_embed_ + static_cast<std::size_t>(token + 1) * d);
        if (cfg_->scale_embeddings) {
            const T s = static_cast<T>(std::sqrt(static_cast<double>(d)));
            for (auto& v : y) {
                v *= s;
            }
        }
        if (cfg_->positional_encoding) {
            const auto pe = positional_encoding<T>(1, d, pos_);
            for (std::size_t j = 0; j < d; ++j) {
                y[j] += pe[j];
            }
        }
        if (cross_weights) {
            cross_weights->assign(cfg_->layers, {});
        }
        std::vector<T> q(d), k(d), v(d), ctx(d), o(d), h(cfg_->ffn_dim);
        for (std::size_t l = 0; l < cfg_->layers; ++l) {
            const auto& w = layers_[l];
            kernels::gemv_row<T>(d, d, y.data(), w.sq, q.data());
            kernels::gemv_row<T>(d, d, y.data(), w.sk, k.data());
            kernels::gemv_row<T>(d, d, y.data(), w.sv, v.data());
            keys_[l].insert(keys_[l].end(), k.begin(), k.end());
            values_[l].insert(values_[l].end(), v.begin(), v.end());
            attend_with_counts<T>(q, keys_[l], values_[l], pos_ + 1, heads, {}, {}, ctx, {}, &scratch_);
            kernels::gemv_row<T>(d, d, ctx.data(), w.so, o.data());
            for (std::size_t j = 0; j < d; ++j) {
                y[j] += o[j];
            }
            detail::layer_norm_row<T>(y, w.ln1g, w.ln1b);

            std::span<T> weights;
            if (cross_weights) {
                (*cross_weights)[l].assign(heads * view_.rows, T(0));
                weights = (*cross_weights)[l];
            }
            sparse_cross_attention_layer<T>(y, w.cq, w.co, view_, l, heads, o, weights, &scratch_);
            for (std::size_t j = 0; j < d; ++j) {
                y[j] += o[j];
            }
            detail::layer_norm_row<T>(y, w.ln2g, w.ln2b);

            kernels::gemv_row<T>(cfg_->ffn_dim, d, y.data(), w.w1, h.data());
            for (std::size_t j = 0; j < cfg_->ffn_dim; ++j) {
                h[j] = std::max(T(0), h[j] + w.b1[j]);
            }
            kernels::gemv_row<T>(d, cfg_->ffn_dim, h.data(), w.w2, o.data());
            for (std::size_t j = 0; j < d; ++j) {
                y[j] += o[j] + w.b2[j];
            }
            detail::layer_norm_row<T>(y, w.ln3g, w.ln3b);
        }
        ++pos_;
        const std::size_t vocab = cfg_->tgt_vocab;
        std::vector<T> logits(vocab);
        if (out_w_) {
            kernels::gemv_row<T>(vocab, d, y.data(), out_w_, logits.data());
        } else {
            for (std::size_t c = 0; c < vocab; ++c) {
                logits[c] = kernels::dot<T>(d, y.data(), tgt_embed_ + c * d);
            }
        }
        for (std::size_t c = 0; c < vocab; ++c) {
            logits[c] += out_b_[c];
        }
        return logits;
    }

private:
    struct LayerWeights {
        const T *sq, *sk, *sv, *so, *cq, *co;
        const T *ln1g, *ln1b, *ln2g, *ln2b, *ln3g, *ln3b;
        const T *w1, *b1, *w2, *b2;
    };

    const ModelConfig* cfg_;
    std::shared_ptr<const CrossMemory<T>> memory_;
    MemoryView<T> view_;
    const T* tgt_embed_ = nullptr;
    const T* out_w_ = nullptr;
    const T* out_b_ = nullptr;
    std::vector<LayerWeights> layers_;
    std::vector<std::vector<T>> keys_, values_;
    std::vector<T> scratch_;
    std::size_t pos_ = 0;
};

struct DecodeOptions {
    bool sparse = true;
    std::size_t beam = 1;
    double length_penalty = 0.6;
    GateMode gate_mode = GateMode::eval;
    std::size_t max_len = 0;  // 0: min(max_len, 2N + 10)
};

template <class T>
struct PreparedMemory {
    std::shared_ptr<const CrossMemory<T>> memory;
    GateSet<T> gates;
    bool fell_back = false;  // sparse requested but every gate was closed
};

using WarningSink = std::function<void(const std::string&)>;

// Encodes `src` in eval mode and builds the decoder's cross-attention memory.
// A sentence whose gates are all closed cannot be compacted; it falls back to
// dense attention and reports through `warn`.
template <class T>
PreparedMemory<T> prepare_memory(const Model<T>& m, std::span<const int> src, bool sparse, GateMode mode,
                                 std::span<const T> fixed_gates = {}, const WarningSink& warn = {}) {
    NoGradGuard no_grad;
    GateOptions<T> opt;
    opt.mode = mode;
    opt.fixed = fixed_gates;
    if (mode == GateMode::train) {
        throw ContractError("decoding uses eval, fixed or disabled gates");
    }
    auto enc = encode_gated(m, src, ForwardContext{}, opt);
    PreparedMemory<T> out;
    out.gates = enc.gates;
    if (sparse) {
        try {
            auto mem = compact<T>(enc.raw, enc.gates);
            project_memory(m.params, m.cfg, mem);
            out.memory = std::make_shared<const CrossMemory<T>>(std::move(mem));
            return out;
        } catch (const DegenerateMemoryError& e) {
            out.fell_back = true;
            if (warn) {
                warn(std::string("warning: ") + e.what() + "; decoding this sentence with dense attention");
            }
        }
    }
    auto mem = dense_memory<T>(enc.memory.data(), m.cfg.d, enc.gates);
    project_memory(m.params, m.cfg, mem);
    out.memory = std::make_shared<const CrossMemory<T>>(std::move(mem));
    return out;
}

inline std::size_t default_max_decode_length(const ModelConfig& cfg, std::span<const int> src) {
    std::size_t n = 0;
    for (int id : src) {
        n += id != kPadId;
    }
    return std::min(cfg.max_len, 2 * n + 10);
}

inline double length_penalty_factor(std::size_t len, double alpha) {
    return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

// Output tokens exclude BOS and the terminating EOS.
template <class T>
std::vector<int> greedy_decode(const Model<T>& m, std::shared_ptr<const CrossMemory<T>> memory,
                               std::size_t max_len) {
    IncrementalDecoder<T> dec(m, std::move(memory));
    std::vector<int> out;
    int tok = kBosId;
    for (std::size_t t = 0; t < max_len; ++t) {
        const auto lp = detail::log_softmax<T>(dec.step(tok));
        tok = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        if (tok == kEosId) {
            break;
        }
        out.push_back(tok);
    }
    return out;
}

struct Hypothesis {
    std::vector<int> tokens;
    double log_prob = 0.0;
    double score = 0.0;
};

// Beam search scored by log p / ((5 + len) / 6)^alpha with len counting the
// EOS. Each step keeps the `beam` best expansions by cumulative log
// probability; expansions ending in EOS leave the beam as finished
// hypotheses, so the live beam shrinks. Live hypotheses at the length cutoff
// are finished as they stand.
template <class T>
Hypothesis beam_search(const Model<T>& m, std::shared_ptr<const CrossMemory<T>> memory, std::size_t beam,
                       double alpha, std::size_t max_len) {
    if (beam == 0) {
        throw ConfigError("beam size must be at least 1");
    }
    struct Live {
        Hypothesis h;
        IncrementalDecoder<T> dec;
        int last;
    };
    std::vector<Live> live;
    live.push_back({{}, IncrementalDecoder<T>(m, std::move(memory)), kBosId});
    std::vector<Hypothesis> finished;
    struct Cand {
        double lp;
        std::size_t src;
        int tok;
    };
    for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
        std::vector<Cand> cands;
        for (std::size_t i = 0; i < live.size(); ++i) {
            const auto lp = detail::log_softmax<T>(live[i].dec.step(live[i].last));
            for (std::size_t c = 0; c < lp.size(); ++c) {
                cands.push_back({live[i].h.log_prob + static_cast<double>(lp[c]), i, static_cast<int>(c)});
            }
        }
        const std::size_t k = std::min(beam - finished.size(), cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k),
                          cands.end(), [](const Cand& a, const Cand& b) {
                              if (a.lp != b.lp) {
                                  return a.lp > b.lp;
                              }
                              return a.src != b.src ? a.src < b.src : a.tok < b.tok;
                          });
        std::vector<Live> next;
        for (std::size_t j = 0; j < k; ++j) {
            const auto& c = cands[j];
            Hypothesis h = live[c.src].h;
            h.log_prob = c.lp;
            if (c.tok == kEosId) {
                h.score = h.log_prob / length_penalty_factor(h.tokens.size() + 1, alpha);
                finished.push_back(std::move(h));
            } else {
                h.tokens.push_back(c.tok);
                next.push_back({std::move(h), live[c.src].dec, c.tok});
            }
        }
        live = std::move(next);
    }
    for (auto& l : live) {
        l.h.score = l.h.log_prob / length_penalty_factor(l.h.tokens.size(), alpha);
        finished.push_back(std::move(l.h));
    }
    if (finished.empty()) {
        return {};
    }
    return *std::max_element(finished.begin(), finished.end(),
                             [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
}

template <class T>
struct Translation {
    std::vector<int> tokens;
    GateSet<T> gates;
    bool fell_back = false;
};

template <class T>
Translation<T> translate(const Model<T>& m, std::span<const int> src, const DecodeOptions& opt,
                         std::span<const T> fixed_gates = {}, const WarningSink& warn = {}) {
    auto pm = prepare_memory(m, src, opt.sparse, opt.gate_mode, fixed_gates, warn);
    const std::size_t max_len = opt.max_len ? opt.max_len : default_max_decode_length(m.cfg, src);
    Translation<T> out;
    out.gates = std::move(pm.gates);
    out.fell_back = pm.fell_back;
    out.tokens = opt.beam == 1 ? greedy_decode(m, pm.memory, max_len)
                               : beam_search(m, pm.memory, opt.beam, opt.length_penalty, max_len).tokens;
    return out;
}

}  // namespace l0drop
