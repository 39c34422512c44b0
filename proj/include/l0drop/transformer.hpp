#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/ops.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"

namespace l0drop {

// Reserved ids shared by every vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

struct ModelConfig {
    std::size_t d = 64;
    std::size_t ffn_dim = 256;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t src_vocab = 0;
    std::size_t tgt_vocab = 0;
    double attn_dropout = 0.1;
    double residual_dropout = 0.1;
    double label_smoothing = 0.1;
    std::size_t max_len = 256;
    bool scale_embeddings = true;
    bool positional_encoding = true;
    bool tie_target_embeddings = false;

    void validate() const {
        if (d == 0 || ffn_dim == 0 || heads == 0 || src_vocab == 0 || tgt_vocab == 0 || max_len == 0) {
            throw ConfigError("model dimensions and vocabulary sizes must be positive");
        }
        if (d % heads != 0) {
            throw ConfigError("model dimension " + std::to_string(d) + " is not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (attn_dropout < 0.0 || attn_dropout >= 1.0 || residual_dropout < 0.0 || residual_dropout >= 1.0) {
            throw ConfigError("dropout rates must lie in [0, 1)");
        }
        if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
            throw ConfigError("label smoothing must lie in [0, 1)");
        }
    }
};

// Named trainable parameters, ordered by path.
template <class T>
struct ModelParams {
    std::map<std::string, Tensor<T>> tensors;

    const Tensor<T>& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw ConfigError("missing parameter " + name);
        }
        return it->second;
    }
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
    void zero_grad() {
        for (auto& [_, t] : tensors) {
            t.zero_grad();
        }
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : tensors) {
            n += t.numel();
        }
        return n;
    }
    ModelParams clone() const {
        ModelParams out;
        for (const auto& [k, t] : tensors) {
            out.tensors.emplace(k, t.clone());
        }
        return out;
    }
};

inline std::string layer_prefix(const char* stack, std::size_t l) {
    return std::string(stack) + ".layer" + std::to_string(l);
}

namespace detail {

template <class T>
Tensor<T> xavier(std::size_t in, std::size_t out, RngState& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<T> v(in * out);
    for (auto& x : v) {
        x = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
    }
    return Tensor<T>({in, out}, std::move(v), true);
}

template <class T>
Tensor<T> normal_init(std::size_t rows, std::size_t cols, double stddev, RngState& rng) {
    std::vector<T> v(rows * cols);
    for (auto& x : v) {
        x = static_cast<T>(rng.normal() * stddev);
    }
    return Tensor<T>({rows, cols}, std::move(v), true);
}

template <class T>
void add_attention_params(ModelParams<T>& p, const std::string& prefix, std::size_t d, RngState& rng) {
    for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) {
        p.tensors.emplace(prefix + "." + w, xavier<T>(d, d, rng));
    }
}

template <class T>
void add_norm_params(ModelParams<T>& p, const std::string& prefix, std::size_t d) {
    p.tensors.emplace(prefix + ".gain", Tensor<T>({d}, std::vector<T>(d, T(1)), true));
    p.tensors.emplace(prefix + ".bias", Tensor<T>::zeros({d}, true));
}

template <class T>
void add_ffn_params(ModelParams<T>& p, const std::string& prefix, std::size_t d, std::size_t ffn, RngState& rng) {
    p.tensors.emplace(prefix + ".W1", xavier<T>(d, ffn, rng));
    p.tensors.emplace(prefix + ".b1", Tensor<T>::zeros({ffn}, true));
    p.tensors.emplace(prefix + ".W2", xavier<T>(ffn, d, rng));
    p.tensors.emplace(prefix + ".b2", Tensor<T>::zeros({d}, true));
}

}  // namespace detail

// Baseline encoder-decoder parameters. Attention projections are bias-free.
template <class T>
ModelParams<T> init_transformer_params(const ModelConfig& cfg, RngState& rng) {
    cfg.validate();
    ModelParams<T> p;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    p.tensors.emplace("src_embed", detail::normal_init<T>(cfg.src_vocab, cfg.d, emb_std, rng));
    p.tensors.emplace("tgt_embed", detail::normal_init<T>(cfg.tgt_vocab, cfg.d, emb_std, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto e = layer_prefix("encoder", l);
        detail::add_attention_params(p, e + ".self_attn", cfg.d, rng);
        detail::add_norm_params<T>(p, e + ".ln1", cfg.d);
        detail::add_ffn_params(p, e + ".ffn", cfg.d, cfg.ffn_dim, rng);
        detail::add_norm_params<T>(p, e + ".ln2", cfg.d);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto dp = layer_prefix("decoder", l);
        detail::add_attention_params(p, dp + ".self_attn", cfg.d, rng);
        detail::add_norm_params<T>(p, dp + ".ln1", cfg.d);
        detail::add_attention_params(p, dp + ".cross_attn", cfg.d, rng);
        detail::add_norm_params<T>(p, dp + ".ln2", cfg.d);
        detail::add_ffn_params(p, dp + ".ffn", cfg.d, cfg.ffn_dim, rng);
        detail::add_norm_params<T>(p, dp + ".ln3", cfg.d);
    }
    if (!cfg.tie_target_embeddings) {
        p.tensors.emplace("out_proj.W", detail::xavier<T>(cfg.d, cfg.tgt_vocab, rng));
    }
    p.tensors.emplace("out_proj.b", Tensor<T>::zeros({cfg.tgt_vocab}, true));
    return p;
}

// Sinusoidal encoding rows [n x d]: sin on even columns, cos on odd ones.
template <class T>
std::vector<T> positional_encoding(std::size_t n, std::size_t d, std::size_t start = 0) {
    std::vector<T> pe(n * d);
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            const double angle = static_cast<double>(pos + start) * freq;
            pe[pos * d + i] = static_cast<T>(std::sin(angle));
            if (i + 1 < d) {
                pe[pos * d + i + 1] = static_cast<T>(std::cos(angle));
            }
        }
    }
    return pe;
}

struct ForwardContext {
    bool train = false;
    RngState* dropout_rng = nullptr;
};

// Per-layer attention weights captured for analysis (heads x queries x keys).
template <class T>
struct AttentionTrace {
    std::vector<std::vector<T>> encoder_self;
    std::vector<std::vector<T>> cross;
};

// Called after each encoder layer (0-based index) and may replace its output.
template <class T>
using EncoderHook = std::function<Tensor<T>(std::size_t layer, const Tensor<T>& output)>;

inline std::vector<unsigned char> non_pad_mask(std::span<const int> ids) {
    std::vector<unsigned char> m(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        m[i] = ids[i] != kPadId;
    }
    return m;
}

namespace detail {

template <class T>
Tensor<T> embed_tokens(const Tensor<T>& table, std::span<const int> ids, const ModelConfig& cfg) {
    auto x = embedding(table, ids);
    if (cfg.scale_embeddings) {
        x = scale(x, static_cast<T>(std::sqrt(static_cast<double>(cfg.d))));
    }
    if (cfg.positional_encoding) {
        x = add(x, Tensor<T>({ids.size(), cfg.d}, positional_encoding<T>(ids.size(), cfg.d)));
    }
    return x;
}

template <class T>
Tensor<T> attention_block(const ModelParams<T>& p, const std::string& prefix, const Tensor<T>& h,
                          const Tensor<T>& m, std::size_t heads, const AttentionMask& mask, const ModelConfig& cfg,
                          const ForwardContext& ctx, std::vector<T>* probs) {
    auto q = matmul(h, p.get(prefix + ".Wq"));
    auto k = matmul(m, p.get(prefix + ".Wk"));
    auto v = matmul(m, p.get(prefix + ".Wv"));
    auto a = multi_head_attention(q, k, v, heads, mask, static_cast<T>(cfg.attn_dropout), ctx.dropout_rng,
                                  ctx.train, probs);
    return matmul(a, p.get(prefix + ".Wo"));
}

template <class T>
Tensor<T> ffn_block(const ModelParams<T>& p, const std::string& prefix, const Tensor<T>& x) {
    auto h = relu(add(matmul(x, p.get(prefix + ".W1")), p.get(prefix + ".b1")));
    return add(matmul(h, p.get(prefix + ".W2")), p.get(prefix + ".b2"));
}

// Post-norm residual: LayerNorm(x + Dropout(sublayer)).
template <class T>
Tensor<T> residual_norm(const ModelParams<T>& p, const std::string& prefix, const Tensor<T>& x,
                        const Tensor<T>& sub, const ModelConfig& cfg, const ForwardContext& ctx) {
    auto y = add(x, dropout(sub, static_cast<T>(cfg.residual_dropout), ctx.dropout_rng, ctx.train));
    return layer_norm(y, p.get(prefix + ".gain"), p.get(prefix + ".bias"));
}

}  // namespace detail

// Encoder stack over one source sentence; PAD positions are hidden from
// self-attention. Returns [N x d].
template <class T>
Tensor<T> encode(const ModelParams<T>& p, const ModelConfig& cfg, std::span<const int> src,
                 const ForwardContext& ctx, const EncoderHook<T>& hook = {}, AttentionTrace<T>* trace = nullptr) {
    if (src.empty()) {
        throw DimensionError("encode: empty source sentence");
    }
    if (src.size() > cfg.max_len) {
        throw DimensionError("encode: source length " + std::to_string(src.size()) + " exceeds max_len " +
                             std::to_string(cfg.max_len));
    }
    AttentionMask mask{non_pad_mask(src), false};
    auto x = detail::embed_tokens(p.get("src_embed"), src, cfg);
    x = dropout(x, static_cast<T>(cfg.residual_dropout), ctx.dropout_rng, ctx.train);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto pre = layer_prefix("encoder", l);
        std::vector<T>* probs = nullptr;
        if (trace) {
            trace->encoder_self.emplace_back();
            probs = &trace->encoder_self.back();
        }
        auto att = detail::attention_block(p, pre + ".self_attn", x, x, cfg.heads, mask, cfg, ctx, probs);
        x = detail::residual_norm(p, pre + ".ln1", x, att, cfg, ctx);
        x = detail::residual_norm(p, pre + ".ln2", x, detail::ffn_block(p, pre + ".ffn", x), cfg, ctx);
        if (hook) {
            x = hook(l, x);
        }
    }
    return x;
}

template <class T>
Tensor<T> output_logits(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& y) {
    auto logits = cfg.tie_target_embeddings ? matmul_nt(y, p.get("tgt_embed")) : matmul(y, p.get("out_proj.W"));
    return add(logits, p.get("out_proj.b"));
}

// Teacher-forced decoder over the shifted target (BOS + y). `memory_mask`
// hides PAD source positions; gated-out positions stay visible as zero rows.
template <class T>
Tensor<T> decode_train(const ModelParams<T>& p, const ModelConfig& cfg, std::span<const int> tgt_in,
                       const Tensor<T>& memory, const std::vector<unsigned char>& memory_mask,
                       const ForwardContext& ctx, AttentionTrace<T>* trace = nullptr) {
    if (tgt_in.empty()) {
        throw DimensionError("decode: empty target sequence");
    }
    if (tgt_in.size() > cfg.max_len + 1) {
        throw DimensionError("decode: target length exceeds max_len");
    }
    AttentionMask self_mask{{}, true};
    AttentionMask cross_mask{memory_mask, false};
    auto y = detail::embed_tokens(p.get("tgt_embed"), tgt_in, cfg);
    y = dropout(y, static_cast<T>(cfg.residual_dropout), ctx.dropout_rng, ctx.train);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto pre = layer_prefix("decoder", l);
        auto sa = detail::attention_block(p, pre + ".self_attn", y, y, cfg.heads, self_mask, cfg, ctx,
                                          static_cast<std::vector<T>*>(nullptr));
        y = detail::residual_norm(p, pre + ".ln1", y, sa, cfg, ctx);
        std::vector<T>* probs = nullptr;
        if (trace) {
            trace->cross.emplace_back();
            probs = &trace->cross.back();
        }
        auto ca = detail::attention_block(p, pre + ".cross_attn", y, memory, cfg.heads, cross_mask, cfg, ctx, probs);
        y = detail::residual_norm(p, pre + ".ln2", y, ca, cfg, ctx);
        y = detail::residual_norm(p, pre + ".ln3", y, detail::ffn_block(p, pre + ".ffn", y), cfg, ctx);
    }
    return output_logits(p, cfg, y);
}

// Decoder input (BOS + target) and output (target + EOS) for teacher forcing.
inline std::vector<int> shift_right(std::span<const int> tgt) {
    std::vector<int> v{kBosId};
    v.insert(v.end(), tgt.begin(), tgt.end());
    return v;
}

inline std::vector<int> append_eos(std::span<const int> tgt) {
    std::vector<int> v(tgt.begin(), tgt.end());
    v.push_back(kEosId);
    return v;
}

}  // namespace l0drop
