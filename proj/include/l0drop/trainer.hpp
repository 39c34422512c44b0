#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "l0drop/config.hpp"
#include "l0drop/corpus.hpp"
#include "l0drop/errors.hpp"
#include "l0drop/hardconcrete.hpp"
#include "l0drop/inference.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/metrics.hpp"
#include "l0drop/model.hpp"
#include "l0drop/optim.hpp"
#include "l0drop/patterns.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

enum class TrainMode { pretrain, finetune_l0drop, finetune_pattern, scratch_l0drop };

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "pretrain") {
        return TrainMode::pretrain;
    }
    if (s == "finetune_l0drop") {
        return TrainMode::finetune_l0drop;
    }
    if (s == "finetune_pattern") {
        return TrainMode::finetune_pattern;
    }
    if (s == "scratch_l0drop") {
        return TrainMode::scratch_l0drop;
    }
    throw ConfigError("unknown training mode '" + s + "'");
}

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::pretrain:
            return "pretrain";
        case TrainMode::finetune_l0drop:
            return "finetune_l0drop";
        case TrainMode::finetune_pattern:
            return "finetune_pattern";
        case TrainMode::scratch_l0drop:
            return "scratch_l0drop";
    }
    return "pretrain";
}

inline bool uses_learned_gates(TrainMode m) {
    return m == TrainMode::finetune_l0drop || m == TrainMode::scratch_l0drop;
}

// Random streams derived from the run seed. Each consumer owns one so that,
// for example, switching gates on does not shift the data order.
enum RngStream : std::uint64_t { kInitStream = 0, kDataStream = 1, kDropoutStream = 2, kGateStream = 3 };

struct TrainConfig {
    TrainMode mode = TrainMode::pretrain;
    double lambda = 0.0;
    std::size_t lambda_warmup = 0;
    std::size_t steps = 1000;
    std::size_t batch_tokens = 256;
    std::size_t warmup = 4000;
    double lr_scale = 1.0;
    AdamConfig adam{};
    double clip_norm = 1.0;
    std::uint64_t seed = 1;
    std::size_t log_interval = 100;
    std::size_t checkpoint_interval = 0;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
            throw ConfigError("lambda must be a nonnegative number");
        }
        if (steps == 0 || batch_tokens == 0) {
            throw ConfigError("steps and batch_tokens must be positive");
        }
        if (!(lr_scale > 0.0)) {
            throw ConfigError("lr_scale must be positive");
        }
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
            throw ConfigError("adam betas must lie in [0, 1)");
        }
        if (log_interval == 0) {
            throw ConfigError("log_interval must be positive");
        }
    }
};

// Documented configuration keys (see README).
inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys{
        "d",           "ffn_dim",       "heads",            "layers",      "attn_dropout",  "residual_dropout",
        "label_smoothing", "max_len",   "scale_embeddings", "positional_encoding", "tie_embeddings",
        "placement",   "beta",          "eps",              "mode",        "steps",         "batch_tokens",
        "warmup",      "lr_scale",      "lambda",           "lambda_warmup", "clip_norm",   "adam_beta1",
        "adam_beta2",  "adam_eps",      "seed",             "log_interval", "checkpoint_interval",
        "coverage",    "drop_tags",     "task",             "vocab",       "min_len",       "max_len_toy",
        "size"};
    return keys;
}

inline ModelConfig model_config_from(const ConfigMap& c, ModelConfig base = {}) {
    base.d = c.get_uint("d", base.d);
    base.ffn_dim = c.get_uint("ffn_dim", base.ffn_dim);
    base.heads = c.get_uint("heads", base.heads);
    base.layers = c.get_uint("layers", base.layers);
    base.attn_dropout = c.get_double("attn_dropout", base.attn_dropout);
    base.residual_dropout = c.get_double("residual_dropout", base.residual_dropout);
    base.label_smoothing = c.get_double("label_smoothing", base.label_smoothing);
    base.max_len = c.get_uint("max_len", base.max_len);
    base.scale_embeddings = c.get_bool("scale_embeddings", base.scale_embeddings);
    base.positional_encoding = c.get_bool("positional_encoding", base.positional_encoding);
    base.tie_target_embeddings = c.get_bool("tie_embeddings", base.tie_target_embeddings);
    return base;
}

inline void model_config_to(const ModelConfig& m, ConfigMap& c) {
    c.set("d", std::to_string(m.d));
    c.set("ffn_dim", std::to_string(m.ffn_dim));
    c.set("heads", std::to_string(m.heads));
    c.set("layers", std::to_string(m.layers));
    std::ostringstream a, r, l;
    a << std::setprecision(17) << m.attn_dropout;
    r << std::setprecision(17) << m.residual_dropout;
    l << std::setprecision(17) << m.label_smoothing;
    c.set("attn_dropout", a.str());
    c.set("residual_dropout", r.str());
    c.set("label_smoothing", l.str());
    c.set("max_len", std::to_string(m.max_len));
    c.set("scale_embeddings", m.scale_embeddings ? "1" : "0");
    c.set("positional_encoding", m.positional_encoding ? "1" : "0");
    c.set("tie_embeddings", m.tie_target_embeddings ? "1" : "0");
}

inline TrainConfig train_config_from(const ConfigMap& c, TrainConfig base = {}) {
    if (c.has("mode")) {
        base.mode = parse_train_mode(c.get("mode", ""));
    }
    base.lambda = c.get_double("lambda", base.lambda);
    base.lambda_warmup = c.get_uint("lambda_warmup", base.lambda_warmup);
    base.steps = c.get_uint("steps", base.steps);
    base.batch_tokens = c.get_uint("batch_tokens", base.batch_tokens);
    base.warmup = c.get_uint("warmup", base.warmup);
    base.lr_scale = c.get_double("lr_scale", base.lr_scale);
    base.adam.beta1 = c.get_double("adam_beta1", base.adam.beta1);
    base.adam.beta2 = c.get_double("adam_beta2", base.adam.beta2);
    base.adam.eps = c.get_double("adam_eps", base.adam.eps);
    base.clip_norm = c.get_double("clip_norm", base.clip_norm);
    base.seed = c.get_uint("seed", base.seed);
    base.log_interval = c.get_uint("log_interval", base.log_interval);
    base.checkpoint_interval = c.get_uint("checkpoint_interval", base.checkpoint_interval);
    base.validate();
    return base;
}

inline void train_config_to(const TrainConfig& t, ConfigMap& c) {
    auto num = [](double v) {
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    };
    c.set("mode", to_string(t.mode));
    c.set("lambda", num(t.lambda));
    c.set("lambda_warmup", std::to_string(t.lambda_warmup));
    c.set("steps", std::to_string(t.steps));
    c.set("batch_tokens", std::to_string(t.batch_tokens));
    c.set("warmup", std::to_string(t.warmup));
    c.set("lr_scale", num(t.lr_scale));
    c.set("adam_beta1", num(t.adam.beta1));
    c.set("adam_beta2", num(t.adam.beta2));
    c.set("adam_eps", num(t.adam.eps));
    c.set("clip_norm", num(t.clip_norm));
    c.set("seed", std::to_string(t.seed));
    c.set("log_interval", std::to_string(t.log_interval));
    c.set("checkpoint_interval", std::to_string(t.checkpoint_interval));
}

// Everything a run needs to continue bit-identically.
template <class T>
struct TrainState {
    Model<T> model;
    Adam<T> adam;
    RngState data_rng;
    RngState dropout_rng;
    RngState gate_rng;
    std::size_t step = 0;  // completed optimizer steps
};

template <class T>
TrainState<T> make_train_state(Model<T> model, const TrainConfig& cfg) {
    return {std::move(model), Adam<T>(cfg.adam), RngState(cfg.seed, kDataStream), RngState(cfg.seed, kDropoutStream),
            RngState(cfg.seed, kGateStream), 0};
}

template <class T>
struct JointLoss {
    Tensor<T> loss;
    double mle = 0.0;  // mean per-sentence NLL
    double l0 = 0.0;   // mean per-sentence expected L0
    std::vector<GateSet<T>> gates;
};

// Mean per-sentence label-smoothed NLL plus lambda_now times the mean
// per-sentence expected L0. `fixed_gates` supplies pattern masks indexed like
// the corpus (fixed mode only).
template <class T>
JointLoss<T> joint_loss(const Model<T>& m, const Corpus& corpus, const std::vector<std::size_t>& batch,
                        GateMode mode, double lambda_now, const ForwardContext& ctx, RngState* gate_rng,
                        const std::vector<std::vector<T>>* fixed_gates = nullptr,
                        const std::vector<std::vector<std::vector<double>>>* frozen_noise = nullptr) {
    if (batch.empty()) {
        throw DataError("empty training batch");
    }
    JointLoss<T> out;
    Tensor<T> nll_sum, pen_sum;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t i = batch[b];
        GateOptions<T> opt;
        opt.mode = mode;
        opt.gate_rng = gate_rng;
        if (frozen_noise) {
            opt.uniforms = &(*frozen_noise)[b];
        }
        if (mode == GateMode::fixed) {
            if (!fixed_gates) {
                throw ContractError("fixed gate mode needs pattern masks");
            }
            opt.fixed = (*fixed_gates)[i];
        }
        auto sl = sentence_loss(m, corpus.src[i], corpus.tgt[i], ctx, opt);
        nll_sum = nll_sum.defined() ? add(nll_sum, sl.nll) : sl.nll;
        if (mode == GateMode::train || mode == GateMode::eval) {
            pen_sum = pen_sum.defined() ? add(pen_sum, sl.penalty) : sl.penalty;
        }
        out.gates.push_back(std::move(sl.gates));
    }
    const T inv_b = T(1) / static_cast<T>(batch.size());
    out.loss = scale(nll_sum, inv_b);
    out.mle = static_cast<double>(out.loss.item());
    if (pen_sum.defined()) {
        auto pen = scale(pen_sum, inv_b);
        out.l0 = static_cast<double>(pen.item());
        if (lambda_now != 0.0) {
            out.loss = add(out.loss, scale(pen, static_cast<T>(lambda_now)));
        }
    }
    if (!std::isfinite(static_cast<double>(out.loss.item()))) {
        throw NumericError("non-finite training loss (mle=" + std::to_string(out.mle) +
                           ", l0=" + std::to_string(out.l0) + ")");
    }
    return out;
}

struct LogRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double mle = 0.0;
    double l0 = 0.0;
    double lambda = 0.0;
    double lr = 0.0;
    double sparsity = 0.0;  // batch fraction of expected gates equal to zero
    double wall = 0.0;      // seconds since the run started
};

inline std::string format_log_record(const LogRecord& r) {
    std::ostringstream os;
    os << std::setprecision(6) << "step=" << r.step << " loss=" << r.loss << " mle=" << r.mle << " l0=" << r.l0
       << " lambda=" << r.lambda << " lr=" << r.lr << " sparsity=" << r.sparsity << " wall=" << std::fixed
       << std::setprecision(2) << r.wall;
    return os.str();
}

template <class T>
GateMode train_gate_mode(const Model<T>& m, TrainMode mode) {
    if (uses_learned_gates(mode)) {
        if (!m.has_gates()) {
            throw ConfigError("model has no gate predictor; cannot train with L0Drop");
        }
        return GateMode::train;
    }
    return mode == TrainMode::finetune_pattern ? GateMode::fixed : GateMode::disabled;
}

struct TrainHooks {
    std::function<void(const LogRecord&)> on_log;
    std::function<void(std::size_t step)> on_checkpoint;
};

// Runs optimizer steps state.step+1 .. cfg.steps.
template <class T>
std::vector<LogRecord> train(TrainState<T>& st, const Corpus& corpus, const TrainConfig& cfg,
                             const TrainHooks& hooks = {}, const std::vector<std::vector<T>>* fixed_gates = nullptr) {
    cfg.validate();
    if (corpus.size() == 0) {
        throw DataError("training corpus is empty");
    }
    const GateMode gmode = train_gate_mode(st.model, cfg.mode);
    if (gmode == GateMode::fixed && (!fixed_gates || fixed_gates->size() != corpus.size())) {
        throw ContractError("pattern training needs one mask per corpus sentence");
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<LogRecord> log;
    ForwardContext ctx{true, &st.dropout_rng};
    while (st.step < cfg.steps) {
        const std::size_t step = st.step + 1;
        const auto batch = sample_batch(corpus, cfg.batch_tokens, st.data_rng);
        const double lam = uses_learned_gates(cfg.mode) ? lambda_schedule(step, cfg.lambda, cfg.lambda_warmup) : 0.0;
        st.model.params.zero_grad();
        auto jl = joint_loss(st.model, corpus, batch, gmode, lam, ctx, &st.gate_rng, fixed_gates);
        backward(jl.loss);
        clip_grad_norm(st.model.params, cfg.clip_norm);
        const double lr = cfg.lr_scale * lr_schedule(step, st.model.cfg.d, cfg.warmup);
        st.adam.step(st.model.params, lr);
        st.step = step;
        if (step % cfg.log_interval == 0 || step == cfg.steps) {
            LogRecord r;
            r.step = step;
            r.loss = static_cast<double>(jl.loss.item());
            r.mle = jl.mle;
            r.l0 = jl.l0;
            r.lambda = lam;
            r.lr = lr;
            std::size_t closed = 0, total = 0;
            for (const auto& gs : jl.gates) {
                for (std::size_t i = 0; i < gs.size(); ++i) {
                    if (gs.pad_mask[i]) {
                        continue;
                    }
                    ++total;
                    const bool shut = gmode == GateMode::train
                                          ? expected_gate(static_cast<double>(gs.log_alphas[i]), st.model.hc) == 0.0
                                          : gs.gates[i] == T(0);
                    closed += shut;
                }
            }
            r.sparsity = total ? static_cast<double>(closed) / static_cast<double>(total) : 0.0;
            r.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log.push_back(r);
            if (hooks.on_log) {
                hooks.on_log(r);
            }
        }
        if (hooks.on_checkpoint && cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0) {
            hooks.on_checkpoint(step);
        }
    }
    return log;
}

// Pattern masks for every corpus sentence (in source-vocabulary tokens).
template <class T>
std::vector<std::vector<T>> pattern_masks(const SparsityPattern& p, const Corpus& c) {
    std::vector<std::vector<T>> out;
    out.reserve(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        const auto toks = c.src_vocab.decode(c.src[i]);
        const auto* tags = c.tags.empty() ? nullptr : &c.tags[i];
        const auto g = mask_sentence(p, toks, tags);
        out.emplace_back(g.begin(), g.end());
    }
    return out;
}

struct EvalResult {
    double sparsity = 0.0;
    double token_accuracy = 0.0;
    double ngram = 0.0;
    std::size_t sentences = 0;
    std::size_t fallbacks = 0;
};

// Greedy or beam decoding of the first `limit` sentences (0: all) with the
// given gates; sparsity counts zero gates over non-pad source positions.
template <class T>
EvalResult evaluate(const Model<T>& m, const Corpus& c, const DecodeOptions& opt, std::size_t limit = 0,
                    const std::vector<std::vector<T>>* fixed_gates = nullptr) {
    const std::size_t n = limit ? std::min(limit, c.size()) : c.size();
    if (n == 0) {
        throw DataError("evaluation corpus is empty");
    }
    TokenAccuracy acc;
    NgramOverlap ng;
    std::vector<GateSet<T>> sets;
    EvalResult r;
    for (std::size_t i = 0; i < n; ++i) {
        std::span<const T> fixed;
        if (opt.gate_mode == GateMode::fixed) {
            fixed = (*fixed_gates)[i];
        }
        auto tr = translate(m, c.src[i], opt, fixed);
        acc.add(tr.tokens, c.tgt[i]);
        ng.add(tr.tokens, c.tgt[i]);
        r.fallbacks += tr.fell_back;
        sets.push_back(std::move(tr.gates));
    }
    r.sparsity = sparsity_rate<T>(sets);
    r.token_accuracy = acc.value();
    r.ngram = ng.value();
    r.sentences = n;
    return r;
}

struct GridRow {
    double lambda = 0.0;
    EvalResult eval;
    double final_loss = 0.0;
};

inline std::string format_grid_row(const GridRow& g) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << "lambda=" << g.lambda << " sparsity=" << g.eval.sparsity
       << " token_accuracy=" << g.eval.token_accuracy << " ngram=" << g.eval.ngram
       << " sentences=" << g.eval.sentences;
    return os.str();
}

// Adds zero-initialized gate predictors for `placement` to a baseline model.
template <class T>
Model<T> with_gates(const Model<T>& baseline, const GatePlacement& placement) {
    Model<T> m{baseline.cfg, baseline.hc, placement, baseline.params.clone()};
    for (auto l : placement.layers) {
        if (!m.params.contains(gate_param_name(l))) {
            m.params.tensors.emplace(gate_param_name(l), GatePredictor<T>::zeros(m.cfg.d).w);
        }
    }
    return m;
}

template <class T>
struct FinetuneOutcome {
    std::vector<GridRow> table;
    std::vector<TrainState<T>> runs;
};

// Finetunes a copy of `baseline` with L0Drop once per lambda (every parameter
// updates; optimizer and schedules restart) and evaluates sparsity and
// quality with expected gates.
template <class T>
FinetuneOutcome<T> finetune_l0drop(const Model<T>& baseline, const Corpus& train_corpus, const Corpus& eval_corpus,
                                   TrainConfig cfg, const std::vector<double>& lambdas,
                                   const DecodeOptions& eval_opt, std::size_t eval_limit = 0,
                                   const TrainHooks& hooks = {}) {
    if (lambdas.empty()) {
        throw ConfigError("lambda grid is empty");
    }
    cfg.mode = TrainMode::finetune_l0drop;
    FinetuneOutcome<T> out;
    for (double lam : lambdas) {
        cfg.lambda = lam;
        cfg.validate();
        auto st = make_train_state(with_gates(baseline, baseline.placement), cfg);
        const auto log = train(st, train_corpus, cfg, hooks);
        GridRow row;
        row.lambda = lam;
        row.final_loss = log.empty() ? 0.0 : log.back().loss;
        DecodeOptions eo = eval_opt;
        eo.gate_mode = GateMode::eval;
        row.eval = evaluate(st.model, eval_corpus, eo, eval_limit);
        out.table.push_back(row);
        out.runs.push_back(std::move(st));
    }
    return out;
}

}  // namespace l0drop
