#include "baseline_reference.hpp"

#include <algorithm>

namespace reference {

using namespace l0drop;

namespace {

Tensor<double> sentence_nll(const ModelParams<double>& p, const ModelConfig& cfg, std::span<const int> src,
                            std::span<const int> tgt, const ForwardContext& ctx) {
    const auto mem = encode(p, cfg, src, ctx);
    const auto tin = shift_right(tgt);
    const auto tout = append_eos(tgt);
    const auto logits = decode_train(p, cfg, tin, mem, non_pad_mask(src), ctx);
    return cross_entropy(logits, tout, cfg.label_smoothing, kPadId);
}

// Greedy decoding by rerunning the full decoder on the growing prefix.
std::vector<int> greedy(const ModelParams<double>& p, const ModelConfig& cfg, std::span<const int> src,
                        std::size_t max_len) {
    NoGradGuard ng;
    const auto mem = encode(p, cfg, src, ForwardContext{});
    std::vector<int> prefix{kBosId}, out;
    const std::size_t v = cfg.tgt_vocab;
    while (out.size() < max_len) {
        const auto logits = decode_train(p, cfg, prefix, mem, non_pad_mask(src), ForwardContext{}).values();
        const auto last = logits.begin() + static_cast<std::ptrdiff_t>((prefix.size() - 1) * v);
        const int tok = static_cast<int>(std::max_element(last, last + static_cast<std::ptrdiff_t>(v)) - last);
        if (tok == kEosId) {
            break;
        }
        out.push_back(tok);
        prefix.push_back(tok);
    }
    return out;
}

}  // namespace

Run train_plain(const Corpus& corpus, const ModelConfig& cfg, const Settings& s) {
    RngState init_rng(s.seed, 0), data_rng(s.seed, 1), dropout_rng(s.seed, 2);
    auto params = init_transformer_params<double>(cfg, init_rng);
    Adam<double> adam(s.adam);
    ForwardContext ctx{true, &dropout_rng};
    Run run;
    for (std::size_t step = 1; step <= s.steps; ++step) {
        const auto batch = sample_batch(corpus, s.batch_tokens, data_rng);
        params.zero_grad();
        Tensor<double> sum;
        for (auto i : batch) {
            const auto nll = sentence_nll(params, cfg, corpus.src[i], corpus.tgt[i], ctx);
            sum = sum.defined() ? add(sum, nll) : nll;
        }
        const auto loss = scale(sum, 1.0 / static_cast<double>(batch.size()));
        run.losses.push_back(loss.item());
        backward(loss);
        clip_grad_norm(params, s.clip_norm);
        adam.step(params, s.lr_scale * lr_schedule(step, cfg.d, s.warmup));
    }
    for (const auto& [name, t] : params.tensors) {
        run.params[name] = t.values();
    }
    NoGradGuard ng;
    for (std::size_t i = 0; i < std::min(s.probes, corpus.size()); ++i) {
        const auto mem = encode(params, cfg, corpus.src[i], ForwardContext{});
        run.probe_logits.push_back(
            decode_train(params, cfg, shift_right(corpus.tgt[i]), mem, non_pad_mask(corpus.src[i]), ForwardContext{})
                .values());
        run.probe_greedy.push_back(
            greedy(params, cfg, corpus.src[i], std::min(cfg.max_len, 2 * corpus.src[i].size() + 10)));
    }
    return run;
}

}  // namespace reference
