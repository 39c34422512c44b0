#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "l0drop/corpus.hpp"
#include "l0drop/optim.hpp"
#include "l0drop/transformer.hpp"

// A plain encoder-decoder training loop built without any of the gating
// code, used as the reference for the gates-disabled reduction check.
namespace reference {

struct Settings {
    std::uint64_t seed = 1;
    std::size_t steps = 20;
    std::size_t batch_tokens = 64;
    std::size_t warmup = 10;
    double lr_scale = 1.0;
    double clip_norm = 1.0;
    l0drop::AdamConfig adam{};
    std::size_t probes = 5;  // leading corpus sentences used for output checks
};

struct Run {
    std::vector<double> losses;                           // one per step
    std::map<std::string, std::vector<double>> params;    // final values
    std::vector<std::vector<double>> probe_logits;        // teacher-forced, final params
    std::vector<std::vector<int>> probe_greedy;           // greedy outputs, final params
};

Run train_plain(const l0drop::Corpus& corpus, const l0drop::ModelConfig& cfg, const Settings& s);

}  // namespace reference
