#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/model.hpp"
#include "test_util.hpp"

using namespace l0drop;
using testutil::random_tensor;

namespace {

GatePredictor<double> predictor_from(std::vector<double> w) {
    const std::size_t d = w.size();
    return {Tensor<double>({d, 1}, std::move(w), true)};
}

// Encodings whose predicted log alphas are exactly `la` under w = e_0.
Tensor<double> encodings_with_log_alpha(const std::vector<double>& la, std::size_t d, RngState& rng) {
    auto x = random_tensor({la.size(), d}, rng);
    for (std::size_t i = 0; i < la.size(); ++i) {
        x.data()[i * d] = la[i];
    }
    return x;
}

ModelConfig small_config() {
    ModelConfig c;
    c.d = 8;
    c.ffn_dim = 16;
    c.heads = 2;
    c.layers = 2;
    c.src_vocab = 12;
    c.tgt_vocab = 11;
    return c;
}

}  // namespace

TEST(PredictLogAlpha, ZeroPredictorGivesZero) {
    RngState rng(1, 0);
    auto x = random_tensor({5, 4}, rng);
    const auto la = predict_log_alpha(x, GatePredictor<double>::zeros(4)).values();
    for (double v : la) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(PredictLogAlpha, UnitVectorExample) {
    Tensor<double> x({1, 3}, {1.0, 0.0, 0.0});
    EXPECT_EQ(predict_log_alpha(x, predictor_from({2.0, 0.0, 0.0})).values()[0], 2.0);
}

TEST(PredictLogAlpha, MatchesNaiveDotProduct) {
    RngState rng(2, 0);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 1 + t % 7, d = 2 + t % 5;
        auto x = random_tensor({n, d}, rng, -3.0, 3.0);
        auto w = random_tensor({d, 1}, rng, -3.0, 3.0);
        const auto got = predict_log_alpha(x, GatePredictor<double>{w}).values();
        for (std::size_t i = 0; i < n; ++i) {
            double ref = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                ref += x.values()[i * d + k] * w.values()[k];
            }
            EXPECT_NEAR(got[i], ref, 1e-12);
        }
    }
}

TEST(PredictLogAlpha, DimensionMismatchThrows) {
    RngState rng(3, 0);
    auto x = random_tensor({3, 4}, rng);
    EXPECT_THROW(predict_log_alpha(x, GatePredictor<double>::zeros(5)), DimensionError);
}

TEST(ApplyGatesTrain, OpenGatesPassThrough) {
    RngState rng(4, 0);
    auto x = encodings_with_log_alpha({30.0, 30.0, 30.0}, 4, rng);
    const std::vector<double> u{0.3, 0.5, 0.9};
    const auto out = apply_gates_train(x, predictor_from({1, 0, 0, 0}), {}, u);
    EXPECT_EQ(out.gated.values(), x.values());
    for (double g : out.set.gates) {
        EXPECT_EQ(g, 1.0);
    }
}

TEST(ApplyGatesTrain, ClosedGateZeroesRow) {
    RngState rng(5, 0);
    auto x = encodings_with_log_alpha({0.0, -30.0, 0.0}, 4, rng);
    const std::vector<double> u{0.5, 0.5, 0.5};
    const auto out = apply_gates_train(x, predictor_from({1, 0, 0, 0}), {}, u);
    EXPECT_EQ(out.set.gates[1], 0.0);
    EXPECT_FALSE(out.set.open_mask[1]);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(out.gated.values()[4 + k], 0.0);
    }
}

TEST(ApplyGatesTrain, RecordsSamplesAndConsumesOneDrawPerPosition) {
    RngState rng(6, 0);
    auto x = random_tensor({6, 3}, rng);
    auto w = random_tensor({3, 1}, rng, -2.0, 2.0);
    const HardConcreteParams hc;
    RngState a(9, 3), b(9, 3);
    const auto out = apply_gates_train(x, GatePredictor<double>{w}, hc, a);
    for (std::size_t i = 0; i < 6; ++i) {
        const double u = b.uniform();
        EXPECT_NEAR(out.set.gates[i], sample_gate(out.set.log_alphas[i], hc, u).g, 1e-14);
    }
    EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(ApplyGatesTrain, GradientWithFrozenNoise) {
    RngState rng(7, 0);
    for (int t = 0; t < 5; ++t) {
        auto x = random_tensor({5, 4}, rng);
        auto w = random_tensor({4, 1}, rng, -1.0, 1.0);
        std::vector<double> u(5);
        for (auto& v : u) {
            v = 0.2 + 0.6 * rng.uniform();
        }
        const HardConcreteParams hc;
        auto loss = [&] { return sum(apply_gates_train(x, GatePredictor<double>{w}, hc, u).gated); };
        const auto rep = testutil::gradcheck(loss, {w, x});
        EXPECT_LT(rep.max_rel, 1e-5) << rep.worst;
    }
}

TEST(ApplyGatesTrain, PaddingClosedAndExcludedFromPenalty) {
    RngState rng(8, 0);
    auto x = encodings_with_log_alpha({30.0, 30.0, 30.0, 30.0}, 4, rng);
    const std::vector<double> u(4, 0.5);
    const std::vector<unsigned char> pad{0, 0, 1, 1};
    const HardConcreteParams hc;
    const auto out = apply_gates_train(x, predictor_from({1, 0, 0, 0}), hc, u, pad);
    EXPECT_EQ(out.set.gates[2], 0.0);
    EXPECT_EQ(out.set.gates[3], 0.0);
    EXPECT_NEAR(out.penalty.item(), 2.0 * (1.0 - prob_zero(30.0, hc)), 1e-12);
    EXPECT_EQ(out.set.non_pad(), 2u);
    EXPECT_EQ(out.set.closed(), 0u);
}

TEST(ApplyGatesEval, Saturation) {
    RngState rng(9, 0);
    auto hi = encodings_with_log_alpha({10.0, 10.0, 10.0}, 3, rng);
    const auto open = apply_gates_eval(hi, predictor_from({1, 0, 0}), {});
    EXPECT_EQ(open.gated.values(), hi.values());
    for (auto m : open.set.open_mask) {
        EXPECT_TRUE(m);
    }
    auto lo = encodings_with_log_alpha({-10.0, -10.0}, 3, rng);
    const auto closed = apply_gates_eval(lo, predictor_from({1, 0, 0}), {});
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(closed.set.gates[i], 0.0);
        EXPECT_FALSE(closed.set.open_mask[i]);
    }
    for (double v : closed.gated.values()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(ApplyGatesEval, MixedGates) {
    RngState rng(10, 0);
    auto x = encodings_with_log_alpha({-10.0, 0.0, 10.0}, 3, rng);
    const auto out = apply_gates_eval(x, predictor_from({1, 0, 0}), {});
    EXPECT_EQ(out.set.gates[0], 0.0);
    EXPECT_NEAR(out.set.gates[1], 0.5, 1e-15);
    EXPECT_EQ(out.set.gates[2], 1.0);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_NEAR(out.gated.values()[3 + k], 0.5 * x.values()[3 + k], 1e-15);
    }
}

TEST(ApplyGatesEval, DeterministicAndOpenMaskInvariant) {
    RngState rng(11, 0);
    for (int t = 0; t < 30; ++t) {
        auto x = random_tensor({7, 4}, rng, -3.0, 3.0);
        auto w = random_tensor({4, 1}, rng, -2.0, 2.0);
        const auto a = apply_gates_eval(x, GatePredictor<double>{w}, {});
        const auto b = apply_gates_eval(x, GatePredictor<double>{w}, {});
        EXPECT_EQ(a.gated.values(), b.gated.values());
        for (std::size_t i = 0; i < 7; ++i) {
            EXPECT_EQ(bool(a.set.open_mask[i]), a.set.gates[i] > 0.0);
            if (a.set.gates[i] == 0.0) {
                for (std::size_t k = 0; k < 4; ++k) {
                    EXPECT_EQ(a.gated.values()[i * 4 + k], 0.0);
                }
            }
        }
    }
}

TEST(Penalty, ConsistentWithOpenProbabilities) {
    RngState rng(12, 0);
    const HardConcreteParams hc;
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 2 + t % 6;
        auto x = random_tensor({n, 3}, rng, -3.0, 3.0);
        auto w = random_tensor({3, 1}, rng, -2.0, 2.0);
        std::vector<unsigned char> pad(n, 0);
        pad[n - 1] = t % 2;
        const auto out = apply_gates_eval(x, GatePredictor<double>{w}, hc, pad);
        double ref = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!pad[i]) {
                ref += 1.0 - prob_zero(out.set.log_alphas[i], hc);
            }
        }
        EXPECT_NEAR(out.penalty.item(), ref, 1e-12);
    }
    auto x = random_tensor({6, 3}, rng);
    const auto zero = apply_gates_eval(x, GatePredictor<double>::zeros(3), hc);
    EXPECT_NEAR(zero.penalty.item(), 6.0 * (1.0 - 0.16818), 1e-4);
}

TEST(ApplyFixedGates, NoPenaltyAndLengthCheck) {
    RngState rng(13, 0);
    auto x = random_tensor({3, 2}, rng);
    const std::vector<double> g{1.0, 0.0, 1.0};
    const auto out = apply_fixed_gates(x, std::span<const double>(g));
    EXPECT_EQ(out.penalty.item(), 0.0);
    EXPECT_EQ(out.set.closed(), 1u);
    const std::vector<double> short_g{1.0};
    EXPECT_THROW(apply_fixed_gates(x, std::span<const double>(short_g)), DimensionError);
}

TEST(SparsityRate, Examples) {
    GateSet<double> closed{{0, 0}, {0, 0}, {0, 0}, {0, 0}};
    GateSet<double> open{{0, 0, 0}, {1, 0.5, 0}, {1, 1, 0}, {0, 0, 1}};
    std::vector<GateSet<double>> all_closed{closed}, none_closed{open}, both{closed, open};
    EXPECT_EQ(sparsity_rate<double>(all_closed), 1.0);
    EXPECT_EQ(sparsity_rate<double>(none_closed), 0.0);
    EXPECT_NEAR(sparsity_rate<double>(both), 0.5, 1e-15);
    std::vector<GateSet<double>> empty;
    EXPECT_THROW(sparsity_rate<double>(empty), DataError);
}

TEST(PlaceGates, Plans) {
    EXPECT_EQ(place_gates(GatePlacement::Kind::top, 6).layers, (std::vector<std::size_t>{6}));
    EXPECT_EQ(place_gates(GatePlacement::Kind::per_layer, 6).layers,
              (std::vector<std::size_t>{1, 2, 3, 4, 5, 6}));
    EXPECT_EQ(place_gates(GatePlacement::Kind::per_layer, 1).layers, place_gates(GatePlacement::Kind::top, 1).layers);
    EXPECT_EQ(place_gates(GatePlacement::Kind::custom, 4, {4, 2, 2}).layers, (std::vector<std::size_t>{2, 4}));
    EXPECT_THROW(place_gates(GatePlacement::Kind::custom, 4, {5}), ConfigError);
    EXPECT_THROW(place_gates(GatePlacement::Kind::custom, 4, {0, 4}), ConfigError);
    EXPECT_THROW(place_gates(GatePlacement::Kind::custom, 4, {2}), ConfigError);
    EXPECT_THROW(place_gates(GatePlacement::Kind::custom, 4, {}), ConfigError);
    EXPECT_EQ(parse_placement("per-layer"), GatePlacement::Kind::per_layer);
    EXPECT_THROW(parse_placement("bottom"), ConfigError);
}

TEST(Model, PerLayerPlacementOwnsPredictorsAndSumsPenalties) {
    auto cfg = small_config();
    cfg.layers = 3;
    RngState rng(14, 0);
    auto m = init_model<double>(cfg, rng, place_gates(GatePlacement::Kind::per_layer, 3));
    for (std::size_t l = 1; l <= 3; ++l) {
        EXPECT_TRUE(m.params.contains(gate_param_name(l)));
    }
    const std::vector<int> src{4, 5, 6, 7, 2};
    GateOptions<double> opt;
    opt.mode = GateMode::eval;
    const auto r = encode_gated(m, src, ForwardContext{}, opt);
    ASSERT_EQ(r.gate_layers.size(), 3u);
    double total = 0.0;
    for (const auto& g : r.gate_layers) {
        total += g.penalty.item();
    }
    EXPECT_NEAR(r.penalty.item(), total, 1e-12);
    EXPECT_NEAR(r.penalty.item(), 3.0 * 5.0 * (1.0 - prob_zero(0.0, m.hc)), 1e-12);
}

TEST(Model, GateInitDrawsNoRandomness) {
    const auto cfg = small_config();
    RngState a(15, 0), b(15, 0);
    const auto m = init_model<double>(cfg, a);
    const auto plain = init_transformer_params<double>(cfg, b);
    for (const auto& [name, t] : plain.tensors) {
        EXPECT_EQ(m.params.get(name).values(), t.values()) << name;
    }
    EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(Model, DisabledGatesReproduceBaselineBitExactly) {
    const auto cfg = small_config();
    RngState rng(16, 0);
    const auto m = init_model<double>(cfg, rng);
    const std::vector<int> src{4, 9, 5, 0}, tgt{6, 7, 8};
    const auto tin = shift_right(tgt);
    const auto base_mem = encode(m.params, cfg, src, ForwardContext{});
    const auto base = decode_train(m.params, cfg, tin, base_mem, non_pad_mask(src), ForwardContext{});
    GateOptions<double> off;
    const auto enc = encode_gated(m, src, ForwardContext{}, off);
    const auto gated = decode_train(m.params, cfg, tin, enc.memory, enc.memory_mask, ForwardContext{});
    EXPECT_EQ(base.values(), gated.values());
    EXPECT_EQ(enc.penalty.item(), 0.0);
    const std::vector<double> ones(src.size(), 1.0);
    GateOptions<double> fixed;
    fixed.mode = GateMode::fixed;
    fixed.fixed = ones;
    const auto enc1 = encode_gated(m, src, ForwardContext{}, fixed);
    EXPECT_EQ(decode_train(m.params, cfg, tin, enc1.memory, enc1.memory_mask, ForwardContext{}).values(),
              base.values());
}

TEST(Model, LearnedModeWithoutPredictorThrows) {
    const auto cfg = small_config();
    RngState rng(17, 0);
    auto m = init_model<double>(cfg, rng);
    m.params.tensors.erase(gate_param_name(cfg.layers));
    GateOptions<double> opt;
    opt.mode = GateMode::eval;
    const std::vector<int> src{4, 5};
    EXPECT_THROW(encode_gated(m, src, ForwardContext{}, opt), ConfigError);
    opt.mode = GateMode::train;
    EXPECT_THROW(encode_gated(m, src, ForwardContext{}, opt), ConfigError);
}

TEST(GateReport, RoundTrip) {
    GateSet<double> gs{{-1.25, 0.5, 3.0}, {0.0, 0.55, 1.0}, {0, 1, 1}, {0, 0, 0}};
    const std::vector<std::string> toks{"the", "a|b", "cat"};
    const auto line = gate_report_line<double>(toks, gs);
    const auto parsed = parse_gate_report_line(line);
    ASSERT_EQ(parsed.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(parsed[i].token, toks[i]);
        EXPECT_DOUBLE_EQ(parsed[i].log_alpha, gs.log_alphas[i]);
        EXPECT_DOUBLE_EQ(parsed[i].gate, gs.gates[i]);
        EXPECT_EQ(parsed[i].open, bool(gs.open_mask[i]));
    }
    EXPECT_THROW(parse_gate_report_line("broken"), DataError);
    const std::vector<std::string> two{"x", "y"};
    EXPECT_THROW(gate_report_line<double>(two, gs), DimensionError);
}
