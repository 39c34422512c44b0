#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/ops.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"
#include "test_util.hpp"

using namespace l0drop;
using testutil::gradcheck;
using testutil::project;
using testutil::random_away_from_zero;
using testutil::random_tensor;

namespace {

constexpr double kGradTol = 1e-5;

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            long double s = 0;
            for (std::size_t p = 0; p < k; ++p) {
                s += static_cast<long double>(a[i * k + p]) * b[p * n + j];
            }
            c[i * n + j] = static_cast<double>(s);
        }
    }
    return c;
}

}  // namespace

TEST(Rng, PhiloxKnownAnswers) {
    auto z = RngState::philox({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(z[0], 0x6627e8d5u);
    EXPECT_EQ(z[1], 0xe169c58du);
    EXPECT_EQ(z[2], 0xbc57ac4cu);
    EXPECT_EQ(z[3], 0x9b00dbd8u);
    auto f = RngState::philox({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(f[0], 0x408f276du);
    EXPECT_EQ(f[1], 0x41c83b0eu);
    EXPECT_EQ(f[2], 0xa20bc7c6u);
    EXPECT_EQ(f[3], 0x6d5451fdu);
}

TEST(Rng, SameSeedSameStream) {
    RngState a(42, 3), b(42, 3), c(43, 3), d(42, 4);
    bool differs_c = false, differs_d = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs_c |= x != c.next_u64();
        differs_d |= x != d.next_u64();
    }
    EXPECT_TRUE(differs_c);
    EXPECT_TRUE(differs_d);
}

TEST(Rng, CounterRestoreResumesStream) {
    RngState a(9);
    for (int i = 0; i < 17; ++i) {
        a.uniform();
    }
    RngState b(9);
    b.set_counter(a.counter());
    for (int i = 0; i < 10; ++i) {
        EXPECT_EQ(a.next_u64(), b.next_u64());
    }
}

TEST(Rng, UniformOpenIntervalAndMoments) {
    RngState r(1);
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GT(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    EXPECT_NEAR(s / n, 0.5, 0.005);
    EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 0.002);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
    RngState r(5);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto x = r.below(7);
        ASSERT_LT(x, 7u);
        ++hits[x];
    }
    for (int h : hits) {
        EXPECT_GT(h, 800);
    }
}

TEST(Rng, NormalMoments) {
    RngState r(11);
    double s = 0.0, s2 = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.02);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor<double>({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor<double>({0, 2}, {}), DimensionError);
    Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_EQ(t.grad().size(), t.numel());
    EXPECT_DOUBLE_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, NonFiniteResultIsError) {
    Tensor<double> big({1}, {1000.0});
    EXPECT_THROW(exp(big), NumericError);
    Tensor<double> neg({2}, {1.0, -1.0});
    EXPECT_THROW(log(neg), DomainError);
}

TEST(Matmul, HandExamples) {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> v({2, 1}, {3, 4});
    EXPECT_EQ(matmul(eye, v).values(), (std::vector<double>{3, 4}));
    Tensor<double> r({1, 2}, {1, 2});
    EXPECT_EQ(matmul(r, v).values(), (std::vector<double>{11}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
    RngState rng(3);
    auto a = random_tensor({5, 7}, rng, -1, 1, false);
    auto b = random_tensor({7, 3}, rng, -1, 1, false);
    const auto ref = naive_matmul(a.values(), b.values(), 5, 7, 3);
    const auto got = matmul(a, b).values();
    for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(got[i], ref[i], 1e-12);
    }
}

TEST(Matmul, BatchedBroadcast) {
    RngState rng(4);
    auto a = random_tensor({3, 2, 4}, rng, -1, 1, false);
    auto b = random_tensor({4, 5}, rng, -1, 1, false);
    auto c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
    for (std::size_t p = 0; p < 3; ++p) {
        std::vector<double> ap(a.values().begin() + static_cast<long>(p * 8),
                               a.values().begin() + static_cast<long>((p + 1) * 8));
        const auto ref = naive_matmul(ap, b.values(), 2, 4, 5);
        for (std::size_t i = 0; i < 10; ++i) {
            EXPECT_NEAR(c.values()[p * 10 + i], ref[i], 1e-12);
        }
    }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    Tensor<double> a = Tensor<double>::zeros({2, 3});
    Tensor<double> b = Tensor<double>::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,5]"), std::string::npos);
    }
}

TEST(Softmax, Examples) {
    auto u = softmax(Tensor<double>({3}, {0, 0, 0}));
    for (double v : u.values()) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
    auto big = softmax(Tensor<double>({2}, {1000, 1000}));
    EXPECT_DOUBLE_EQ(big.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(big.values()[1], 0.5);
    // exp(k) / (e + e^2 + e^3) evaluated independently
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    auto s = softmax(Tensor<double>({3}, {1, 2, 3}));
    EXPECT_NEAR(s.values()[0], std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(s.values()[0], 0.0900305731703805, 1e-12);
    EXPECT_NEAR(s.values()[1], 0.244728471054798, 1e-12);
    EXPECT_NEAR(s.values()[2], 0.665240955774822, 1e-12);
}

TEST(Softmax, RandomInputsLandOnSimplex) {
    RngState rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(9);
        auto x = random_tensor({r, c}, rng, -30, 30, false);
        for (int axis : {0, 1}) {
            auto s = softmax(x, axis);
            const std::size_t outer = axis == 1 ? r : c, len = axis == 1 ? c : r;
            for (std::size_t o = 0; o < outer; ++o) {
                double total = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    const double v = axis == 1 ? s.at(o, i) : s.at(i, o);
                    ASSERT_GE(v, 0.0);
                    total += v;
                }
                EXPECT_NEAR(total, 1.0, 1e-12);
            }
        }
    }
}

TEST(Backward, SumGivesOnes) {
    Tensor<double> p({2, 2}, {1, -2, 3, 0.5}, true);
    backward(sum(p));
    for (double g : p.grad()) {
        EXPECT_DOUBLE_EQ(g, 1.0);
    }
}

TEST(Backward, QuadraticGradient) {
    Tensor<double> p({2}, {1, 2}, true);
    backward(sum(mul(p, p)));
    EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(p.grad()[1], 4.0);
}

TEST(Backward, NonScalarIsContractError) {
    Tensor<double> p({2}, {1, 2}, true);
    EXPECT_THROW(backward(scale(p, 2.0)), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Tensor<double> p({2}, {1, 2}, true);
    NoGradGuard g;
    auto y = mul(p, p);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, SharedSubexpressionAccumulates) {
    Tensor<double> p({1}, {3.0}, true);
    auto q = mul(p, p);
    backward(sum(add(q, q)));
    EXPECT_DOUBLE_EQ(p.grad()[0], 12.0);
}

// Randomized finite-difference checks for every differentiable kernel.
class GradientProperty : public ::testing::TestWithParam<int> {};

TEST_P(GradientProperty, ElementwiseAndBroadcast) {
    RngState rng(100 + static_cast<std::uint64_t>(GetParam()));
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
    auto a = random_tensor({r, c}, rng);
    auto b = random_tensor({c}, rng);
    auto w = random_tensor({r, c}, rng, -1, 1, false);
    auto pos = random_tensor({r, c}, rng, 0.2, 2.0);
    auto check = [&](auto f, std::vector<Tensor<double>> in) {
        const auto rep = gradcheck([&] { return project(f(), w); }, in);
        EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
    };
    check([&] { return add(a, b); }, {a, b});
    check([&] { return sub(a, b); }, {a, b});
    check([&] { return mul(a, b); }, {a, b});
    check([&] { return scale(a, 1.7); }, {a});
    check([&] { return add_scalar(a, -0.3); }, {a});
    check([&] { return sigmoid(scale(a, 3.0)); }, {a});
    check([&] { return exp(a); }, {a});
    check([&] { return log(pos); }, {pos});
    check([&] { return mean(mul(a, a)); }, {a});
    check([&] { return reshape(reshape(a, {c, r}), {r, c}); }, {a});
}

TEST_P(GradientProperty, KinkedOpsAwayFromKinks) {
    RngState rng(200 + static_cast<std::uint64_t>(GetParam()));
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
    auto a = random_away_from_zero({r, c}, rng);
    auto b = random_away_from_zero({r, c}, rng);
    // keep |a - b| away from zero for minimum / maximum
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (std::abs(a.data()[i] - b.data()[i]) < 0.05) {
            b.data()[i] = a.data()[i] + 0.1;
        }
    }
    auto w = random_tensor({r, c}, rng, -1, 1, false);
    auto check = [&](auto f, std::vector<Tensor<double>> in) {
        const auto rep = gradcheck([&] { return project(f(), w); }, in);
        EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
    };
    check([&] { return relu(a); }, {a});
    check([&] { return minimum(a, b); }, {a, b});
    check([&] { return maximum(a, b); }, {a, b});
    // clamp bounds at +-0.5 need a margin around them too
    for (auto& x : a.data()) {
        if (std::abs(std::abs(x) - 0.5) < 0.03) {
            x += 0.1;
        }
    }
    check([&] { return clamp(a, -0.5, 0.5); }, {a});
}

TEST_P(GradientProperty, MatmulVariants) {
    RngState rng(300 + static_cast<std::uint64_t>(GetParam()));
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4), bsz = 1 + rng.below(3);
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto a3 = random_tensor({bsz, m, k}, rng);
    auto bt = random_tensor({n, k}, rng);
    auto w = random_tensor({m, n}, rng, -1, 1, false);
    auto w3 = random_tensor({bsz, m, n}, rng, -1, 1, false);
    auto r1 = gradcheck([&] { return project(matmul(a, b), w); }, {a, b});
    EXPECT_LT(r1.max_rel, kGradTol) << r1.worst;
    auto r2 = gradcheck([&] { return project(matmul(a3, b), w3); }, {a3, b});
    EXPECT_LT(r2.max_rel, kGradTol) << r2.worst;
    auto r3 = gradcheck([&] { return project(matmul_nt(a, bt), w); }, {a, bt});
    EXPECT_LT(r3.max_rel, kGradTol) << r3.worst;
}

TEST_P(GradientProperty, SoftmaxAndLayerNorm) {
    RngState rng(400 + static_cast<std::uint64_t>(GetParam()));
    const std::size_t r = 1 + rng.below(4), c = 2 + rng.below(5);
    auto x = random_tensor({r, c}, rng, -2, 2);
    auto gain = random_tensor({c}, rng, 0.5, 1.5);
    auto bias = random_tensor({c}, rng);
    auto w = random_tensor({r, c}, rng, -1, 1, false);
    for (int axis : {0, 1}) {
        auto rep = gradcheck([&] { return project(softmax(x, axis), w); }, {x});
        EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
    }
    auto rep = gradcheck([&] { return project(layer_norm(x, gain, bias), w); }, {x, gain, bias});
    EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
}

TEST_P(GradientProperty, GatherConcatSelect) {
    RngState rng(500 + static_cast<std::uint64_t>(GetParam()));
    auto table = random_tensor({6, 3}, rng);
    std::vector<int> ids{1, 4, 1, 0};
    auto w = random_tensor({4, 3}, rng, -1, 1, false);
    auto r1 = gradcheck([&] { return project(embedding(table, std::span<const int>(ids)), w); }, {table});
    EXPECT_LT(r1.max_rel, kGradTol) << r1.worst;

    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({1, 3}, rng);
    auto wc = random_tensor({3, 3}, rng, -1, 1, false);
    auto r2 = gradcheck([&] { return project(concat<double>({a, b}, 0), wc); }, {a, b});
    EXPECT_LT(r2.max_rel, kGradTol) << r2.worst;
    auto c = random_tensor({2, 2}, rng);
    auto wc1 = random_tensor({2, 5}, rng, -1, 1, false);
    auto r3 = gradcheck([&] { return project(concat<double>({a, c}, 1), wc1); }, {a, c});
    EXPECT_LT(r3.max_rel, kGradTol) << r3.worst;

    std::vector<std::size_t> idx{2, 0, 2};
    auto x = random_tensor({4, 3}, rng);
    auto wi = random_tensor({3, 3}, rng, -1, 1, false);
    auto r4 = gradcheck([&] { return project(index_select(x, std::span<const std::size_t>(idx)), wi); }, {x});
    EXPECT_LT(r4.max_rel, kGradTol) << r4.worst;
}

TEST_P(GradientProperty, CrossEntropyWithSmoothing) {
    RngState rng(600 + static_cast<std::uint64_t>(GetParam()));
    auto logits = random_tensor({4, 5}, rng, -3, 3);
    std::vector<int> tgt{0, 3, -1, 4};
    auto rep = gradcheck([&] { return cross_entropy(logits, std::span<const int>(tgt), 0.1, -1); }, {logits});
    EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
}

TEST_P(GradientProperty, DropoutWithFixedMask) {
    RngState rng(700 + static_cast<std::uint64_t>(GetParam()));
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({3, 4}, rng, -1, 1, false);
    const RngState start(77);
    auto rep = gradcheck(
        [&] {
            RngState r = start;
            return project(dropout(x, 0.3, &r, true), w);
        },
        {x});
    EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
}

TEST_P(GradientProperty, MultiHeadAttention) {
    RngState rng(800 + static_cast<std::uint64_t>(GetParam()));
    const std::size_t heads = 2, d = 4, j = 1 + rng.below(4), i = 1 + rng.below(4);
    auto q = random_tensor({j, d}, rng);
    auto k = random_tensor({i, d}, rng);
    auto v = random_tensor({i, d}, rng);
    auto w = random_tensor({j, d}, rng, -1, 1, false);
    AttentionMask mask;
    mask.key_allowed.assign(i, 1);
    if (i > 1) {
        mask.key_allowed[i - 1] = 0;
    }
    auto rep = gradcheck([&] { return project(multi_head_attention(q, k, v, heads, mask), w); }, {q, k, v});
    EXPECT_LT(rep.max_rel, kGradTol) << rep.worst;
    if (j == i) {
        AttentionMask causal{{}, true};
        auto rc = gradcheck([&] { return project(multi_head_attention(q, k, v, heads, causal), w); }, {q, k, v});
        EXPECT_LT(rc.max_rel, kGradTol) << rc.worst;
    }
}

INSTANTIATE_TEST_SUITE_P(Random, GradientProperty, ::testing::Range(0, 8));

TEST(CrossEntropy, ZeroSmoothingIsPlainNll) {
    Tensor<double> logits({2, 3}, {0.2, -1.0, 2.0, 1.0, 1.0, 0.0});
    std::vector<int> tgt{2, 0};
    const double got = cross_entropy(logits, std::span<const int>(tgt), 0.0).item();
    double expect = 0.0;
    for (int r = 0; r < 2; ++r) {
        double z = 0.0;
        for (int c = 0; c < 3; ++c) {
            z += std::exp(logits.at(r, c));
        }
        expect += std::log(z) - logits.at(r, tgt[r]);
    }
    EXPECT_NEAR(got, expect, 1e-14);
}

TEST(CrossEntropy, SmoothedTargetMixesUniform) {
    Tensor<double> logits({1, 4}, {0.5, -0.5, 1.5, 0.0});
    std::vector<int> tgt{1};
    const double ls = 0.1;
    double z = 0.0;
    for (int c = 0; c < 4; ++c) {
        z += std::exp(logits.at(0, c));
    }
    double expect = 0.0;
    for (int c = 0; c < 4; ++c) {
        const double q = (c == 1 ? 1.0 - ls : 0.0) + ls / 4.0;
        expect -= q * (logits.at(0, c) - std::log(z));
    }
    EXPECT_NEAR(cross_entropy(logits, std::span<const int>(tgt), ls).item(), expect, 1e-14);
}

TEST(Dropout, EvalIsIdentityAndTrainIsSeeded) {
    RngState rng(1);
    auto x = random_tensor({4, 4}, rng, -1, 1, false);
    EXPECT_EQ(dropout(x, 0.5, nullptr, false).values(), x.values());
    RngState a(5), b(5);
    EXPECT_EQ(dropout(x, 0.5, &a, true).values(), dropout(x, 0.5, &b, true).values());
    auto y = dropout(x, 0.5, &a, true).values();
    for (std::size_t i = 0; i < y.size(); ++i) {
        EXPECT_TRUE(y[i] == 0.0 || y[i] == 2.0 * x.values()[i]);
    }
}

TEST(Attention, SinglePositionReturnsValue) {
    Tensor<double> q({1, 4}, {0.3, -0.2, 1.0, 0.5});
    Tensor<double> k({1, 4}, {1, 2, 3, 4});
    Tensor<double> v({1, 4}, {9, 8, 7, 6});
    auto o = multi_head_attention(q, k, v, 2, AttentionMask{});
    EXPECT_EQ(o.values(), v.values());
}

TEST(Attention, EqualLogitsAverageValues) {
    Tensor<double> q = Tensor<double>::zeros({2, 2});
    Tensor<double> k({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor<double> v({3, 2}, {1, 10, 2, 20, 3, 30});
    auto o = multi_head_attention(q, k, v, 1, AttentionMask{});
    EXPECT_NEAR(o.at(0, 0), 2.0, 1e-15);
    EXPECT_NEAR(o.at(1, 1), 20.0, 1e-13);
}

TEST(Attention, MatchesExplicitWeightsOracle) {
    RngState rng(21);
    auto q = random_tensor({3, 4}, rng, -1, 1, false);
    auto k = random_tensor({5, 4}, rng, -1, 1, false);
    auto v = random_tensor({5, 4}, rng, -1, 1, false);
    std::vector<double> probs;
    auto o = multi_head_attention(q, k, v, 2, AttentionMask{}, 0.0, nullptr, false, &probs);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < 3; ++i) {
            std::vector<double> e(5);
            double z = 0.0;
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < 2; ++c) {
                    s += q.at(i, h * 2 + c) * k.at(j, h * 2 + c);
                }
                e[j] = std::exp(s / std::sqrt(2.0));
                z += e[j];
            }
            double row = 0.0;
            for (std::size_t c = 0; c < 2; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < 5; ++j) {
                    acc += e[j] / z * v.at(j, h * 2 + c);
                }
                EXPECT_NEAR(o.at(i, h * 2 + c), acc, 1e-12);
            }
            for (std::size_t j = 0; j < 5; ++j) {
                row += probs[(h * 3 + i) * 5 + j];
            }
            EXPECT_NEAR(row, 1.0, 1e-12);
        }
    }
}

TEST(Attention, FullyMaskedRowIsContractError) {
    Tensor<double> q = Tensor<double>::zeros({1, 2});
    Tensor<double> k = Tensor<double>::zeros({2, 2});
    AttentionMask mask{{0, 0}, false};
    EXPECT_THROW(multi_head_attention(q, k, k, 1, mask), ContractError);
}

TEST(FloatMode, KernelsRunInSinglePrecision) {
    Tensor<float> a({1, 3}, {1.f, 2.f, 3.f}, true);
    auto s = softmax(a);
    float total = 0.f;
    for (float v : s.values()) {
        total += v;
    }
    EXPECT_NEAR(total, 1.f, 1e-6f);
    backward(sum(mul(a, a)));
    EXPECT_FLOAT_EQ(a.grad()[2], 6.f);
}
