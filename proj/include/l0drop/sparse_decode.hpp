#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/kernels.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

// Cross-attention keys and values of one decoder layer, rows x d.
template <class T>
struct ProjectedMemory {
    std::vector<T> keys;
    std::vector<T> values;
};

// Shortened source side: row 0 is a zero vector standing for every pruned
// position, rows 1..N' are the retained encodings scaled by their gates.
// counts[0] = N - N' and counts[t] = 1 otherwise. Built once per sentence and
// shared by all decoder layers and steps.
template <class T>
struct CompactedMemory {
    std::vector<std::size_t> indices;
    std::size_t d = 0;
    std::vector<T> x_bar;  // (N'+1) x d
    std::vector<T> counts;
    std::size_t source_length = 0;  // N, non-pad positions only
    std::vector<ProjectedMemory<T>> layers;

    std::size_t retained() const { return indices.size(); }
    std::size_t rows() const { return indices.size() + 1; }
};

// Baseline memory: every position, gated encodings with zero rows for pruned
// positions, padding hidden.
template <class T>
struct DenseMemory {
    std::size_t d = 0;
    std::size_t n = 0;
    std::vector<T> x;
    std::vector<unsigned char> allowed;
    std::vector<ProjectedMemory<T>> layers;

    std::size_t rows() const { return n; }
};

template <class T>
using CrossMemory = std::variant<DenseMemory<T>, CompactedMemory<T>>;

// `encodings` are the ungated top-layer outputs [N x d] (row-major).
template <class T>
CompactedMemory<T> compact(std::span<const T> encodings, std::size_t d, const GateSet<T>& gates) {
    const std::size_t n = gates.size();
    if (encodings.size() != n * d) {
        throw DimensionError("compact: encodings do not match " + std::to_string(n) + " gates of width " +
                             std::to_string(d));
    }
    CompactedMemory<T> mem;
    mem.d = d;
    for (std::size_t i = 0; i < n; ++i) {
        if (!gates.pad_mask.empty() && gates.pad_mask[i]) {
            continue;
        }
        ++mem.source_length;
        if (gates.gates[i] != T(0)) {
            mem.indices.push_back(i);
        }
    }
    if (mem.indices.empty()) {
        throw DegenerateMemoryError("compact: every gate of the sentence is closed");
    }
    mem.x_bar.assign(mem.rows() * d, T(0));
    mem.counts.assign(mem.rows(), T(1));
    mem.counts[0] = static_cast<T>(mem.source_length - mem.retained());
    for (std::size_t r = 0; r < mem.indices.size(); ++r) {
        const std::size_t i = mem.indices[r];
        const T g = gates.gates[i];
        const T* src = encodings.data() + i * d;
        T* dst = mem.x_bar.data() + (r + 1) * d;
        for (std::size_t c = 0; c < d; ++c) {
            dst[c] = g * src[c];
        }
    }
    return mem;
}

template <class T>
CompactedMemory<T> compact(const Tensor<T>& encodings, const GateSet<T>& gates) {
    return compact<T>(encodings.data(), encodings.cols(), gates);
}

// `gated` is the gated encoder output [N x d].
template <class T>
DenseMemory<T> dense_memory(std::span<const T> gated, std::size_t d, const GateSet<T>& gates) {
    DenseMemory<T> mem;
    mem.d = d;
    mem.n = gated.size() / d;
    mem.x.assign(gated.begin(), gated.end());
    mem.allowed.resize(mem.n);
    for (std::size_t i = 0; i < mem.n; ++i) {
        mem.allowed[i] = gates.pad_mask.empty() || !gates.pad_mask[i];
    }
    return mem;
}

// Computes per-layer cross-attention K = X Wk and V = X Wv for each decoder layer.
template <class T>
void project_memory(const ModelParams<T>& p, const ModelConfig& cfg, std::span<const T> x, std::size_t rows,
                    std::vector<ProjectedMemory<T>>& layers) {
    layers.clear();
    layers.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto pre = layer_prefix("decoder", l) + ".cross_attn";
        auto& pm = layers[l];
        pm.keys.resize(rows * cfg.d);
        pm.values.resize(rows * cfg.d);
        kernels::gemm_nn<T>(rows, cfg.d, cfg.d, x.data(), p.get(pre + ".Wk").values().data(), pm.keys.data(), false);
        kernels::gemm_nn<T>(rows, cfg.d, cfg.d, x.data(), p.get(pre + ".Wv").values().data(), pm.values.data(),
                            false);
    }
}

template <class T>
void project_memory(const ModelParams<T>& p, const ModelConfig& cfg, CompactedMemory<T>& mem) {
    project_memory<T>(p, cfg, mem.x_bar, mem.rows(), mem.layers);
}

template <class T>
void project_memory(const ModelParams<T>& p, const ModelConfig& cfg, DenseMemory<T>& mem) {
    project_memory<T>(p, cfg, mem.x, mem.rows(), mem.layers);
}

// Count-weighted multi-head attention for one projected query q [d]:
// a_t = c_t exp(e_t) / sum_s c_s exp(e_s), e = q K^T / sqrt(d / heads).
// Empty `counts` means unit weights; empty `allowed` means every row is
// visible. The max shift only considers rows with positive weight so a zero
// count can never swallow the normalizer. `weights` (optional) receives
// heads x rows attention weights.
template <class T>
void attend_with_counts(std::span<const T> q, std::span<const T> keys, std::span<const T> values,
                        std::size_t rows, std::size_t heads, std::span<const T> counts,
                        std::span<const unsigned char> allowed, std::span<T> out, std::span<T> weights = {},
                        std::vector<T>* scratch = nullptr) {
    const std::size_t d = q.size();
    if (heads == 0 || d % heads != 0 || keys.size() != rows * d || values.size() != rows * d || out.size() != d ||
        (!counts.empty() && counts.size() != rows) || (!allowed.empty() && allowed.size() != rows)) {
        throw DimensionError("attend_with_counts: inconsistent shapes");
    }
    const std::size_t dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> local;
    std::vector<T>& e = scratch ? *scratch : local;
    e.resize(rows);
    std::fill(out.begin(), out.end(), T(0));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t t = 0; t < rows; ++t) {
            e[t] = sc * kernels::dot<T>(dh, q.data() + c0, keys.data() + t * d + c0);
            const bool live = (allowed.empty() || allowed[t]) && (counts.empty() || counts[t] > T(0));
            if (live) {
                mx = std::max(mx, e[t]);
            }
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw ContractError("attend_with_counts: no row carries attention weight");
        }
        T z = T(0);
        for (std::size_t t = 0; t < rows; ++t) {
            const bool visible = allowed.empty() || allowed[t];
            const T w = visible ? (counts.empty() ? T(1) : counts[t]) * std::exp(e[t] - mx) : T(0);
            e[t] = w;
            z += w;
        }
        T* o = out.data() + c0;
        for (std::size_t t = 0; t < rows; ++t) {
            const T a = e[t] / z;
            if (!weights.empty()) {
                weights[h * rows + t] = a;
            }
            if (a != T(0)) {
                const T* vr = values.data() + t * d + c0;
                for (std::size_t c = 0; c < dh; ++c) {
                    o[c] += a * vr[c];
                }
            }
        }
    }
}

// One layer's count-attention against a compacted memory.
template <class T>
void attend_with_counts(std::span<const T> q, const CompactedMemory<T>& mem, std::size_t layer, std::size_t heads,
                        std::span<T> out) {
    const auto& pm = mem.layers.at(layer);
    attend_with_counts<T>(q, pm.keys, pm.values, mem.rows(), heads, mem.counts, {}, out);
}

// Uniform accessors over either memory kind.
template <class T>
struct MemoryView {
    std::size_t rows = 0;
    std::span<const T> counts;
    std::span<const unsigned char> allowed;
    const std::vector<ProjectedMemory<T>>* layers = nullptr;
};

template <class T>
MemoryView<T> view_of(const CrossMemory<T>& mem) {
    return std::visit(
        [](const auto& m) {
            MemoryView<T> v;
            v.rows = m.rows();
            v.layers = &m.layers;
            if constexpr (std::is_same_v<std::decay_t<decltype(m)>, CompactedMemory<T>>) {
                v.counts = m.counts;
            } else {
                v.allowed = m.allowed;
            }
            return v;
        },
        mem);
}

// Cross-attention sublayer for one decoder state y [d] (before the residual):
// q = y Wq, count-attention over the cached memory, then Wo.
template <class T>
void sparse_cross_attention_layer(std::span<const T> y, const T* wq, const T* wo, const MemoryView<T>& mem,
                                  std::size_t layer, std::size_t heads, std::span<T> out,
                                  std::span<T> weights = {}, std::vector<T>* scratch = nullptr) {
    const std::size_t d = y.size();
    std::vector<T> q(d), ctx(d);
    kernels::gemv_row<T>(d, d, y.data(), wq, q.data());
    const auto& pm = (*mem.layers)[layer];
    attend_with_counts<T>(q, pm.keys, pm.values, mem.rows, heads, mem.counts, mem.allowed, ctx, weights, scratch);
    kernels::gemv_row<T>(d, d, ctx.data(), wo, out.data());
}

// Timing of dense versus compacted cross-attention for one synthetic sentence.
struct BenchRecord {
    std::size_t n = 0;
    std::size_t n_retained = 0;
    std::size_t m = 0;
    std::size_t d = 0;
    std::size_t heads = 0;
    double dense_ns_per_step = 0.0;
    double sparse_ns_per_step = 0.0;
    double speedup = 0.0;
};

inline std::string format_bench_record(const BenchRecord& r) {
    std::ostringstream os;
    os << "N=" << r.n << " N'=" << r.n_retained << " M=" << r.m << " d=" << r.d << " heads=" << r.heads
       << " dense_ns_per_step=" << static_cast<long long>(std::llround(r.dense_ns_per_step))
       << " sparse_ns_per_step=" << static_cast<long long>(std::llround(r.sparse_ns_per_step))
       << " speedup=" << std::fixed;
    os.precision(3);
    os << r.speedup;
    return os.str();
}

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size() / 2;
    return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

}  // namespace detail

// Median wall-clock per decoded step over `repetitions` runs. Each run covers
// building the memory (compaction for the sparse path), projecting its keys
// and values, and M decoding steps of query projection, attention and output
// projection. round(sparsity * N) positions are pruned at random.
template <class T = float>
BenchRecord bench_cross_attention(std::size_t n, double sparsity, std::size_t m, std::size_t d, std::size_t heads,
                                  std::size_t repetitions, std::uint64_t seed = 7) {
    if (n == 0 || m == 0 || d == 0 || heads == 0 || d % heads != 0 || repetitions == 0 || sparsity < 0.0 ||
        sparsity >= 1.0) {
        throw ConfigError("bench: invalid configuration");
    }
    RngState rng(seed, 0xbe7c4);
    auto rand_vec = [&](std::size_t k, double s) {
        std::vector<T> v(k);
        for (auto& x : v) {
            x = static_cast<T>(rng.normal() * s);
        }
        return v;
    };
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    const auto wq = rand_vec(d * d, ws), wk = rand_vec(d * d, ws), wv = rand_vec(d * d, ws), wo = rand_vec(d * d, ws);
    const auto enc = rand_vec(n * d, 1.0);
    const auto queries = rand_vec(m * d, 1.0);

    GateSet<T> gs;
    gs.gates.assign(n, T(1));
    gs.pad_mask.assign(n, 0);
    gs.log_alphas.assign(n, T(0));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) {
        perm[i] = i;
    }
    for (std::size_t i = n; i-- > 1;) {
        std::swap(perm[i], perm[rng.below(i + 1)]);
    }
    const auto pruned = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(n)));
    for (std::size_t i = 0; i < std::min(pruned, n - 1); ++i) {
        gs.gates[perm[i]] = T(0);
    }
    gs.open_mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        gs.open_mask[i] = gs.gates[i] != T(0);
    }

    std::vector<T> out(d), acc(d, T(0)), q(d), ctx(d), scratch;
    auto run_steps = [&](std::span<const T> keys, std::span<const T> values, std::size_t rows,
                         std::span<const T> counts) {
        for (std::size_t s = 0; s < m; ++s) {
            kernels::gemv_row<T>(d, d, queries.data() + s * d, wq.data(), q.data());
            attend_with_counts<T>(q, keys, values, rows, heads, counts, {}, ctx, {}, &scratch);
            kernels::gemv_row<T>(d, d, ctx.data(), wo.data(), out.data());
            acc[s % d] += out[0];
        }
    };
    using Clock = std::chrono::steady_clock;
    std::vector<double> dense_t, sparse_t;
    std::size_t retained = 0;
    std::vector<T> keys, values;
    for (std::size_t r = 0; r < repetitions; ++r) {
        {
            const auto t0 = Clock::now();
            std::vector<T> gated(enc);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t c = 0; c < d; ++c) {
                    gated[i * d + c] *= gs.gates[i];
                }
            }
            keys.resize(n * d);
            values.resize(n * d);
            kernels::gemm_nn<T>(n, d, d, gated.data(), wk.data(), keys.data(), false);
            kernels::gemm_nn<T>(n, d, d, gated.data(), wv.data(), values.data(), false);
            run_steps(keys, values, n, {});
            dense_t.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
        }
        {
            const auto t0 = Clock::now();
            auto mem = compact<T>(enc, d, gs);
            retained = mem.retained();
            keys.resize(mem.rows() * d);
            values.resize(mem.rows() * d);
            kernels::gemm_nn<T>(mem.rows(), d, d, mem.x_bar.data(), wk.data(), keys.data(), false);
            kernels::gemm_nn<T>(mem.rows(), d, d, mem.x_bar.data(), wv.data(), values.data(), false);
            run_steps(keys, values, mem.rows(), mem.counts);
            sparse_t.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
        }
    }
    volatile T sink = acc[0];
    (void)sink;
    BenchRecord rec;
    rec.n = n;
    rec.n_retained = retained;
    rec.m = m;
    rec.d = d;
    rec.heads = heads;
    rec.dense_ns_per_step = detail::median(dense_t) / static_cast<double>(m);
    rec.sparse_ns_per_step = detail::median(sparse_t) / static_cast<double>(m);
    rec.speedup = rec.dense_ns_per_step / rec.sparse_ns_per_step;
    return rec;
}

}  // namespace l0drop
