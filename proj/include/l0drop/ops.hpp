#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/kernels.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/tensor.hpp"

namespace l0drop {

namespace detail {

struct BroadcastPlan {
    Shape out;
    bool same = true;
    std::vector<std::size_t> a_index;
    std::vector<std::size_t> b_index;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        return plan;
    }
    plan.same = false;
    const std::size_t r = std::max(a.size(), b.size());
    Shape ap(r, 1), bp(r, 1);
    std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    plan.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        plan.out[i] = std::max(ap[i], bp[i]);
    }
    std::vector<std::size_t> as(r), bs(r);
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = r; i-- > 0;) {
        as[i] = ap[i] == 1 ? 0 : sa;
        bs[i] = bp[i] == 1 ? 0 : sb;
        sa *= ap[i];
        sb *= bp[i];
    }
    const std::size_t n = shape_numel(plan.out);
    plan.a_index.resize(n);
    plan.b_index.resize(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t lin = 0; lin < n; ++lin) {
        std::size_t ao = 0, bo = 0;
        for (std::size_t i = 0; i < r; ++i) {
            ao += idx[i] * as[i];
            bo += idx[i] * bs[i];
        }
        plan.a_index[lin] = ao;
        plan.b_index[lin] = bo;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < plan.out[i]) {
                break;
            }
            idx[i] = 0;
        }
    }
    return plan;
}

// Elementwise binary op with broadcasting; df_da / df_db give local partials.
template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA df_da, DB df_db) {
    auto plan = broadcast_plan(a.shape(), b.shape(), name);
    const std::size_t n = shape_numel(plan.out);
    std::vector<T> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    if (plan.same) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = f(av[i], bv[i]);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = f(av[plan.a_index[i]], bv[plan.b_index[i]]);
        }
    }
    auto shape = plan.out;
    return make_result<T>(
        name, std::move(shape), std::move(out),
        [plan = std::move(plan), df_da, df_db](Node<T>& self) {
            Node<T>* an = self.inputs[0].get();
            Node<T>* bn = self.inputs[1].get();
            const std::size_t n = self.value.size();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = plan.same ? i : plan.a_index[i];
                const std::size_t ib = plan.same ? i : plan.b_index[i];
                const T g = self.grad[i];
                if (an->requires_grad) {
                    an->grad[ia] += g * df_da(an->value[ia], bn->value[ib], self.value[i]);
                }
                if (bn->requires_grad) {
                    bn->grad[ib] += g * df_db(an->value[ia], bn->value[ib], self.value[i]);
                }
            }
        },
        a, b);
}

// Elementwise unary op; df receives (x, y).
template <class T, class F, class DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F f, DF df) {
    const auto& av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = f(av[i]);
    }
    return make_result<T>(
        name, a.shape(), std::move(out),
        [df](Node<T>& self) {
            Node<T>* an = self.inputs[0].get();
            for (std::size_t i = 0; i < self.value.size(); ++i) {
                an->grad[i] += self.grad[i] * df(an->value[i], self.value[i]);
            }
        },
        a);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

// Ties route the gradient to the first argument.
template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "minimum", a, b, [](T x, T y) { return x <= y ? x : y; }, [](T x, T y, T) { return T(x <= y); },
        [](T x, T y, T) { return T(!(x <= y)); });
}

template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "maximum", a, b, [](T x, T y) { return x >= y ? x : y; }, [](T x, T y, T) { return T(x >= y); },
        [](T x, T y, T) { return T(!(x >= y)); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary_op<T>("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail::unary_op<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op<T>("sigmoid", a, [](T x) { return sigmoid_scalar(x); },
                               [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    for (const T x : a.values()) {
        if (!(x > T(0))) {
            throw DomainError("log of non-positive value");
        }
    }
    return detail::unary_op<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// Gradient passes only where lo < x < hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::unary_op<T>("clamp", a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
                               [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    return detail::make_result<T>(
        "reshape", std::move(shape), a.values(),
        [](detail::Node<T>& self) {
            auto* an = self.inputs[0].get();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += self.grad[i];
            }
        },
        a);
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (const T x : a.values()) {
        s += x;
    }
    return detail::make_result<T>(
        "sum", Shape{1}, std::vector<T>{s},
        [](detail::Node<T>& self) {
            auto* an = self.inputs[0].get();
            for (auto& g : an->grad) {
                g += self.grad[0];
            }
        },
        a);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Matrix product over the last two axes. Rank-3 operands carry a batch axis
// that must match, or one operand may be rank 2 and is broadcast.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const bool ok_rank = (a.rank() == 2 || a.rank() == 3) && (b.rank() == 2 || b.rank() == 3);
    const std::size_t m = ok_rank ? a.rows() : 0;
    const std::size_t k = ok_rank ? a.cols() : 0;
    const std::size_t k2 = ok_rank ? b.rows() : 1;
    const std::size_t n = ok_rank ? b.cols() : 0;
    const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
    if (!ok_rank || k != k2 || (ba != bb && ba != 1 && bb != 1)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t batch = std::max(ba, bb);
    const std::size_t a_step = ba == 1 ? 0 : m * k;
    const std::size_t b_step = bb == 1 ? 0 : k * n;
    std::vector<T> out(batch * m * n);
    for (std::size_t p = 0; p < batch; ++p) {
        kernels::gemm_nn<T>(m, n, k, a.values().data() + p * a_step, b.values().data() + p * b_step,
                            out.data() + p * m * n, false);
    }
    Shape shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
    return detail::make_result<T>(
        "matmul", std::move(shape), std::move(out),
        [=](detail::Node<T>& self) {
            auto* an = self.inputs[0].get();
            auto* bn = self.inputs[1].get();
            for (std::size_t p = 0; p < batch; ++p) {
                const T* g = self.grad.data() + p * m * n;
                if (an->requires_grad) {
                    kernels::gemm_nt<T>(m, k, n, g, bn->value.data() + p * b_step, an->grad.data() + p * a_step,
                                        true);
                }
                if (bn->requires_grad) {
                    kernels::gemm_tn<T>(k, n, m, an->value.data() + p * a_step, g, bn->grad.data() + p * b_step,
                                        true);
                }
            }
        },
        a, b);
}

// a[m x k] * b[n x k]^T, used for tied output projections.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<T> out(m * n);
    kernels::gemm_nt<T>(m, n, k, a.values().data(), b.values().data(), out.data(), false);
    return detail::make_result<T>(
        "matmul_nt", Shape{m, n}, std::move(out),
        [=](detail::Node<T>& self) {
            auto* an = self.inputs[0].get();
            auto* bn = self.inputs[1].get();
            if (an->requires_grad) {
                kernels::gemm_nn<T>(m, k, n, self.grad.data(), bn->value.data(), an->grad.data(), true);
            }
            if (bn->requires_grad) {
                kernels::gemm_tn<T>(n, k, m, self.grad.data(), an->value.data(), bn->grad.data(), true);
            }
        },
        a, b);
}

namespace detail {

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, int axis, const char* op) {
    const int r = static_cast<int>(s.size());
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw DimensionError(std::string(op) + ": axis out of range for shape " + shape_str(s));
    }
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) {
        sp.outer *= s[static_cast<std::size_t>(i)];
    }
    sp.len = s[static_cast<std::size_t>(axis)];
    for (int i = axis + 1; i < r; ++i) {
        sp.inner *= s[static_cast<std::size_t>(i)];
    }
    return sp;
}

}  // namespace detail

// Max-shifted softmax along `axis` (negative counts from the back).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    const auto sp = detail::split_axis(x.shape(), axis, "softmax");
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < sp.len; ++i) {
                mx = std::max(mx, xv[base + i * sp.inner]);
            }
            T z = T(0);
            for (std::size_t i = 0; i < sp.len; ++i) {
                const T e = std::exp(xv[base + i * sp.inner] - mx);
                out[base + i * sp.inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < sp.len; ++i) {
                out[base + i * sp.inner] /= z;
            }
        }
    }
    return detail::make_result<T>(
        "softmax", x.shape(), std::move(out),
        [sp](detail::Node<T>& self) {
            auto* xn = self.inputs[0].get();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    const std::size_t base = o * sp.len * sp.inner + in;
                    T dot = T(0);
                    for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t p = base + i * sp.inner;
                        dot += self.grad[p] * self.value[p];
                    }
                    for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t p = base + i * sp.inner;
                        xn->grad[p] += self.value[p] * (self.grad[p] - dot);
                    }
                }
            }
        },
        x);
}

// Normalizes over the last axis, then applies gain and bias (both shape {d}).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6)) {
    const std::size_t d = x.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: gain/bias size does not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            var += (row[j] - mu) * (row[j] - mu);
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.values()[j] + bias.values()[j];
        }
    }
    return detail::make_result<T>(
        "layer_norm", x.shape(), std::move(out),
        [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            auto* xn = self.inputs[0].get();
            auto* gn = self.inputs[1].get();
            auto* bn = self.inputs[2].get();
            std::vector<T> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = self.grad.data() + r * d;
                const T* h = xhat.data() + r * d;
                T mean_dh = T(0), mean_dh_h = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    if (gn->requires_grad) {
                        gn->grad[j] += g[j] * h[j];
                    }
                    if (bn->requires_grad) {
                        bn->grad[j] += g[j];
                    }
                    dxhat[j] = g[j] * gn->value[j];
                    mean_dh += dxhat[j];
                    mean_dh_h += dxhat[j] * h[j];
                }
                if (xn->requires_grad) {
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        xn->grad[r * d + j] += inv_std[r] * (dxhat[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        },
        x, gain, bias);
}

// Row gather from an embedding table [V x d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
    if (table.rank() != 2) {
        throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
    }
    if (ids.empty()) {
        throw DimensionError("embedding: empty id sequence");
    }
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<T> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw DomainError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                              std::to_string(v));
        }
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return detail::make_result<T>(
        "embedding", Shape{ids.size(), d}, std::move(out),
        [d, idv = std::move(idv)](detail::Node<T>& self) {
            auto* tn = self.inputs[0].get();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                T* dst = tn->grad.data() + static_cast<std::size_t>(idv[i]) * d;
                const T* src = self.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += src[j];
                }
            }
        },
        table);
}

// Inverted dropout. Identity (no RNG draws) when !train or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, T p, RngState* rng, bool train) {
    if (!train || p <= T(0)) {
        return x;
    }
    if (p >= T(1) || rng == nullptr) {
        throw ContractError("dropout: rate must be in [0,1) and needs an RngState in training");
    }
    const T keep_scale = T(1) / (T(1) - p);
    std::vector<T> mask(x.numel());
    for (auto& m : mask) {
        m = rng->uniform() >= static_cast<double>(p) ? keep_scale : T(0);
    }
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.values()[i] * mask[i];
    }
    return detail::make_result<T>(
        "dropout", x.shape(), std::move(out),
        [mask = std::move(mask)](detail::Node<T>& self) {
            auto* xn = self.inputs[0].get();
            for (std::size_t i = 0; i < mask.size(); ++i) {
                xn->grad[i] += self.grad[i] * mask[i];
            }
        },
        x);
}

// Summed label-smoothed cross-entropy over rows of logits [M x V]. The
// smoothed target puts smoothing/V on every class plus (1 - smoothing) on the
// gold class. Rows whose target equals ignore_index contribute nothing.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, T smoothing = T(0),
                        int ignore_index = -1) {
    if (logits.rank() != 2 || logits.rows() != targets.size()) {
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    }
    const std::size_t m = logits.rows(), v = logits.cols();
    const T off = smoothing / static_cast<T>(v);
    const T on = T(1) - smoothing + off;
    std::vector<T> probs(m * v);
    T total = T(0);
    for (std::size_t r = 0; r < m; ++r) {
        if (targets[r] == ignore_index) {
            continue;
        }
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
            throw DomainError("cross_entropy: target id out of range");
        }
        const T* z = logits.values().data() + r * v;
        T mx = *std::max_element(z, z + v);
        T s = T(0);
        for (std::size_t c = 0; c < v; ++c) {
            s += std::exp(z[c] - mx);
        }
        const T lse = mx + std::log(s);
        T qz = T(0);
        for (std::size_t c = 0; c < v; ++c) {
            probs[r * v + c] = std::exp(z[c] - lse);
            qz += (static_cast<int>(c) == targets[r] ? on : off) * z[c];
        }
        total += lse - qz;
    }
    std::vector<int> tv(targets.begin(), targets.end());
    return detail::make_result<T>(
        "cross_entropy", Shape{1}, std::vector<T>{total},
        [m, v, on, off, ignore_index, tv = std::move(tv), probs = std::move(probs)](detail::Node<T>& self) {
            auto* ln = self.inputs[0].get();
            const T g = self.grad[0];
            for (std::size_t r = 0; r < m; ++r) {
                if (tv[r] == ignore_index) {
                    continue;
                }
                for (std::size_t c = 0; c < v; ++c) {
                    const T q = static_cast<int>(c) == tv[r] ? on : off;
                    ln->grad[r * v + c] += g * (probs[r * v + c] - q);
                }
            }
        },
        logits);
}

// Concatenation along `axis`; all other dimensions must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis = 0) {
    if (parts.empty()) {
        throw DimensionError("concat: no inputs");
    }
    const Shape& s0 = parts[0].shape();
    const auto sp0 = detail::split_axis(s0, axis, "concat");
    const std::size_t ax = axis < 0 ? s0.size() + static_cast<std::size_t>(axis) : static_cast<std::size_t>(axis);
    std::vector<std::size_t> lens;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = s0;
        if (a.size() != b.size()) {
            throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
        }
        a[ax] = b[ax] = 0;
        if (a != b) {
            throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
        }
        lens.push_back(p.shape()[ax]);
        total += p.shape()[ax];
    }
    Shape out_shape = s0;
    out_shape[ax] = total;
    std::vector<T> out(shape_numel(out_shape));
    const std::size_t outer = sp0.outer, inner = sp0.inner;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].values();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.data() + o * lens[k] * inner, lens[k] * inner,
                        out.data() + (o * total + offset) * inner);
        }
        offset += lens[k];
    }
    return detail::make_result_list<T>(
        "concat", std::move(out_shape), std::move(out),
        [outer, inner, total, lens](detail::Node<T>& self) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < lens.size(); ++k) {
                auto* pn = self.inputs[k].get();
                if (pn->requires_grad) {
                    for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t i = 0; i < lens[k] * inner; ++i) {
                            pn->grad[o * lens[k] * inner + i] += self.grad[(o * total + offset) * inner + i];
                        }
                    }
                }
                offset += lens[k];
            }
        },
        parts);
}

// Selects rows (axis 0) by index; repeated indices accumulate gradients.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> indices) {
    if (indices.empty()) {
        throw DimensionError("index_select: empty index list");
    }
    const std::size_t n = x.dim(0);
    const std::size_t row = x.numel() / n;
    Shape shape = x.shape();
    shape[0] = indices.size();
    std::vector<T> out(indices.size() * row);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n) {
            throw DimensionError("index_select: index " + std::to_string(indices[i]) + " out of range " +
                                 std::to_string(n));
        }
        std::copy_n(x.values().data() + indices[i] * row, row, out.data() + i * row);
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return detail::make_result<T>(
        "index_select", std::move(shape), std::move(out),
        [row, idx = std::move(idx)](detail::Node<T>& self) {
            auto* xn = self.inputs[0].get();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                for (std::size_t j = 0; j < row; ++j) {
                    xn->grad[idx[i] * row + j] += self.grad[i * row + j];
                }
            }
        },
        x);
}

// Key mask for attention: key_allowed[j] == 0 hides key j from every query;
// causal hides keys after the query position.
struct AttentionMask {
    std::vector<unsigned char> key_allowed;
    bool causal = false;

    bool allowed(std::size_t query, std::size_t key) const {
        if (!key_allowed.empty() && !key_allowed[key]) {
            return false;
        }
        return !causal || key <= query;
    }
};

// Multi-head scaled dot-product attention on pre-projected Q [J x d], K and V
// [I x d]. Heads are contiguous column blocks of width d / heads; logits use
// 1/sqrt(d / heads). Attention-weight dropout is applied after the softmax.
// When `probs` is given it receives the pre-dropout weights as heads x J x I.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               const AttentionMask& mask, T dropout_p = T(0), RngState* rng = nullptr,
                               bool train = false, std::vector<T>* probs = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() || k.cols() != v.cols() ||
        k.rows() != v.rows()) {
        throw DimensionError("attention: incompatible Q/K/V shapes " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const std::size_t d = q.cols();
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: model dimension " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    if (!mask.key_allowed.empty() && mask.key_allowed.size() != k.rows()) {
        throw DimensionError("attention: key mask length does not match key count");
    }
    const std::size_t jn = q.rows(), in = k.rows(), dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    const bool use_dropout = train && dropout_p > T(0);
    if (use_dropout && rng == nullptr) {
        throw ContractError("attention dropout needs an RngState");
    }
    std::vector<T> attn(heads * jn * in, T(0));
    std::vector<T> drop;
    if (use_dropout) {
        drop.resize(attn.size());
    }
    std::vector<T> out(jn * d, T(0));
    const T* qv = q.values().data();
    const T* kv = k.values().data();
    const T* vv = v.values().data();
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < jn; ++i) {
            T* a = attn.data() + (h * jn + i) * in;
            T mx = -std::numeric_limits<T>::infinity();
            bool any = false;
            for (std::size_t j = 0; j < in; ++j) {
                if (!mask.allowed(i, j)) {
                    continue;
                }
                any = true;
                a[j] = sc * kernels::dot<T>(dh, qv + i * d + c0, kv + j * d + c0);
                mx = std::max(mx, a[j]);
            }
            if (!any) {
                throw ContractError("attention: query row " + std::to_string(i) + " has every key masked");
            }
            T z = T(0);
            for (std::size_t j = 0; j < in; ++j) {
                if (mask.allowed(i, j)) {
                    a[j] = std::exp(a[j] - mx);
                    z += a[j];
                } else {
                    a[j] = T(0);
                }
            }
            for (std::size_t j = 0; j < in; ++j) {
                a[j] /= z;
            }
            T* o = out.data() + i * d + c0;
            for (std::size_t j = 0; j < in; ++j) {
                T w = a[j];
                if (use_dropout) {
                    T& dm = drop[(h * jn + i) * in + j];
                    dm = rng->uniform() >= static_cast<double>(dropout_p) ? T(1) / (T(1) - dropout_p) : T(0);
                    w *= dm;
                }
                if (w != T(0)) {
                    const T* vr = vv + j * d + c0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        o[c] += w * vr[c];
                    }
                }
            }
        }
    }
    if (probs) {
        *probs = attn;
    }
    return detail::make_result<T>(
        "attention", Shape{jn, d}, std::move(out),
        [=, attn = std::move(attn), drop = std::move(drop)](detail::Node<T>& self) {
            auto* qn = self.inputs[0].get();
            auto* kn = self.inputs[1].get();
            auto* vn = self.inputs[2].get();
            std::vector<T> da(in);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < jn; ++i) {
                    const T* a = attn.data() + (h * jn + i) * in;
                    const T* go = self.grad.data() + i * d + c0;
                    T rowdot = T(0);
                    for (std::size_t j = 0; j < in; ++j) {
                        const T dm = use_dropout ? drop[(h * jn + i) * in + j] : T(1);
                        if (vn->requires_grad && a[j] * dm != T(0)) {
                            T* gv = vn->grad.data() + j * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                gv[c] += a[j] * dm * go[c];
                            }
                        }
                        da[j] = dm * kernels::dot<T>(dh, go, vn->value.data() + j * d + c0);
                        rowdot += da[j] * a[j];
                    }
                    for (std::size_t j = 0; j < in; ++j) {
                        if (a[j] == T(0)) {
                            continue;
                        }
                        const T ds = a[j] * (da[j] - rowdot) * sc;
                        if (qn->requires_grad) {
                            T* gq = qn->grad.data() + i * d + c0;
                            const T* kr = kn->value.data() + j * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                gq[c] += ds * kr[c];
                            }
                        }
                        if (kn->requires_grad) {
                            T* gk = kn->grad.data() + j * d + c0;
                            const T* qr = qn->value.data() + i * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                gk[c] += ds * qr[c];
                            }
                        }
                    }
                }
            }
        },
        q, k, v);
}

}  // namespace l0drop
