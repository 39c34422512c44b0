#pragma once

#include <cstddef>

// Raw row-major matrix kernels shared by the autodiff ops and the inference path.
namespace l0drop::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c, bool accumulate) {
    if (!accumulate) {
        for (std::size_t i = 0; i < m * n; ++i) {
            c[i] = T(0);
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T s = T(0);
            for (std::size_t p = 0; p < k; ++p) {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
    }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c, bool accumulate) {
    if (!accumulate) {
        for (std::size_t i = 0; i < m * n; ++i) {
            c[i] = T(0);
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// y[n] = x[k] * W[k x n]
template <class T>
void gemv_row(std::size_t n, std::size_t k, const T* __restrict x, const T* __restrict w, T* __restrict y) {
    gemm_nn<T>(1, n, k, x, w, y, false);
}

template <class T>
T dot(std::size_t n, const T* __restrict a, const T* __restrict b) {
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

}  // namespace l0drop::kernels
