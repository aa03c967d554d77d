#pragma once

#include <algorithm>
#include <cstddef>

namespace sct::detail {

// Row-major matrix kernels, cache-tiled for the small-M tall-N shapes that
// im2col convolution produces. Parallelism, when requested, is over disjoint
// output tiles only and every output element is accumulated in a fixed
// (k-ascending) order by a single thread, so results are bitwise independent
// of the worker count.

inline constexpr int kGemmJTile = 512;   // B column band kept hot across rows
inline constexpr int kGemmKTile = 256;   // dot-product block for abt form

// C(M x N) = A(M x K) * B(K x N), optionally accumulating into C.
inline void gemm(const float* __restrict a, const float* __restrict b, float* __restrict c,
                 int m, int n, int k, bool accumulate = false, bool par = false) {
    const int jtiles = (n + kGemmJTile - 1) / kGemmJTile;
#pragma omp parallel for schedule(static) if (par)
    for (int jt = 0; jt < jtiles; ++jt) {
        const int j0 = jt * kGemmJTile;
        const int j1 = std::min(n, j0 + kGemmJTile);
        for (int i = 0; i < m; ++i) {
            float* ci = c + static_cast<std::size_t>(i) * n;
            if (!accumulate) {
                for (int j = j0; j < j1; ++j) ci[j] = 0.0f;
            }
            const float* ai = a + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) {
                const float av = ai[p];
                const float* bp = b + static_cast<std::size_t>(p) * n;
                for (int j = j0; j < j1; ++j) ci[j] += av * bp[j];
            }
        }
    }
}

// C(M x N) = A(M x K) * B(N x K)^T: blocked row-by-row dot products.
inline void gemm_abt(const float* __restrict a, const float* __restrict b, float* __restrict c,
                     int m, int n, int k, bool accumulate = false, bool par = false) {
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<std::size_t>(i) * k;
        float* ci = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) ci[j] = 0.0f;
        }
        for (int p0 = 0; p0 < k; p0 += kGemmKTile) {
            const int p1 = std::min(k, p0 + kGemmKTile);
            for (int j = 0; j < n; ++j) {
                const float* bj = b + static_cast<std::size_t>(j) * k;
                float acc = 0.0f;
                for (int p = p0; p < p1; ++p) acc += ai[p] * bj[p];
                ci[j] += acc;
            }
        }
    }
}

// C(M x N) = A(K x M)^T * B(K x N): column-gather form for dW of linear.
inline void gemm_atb(const float* __restrict a, const float* __restrict b, float* __restrict c,
                     int m, int n, int k, bool accumulate = false, bool par = false) {
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        float* ci = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) ci[j] = 0.0f;
        }
        for (int p = 0; p < k; ++p) {
            const float av = a[static_cast<std::size_t>(p) * m + i];
            const float* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace sct::detail
