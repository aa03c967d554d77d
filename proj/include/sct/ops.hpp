#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/gemm.hpp"
#include "sct/tape.hpp"
#include "sct/tensor.hpp"

namespace sct {

namespace detail {

// Unrolls one sample (C,H,W) into a (C*kh*kw) x (OH*OW) column matrix.
inline void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int OH, int OW, float* col) {
    const int P = OH * OW;
    for (int ci = 0; ci < C; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                float* row = col + (static_cast<std::size_t>(ci) * kh * kw + ki * kw + kj) * P;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        for (int ow = 0; ow < OW; ++ow) row[oh * OW + ow] = 0.0f;
                        continue;
                    }
                    const float* xr = x + (static_cast<std::size_t>(ci) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        row[oh * OW + ow] = (iw >= 0 && iw < W) ? xr[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

// Transposed unroll: one (OH*OW) row per output pixel, K patch values
// contiguous. This is the B operand of the weight-gradient gemm.
inline void im2col_t(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                     int OH, int OW, float* col_t) {
    const int K = C * kh * kw;
    for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
            float* row = col_t + (static_cast<std::size_t>(oh) * OW + ow) * K;
            int r = 0;
            for (int ci = 0; ci < C; ++ci) {
                const float* xc = x + static_cast<std::size_t>(ci) * H * W;
                for (int ki = 0; ki < kh; ++ki) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        for (int kj = 0; kj < kw; ++kj) row[r++] = 0.0f;
                        continue;
                    }
                    const float* xr = xc + static_cast<std::size_t>(ih) * W;
                    for (int kj = 0; kj < kw; ++kj) {
                        const int iw = ow * stride - pad + kj;
                        row[r++] = (iw >= 0 && iw < W) ? xr[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

// Scatter-adds a column matrix back onto the (C,H,W) sample.
inline void col2im_add(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int OH, int OW, float* x) {
    const int P = OH * OW;
    for (int ci = 0; ci < C; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const float* row = col + (static_cast<std::size_t>(ci) * kh * kw + ki * kw + kj) * P;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    float* xr = x + (static_cast<std::size_t>(ci) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) xr[iw] += row[oh * OW + ow];
                    }
                }
            }
        }
    }
}

// Grow-only thread-local scratch; im2col overwrites the used prefix fully.
inline std::vector<float>& col_scratch() {
    thread_local std::vector<float> buf;
    return buf;
}

inline std::vector<float>& dcol_scratch() {
    thread_local std::vector<float> buf;
    return buf;
}

}  // namespace detail

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// 2D convolution. weight is (Cout, Cin, kh, kw); bias, when given, (1, Cout, 1, 1).
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor* bias,
                     int stride, int padding) {
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if (input.c() != weight.c()) {
        throw std::invalid_argument("conv2d: input channels do not match weight: input " +
                                    input.shape().str() + " vs weight " + weight.shape().str());
    }
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const int M = weight.n(), kh = weight.h(), kw = weight.w();
    const int OH = conv_out_dim(H, kh, stride, padding);
    const int OW = conv_out_dim(W, kw, stride, padding);
    if (OH < 1 || OW < 1) {
        throw std::invalid_argument("conv2d: kernel " + weight.shape().str() +
                                    " does not fit input " + input.shape().str());
    }
    if (bias && (bias->c() != M || bias->numel() != static_cast<std::size_t>(M))) {
        throw std::invalid_argument("conv2d: bias shape " + bias->shape().str() +
                                    " does not match Cout=" + std::to_string(M));
    }

    const int K = C * kh * kw;
    const int P = OH * OW;
    Tensor out(N, M, OH, OW);
    const float* bptr = bias ? bias->data() : nullptr;

#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        auto& col = detail::col_scratch();
        if (col.size() < static_cast<std::size_t>(K) * P)
            col.resize(static_cast<std::size_t>(K) * P);
        detail::im2col(input.data() + input.index(n, 0, 0, 0), C, H, W, kh, kw, stride, padding,
                       OH, OW, col.data());
        float* on = out.data() + out.index(n, 0, 0, 0);
        detail::gemm(weight.data(), col.data(), on, M, P, K);
        if (bptr) {
            for (int m = 0; m < M; ++m) {
                const float b = bptr[m];
                for (int p = 0; p < P; ++p) on[static_cast<std::size_t>(m) * P + p] += b;
            }
        }
    }

    const bool need = input.requires_grad() || weight.requires_grad() ||
                      (bias && bias->requires_grad());
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, w = weight, o = out;
        Tensor b = bias ? *bias : Tensor();
        tape.record([x, w, b, o, stride, padding, N, C, H, W, M, kh, kw, OH, OW, K, P]() mutable {
            const float* gout = o.grad();
            const bool need_x = x.requires_grad();
            const bool need_w = w.requires_grad();
            const bool need_b = b.defined() && b.requires_grad();

            std::vector<float> wt;
            if (need_x) {
                wt.resize(static_cast<std::size_t>(K) * M);
                for (int m = 0; m < M; ++m)
                    for (int k = 0; k < K; ++k)
                        wt[static_cast<std::size_t>(k) * M + m] =
                            w.data()[static_cast<std::size_t>(m) * K + k];
            }
            float* gx = need_x ? x.grad() : nullptr;

            // Samples are split over a fixed number of chunks (independent of
            // the worker count); dW/db accumulate per chunk and the partials
            // are reduced in chunk order afterwards, which keeps every result
            // bitwise stable for any number of threads.
            const int chunks = std::min(8, N);
            std::vector<std::vector<float>> wpart, bpart;
            if (need_w) wpart.assign(chunks, std::vector<float>(static_cast<std::size_t>(M) * K, 0.0f));
            if (need_b) bpart.assign(chunks, std::vector<float>(M, 0.0f));

#pragma omp parallel for schedule(dynamic, 1)
            for (int ch = 0; ch < chunks; ++ch) {
                auto& col = detail::col_scratch();
                auto& dcol = detail::dcol_scratch();
                if (col.size() < static_cast<std::size_t>(K) * P)
                    col.resize(static_cast<std::size_t>(K) * P);
                if (need_x && dcol.size() < static_cast<std::size_t>(K) * P)
                    dcol.resize(static_cast<std::size_t>(K) * P);
                const int n0 = static_cast<int>(static_cast<long long>(ch) * N / chunks);
                const int n1 = static_cast<int>(static_cast<long long>(ch + 1) * N / chunks);
                for (int n = n0; n < n1; ++n) {
                    const float* go_n = gout + static_cast<std::size_t>(n) * M * P;
                    if (need_w) {
                        // dW += dOut_n (M x P) * col_t (P x K).
                        detail::im2col_t(x.data() + static_cast<std::size_t>(n) * C * H * W, C, H,
                                         W, kh, kw, stride, padding, OH, OW, col.data());
                        detail::gemm(go_n, col.data(), wpart[ch].data(), M, K, P,
                                     /*accumulate=*/true);
                    }
                    if (need_b) {
                        float* bp = bpart[ch].data();
                        for (int m = 0; m < M; ++m) {
                            const float* gr = go_n + static_cast<std::size_t>(m) * P;
                            float acc = 0.0f;
                            for (int p = 0; p < P; ++p) acc += gr[p];
                            bp[m] += acc;
                        }
                    }
                    if (need_x) {
                        detail::gemm(wt.data(), go_n, dcol.data(), K, P, M);
                        detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, padding, OH, OW,
                                           gx + static_cast<std::size_t>(n) * C * H * W);
                    }
                }
            }

            if (need_w) {
                float* gw = w.grad();
                for (int ch = 0; ch < chunks; ++ch)
                    for (std::size_t i = 0; i < wpart[ch].size(); ++i) gw[i] += wpart[ch][i];
            }
            if (need_b) {
                float* gb = b.grad();
                for (int ch = 0; ch < chunks; ++ch)
                    for (int m = 0; m < M; ++m) gb[m] += bpart[ch][m];
            }
        });
    }
    return out;
}

// Fully connected layer. input is treated as (N, D) with D = C*H*W;
// weight is (K, D, 1, 1), bias (1, K, 1, 1). Output is (N, K, 1, 1).
inline Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor* bias) {
    const int N = input.n();
    const int D = input.c() * input.h() * input.w();
    const int K = weight.n();
    if (weight.c() * weight.h() * weight.w() != D) {
        throw std::invalid_argument("linear: input width " + std::to_string(D) + " from " +
                                    input.shape().str() + " does not match weight " +
                                    weight.shape().str());
    }
    if (bias && bias->numel() != static_cast<std::size_t>(K)) {
        throw std::invalid_argument("linear: bias shape " + bias->shape().str() +
                                    " does not match K=" + std::to_string(K));
    }

    Tensor out(N, K, 1, 1);
    detail::gemm_abt(input.data(), weight.data(), out.data(), N, K, D, false, /*par=*/true);
    if (bias) {
        const float* bp = bias->data();
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) out.data()[static_cast<std::size_t>(n) * K + k] += bp[k];
    }

    const bool need = input.requires_grad() || weight.requires_grad() ||
                      (bias && bias->requires_grad());
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, w = weight, o = out;
        Tensor b = bias ? *bias : Tensor();
        tape.record([x, w, b, o, N, D, K]() mutable {
            const float* gout = o.grad();
            if (x.requires_grad())
                detail::gemm(gout, w.data(), x.grad(), N, D, K, /*accumulate=*/true, /*par=*/true);
            if (w.requires_grad())
                detail::gemm_atb(gout, x.data(), w.grad(), K, D, N, /*accumulate=*/true, /*par=*/true);
            if (b.defined() && b.requires_grad()) {
                float* gb = b.grad();
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < K; ++k) gb[k] += gout[static_cast<std::size_t>(n) * K + k];
            }
        });
    }
    return out;
}

// Elementwise max(0, x). The subgradient at exactly 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& input) {
    Tensor out(input.shape());
    const std::size_t total = input.numel();
    const float* xp = input.data();
    float* op = out.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i)
        op[i] = xp[i] > 0.0f ? xp[i] : 0.0f;

    out.set_requires_grad(input.requires_grad());
    if (input.requires_grad()) {
        Tensor x = input, o = out;
        tape.record([x, o, total]() mutable {
            const float* gout = o.grad();
            const float* xv = x.data();
            float* gx = x.grad();
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i)
                if (xv[i] > 0.0f) gx[i] += gout[i];
        });
    }
    return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const std::size_t total = a.numel();
    const float* ap = a.data();
    const float* bp = b.data();
    float* op = out.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i) op[i] = ap[i] + bp[i];

    const bool need = a.requires_grad() || b.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor ta = a, tb = b, o = out;
        tape.record([ta, tb, o, total]() mutable {
            const float* gout = o.grad();
            if (ta.requires_grad()) {
                float* ga = ta.grad();
#pragma omp parallel for schedule(static)
                for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i)
                    ga[i] += gout[i];
            }
            if (tb.requires_grad()) {
                float* gb = tb.grad();
#pragma omp parallel for schedule(static)
                for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i)
                    gb[i] += gout[i];
            }
        });
    }
    return out;
}

// Elementwise (Hadamard) product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const std::size_t total = a.numel();
    for (std::size_t i = 0; i < total; ++i) out.data()[i] = a.data()[i] * b.data()[i];

    const bool need = a.requires_grad() || b.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor ta = a, tb = b, o = out;
        tape.record([ta, tb, o, total]() mutable {
            const float* gout = o.grad();
            if (ta.requires_grad()) {
                float* ga = ta.grad();
                for (std::size_t i = 0; i < total; ++i) ga[i] += gout[i] * tb.data()[i];
            }
            if (tb.requires_grad()) {
                float* gb = tb.grad();
                for (std::size_t i = 0; i < total; ++i) gb[i] += gout[i] * ta.data()[i];
            }
        });
    }
    return out;
}

// x * s with a broadcast 1-element scalar tensor.
inline Tensor scalar_mul(Tape& tape, const Tensor& input, const Tensor& scalar) {
    if (scalar.numel() != 1)
        throw std::invalid_argument("scalar_mul: scalar operand has shape " + scalar.shape().str());
    Tensor out(input.shape());
    const float s = scalar.data()[0];
    const std::size_t total = input.numel();
    for (std::size_t i = 0; i < total; ++i) out.data()[i] = input.data()[i] * s;

    const bool need = input.requires_grad() || scalar.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, sc = scalar, o = out;
        tape.record([x, sc, o, s, total]() mutable {
            const float* gout = o.grad();
            if (x.requires_grad()) {
                float* gx = x.grad();
                for (std::size_t i = 0; i < total; ++i) gx[i] += gout[i] * s;
            }
            if (sc.requires_grad()) {
                double acc = 0.0;
                for (std::size_t i = 0; i < total; ++i)
                    acc += static_cast<double>(gout[i]) * x.data()[i];
                sc.grad()[0] += static_cast<float>(acc);
            }
        });
    }
    return out;
}

// x + s with a broadcast 1-element scalar tensor.
inline Tensor scalar_add(Tape& tape, const Tensor& input, const Tensor& scalar) {
    if (scalar.numel() != 1)
        throw std::invalid_argument("scalar_add: scalar operand has shape " + scalar.shape().str());
    Tensor out(input.shape());
    const float s = scalar.data()[0];
    const std::size_t total = input.numel();
    for (std::size_t i = 0; i < total; ++i) out.data()[i] = input.data()[i] + s;

    const bool need = input.requires_grad() || scalar.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, sc = scalar, o = out;
        tape.record([x, sc, o, total]() mutable {
            const float* gout = o.grad();
            if (x.requires_grad()) {
                float* gx = x.grad();
                for (std::size_t i = 0; i < total; ++i) gx[i] += gout[i];
            }
            if (sc.requires_grad()) {
                double acc = 0.0;
                for (std::size_t i = 0; i < total; ++i) acc += gout[i];
                sc.grad()[0] += static_cast<float>(acc);
            }
        });
    }
    return out;
}

// Sum of all elements, as a scalar tensor. Handy for gradient probes.
inline Tensor reduce_sum(Tape& tape, const Tensor& input) {
    Tensor out(1, 1, 1, 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < input.numel(); ++i) acc += input.data()[i];
    out.data()[0] = static_cast<float>(acc);

    out.set_requires_grad(input.requires_grad());
    if (input.requires_grad()) {
        Tensor x = input, o = out;
        tape.record([x, o]() mutable {
            const float g = o.grad()[0];
            float* gx = x.grad();
            for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

// Mean softmax cross-entropy over the batch, max-stabilized.
// logits are (N, K, 1, 1); labels are class indices in [0, K).
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                    const std::vector<int>& labels) {
    const int N = logits.n();
    const int K = logits.c() * logits.h() * logits.w();
    if (static_cast<int>(labels.size()) != N) {
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(N));
    }
    for (int n = 0; n < N; ++n) {
        if (labels[n] < 0 || labels[n] >= K) {
            throw std::invalid_argument("softmax_cross_entropy: label " +
                                        std::to_string(labels[n]) + " at index " +
                                        std::to_string(n) + " outside [0," + std::to_string(K) + ")");
        }
    }

    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const float* row = logits.data() + static_cast<std::size_t>(n) * K;
        float mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k] - mx));
        total += std::log(se) - static_cast<double>(row[labels[n]] - mx);
    }
    Tensor out(1, 1, 1, 1);
    out.data()[0] = static_cast<float>(total / N);

    out.set_requires_grad(logits.requires_grad());
    if (logits.requires_grad()) {
        Tensor lg = logits, o = out;
        std::vector<int> lab = labels;
        tape.record([lg, o, lab, N, K]() mutable {
            const float g = o.grad()[0];
            float* gx = lg.grad();
            for (int n = 0; n < N; ++n) {
                const float* row = lg.data() + static_cast<std::size_t>(n) * K;
                float mx = row[0];
                for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
                double se = 0.0;
                for (int k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k] - mx));
                float* gr = gx + static_cast<std::size_t>(n) * K;
                for (int k = 0; k < K; ++k) {
                    const float p =
                        static_cast<float>(std::exp(static_cast<double>(row[k] - mx)) / se);
                    gr[k] += g * (p - (k == lab[n] ? 1.0f : 0.0f)) / N;
                }
            }
        });
    }
    return out;
}

// Weighted sum of scalar tensors: sum_i w_i * s_i.
inline Tensor weighted_sum(Tape& tape, const std::vector<Tensor>& scalars,
                           const std::vector<float>& weights) {
    if (scalars.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: " + std::to_string(scalars.size()) +
                                    " terms vs " + std::to_string(weights.size()) + " weights");
    }
    Tensor out(1, 1, 1, 1);
    double acc = 0.0;
    bool need = false;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i].numel() != 1)
            throw std::invalid_argument("weighted_sum: term " + std::to_string(i) +
                                        " is not scalar: " + scalars[i].shape().str());
        acc += static_cast<double>(weights[i]) * scalars[i].data()[0];
        need = need || scalars[i].requires_grad();
    }
    out.data()[0] = static_cast<float>(acc);

    out.set_requires_grad(need);
    if (need) {
        std::vector<Tensor> terms = scalars;
        std::vector<float> ws = weights;
        Tensor o = out;
        tape.record([terms, ws, o]() mutable {
            const float g = o.grad()[0];
            for (std::size_t i = 0; i < terms.size(); ++i)
                if (terms[i].requires_grad()) terms[i].grad()[0] += g * ws[i];
        });
    }
    return out;
}

}  // namespace sct
