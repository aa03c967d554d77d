#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sct/tape.hpp"
#include "sct/tensor.hpp"

namespace sct {

// Ordered set of (H, W) target sizes for multi-scale sampling.
struct ScaleSet {
    std::vector<std::pair<int, int>> sizes;

    ScaleSet() = default;
    explicit ScaleSet(std::vector<std::pair<int, int>> s) : sizes(std::move(s)) { validate(); }

    int count() const { return static_cast<int>(sizes.size()); }

    void validate() const {
        if (sizes.empty()) throw std::invalid_argument("ScaleSet: at least one scale required");
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            if (sizes[i].first <= 0 || sizes[i].second <= 0)
                throw std::invalid_argument("ScaleSet: nonpositive dims at index " +
                                            std::to_string(i));
            for (std::size_t j = i + 1; j < sizes.size(); ++j)
                if (sizes[i] == sizes[j])
                    throw std::invalid_argument("ScaleSet: duplicate scale " + size_str(sizes[i]));
        }
    }

    // Advisory spacing rule: consecutive gaps are multiples of the network's
    // total downsample factor.
    bool well_spaced(int downsample_factor) const {
        for (std::size_t i = 1; i < sizes.size(); ++i) {
            if (std::abs(sizes[i].first - sizes[i - 1].first) % downsample_factor != 0) return false;
            if (std::abs(sizes[i].second - sizes[i - 1].second) % downsample_factor != 0) return false;
        }
        return true;
    }

    std::optional<int> index_of(int h, int w) const {
        for (std::size_t i = 0; i < sizes.size(); ++i)
            if (sizes[i].first == h && sizes[i].second == w) return static_cast<int>(i);
        return std::nullopt;
    }

    // Closest registered scale by area, ties going to the lower index.
    int nearest(int h, int w) const {
        int best = 0;
        long long best_d = -1;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            const long long d =
                std::llabs(static_cast<long long>(sizes[i].first) * sizes[i].second -
                           static_cast<long long>(h) * w);
            if (best_d < 0 || d < best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        return best;
    }

    std::string str() const {
        std::string out;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            if (i) out += ",";
            out += size_str(sizes[i]);
        }
        return out;
    }
    static std::string size_str(const std::pair<int, int>& s) {
        return std::to_string(s.first) + "x" + std::to_string(s.second);
    }
};

namespace detail {

struct ResizeAxis {
    std::vector<int> lo, hi;
    std::vector<float> frac;
};

// Half-pixel-center source coordinates, clamped to the valid range.
inline ResizeAxis resize_axis(int src, int dst) {
    ResizeAxis ax;
    ax.lo.resize(dst);
    ax.hi.resize(dst);
    ax.frac.resize(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
        double s = (d + 0.5) * scale - 0.5;
        s = std::min(std::max(s, 0.0), static_cast<double>(src - 1));
        const int lo = static_cast<int>(s);
        ax.lo[d] = lo;
        ax.hi[d] = std::min(lo + 1, src - 1);
        ax.frac[d] = static_cast<float>(s - lo);
    }
    return ax;
}

}  // namespace detail

// Bilinear resize to (target_h, target_w), half-pixel-center convention.
// Differentiable: gradients scatter back with the same blend weights.
inline Tensor bilinear_resize(Tape& tape, const Tensor& input, int target_h, int target_w) {
    if (target_h <= 0 || target_w <= 0)
        throw std::invalid_argument("bilinear_resize: nonpositive target " +
                                    std::to_string(target_h) + "x" + std::to_string(target_w));
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const auto ay = detail::resize_axis(H, target_h);
    const auto ax = detail::resize_axis(W, target_w);

    Tensor out(N, C, target_h, target_w);
    const int planes = N * C;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = input.data() + static_cast<std::size_t>(pl) * H * W;
        float* dst = out.data() + static_cast<std::size_t>(pl) * target_h * target_w;
        for (int oh = 0; oh < target_h; ++oh) {
            const int y0 = ay.lo[oh], y1 = ay.hi[oh];
            const float fy = ay.frac[oh];
            for (int ow = 0; ow < target_w; ++ow) {
                const int x0 = ax.lo[ow], x1 = ax.hi[ow];
                const float fx = ax.frac[ow];
                const float v00 = src[y0 * W + x0], v01 = src[y0 * W + x1];
                const float v10 = src[y1 * W + x0], v11 = src[y1 * W + x1];
                dst[oh * target_w + ow] = (1.0f - fy) * ((1.0f - fx) * v00 + fx * v01) +
                                          fy * ((1.0f - fx) * v10 + fx * v11);
            }
        }
    }

    out.set_requires_grad(input.requires_grad());
    if (input.requires_grad()) {
        Tensor x = input, o = out;
        tape.record([x, o, ay, ax, H, W, target_h, target_w, planes]() mutable {
            const float* gout = o.grad();
            float* gx = x.grad();
#pragma omp parallel for schedule(static)
            for (int pl = 0; pl < planes; ++pl) {
                const float* gsrc = gout + static_cast<std::size_t>(pl) * target_h * target_w;
                float* gdst = gx + static_cast<std::size_t>(pl) * H * W;
                for (int oh = 0; oh < target_h; ++oh) {
                    const int y0 = ay.lo[oh], y1 = ay.hi[oh];
                    const float fy = ay.frac[oh];
                    for (int ow = 0; ow < target_w; ++ow) {
                        const int x0 = ax.lo[ow], x1 = ax.hi[ow];
                        const float fx = ax.frac[ow];
                        const float g = gsrc[oh * target_w + ow];
                        gdst[y0 * W + x0] += (1.0f - fy) * (1.0f - fx) * g;
                        gdst[y0 * W + x1] += (1.0f - fy) * fx * g;
                        gdst[y1 * W + x0] += fy * (1.0f - fx) * g;
                        gdst[y1 * W + x1] += fy * fx * g;
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {

inline void pool_window(int i, int out, int in, int& lo, int& hi) {
    lo = (i * in) / out;
    hi = ((i + 1) * in + out - 1) / out;  // ceil((i+1)*in / out)
}

}  // namespace detail

// Adaptive average pooling to (out_h, out_w). Cell (i,j) averages the window
// [floor(i*H/h), ceil((i+1)*H/h)) x [floor(j*W/w), ceil((j+1)*W/w)).
inline Tensor adaptive_avg_pool(Tape& tape, const Tensor& input, int out_h, int out_w) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    if (out_h <= 0 || out_w <= 0 || out_h > H || out_w > W)
        throw std::invalid_argument("adaptive_avg_pool: target " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + " invalid for input " +
                                    input.shape().str());

    Tensor out(N, C, out_h, out_w);
    const int planes = N * C;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = input.data() + static_cast<std::size_t>(pl) * H * W;
        float* dst = out.data() + static_cast<std::size_t>(pl) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            int r0, r1;
            detail::pool_window(i, out_h, H, r0, r1);
            for (int j = 0; j < out_w; ++j) {
                int c0, c1;
                detail::pool_window(j, out_w, W, c0, c1);
                double acc = 0.0;
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c) acc += src[r * W + c];
                dst[i * out_w + j] = static_cast<float>(acc / ((r1 - r0) * (c1 - c0)));
            }
        }
    }

    out.set_requires_grad(input.requires_grad());
    if (input.requires_grad()) {
        Tensor x = input, o = out;
        tape.record([x, o, N, C, H, W, out_h, out_w, planes]() mutable {
            const float* gout = o.grad();
            float* gx = x.grad();
#pragma omp parallel for schedule(static)
            for (int pl = 0; pl < planes; ++pl) {
                const float* gsrc = gout + static_cast<std::size_t>(pl) * out_h * out_w;
                float* gdst = gx + static_cast<std::size_t>(pl) * H * W;
                for (int i = 0; i < out_h; ++i) {
                    int r0, r1;
                    detail::pool_window(i, out_h, H, r0, r1);
                    for (int j = 0; j < out_w; ++j) {
                        int c0, c1;
                        detail::pool_window(j, out_w, W, c0, c1);
                        const float g = gsrc[i * out_w + j] / ((r1 - r0) * (c1 - c0));
                        for (int r = r0; r < r1; ++r)
                            for (int c = c0; c < c1; ++c) gdst[r * W + c] += g;
                    }
                }
            }
        });
    }
    return out;
}

// Adaptive max pooling; the gradient routes to the first occurrence of the
// window maximum in row-major scan order.
inline Tensor adaptive_max_pool(Tape& tape, const Tensor& input, int out_h, int out_w) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    if (out_h <= 0 || out_w <= 0 || out_h > H || out_w > W)
        throw std::invalid_argument("adaptive_max_pool: target " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + " invalid for input " +
                                    input.shape().str());

    Tensor out(N, C, out_h, out_w);
    const int planes = N * C;
    std::vector<int> argmax(static_cast<std::size_t>(planes) * out_h * out_w);
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = input.data() + static_cast<std::size_t>(pl) * H * W;
        float* dst = out.data() + static_cast<std::size_t>(pl) * out_h * out_w;
        int* am = argmax.data() + static_cast<std::size_t>(pl) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            int r0, r1;
            detail::pool_window(i, out_h, H, r0, r1);
            for (int j = 0; j < out_w; ++j) {
                int c0, c1;
                detail::pool_window(j, out_w, W, c0, c1);
                float best = src[r0 * W + c0];
                int best_idx = r0 * W + c0;
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c) {
                        const int idx = r * W + c;
                        if (src[idx] > best) {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                dst[i * out_w + j] = best;
                am[i * out_w + j] = best_idx;
            }
        }
    }

    out.set_requires_grad(input.requires_grad());
    if (input.requires_grad()) {
        Tensor x = input, o = out;
        auto am = std::make_shared<std::vector<int>>(std::move(argmax));
        tape.record([x, o, am, H, W, out_h, out_w, planes]() mutable {
            const float* gout = o.grad();
            float* gx = x.grad();
            const int cells = out_h * out_w;
#pragma omp parallel for schedule(static)
            for (int pl = 0; pl < planes; ++pl) {
                const float* gsrc = gout + static_cast<std::size_t>(pl) * cells;
                float* gdst = gx + static_cast<std::size_t>(pl) * H * W;
                const int* a = am->data() + static_cast<std::size_t>(pl) * cells;
                for (int q = 0; q < cells; ++q) gdst[a[q]] += gsrc[q];
            }
        });
    }
    return out;
}

}  // namespace sct
