#pragma once

// Central finite-difference oracle for gradient tests. Kept independent of
// the tape: it only re-runs a black-box loss functional under perturbation.

#include <cmath>
#include <functional>
#include <vector>

#include "sct/rng.hpp"
#include "sct/tensor.hpp"

namespace sct::testutil {

// loss() must recompute the scalar loss from current tensor contents.
inline double central_difference(const std::function<double()>& loss, Tensor& t, std::size_t i,
                                 double h = 1e-3) {
    float* p = t.data();
    const float saved = p[i];
    p[i] = static_cast<float>(saved + h);
    const double up = loss();
    p[i] = static_cast<float>(saved - h);
    const double down = loss();
    p[i] = saved;
    return (up - down) / (2.0 * h);
}

// Relative error as |analytic - fd| / max(1, |fd|).
inline double grad_rel_error(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
}

inline Tensor random_tensor(Shape s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(s);
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// Checks every element of t (or a strided subset for big tensors).
// forward() must rebuild the graph on a fresh tape and return the loss, with
// gradients populated on t afterwards.
inline double max_grad_error(const std::function<double()>& loss_only,
                             const std::function<void()>& forward_backward, Tensor& t,
                             std::size_t max_probes = 64) {
    forward_backward();
    std::vector<float> analytic(t.grad(), t.grad() + t.numel());
    const std::size_t stride = std::max<std::size_t>(1, t.numel() / max_probes);
    double worst = 0.0;
    for (std::size_t i = 0; i < t.numel(); i += stride) {
        const double fd = central_difference(loss_only, t, i);
        worst = std::max(worst, grad_rel_error(analytic[i], fd));
    }
    return worst;
}

}  // namespace sct::testutil
