#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/resample.hpp"
#include "sct/tape.hpp"
#include "sct/tensor.hpp"

namespace sct {

enum class Mode { Train, Eval };

// One {gamma, beta, running_mean, running_var} quadruple of a normalization
// layer. S-BN layers hold one bank per training scale.
struct NormParamBank {
    Parameter gamma;  // (1, C, 1, 1)
    Parameter beta;   // (1, C, 1, 1)
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;
    std::string name_suffix;  // ".scale{i}" for S-BN banks, empty otherwise

    NormParamBank() = default;
    explicit NormParamBank(int channels, const std::string& name_prefix = "",
                           const std::string& suffix = "")
        : gamma(name_prefix + "gamma" + suffix, Tensor::full(Shape(1, channels, 1, 1), 1.0f)),
          beta(name_prefix + "beta" + suffix, Tensor(1, channels, 1, 1)),
          running_mean(channels, 0.0f),
          running_var(channels, 1.0f),
          name_suffix(suffix) {}

    int channels() const { return static_cast<int>(running_mean.size()); }
};

// Training-mode batch normalization: per-channel standardization with biased
// (population) batch variance over N*H*W, then scale/shift. Running stats are
// updated in place, the variance as the unbiased estimate.
inline Tensor bn_forward_train(Tape& tape, const Tensor& input, NormParamBank& bank) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    if (C != bank.channels())
        throw std::invalid_argument("bn_forward_train: input " + input.shape().str() + " vs bank of " +
                                    std::to_string(bank.channels()) + " channels");
    const std::size_t m = static_cast<std::size_t>(N) * H * W;
    if (m < 2)
        throw std::invalid_argument(
            "bn_forward_train: need N*H*W >= 2 for batch statistics, got input " +
            input.shape().str());

    std::vector<float> mean(C), invstd(C);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t sample = static_cast<std::size_t>(C) * plane;

#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* p = input.data() + n * sample + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum += p[i];
                sq += static_cast<double>(p[i]) * p[i];
            }
        }
        const double mu = sum / static_cast<double>(m);
        const double var = std::max(0.0, sq / static_cast<double>(m) - mu * mu);
        mean[c] = static_cast<float>(mu);
        invstd[c] = static_cast<float>(1.0 / std::sqrt(var + bank.eps));
        bank.running_mean[c] =
            (1.0f - bank.momentum) * bank.running_mean[c] + bank.momentum * static_cast<float>(mu);
        const double var_unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
        bank.running_var[c] = (1.0f - bank.momentum) * bank.running_var[c] +
                              bank.momentum * static_cast<float>(var_unbiased);
    }

    Tensor out(input.shape());
    const float* gp = bank.gamma.value.data();
    const float* bp = bank.beta.value.data();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const float mu = mean[c], is = invstd[c], g = gp[c], b = bp[c];
        for (int n = 0; n < N; ++n) {
            const float* p = input.data() + n * sample + c * plane;
            float* q = out.data() + n * sample + c * plane;
            for (std::size_t i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) * is + b;
        }
    }

    const bool need = input.requires_grad() || bank.gamma.value.requires_grad() ||
                      bank.beta.value.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, o = out, gm = bank.gamma.value, bt = bank.beta.value;
        tape.record([x, o, gm, bt, mean, invstd, N, C, plane, sample, m]() mutable {
            const float* gout = o.grad();
            const bool need_x = x.requires_grad();
            float* gx = need_x ? x.grad() : nullptr;
            float* gg = gm.requires_grad() ? gm.grad() : nullptr;
            float* gb = bt.requires_grad() ? bt.grad() : nullptr;
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const float mu = mean[c], is = invstd[c], g = gm.data()[c];
                double s1 = 0.0, s2 = 0.0;
                for (int n = 0; n < N; ++n) {
                    const float* xv = x.data() + n * sample + c * plane;
                    const float* gy = gout + n * sample + c * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        s1 += gy[i];
                        s2 += static_cast<double>(gy[i]) * ((xv[i] - mu) * is);
                    }
                }
                if (gb) gb[c] += static_cast<float>(s1);
                if (gg) gg[c] += static_cast<float>(s2);
                if (need_x) {
                    const float k1 = static_cast<float>(s1 / static_cast<double>(m));
                    const float k2 = static_cast<float>(s2 / static_cast<double>(m));
                    for (int n = 0; n < N; ++n) {
                        const float* xv = x.data() + n * sample + c * plane;
                        const float* gy = gout + n * sample + c * plane;
                        float* gxp = gx + n * sample + c * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            const float xhat = (xv[i] - mu) * is;
                            gxp[i] += g * is * (gy[i] - k1 - xhat * k2);
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Eval-mode batch normalization from running statistics. No state mutation.
inline Tensor bn_forward_eval(Tape& tape, const Tensor& input, const NormParamBank& bank) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    if (C != bank.channels())
        throw std::invalid_argument("bn_forward_eval: input " + input.shape().str() + " vs bank of " +
                                    std::to_string(bank.channels()) + " channels");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t sample = static_cast<std::size_t>(C) * plane;

    std::vector<float> invstd(C);
    for (int c = 0; c < C; ++c)
        invstd[c] = static_cast<float>(
            1.0 / std::sqrt(static_cast<double>(bank.running_var[c]) + bank.eps));

    Tensor out(input.shape());
    const float* gp = bank.gamma.value.data();
    const float* bp = bank.beta.value.data();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const float mu = bank.running_mean[c], is = invstd[c], g = gp[c], b = bp[c];
        for (int n = 0; n < N; ++n) {
            const float* p = input.data() + n * sample + c * plane;
            float* q = out.data() + n * sample + c * plane;
            for (std::size_t i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) * is + b;
        }
    }

    const bool need = input.requires_grad() || bank.gamma.value.requires_grad() ||
                      bank.beta.value.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, o = out, gm = bank.gamma.value, bt = bank.beta.value;
        std::vector<float> rm = bank.running_mean;
        tape.record([x, o, gm, bt, rm, invstd, N, C, plane, sample]() mutable {
            const float* gout = o.grad();
            const bool need_x = x.requires_grad();
            float* gx = need_x ? x.grad() : nullptr;
            float* gg = gm.requires_grad() ? gm.grad() : nullptr;
            float* gb = bt.requires_grad() ? bt.grad() : nullptr;
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const float mu = rm[c], is = invstd[c], g = gm.data()[c];
                double s1 = 0.0, s2 = 0.0;
                for (int n = 0; n < N; ++n) {
                    const float* xv = x.data() + n * sample + c * plane;
                    const float* gy = gout + n * sample + c * plane;
                    float* gxp = need_x ? gx + n * sample + c * plane : nullptr;
                    for (std::size_t i = 0; i < plane; ++i) {
                        s1 += gy[i];
                        s2 += static_cast<double>(gy[i]) * ((xv[i] - mu) * is);
                        if (gxp) gxp[i] += gy[i] * g * is;
                    }
                }
                if (gb) gb[c] += static_cast<float>(s1);
                if (gg) gg[c] += static_cast<float>(s2);
            }
        });
    }
    return out;
}

// Scale-specific BN: M disjoint banks, one per training scale. Bank i's
// parameters and running statistics are the only state a scale-i batch
// touches.
struct SBNState {
    std::vector<NormParamBank> banks;
    ScaleSet scales;

    SBNState() = default;
    SBNState(int channels, const ScaleSet& scale_set, const std::string& name_prefix = "")
        : scales(scale_set) {
        banks.reserve(scale_set.count());
        for (int i = 0; i < scale_set.count(); ++i)
            banks.emplace_back(channels, name_prefix, ".scale" + std::to_string(i));
    }

    int count() const { return static_cast<int>(banks.size()); }
};

inline Tensor sbn_forward(Tape& tape, const Tensor& input, int scale_index, SBNState& state,
                          Mode mode) {
    if (scale_index < 0 || scale_index >= state.count()) {
        throw std::invalid_argument("sbn_forward: scale index " + std::to_string(scale_index) +
                                    " not registered; registered scales: " + state.scales.str());
    }
    return mode == Mode::Train ? bn_forward_train(tape, input, state.banks[scale_index])
                               : bn_forward_eval(tape, input, state.banks[scale_index]);
}

struct GNConfig {
    int groups = 8;
    float eps = 1e-5f;
};

// Group normalization: per sample and per group of C/groups channels,
// normalize over (C/groups)*H*W elements. No running statistics, so train
// and eval modes are identical.
inline Tensor gn_forward(Tape& tape, const Tensor& input, const GNConfig& cfg,
                         const Tensor& gamma, const Tensor& beta) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    if (cfg.groups <= 0 || C % cfg.groups != 0)
        throw std::invalid_argument("gn_forward: " + std::to_string(cfg.groups) +
                                    " groups do not divide C=" + std::to_string(C));
    const int gc = C / cfg.groups;  // channels per group
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t gsz = static_cast<std::size_t>(gc) * plane;
    const std::size_t sample = static_cast<std::size_t>(C) * plane;

    const int cells = N * cfg.groups;
    std::vector<float> mean(cells), invstd(cells);
    Tensor out(input.shape());
    const float* gp = gamma.data();
    const float* bp = beta.data();

#pragma omp parallel for schedule(static)
    for (int cell = 0; cell < cells; ++cell) {
        const int n = cell / cfg.groups;
        const int g = cell % cfg.groups;
        const float* base = input.data() + n * sample + static_cast<std::size_t>(g) * gsz;
        double sum = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) sum += base[i];
        const double mu = sum / static_cast<double>(gsz);
        double sq = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) {
            const double d = base[i] - mu;
            sq += d * d;
        }
        const float is = static_cast<float>(1.0 / std::sqrt(sq / gsz + cfg.eps));
        mean[cell] = static_cast<float>(mu);
        invstd[cell] = is;
        float* q = out.data() + n * sample + static_cast<std::size_t>(g) * gsz;
        for (int cc = 0; cc < gc; ++cc) {
            const int c = g * gc + cc;
            const float ga = gp[c], be = bp[c], mu_f = mean[cell];
            const float* p = base + cc * plane;
            float* qq = q + cc * plane;
            for (std::size_t i = 0; i < plane; ++i) qq[i] = ga * (p[i] - mu_f) * is + be;
        }
    }

    const bool need = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    out.set_requires_grad(need);
    if (need) {
        Tensor x = input, o = out, gm = gamma, bt = beta;
        const int groups = cfg.groups;
        tape.record([x, o, gm, bt, mean, invstd, N, C, gc, groups, plane, gsz, sample]() mutable {
            const float* gout = o.grad();
            const bool need_x = x.requires_grad();
            float* gx = need_x ? x.grad() : nullptr;

            // dgamma/dbeta per channel, summed over the batch.
            if (gm.requires_grad() || bt.requires_grad()) {
                float* gg = gm.requires_grad() ? gm.grad() : nullptr;
                float* gb = bt.requires_grad() ? bt.grad() : nullptr;
#pragma omp parallel for schedule(static)
                for (int c = 0; c < C; ++c) {
                    const int g = c / gc;
                    double s1 = 0.0, s2 = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const int cell = n * groups + g;
                        const float mu = mean[cell], is = invstd[cell];
                        const float* xv = x.data() + n * sample + c * plane;
                        const float* gy = gout + n * sample + c * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            s1 += gy[i];
                            s2 += static_cast<double>(gy[i]) * ((xv[i] - mu) * is);
                        }
                    }
                    if (gb) gb[c] += static_cast<float>(s1);
                    if (gg) gg[c] += static_cast<float>(s2);
                }
            }

            if (need_x) {
                const int cells = N * groups;
#pragma omp parallel for schedule(static)
                for (int cell = 0; cell < cells; ++cell) {
                    const int n = cell / groups;
                    const int g = cell % groups;
                    const float mu = mean[cell], is = invstd[cell];
                    const float* xb = x.data() + n * sample + static_cast<std::size_t>(g) * gsz;
                    const float* gy = gout + n * sample + static_cast<std::size_t>(g) * gsz;
                    double s1 = 0.0, s2 = 0.0;
                    for (int cc = 0; cc < gc; ++cc) {
                        const float ga = gm.data()[g * gc + cc];
                        const float* gyp = gy + cc * plane;
                        const float* xp = xb + cc * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            const double dxhat = static_cast<double>(gyp[i]) * ga;
                            s1 += dxhat;
                            s2 += dxhat * ((xp[i] - mu) * is);
                        }
                    }
                    const float k1 = static_cast<float>(s1 / static_cast<double>(gsz));
                    const float k2 = static_cast<float>(s2 / static_cast<double>(gsz));
                    float* gxp = gx + n * sample + static_cast<std::size_t>(g) * gsz;
                    for (int cc = 0; cc < gc; ++cc) {
                        const float ga = gm.data()[g * gc + cc];
                        const float* gyp = gy + cc * plane;
                        const float* xp = xb + cc * plane;
                        float* gq = gxp + cc * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            const float xhat = (xp[i] - mu) * is;
                            gq[i] += is * (gyp[i] * ga - k1 - xhat * k2);
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace sct
