#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/normalization.hpp"
#include "sct/ops.hpp"
#include "sct/resample.hpp"
#include "sct/rng.hpp"
#include "sct/tape.hpp"
#include "sct/tensor.hpp"

namespace sct {

enum class NormKind { BatchNorm, ScaleBN, GroupNorm, None };
enum class ModelFamily { ResNetCifar, SmallCnn };

inline std::string norm_kind_str(NormKind k) {
    switch (k) {
        case NormKind::BatchNorm: return "bn";
        case NormKind::ScaleBN: return "sbn";
        case NormKind::GroupNorm: return "gn";
        case NormKind::None: return "none";
    }
    return "?";
}

inline NormKind norm_kind_from_string(const std::string& s) {
    if (s == "bn") return NormKind::BatchNorm;
    if (s == "sbn") return NormKind::ScaleBN;
    if (s == "gn") return NormKind::GroupNorm;
    if (s == "none" || s == "fixup") return NormKind::None;
    throw std::invalid_argument("unknown norm kind '" + s + "' (expected bn|sbn|gn|fixup)");
}

struct ModelConfig {
    ModelFamily family = ModelFamily::ResNetCifar;
    int depth = 20;  // resnet family: 6n+2
    NormKind norm = NormKind::BatchNorm;
    int num_classes = 10;
    float width_multiplier = 1.0f;
    int gn_groups = 8;
    bool enable_taps = true;

    std::string family_str() const {
        return family == ModelFamily::ResNetCifar ? "resnet-cifar" : "small-cnn";
    }
};

// Activation snapshots from the last layer of each stage (a stage being a
// maximal run of layers sharing one spatial size).
struct TapSink {
    bool pre_activation = false;
    std::vector<Tensor> captured;
};

// One checkpointable buffer. rank describes the natural (serialized) rank.
struct StateEntry {
    std::string name;
    float* data = nullptr;
    std::size_t len = 0;
    std::vector<std::uint32_t> dims;
    bool trainable = false;
};

namespace detail {

struct Conv2dLayer {
    Parameter weight;
    std::optional<Parameter> bias;
    int stride = 1;
    int pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, int cout, int cin, int k, int stride_, int pad_,
                bool with_bias, Rng& rng)
        : stride(stride_), pad(pad_) {
        Tensor w(cout, cin, k, k);
        const float std_dev = std::sqrt(2.0f / (cin * k * k));
        for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal(0.0f, std_dev);
        weight = Parameter(name + ".weight", w);
        if (with_bias) bias = Parameter(name + ".bias", Tensor(1, cout, 1, 1));
    }

    Tensor forward(Tape& tape, const Tensor& x) const {
        return conv2d(tape, x, weight.value, bias ? &bias->value : nullptr, stride, pad);
    }
};

// Normalization slot of one layer position: a single bank (BN), M banks
// keyed by scale index (S-BN), group-norm parameters, or nothing.
struct NormSlot {
    NormKind kind = NormKind::None;
    NormParamBank bank;     // BatchNorm
    SBNState sbn;           // ScaleBN
    Parameter gn_gamma, gn_beta;
    GNConfig gn_cfg;

    NormSlot() = default;
    NormSlot(NormKind kind_, int channels, const std::string& prefix, const ScaleSet& scales,
             int gn_groups)
        : kind(kind_) {
        switch (kind) {
            case NormKind::BatchNorm:
                bank = NormParamBank(channels, prefix + ".");
                break;
            case NormKind::ScaleBN:
                sbn = SBNState(channels, scales, prefix + ".");
                break;
            case NormKind::GroupNorm:
                if (gn_groups <= 0 || channels % gn_groups != 0)
                    throw std::invalid_argument("group norm: " + std::to_string(gn_groups) +
                                                " groups do not divide C=" +
                                                std::to_string(channels));
                gn_gamma = Parameter(prefix + ".gamma", Tensor::full(Shape(1, channels, 1, 1), 1.0f));
                gn_beta = Parameter(prefix + ".beta", Tensor(1, channels, 1, 1));
                gn_cfg.groups = gn_groups;
                break;
            case NormKind::None:
                break;
        }
    }

    Tensor forward(Tape& tape, const Tensor& x, int scale_index, Mode mode) {
        switch (kind) {
            case NormKind::BatchNorm:
                return mode == Mode::Train ? bn_forward_train(tape, x, bank)
                                           : bn_forward_eval(tape, x, bank);
            case NormKind::ScaleBN:
                return sbn_forward(tape, x, scale_index, sbn, mode);
            case NormKind::GroupNorm:
                return gn_forward(tape, x, gn_cfg, gn_gamma.value, gn_beta.value);
            case NormKind::None:
                return x;
        }
        throw std::logic_error("NormSlot: bad kind");
    }

    void collect_params(std::vector<Parameter*>& out) {
        switch (kind) {
            case NormKind::BatchNorm:
                out.push_back(&bank.gamma);
                out.push_back(&bank.beta);
                break;
            case NormKind::ScaleBN:
                for (auto& b : sbn.banks) {
                    out.push_back(&b.gamma);
                    out.push_back(&b.beta);
                }
                break;
            case NormKind::GroupNorm:
                out.push_back(&gn_gamma);
                out.push_back(&gn_beta);
                break;
            case NormKind::None:
                break;
        }
    }

    void collect_state(const std::string& prefix, std::vector<StateEntry>& out) {
        auto param_entry = [&](Parameter& p) {
            out.push_back({p.name, p.value.data(), p.value.numel(),
                           {static_cast<std::uint32_t>(p.value.numel())}, true});
        };
        auto running_entry = [&](const std::string& field, std::vector<float>& v,
                                 const std::string& suffix) {
            out.push_back({prefix + "." + field + suffix, v.data(), v.size(),
                           {static_cast<std::uint32_t>(v.size())}, false});
        };
        switch (kind) {
            case NormKind::BatchNorm:
                param_entry(bank.gamma);
                param_entry(bank.beta);
                running_entry("running_mean", bank.running_mean, "");
                running_entry("running_var", bank.running_var, "");
                break;
            case NormKind::ScaleBN:
                for (std::size_t i = 0; i < sbn.banks.size(); ++i) {
                    auto& b = sbn.banks[i];
                    param_entry(b.gamma);
                    param_entry(b.beta);
                    running_entry("running_mean", b.running_mean, b.name_suffix);
                    running_entry("running_var", b.running_var, b.name_suffix);
                }
                break;
            case NormKind::GroupNorm:
                param_entry(gn_gamma);
                param_entry(gn_beta);
                break;
            case NormKind::None:
                break;
        }
    }
};

// Residual basic block (3x3 + 3x3), ResNet option-B (1x1 stride-2 conv)
// shortcut on shape change. With NormKind::None the block carries the scalar
// bias/multiplier slots of the fixup scheme instead of norm layers.
struct BasicBlock {
    Conv2dLayer conv1, conv2;
    NormSlot norm1, norm2;
    std::optional<Conv2dLayer> down_conv;
    std::optional<NormSlot> down_norm;
    Parameter bias1a, bias1b, bias2a, bias2b, multiplier;  // fixup slots
    NormKind kind = NormKind::BatchNorm;

    BasicBlock(const std::string& prefix, int cin, int cout, int stride, NormKind kind_,
               const ScaleSet& scales, int gn_groups, Rng& rng)
        : kind(kind_) {
        conv1 = Conv2dLayer(prefix + ".conv1", cout, cin, 3, stride, 1, false, rng);
        conv2 = Conv2dLayer(prefix + ".conv2", cout, cout, 3, 1, 1, false, rng);
        if (kind != NormKind::None) {
            norm1 = NormSlot(kind, cout, prefix + ".norm1", scales, gn_groups);
            norm2 = NormSlot(kind, cout, prefix + ".norm2", scales, gn_groups);
        } else {
            bias1a = Parameter(prefix + ".bias1a", Tensor(1, 1, 1, 1));
            bias1b = Parameter(prefix + ".bias1b", Tensor(1, 1, 1, 1));
            bias2a = Parameter(prefix + ".bias2a", Tensor(1, 1, 1, 1));
            bias2b = Parameter(prefix + ".bias2b", Tensor(1, 1, 1, 1));
            multiplier = Parameter(prefix + ".multiplier", Tensor::full(Shape(1, 1, 1, 1), 1.0f));
        }
        if (stride != 1 || cin != cout) {
            down_conv = Conv2dLayer(prefix + ".downsample", cout, cin, 1, stride, 0, false, rng);
            if (kind != NormKind::None)
                down_norm = NormSlot(kind, cout, prefix + ".downnorm", scales, gn_groups);
        }
    }

    // Returns the post-activation output; *pre_act, when non-null, receives
    // the pre-activation tensor (after the residual add).
    Tensor forward(Tape& tape, const Tensor& x, int scale_index, Mode mode, Tensor* pre_act) {
        Tensor h, shortcut;
        if (kind != NormKind::None) {
            h = relu(tape, norm1.forward(tape, conv1.forward(tape, x), scale_index, mode));
            h = norm2.forward(tape, conv2.forward(tape, h), scale_index, mode);
            shortcut = x;
            if (down_conv) {
                shortcut = down_conv->forward(tape, x);
                if (down_norm) shortcut = down_norm->forward(tape, shortcut, scale_index, mode);
            }
        } else {
            Tensor xin = scalar_add(tape, x, bias1a.value);
            h = relu(tape, scalar_add(tape, conv1.forward(tape, xin), bias1b.value));
            h = conv2.forward(tape, scalar_add(tape, h, bias2a.value));
            h = scalar_add(tape, scalar_mul(tape, h, multiplier.value), bias2b.value);
            shortcut = down_conv ? down_conv->forward(tape, xin) : x;
        }
        Tensor pre = add(tape, h, shortcut);
        if (pre_act) *pre_act = pre;
        return relu(tape, pre);
    }

    void collect_params(std::vector<Parameter*>& out) {
        out.push_back(&conv1.weight);
        out.push_back(&conv2.weight);
        if (kind != NormKind::None) {
            norm1.collect_params(out);
            norm2.collect_params(out);
        } else {
            for (Parameter* p : {&bias1a, &bias1b, &bias2a, &bias2b, &multiplier})
                out.push_back(p);
        }
        if (down_conv) out.push_back(&down_conv->weight);
        if (down_norm) down_norm->collect_params(out);
    }

    void collect_state(const std::string& prefix, std::vector<StateEntry>& out) {
        auto w4 = [&](Parameter& p) {
            const auto& s = p.value.shape();
            out.push_back({p.name, p.value.data(), p.value.numel(),
                           {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                            static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)},
                           true});
        };
        w4(conv1.weight);
        w4(conv2.weight);
        if (kind != NormKind::None) {
            norm1.collect_state(prefix + ".norm1", out);
            norm2.collect_state(prefix + ".norm2", out);
        } else {
            for (Parameter* p : {&bias1a, &bias1b, &bias2a, &bias2b, &multiplier})
                out.push_back({p->name, p->value.data(), 1, {1}, true});
        }
        if (down_conv) w4(down_conv->weight);
        if (down_norm) down_norm->collect_state(prefix + ".downnorm", out);
    }
};

}  // namespace detail

// CIFAR-style trunk + shared linear classifier. forward_features returns the
// final feature map; calibration and classification are separate steps so the
// multi-scale pipeline can pool per-scale maps to a shared width first.
class Model {
  public:
    Model(const ModelConfig& cfg, const ScaleSet& scales, std::uint64_t seed)
        : cfg_(cfg), scales_(scales) {
        validate_config();
        Rng rng(Rng::mix(seed, 0xA0DE1));
        const float wm = cfg_.width_multiplier;
        auto scaled = [&](int c) { return std::max(1, static_cast<int>(std::lround(c * wm))); };

        if (cfg_.family == ModelFamily::ResNetCifar) {
            channels_ = {scaled(16), scaled(32), scaled(64)};
            const int n = (cfg_.depth - 2) / 6;
            const bool none = cfg_.norm == NormKind::None;
            stem_ = detail::Conv2dLayer("stem.conv", channels_[0], 3, 3, 1, 1, none, rng);
            if (!none)
                stem_norm_ = detail::NormSlot(cfg_.norm, channels_[0], "stem.norm", scales_,
                                              cfg_.gn_groups);
            int cin = channels_[0];
            for (int s = 0; s < 3; ++s) {
                stages_.emplace_back();
                for (int b = 0; b < n; ++b) {
                    const int stride = (s > 0 && b == 0) ? 2 : 1;
                    const std::string prefix =
                        "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
                    stages_.back().emplace_back(prefix, cin, channels_[s], stride, cfg_.norm,
                                                scales_, cfg_.gn_groups, rng);
                    cin = channels_[s];
                }
            }
        } else {
            channels_ = {scaled(8), scaled(16), scaled(32)};
            const bool none = cfg_.norm == NormKind::None;
            int cin = 3;
            for (int s = 0; s < 3; ++s) {
                const int stride = s == 0 ? 1 : 2;
                const std::string prefix = "stage" + std::to_string(s + 1);
                cnn_convs_.emplace_back(prefix + ".conv", channels_[s], cin, 3, stride, 1, none,
                                        rng);
                if (!none)
                    cnn_norms_.emplace_back(cfg_.norm, channels_[s], prefix + ".norm", scales_,
                                            cfg_.gn_groups);
                cin = channels_[s];
            }
        }

        const int cout = channels_.back();
        Tensor fw(cfg_.num_classes, cout, 1, 1);
        const float std_dev = std::sqrt(1.0f / cout);
        for (std::size_t i = 0; i < fw.numel(); ++i) fw.data()[i] = rng.normal(0.0f, std_dev);
        fc_weight_ = Parameter("fc.weight", fw);
        fc_bias_ = Parameter("fc.bias", Tensor(1, cfg_.num_classes, 1, 1));
    }

    const ModelConfig& config() const { return cfg_; }
    const ScaleSet& scale_set() const { return scales_; }
    int trunk_channels() const { return channels_.back(); }
    int num_stages() const { return 3; }
    // Ratio of input to trunk output spatial size (two stride-2 stages).
    int total_downsample() const { return 4; }

    Tensor forward_features(Tape& tape, const Tensor& x, int scale_index, Mode mode,
                            TapSink* taps = nullptr) {
        if (x.h() < total_downsample() || x.w() < total_downsample())
            throw std::invalid_argument("forward_features: input " + x.shape().str() +
                                        " smaller than downsample factor " +
                                        std::to_string(total_downsample()));
        if (taps && !cfg_.enable_taps)
            throw std::logic_error("forward_features: model built without stage taps");
        if (taps) taps->captured.clear();

        Tensor h = x;
        if (cfg_.family == ModelFamily::ResNetCifar) {
            h = stem_.forward(tape, h);
            if (stem_norm_) h = stem_norm_->forward(tape, h, scale_index, mode);
            h = relu(tape, h);
            for (std::size_t s = 0; s < stages_.size(); ++s) {
                for (std::size_t b = 0; b < stages_[s].size(); ++b) {
                    const bool last = b + 1 == stages_[s].size();
                    Tensor pre;
                    h = stages_[s][b].forward(tape, h, scale_index, mode,
                                              (taps && last) ? &pre : nullptr);
                    if (taps && last)
                        taps->captured.push_back(taps->pre_activation ? pre : h);
                }
            }
        } else {
            for (std::size_t s = 0; s < cnn_convs_.size(); ++s) {
                h = cnn_convs_[s].forward(tape, h);
                if (!cnn_norms_.empty()) h = cnn_norms_[s].forward(tape, h, scale_index, mode);
                Tensor pre = h;
                h = relu(tape, h);
                if (taps) taps->captured.push_back(taps->pre_activation ? pre : h);
            }
        }
        return h;
    }

    // Shared linear head over calibrated (N, C_out) features.
    Tensor classify(Tape& tape, const Tensor& features) {
        const int width = features.c() * features.h() * features.w();
        if (width != trunk_channels())
            throw std::invalid_argument("classify: feature width " + std::to_string(width) +
                                        " does not match trunk channels " +
                                        std::to_string(trunk_channels()));
        return linear(tape, features, fc_weight_.value, &fc_bias_.value);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        if (cfg_.family == ModelFamily::ResNetCifar) {
            out.push_back(&stem_.weight);
            if (stem_.bias) out.push_back(&*stem_.bias);
            if (stem_norm_) stem_norm_->collect_params(out);
            for (auto& stage : stages_)
                for (auto& block : stage) block.collect_params(out);
        } else {
            for (std::size_t s = 0; s < cnn_convs_.size(); ++s) {
                out.push_back(&cnn_convs_[s].weight);
                if (cnn_convs_[s].bias) out.push_back(&*cnn_convs_[s].bias);
                if (!cnn_norms_.empty()) cnn_norms_[s].collect_params(out);
            }
        }
        out.push_back(&fc_weight_);
        out.push_back(&fc_bias_);
        return out;
    }

    // Every checkpointable buffer: trainable parameters plus running stats.
    std::vector<StateEntry> state_entries() {
        std::vector<StateEntry> out;
        auto w4 = [&](Parameter& p) {
            const auto& s = p.value.shape();
            out.push_back({p.name, p.value.data(), p.value.numel(),
                           {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                            static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)},
                           true});
        };
        auto vec1 = [&](Parameter& p) {
            out.push_back({p.name, p.value.data(), p.value.numel(),
                           {static_cast<std::uint32_t>(p.value.numel())}, true});
        };
        if (cfg_.family == ModelFamily::ResNetCifar) {
            w4(stem_.weight);
            if (stem_.bias) vec1(*stem_.bias);
            if (stem_norm_) stem_norm_->collect_state("stem.norm", out);
            for (std::size_t s = 0; s < stages_.size(); ++s)
                for (std::size_t b = 0; b < stages_[s].size(); ++b)
                    stages_[s][b].collect_state(
                        "stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
        } else {
            for (std::size_t s = 0; s < cnn_convs_.size(); ++s) {
                w4(cnn_convs_[s].weight);
                if (cnn_convs_[s].bias) vec1(*cnn_convs_[s].bias);
                if (!cnn_norms_.empty())
                    cnn_norms_[s].collect_state("stage" + std::to_string(s + 1) + ".norm", out);
            }
        }
        const auto& fs = fc_weight_.value.shape();
        out.push_back({fc_weight_.name, fc_weight_.value.data(), fc_weight_.value.numel(),
                       {static_cast<std::uint32_t>(fs.n), static_cast<std::uint32_t>(fs.c)}, true});
        vec1(fc_bias_);
        return out;
    }

    // Compact architecture descriptor, stored in checkpoints for load-time
    // validation.
    std::string arch_string() const {
        std::ostringstream os;
        os << cfg_.family_str() << ";depth=" << cfg_.depth << ";norm=" << norm_kind_str(cfg_.norm)
           << ";classes=" << cfg_.num_classes << ";width=" << cfg_.width_multiplier
           << ";gn_groups=" << cfg_.gn_groups;
        if (cfg_.norm == NormKind::ScaleBN) os << ";scales=" << scales_.str();
        return os.str();
    }

    int residual_block_count() const {
        std::size_t n = 0;
        for (const auto& s : stages_) n += s.size();
        return static_cast<int>(n);
    }

    Parameter& fc_weight() { return fc_weight_; }
    Parameter& fc_bias() { return fc_bias_; }

    // Fixup-style re-initialization for a norm-free residual model: branch
    // conv1 scaled by L^(-1/2), branch conv2 and the classifier zeroed,
    // scalar multipliers 1 and biases 0.
    void fixup_initialize() {
        if (cfg_.norm != NormKind::None)
            throw std::invalid_argument(
                "fixup_initialize: model contains normalization layers (norm=" +
                norm_kind_str(cfg_.norm) + ")");
        if (cfg_.family != ModelFamily::ResNetCifar)
            throw std::invalid_argument("fixup_initialize: model has no residual blocks");
        const int L = residual_block_count();
        const float scale1 = static_cast<float>(1.0 / std::sqrt(static_cast<double>(L)));
        for (auto& stage : stages_)
            for (auto& block : stage) {
                for (std::size_t i = 0; i < block.conv1.weight.value.numel(); ++i)
                    block.conv1.weight.value.data()[i] *= scale1;
                for (std::size_t i = 0; i < block.conv2.weight.value.numel(); ++i)
                    block.conv2.weight.value.data()[i] = 0.0f;
                block.multiplier.value.data()[0] = 1.0f;
                for (Parameter* p : {&block.bias1a, &block.bias1b, &block.bias2a, &block.bias2b})
                    p->value.data()[0] = 0.0f;
            }
        for (std::size_t i = 0; i < fc_weight_.value.numel(); ++i) fc_weight_.value.data()[i] = 0.0f;
        for (std::size_t i = 0; i < fc_bias_.value.numel(); ++i) fc_bias_.value.data()[i] = 0.0f;
    }

  private:
    void validate_config() {
        if (cfg_.family == ModelFamily::ResNetCifar && (cfg_.depth - 2) % 6 != 0)
            throw std::invalid_argument("resnet-cifar depth must satisfy depth = 6n+2, got " +
                                        std::to_string(cfg_.depth));
        if (cfg_.norm == NormKind::ScaleBN && scales_.count() < 1)
            throw std::invalid_argument("norm=sbn requires an attached ScaleSet");
        if (cfg_.width_multiplier <= 0.0f)
            throw std::invalid_argument("width_multiplier must be positive");
        if (cfg_.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    }

    ModelConfig cfg_;
    ScaleSet scales_;
    std::vector<int> channels_;
    detail::Conv2dLayer stem_;
    std::optional<detail::NormSlot> stem_norm_;
    std::vector<std::vector<detail::BasicBlock>> stages_;
    std::vector<detail::Conv2dLayer> cnn_convs_;
    std::vector<detail::NormSlot> cnn_norms_;
    Parameter fc_weight_, fc_bias_;
};

inline Model build_model(const ModelConfig& cfg, const ScaleSet& scales, std::uint64_t seed) {
    return Model(cfg, scales, seed);
}

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.norm == NormKind::ScaleBN)
        throw std::invalid_argument("norm=sbn requires an attached ScaleSet");
    return Model(cfg, ScaleSet(), seed);
}

}  // namespace sct
