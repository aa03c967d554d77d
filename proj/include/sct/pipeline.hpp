#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/checkpoint.hpp"
#include "sct/data.hpp"
#include "sct/models.hpp"
#include "sct/normalization.hpp"
#include "sct/ops.hpp"
#include "sct/optim.hpp"
#include "sct/resample.hpp"
#include "sct/rng.hpp"

namespace sct {

enum class Calibration { Avg, Max };

inline Calibration calibration_from_string(const std::string& s) {
    if (s == "avg") return Calibration::Avg;
    if (s == "max") return Calibration::Max;
    throw std::invalid_argument("unknown calibration '" + s + "' (expected avg|max)");
}

// Built-in scale schemes.
inline ScaleSet scheme_scales(const std::string& name) {
    if (name == "standard") return ScaleSet({{224, 224}});
    if (name == "sct-a") return ScaleSet({{320, 320}, {224, 224}, {192, 192}});
    if (name == "sct-b")
        return ScaleSet({{320, 320}, {224, 224}, {192, 192}, {128, 128}, {64, 64}});
    if (name == "cifar-32") return ScaleSet({{32, 32}});
    if (name == "cifar-32-24") return ScaleSet({{32, 32}, {24, 24}});
    if (name == "cifar-32-28") return ScaleSet({{32, 32}, {28, 28}});
    if (name == "cifar-32-16") return ScaleSet({{32, 32}, {16, 16}});
    throw std::invalid_argument("unknown scheme '" + name +
                                "' (expected standard|sct-a|sct-b|cifar-32|cifar-32-24|"
                                "cifar-32-28|cifar-32-16)");
}

struct SCTConfig {
    ScaleSet scale_set{std::vector<std::pair<int, int>>{{32, 32}}};
    std::vector<float> alphas;  // empty -> uniform 1/M
    std::string scheme_name = "cifar-32";
    int epochs = 1;
    int batch_size = 128;
    double lr0 = 0.1;
    ScheduleKind schedule = ScheduleKind::Cosine;
    std::vector<int> milestones;  // empty -> derived for step schedule
    Calibration calibration = Calibration::Avg;
    std::uint64_t seed = 1;
    bool deterministic = false;
    bool skip_zero_weight = false;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    AugmentConfig augment;
    int checkpoint_every = 0;  // epochs; 0 = final checkpoint only
    std::string out_dir;

    std::vector<float> resolved_alphas() const {
        if (!alphas.empty()) return alphas;
        return std::vector<float>(scale_set.count(),
                                  1.0f / static_cast<float>(scale_set.count()));
    }

    std::vector<int> resolved_milestones() const {
        if (!milestones.empty()) return milestones;
        if (epochs == 160) return {80, 120};
        return {epochs / 2, epochs * 3 / 4};
    }

    void validate() const {
        scale_set.validate();
        if (!alphas.empty()) {
            if (static_cast<int>(alphas.size()) != scale_set.count())
                throw std::invalid_argument(
                    "SCTConfig: " + std::to_string(alphas.size()) + " alphas for " +
                    std::to_string(scale_set.count()) + " scales");
            for (float a : alphas)
                if (a < 0.0f) throw std::invalid_argument("SCTConfig: alphas must be >= 0");
        }
        if (epochs < 1 || batch_size < 2)
            throw std::invalid_argument("SCTConfig: need epochs >= 1 and batch_size >= 2");
        if (lr0 < 0.0) throw std::invalid_argument("SCTConfig: lr0 must be >= 0");
        augment.validate();
    }
};

// The M resampled batches produced from one mini-batch; labels are shared
// across scales.
struct ScaleCollection {
    std::vector<Tensor> batches;
    std::vector<int> labels;

    int count() const { return static_cast<int>(batches.size()); }
};

// Scale sampling phase: one bilinear resample of the augmented batch per
// registered scale.
inline ScaleCollection scale_sample(Tape& tape, const Tensor& batch,
                                    const std::vector<int>& labels, const ScaleSet& scales) {
    ScaleCollection col;
    col.labels = labels;
    col.batches.reserve(scales.count());
    for (const auto& [h, w] : scales.sizes) col.batches.push_back(bilinear_resize(tape, batch, h, w));
    return col;
}

// Calibrating phase: adaptive pooling of a trunk feature map down to a
// (N, C_out) vector so every scale feeds the same classifier.
inline Tensor calibrate(Tape& tape, const Tensor& features, Calibration calibration) {
    return calibration == Calibration::Avg ? adaptive_avg_pool(tape, features, 1, 1)
                                           : adaptive_max_pool(tape, features, 1, 1);
}

// Forward + calibrate each scale batch through the shared trunk/classifier.
// forwarded_mask, when given, marks scales to skip (still produces an
// undefined Tensor slot to keep indices aligned).
inline std::vector<Tensor> sct_forward(Tape& tape, Model& model, const ScaleCollection& collection,
                                       Mode mode, Calibration calibration,
                                       const std::vector<bool>* forwarded_mask = nullptr) {
    if (model.config().norm == NormKind::ScaleBN &&
        model.scale_set().count() < collection.count())
        throw std::invalid_argument("sct_forward: model has " +
                                    std::to_string(model.scale_set().count()) +
                                    " S-BN banks for " + std::to_string(collection.count()) +
                                    " scales");
    std::vector<Tensor> logits(collection.count());
    for (int i = 0; i < collection.count(); ++i) {
        if (forwarded_mask && !(*forwarded_mask)[i]) continue;
        Tensor features = model.forward_features(tape, collection.batches[i], i, mode);
        Tensor pooled = calibrate(tape, features, calibration);
        logits[i] = model.classify(tape, pooled);
    }
    return logits;
}

// Eq. (1)-style total: sum_i alpha_i * mean-batch cross-entropy of scale i.
inline Tensor sct_loss(Tape& tape, const std::vector<Tensor>& logits,
                       const std::vector<int>& labels, const std::vector<float>& alphas,
                       std::vector<Tensor>* per_scale_out = nullptr) {
    if (logits.size() != alphas.size())
        throw std::invalid_argument("sct_loss: " + std::to_string(logits.size()) +
                                    " logit sets vs " + std::to_string(alphas.size()) + " alphas");
    std::vector<Tensor> losses;
    std::vector<float> weights;
    losses.reserve(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!logits[i].defined()) continue;  // skipped zero-weight scale
        losses.push_back(softmax_cross_entropy(tape, logits[i], labels));
        weights.push_back(alphas[i]);
    }
    if (per_scale_out) *per_scale_out = losses;
    return weighted_sum(tape, losses, weights);
}

inline double batch_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const int N = logits.n();
    const int K = static_cast<int>(logits.numel()) / N;
    int correct = 0;
    for (int n = 0; n < N; ++n) {
        const float* row = logits.data() + static_cast<std::size_t>(n) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > row[best]) best = k;
        if (best == labels[n]) ++correct;
    }
    return static_cast<double>(correct) / N;
}

struct TrainState {
    int epoch = 0;
    long long step = 0;
    double lr = 0.0;
    std::uint64_t seed = 0;
    std::vector<float> total_loss_history;
    std::vector<std::vector<float>> loss_history;  // [scale][step]
    std::vector<std::vector<float>> acc_history;   // [scale][step]
};

// Raised when a non-finite loss aborts training. The last-good checkpoint is
// written (and the model rolled back to it) before the throw.
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

struct StateSnapshot {
    std::vector<std::vector<float>> buffers;

    static StateSnapshot capture(Model& model) {
        StateSnapshot s;
        for (const auto& e : model.state_entries()) s.buffers.emplace_back(e.data, e.data + e.len);
        return s;
    }
    void restore(Model& model) const {
        auto entries = model.state_entries();
        for (std::size_t i = 0; i < entries.size(); ++i)
            std::copy(buffers[i].begin(), buffers[i].end(), entries[i].data);
    }
};

}  // namespace detail

// One full SCT training run: augment -> scale_sample -> sct_forward ->
// sct_loss -> backward -> SGD step, with metrics CSV, checkpointing and a
// config echo in out_dir (when set). on_epoch, when given, is called after
// each epoch with (epoch, mean total loss over the epoch, lr).
inline TrainState train(Model& model, const Dataset& dataset, const SCTConfig& cfg,
                        const std::string& config_echo = "",
                        const std::function<void(int, double, double)>& on_epoch = {}) {
    cfg.validate();
    dataset.validate();
    if (model.config().norm == NormKind::ScaleBN &&
        model.scale_set().sizes != cfg.scale_set.sizes)
        throw std::invalid_argument("train: model S-BN scale set (" + model.scale_set().str() +
                                    ") does not match config (" + cfg.scale_set.str() + ")");

    const int M = cfg.scale_set.count();
    const auto alphas = cfg.resolved_alphas();
    const auto milestones = cfg.resolved_milestones();
    std::vector<bool> forwarded(M, true);
    if (cfg.skip_zero_weight)
        for (int i = 0; i < M; ++i) forwarded[i] = alphas[i] > 0.0f;

    const bool persist = !cfg.out_dir.empty();
    std::ofstream metrics;
    std::string ckpt_path;
    if (persist) {
        std::filesystem::create_directories(cfg.out_dir);
        ckpt_path = cfg.out_dir + "/checkpoint.bin";
        metrics.open(cfg.out_dir + "/metrics.csv", std::ios::trunc);
        if (!metrics) throw std::runtime_error("cannot open metrics.csv in " + cfg.out_dir);
        metrics << "epoch,step,lr,loss_total";
        for (int i = 0; i < M; ++i) metrics << ",loss_scale_" << i;
        for (int i = 0; i < M; ++i) metrics << ",acc_scale_" << i;
        metrics << "\n";
        if (!config_echo.empty()) {
            std::ofstream echo(cfg.out_dir + "/config.txt", std::ios::trunc);
            echo << config_echo;
        }
    }

    auto params = model.parameters();
    SgdMomentum opt(params, cfg.momentum, cfg.weight_decay);

    TrainState state;
    state.seed = cfg.seed;
    state.loss_history.resize(M);
    state.acc_history.resize(M);

    detail::StateSnapshot last_good = detail::StateSnapshot::capture(model);

    std::vector<int> order(dataset.count());
    std::iota(order.begin(), order.end(), 0);
    std::size_t epoch_start_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        state.epoch = epoch;
        const double lr = lr_schedule(cfg.schedule, epoch, cfg.epochs, cfg.lr0, milestones);
        state.lr = lr;
        Rng shuffle_rng(Rng::mix(cfg.seed, 1000003ULL * epoch + 1));
        Rng augment_rng(Rng::mix(cfg.seed, 1000003ULL * epoch + 2));
        shuffle_rng.shuffle(order);

        for (int start = 0; start < dataset.count(); start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, dataset.count() - start);
            if (bsz < 2) break;  // batch statistics need at least two values
            std::vector<int> idx(order.begin() + start, order.begin() + start + bsz);
            std::vector<int> labels(bsz);
            for (int b = 0; b < bsz; ++b) labels[b] = dataset.labels[idx[b]];

            Tensor batch = augment_batch(dataset, idx, cfg.augment, augment_rng, true);

            Tape tape;
            ScaleCollection collection = scale_sample(tape, batch, labels, cfg.scale_set);
            std::vector<Tensor> logits =
                sct_forward(tape, model, collection, Mode::Train, cfg.calibration, &forwarded);
            std::vector<Tensor> per_scale;
            Tensor total = sct_loss(tape, logits, labels, alphas, &per_scale);

            if (!std::isfinite(total.item())) {
                last_good.restore(model);
                if (persist) save_model(ckpt_path, model);
                throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) +
                                       " step " + std::to_string(state.step) +
                                       (persist ? "; last-good checkpoint written to " + ckpt_path
                                                : ""));
            }

            opt.zero_grad();
            tape.backward(total);
            opt.step(static_cast<float>(lr));
            last_good = detail::StateSnapshot::capture(model);

            state.total_loss_history.push_back(total.item());
            std::vector<float> scale_losses(M, std::nanf(""));
            std::vector<float> scale_accs(M, std::nanf(""));
            int li = 0;
            for (int i = 0; i < M; ++i) {
                if (!logits[i].defined()) continue;
                scale_losses[i] = per_scale[li++].item();
                scale_accs[i] = static_cast<float>(batch_accuracy(logits[i], labels));
            }
            for (int i = 0; i < M; ++i) {
                state.loss_history[i].push_back(scale_losses[i]);
                state.acc_history[i].push_back(scale_accs[i]);
            }

            if (persist) {
                metrics << epoch << "," << state.step << "," << detail::csv_num(lr) << ","
                        << detail::csv_num(total.item());
                for (int i = 0; i < M; ++i) metrics << "," << detail::csv_num(scale_losses[i]);
                for (int i = 0; i < M; ++i) metrics << "," << detail::csv_num(scale_accs[i]);
                metrics << "\n";
            }
            ++state.step;
        }

        if (persist && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            save_model(ckpt_path, model);
        if (on_epoch) {
            const auto& hist = state.total_loss_history;
            const std::size_t steps_this_epoch =
                hist.size() - epoch_start_step;
            double mean_loss = 0.0;
            for (std::size_t i = epoch_start_step; i < hist.size(); ++i) mean_loss += hist[i];
            if (steps_this_epoch > 0) mean_loss /= static_cast<double>(steps_this_epoch);
            on_epoch(epoch, mean_loss, lr);
        }
        epoch_start_step = state.total_loss_history.size();
    }

    if (persist) {
        save_model(ckpt_path, model);
        metrics.flush();
    }
    return state;
}

struct EvalOptions {
    bool nearest_bank = false;
    int batch_size = 256;
    Calibration calibration = Calibration::Avg;
    AugmentConfig augment;
};

struct EvalResult {
    double accuracy = 0.0;
    int bank_index = -1;  // S-BN bank that served the run; -1 for other norms
    int correct = 0;
    int total = 0;
};

// Testing phase: images resized to test_scale, normalization in eval mode,
// no state mutation. For S-BN models the bank is selected by exact scale
// match, or nearest-by-area with opts.nearest_bank.
inline EvalResult evaluate(Model& model, const Dataset& dataset, int test_h, int test_w,
                           const EvalOptions& opts = {}) {
    dataset.validate();
    if (test_h <= 0 || test_w <= 0)
        throw std::invalid_argument("evaluate: nonpositive test size");

    int scale_index = 0;
    int bank_index = -1;
    if (model.config().norm == NormKind::ScaleBN) {
        const auto exact = model.scale_set().index_of(test_h, test_w);
        if (exact) {
            scale_index = *exact;
        } else if (opts.nearest_bank) {
            scale_index = model.scale_set().nearest(test_h, test_w);
        } else {
            throw std::invalid_argument(
                "evaluate: size " + std::to_string(test_h) + "x" + std::to_string(test_w) +
                " has no registered S-BN bank (registered: " + model.scale_set().str() +
                "); pass nearest-bank to override");
        }
        bank_index = scale_index;
    }

    EvalResult res;
    res.bank_index = bank_index;
    Rng unused_rng(0);
    for (int start = 0; start < dataset.count(); start += opts.batch_size) {
        const int bsz = std::min(opts.batch_size, dataset.count() - start);
        std::vector<int> idx(bsz);
        std::iota(idx.begin(), idx.end(), start);

        Tape tape;
        RecordingGuard guard(tape, false);
        Tensor batch = augment_batch(dataset, idx, opts.augment, unused_rng, false);
        if (batch.h() != test_h || batch.w() != test_w)
            batch = bilinear_resize(tape, batch, test_h, test_w);
        Tensor features = model.forward_features(tape, batch, scale_index, Mode::Eval);
        Tensor pooled = calibrate(tape, features, opts.calibration);
        Tensor logits = model.classify(tape, pooled);

        const int K = model.config().num_classes;
        for (int b = 0; b < bsz; ++b) {
            const float* row = logits.data() + static_cast<std::size_t>(b) * K;
            int best = 0;
            for (int k = 1; k < K; ++k)
                if (row[k] > row[best]) best = k;
            if (best == dataset.labels[start + b]) ++res.correct;
        }
        res.total += bsz;
    }
    res.accuracy = static_cast<double>(res.correct) / res.total;
    return res;
}

}  // namespace sct
