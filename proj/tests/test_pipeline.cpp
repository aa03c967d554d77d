#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck_util.hpp"
#include "sct/pipeline.hpp"

using namespace sct;
using testutil::random_tensor;

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ModelConfig resnet8(NormKind norm, float width = 0.5f) {
    ModelConfig cfg;
    cfg.depth = 8;
    cfg.norm = norm;
    cfg.width_multiplier = width;
    return cfg;
}

AugmentConfig no_augment() {
    AugmentConfig a;
    a.pad_crop = 0;
    a.hflip_prob = 0.0f;
    return a;
}

}  // namespace

TEST(ScaleSample, IdentityScaleReturnsInput) {
    Rng rng(1);
    Tensor batch = random_tensor(Shape(3, 3, 32, 32), rng);
    Tape tape;
    ScaleCollection col = scale_sample(tape, batch, {0, 1, 2}, ScaleSet({{32, 32}}));
    ASSERT_EQ(col.count(), 1);
    for (std::size_t i = 0; i < batch.numel(); ++i)
        ASSERT_EQ(col.batches[0].data()[i], batch.data()[i]);
    EXPECT_EQ(col.labels, (std::vector<int>{0, 1, 2}));
}

TEST(ScaleSample, ConstantAndShapes) {
    Tensor batch = Tensor::full(Shape(2, 3, 32, 32), 0.4f);
    Tape tape;
    ScaleCollection col = scale_sample(tape, batch, {1, 0}, ScaleSet({{32, 32}, {16, 16}}));
    ASSERT_EQ(col.count(), 2);
    EXPECT_EQ(col.batches[0].shape(), Shape(2, 3, 32, 32));
    EXPECT_EQ(col.batches[1].shape(), Shape(2, 3, 16, 16));
    for (const auto& b : col.batches)
        for (float v : b.vec()) ASSERT_NEAR(v, 0.4f, 1e-6f);
}

TEST(SctForward, SingleScaleMatchesPlainForward) {
    Model m = build_model(resnet8(NormKind::BatchNorm), 3);
    Rng rng(2);
    Tensor batch = random_tensor(Shape(2, 3, 32, 32), rng);
    Tape tape;
    RecordingGuard g(tape, false);
    ScaleCollection col = scale_sample(tape, batch, {0, 1}, ScaleSet({{32, 32}}));
    auto logits = sct_forward(tape, m, col, Mode::Eval, Calibration::Avg);
    ASSERT_EQ(logits.size(), 1u);

    Tensor plain = m.classify(
        tape, adaptive_avg_pool(tape, m.forward_features(tape, batch, 0, Mode::Eval), 1, 1));
    for (std::size_t i = 0; i < plain.numel(); ++i)
        ASSERT_EQ(logits[0].data()[i], plain.data()[i]);
}

TEST(SctForward, CalibratedWidthSharedAcrossScales) {
    ScaleSet scales({{32, 32}, {16, 16}});
    Model m = build_model(resnet8(NormKind::ScaleBN), scales, 3);
    Rng rng(3);
    Tensor batch = random_tensor(Shape(2, 3, 32, 32), rng);
    Tape tape;
    ScaleCollection col = scale_sample(tape, batch, {0, 1}, scales);
    auto logits = sct_forward(tape, m, col, Mode::Train, Calibration::Avg);
    ASSERT_EQ(logits.size(), 2u);
    for (const auto& l : logits) EXPECT_EQ(l.shape(), Shape(2, 10, 1, 1));
}

TEST(SctForward, ConstantFeatureMapGivesClassifierOfConstantVector) {
    Model m = build_model(resnet8(NormKind::BatchNorm, 1.0f), 4);
    const int c_out = m.trunk_channels();
    Tape tape;
    Tensor features = Tensor::full(Shape(1, c_out, 5, 5), 0.3f);
    Tensor logits = m.classify(tape, calibrate(tape, features, Calibration::Avg));
    for (int k = 0; k < 10; ++k) {
        double want = m.fc_bias().value.data()[k];
        for (int d = 0; d < c_out; ++d)
            want += 0.3 * m.fc_weight().value.data()[k * c_out + d];
        EXPECT_NEAR(logits.at(0, k, 0, 0), want, 2e-4);
    }
}

TEST(SctLoss, SingleScaleIsPlainCrossEntropy) {
    Rng rng(4);
    Tensor logits = random_tensor(Shape(3, 5, 1, 1), rng);
    std::vector<int> labels{0, 3, 2};
    Tape tape;
    Tensor plain = softmax_cross_entropy(tape, logits, labels);
    Tensor total = sct_loss(tape, {logits}, labels, {1.0f});
    EXPECT_EQ(total.item(), plain.item());
}

TEST(SctLoss, UniformAlphaEqualLossIdentity) {
    Rng rng(5);
    Tensor logits = random_tensor(Shape(4, 6, 1, 1), rng);
    std::vector<int> labels{1, 2, 3, 4};
    Tape tape;
    // Same logits at both scales: per-scale losses are equal, so the
    // uniform-weight total equals the common value exactly.
    Tensor total = sct_loss(tape, {logits, logits}, labels, {0.5f, 0.5f});
    Tensor single = softmax_cross_entropy(tape, logits, labels);
    EXPECT_EQ(total.item(), single.item());
}

TEST(SctLoss, WeightedHandValue) {
    // Per-scale losses (1.0, 3.0) with alphas (0.25, 0.75) -> 2.5. Losses are
    // forged through scalar tensors to keep the arithmetic exact.
    Tape tape;
    std::vector<Tensor> losses{Tensor::scalar(1.0f), Tensor::scalar(3.0f)};
    EXPECT_FLOAT_EQ(weighted_sum(tape, losses, {0.25f, 0.75f}).item(), 2.5f);
}

TEST(SctLoss, LengthMismatchRejected) {
    Rng rng(6);
    Tensor logits = random_tensor(Shape(2, 4, 1, 1), rng);
    Tape tape;
    EXPECT_THROW(sct_loss(tape, {logits, logits}, {0, 1}, {1.0f}), std::invalid_argument);
}

TEST(SctLoss, ZeroAlphaReducesToScaledSingleScale) {
    Rng rng(7);
    Tensor l0 = random_tensor(Shape(3, 4, 1, 1), rng);
    Tensor l1 = random_tensor(Shape(3, 4, 1, 1), rng);
    std::vector<int> labels{0, 1, 2};
    Tape tape;
    const float a = 0.7f;
    Tensor combined = sct_loss(tape, {l0, l1}, labels, {a, 0.0f});
    Tensor single = softmax_cross_entropy(tape, l0, labels);
    Tensor scaled = weighted_sum(tape, {single}, {a});
    EXPECT_EQ(combined.item(), scaled.item());
}

TEST(GradientFlow, ZeroAlphaScaleContributesNothing) {
    // S-BN model over {32,16} with alphas (1,0) must produce bit-identical
    // shared-parameter gradients to an M=1 model over {32}; the scale-1 bank
    // sees running-stat updates but zero gamma/beta gradients.
    ScaleSet two({{32, 32}, {16, 16}});
    ScaleSet one({{32, 32}});
    Model a = build_model(resnet8(NormKind::ScaleBN), two, 11);
    Model b = build_model(resnet8(NormKind::ScaleBN), one, 11);

    Dataset ds = synthetic_dataset(21, 8, 4);
    AugmentConfig aug = no_augment();
    Rng rng_a(5), rng_b(5);
    Tensor batch_a = augment_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7}, aug, rng_a, true);
    Tensor batch_b = augment_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7}, aug, rng_b, true);
    std::vector<int> labels(ds.labels.begin(), ds.labels.begin() + 8);

    Tape ta;
    ScaleCollection ca = scale_sample(ta, batch_a, labels, two);
    auto la = sct_forward(ta, a, ca, Mode::Train, Calibration::Avg);
    Tensor lossa = sct_loss(ta, la, labels, {1.0f, 0.0f});
    ta.backward(lossa);

    Tape tb;
    ScaleCollection cb = scale_sample(tb, batch_b, labels, one);
    auto lb = sct_forward(tb, b, cb, Mode::Train, Calibration::Avg);
    Tensor lossb = sct_loss(tb, lb, labels, {1.0f});
    tb.backward(lossb);

    EXPECT_EQ(lossa.item(), lossb.item());

    std::map<std::string, Parameter*> bp;
    for (auto* p : b.parameters()) bp[p->name] = p;
    int compared = 0;
    for (auto* p : a.parameters()) {
        if (p->name.find(".scale1") != std::string::npos) {
            // Forwarded but weightless: gradients must be exactly zero.
            ASSERT_TRUE(p->value.has_grad()) << p->name;
            for (std::size_t i = 0; i < p->value.numel(); ++i)
                ASSERT_EQ(p->value.grad()[i], 0.0f) << p->name;
            continue;
        }
        auto it = bp.find(p->name);
        ASSERT_NE(it, bp.end()) << p->name;
        for (std::size_t i = 0; i < p->value.numel(); ++i)
            ASSERT_EQ(p->value.grad()[i], it->second->value.grad()[i]) << p->name << "[" << i << "]";
        ++compared;
    }
    EXPECT_GT(compared, 0);

    // Scale-1 running statistics moved away from the fresh-bank defaults.
    bool stats_moved = false;
    for (auto& e : a.state_entries())
        if (e.name.find("running_mean.scale1") != std::string::npos)
            for (std::size_t i = 0; i < e.len; ++i) stats_moved = stats_moved || e.data[i] != 0.0f;
    EXPECT_TRUE(stats_moved);
}

TEST(GradientFlow, SkipZeroWeightLeavesBankUntouched) {
    ScaleSet two({{32, 32}, {16, 16}});
    Model m = build_model(resnet8(NormKind::ScaleBN), two, 11);
    Dataset ds = synthetic_dataset(21, 8, 4);
    Rng rng(5);
    Tensor batch = augment_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7}, no_augment(), rng, true);
    std::vector<int> labels(ds.labels.begin(), ds.labels.begin() + 8);

    Tape tape;
    ScaleCollection col = scale_sample(tape, batch, labels, two);
    std::vector<bool> mask{true, false};
    auto logits = sct_forward(tape, m, col, Mode::Train, Calibration::Avg, &mask);
    EXPECT_FALSE(logits[1].defined());
    Tensor loss = sct_loss(tape, logits, labels, {1.0f, 0.0f});
    tape.backward(loss);

    for (auto& e : m.state_entries()) {
        if (e.name.find("running_mean.scale1") != std::string::npos)
            for (std::size_t i = 0; i < e.len; ++i) ASSERT_EQ(e.data[i], 0.0f) << e.name;
        if (e.name.find("running_var.scale1") != std::string::npos)
            for (std::size_t i = 0; i < e.len; ++i) ASSERT_EQ(e.data[i], 1.0f) << e.name;
    }
}

TEST(Train, OneEpochLearnsOnSynthetic) {
    ModelConfig mc;
    mc.family = ModelFamily::SmallCnn;
    mc.norm = NormKind::BatchNorm;
    Model m = build_model(mc, 7);
    Dataset ds = synthetic_dataset(31, 256, 10);
    SCTConfig cfg;
    cfg.scale_set = ScaleSet({{32, 32}});
    cfg.scheme_name = "cifar-32";
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.lr0 = 0.05;
    cfg.seed = 3;
    TrainState state = train(m, ds, cfg);
    ASSERT_GE(state.total_loss_history.size(), 8u);
    const float first = state.total_loss_history.front();
    float last_avg = 0.0f;
    for (std::size_t i = state.total_loss_history.size() - 4; i < state.total_loss_history.size();
         ++i)
        last_avg += state.total_loss_history[i] / 4.0f;
    EXPECT_LT(last_avg, first);
}

TEST(Train, TotalLossIsAlphaCombinationOfPerScaleLosses) {
    ScaleSet scales({{32, 32}, {16, 16}});
    Model m = build_model(resnet8(NormKind::ScaleBN), scales, 7);
    Dataset ds = synthetic_dataset(32, 64, 10);
    SCTConfig cfg;
    cfg.scale_set = scales;
    cfg.alphas = {0.25f, 0.75f};
    cfg.epochs = 1;
    cfg.batch_size = 32;
    cfg.lr0 = 0.01;
    TrainState state = train(m, ds, cfg);
    for (std::size_t s = 0; s < state.total_loss_history.size(); ++s) {
        const double combo =
            0.25 * state.loss_history[0][s] + 0.75 * state.loss_history[1][s];
        EXPECT_NEAR(state.total_loss_history[s], combo, 1e-5);
    }
}

TEST(Train, DeterministicRunsProduceIdenticalMetricsCsv) {
    const auto dir1 = fs::temp_directory_path() / "sct_det_run1";
    const auto dir2 = fs::temp_directory_path() / "sct_det_run2";
    for (const auto& dir : {dir1, dir2}) {
        fs::remove_all(dir);
        ModelConfig mc;
        mc.family = ModelFamily::SmallCnn;
        mc.norm = NormKind::BatchNorm;
        Model m = build_model(mc, 9);
        Dataset ds = synthetic_dataset(33, 128, 10);
        SCTConfig cfg;
        cfg.scale_set = ScaleSet({{32, 32}, {16, 16}});
        cfg.epochs = 1;
        cfg.batch_size = 32;
        cfg.lr0 = 0.05;
        cfg.seed = 17;
        cfg.deterministic = true;
        cfg.out_dir = dir.string();
        train(m, ds, cfg, "determinism-check\n");
    }
    const std::string csv1 = read_file((dir1 / "metrics.csv").string());
    const std::string csv2 = read_file((dir2 / "metrics.csv").string());
    ASSERT_FALSE(csv1.empty());
    EXPECT_EQ(csv1, csv2);
    EXPECT_EQ(read_file((dir1 / "checkpoint.bin").string()),
              read_file((dir2 / "checkpoint.bin").string()));
    EXPECT_EQ(read_file((dir1 / "config.txt").string()), "determinism-check\n");
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST(Train, OverfitsSixtyFourSamples) {
    Model m = build_model(resnet8(NormKind::BatchNorm), 5);
    Dataset ds = synthetic_dataset(34, 64, 10);
    SCTConfig cfg;
    cfg.scale_set = ScaleSet({{32, 32}});
    cfg.epochs = 100;  // 2 steps per epoch = 200 steps
    cfg.batch_size = 32;
    cfg.lr0 = 0.05;
    cfg.momentum = 0.9f;
    cfg.weight_decay = 0.0f;
    cfg.seed = 4;
    cfg.augment = no_augment();
    TrainState state = train(m, ds, cfg);
    ASSERT_LE(state.step, 200);
    EvalOptions eo;
    eo.augment = cfg.augment;
    const double acc = evaluate(m, ds, 32, 32, eo).accuracy;
    EXPECT_GE(acc, 0.95);
}

TEST(Train, CheckpointRoundTripReproducesAccuracyBitExact) {
    const auto dir = fs::temp_directory_path() / "sct_ckpt_run";
    fs::remove_all(dir);
    ScaleSet scales({{32, 32}, {16, 16}});
    Model m = build_model(resnet8(NormKind::ScaleBN), scales, 5);
    Dataset ds = synthetic_dataset(35, 128, 10);
    SCTConfig cfg;
    cfg.scale_set = scales;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.lr0 = 0.05;
    cfg.out_dir = dir.string();
    train(m, ds, cfg);

    Dataset test = synthetic_dataset(36, 200, 10);
    const double acc_live = evaluate(m, test, 32, 32).accuracy;

    Model loaded = build_model(resnet8(NormKind::ScaleBN), scales, 99);
    load_model_from_file(loaded, (dir / "checkpoint.bin").string());
    const double acc_loaded = evaluate(loaded, test, 32, 32).accuracy;
    EXPECT_EQ(acc_live, acc_loaded);

    // Exactly one classifier weight matrix regardless of M.
    int fc_entries = 0;
    for (const auto& e : loaded.state_entries())
        if (e.name == "fc.weight") ++fc_entries;
    EXPECT_EQ(fc_entries, 1);
    fs::remove_all(dir);
}

TEST(Evaluate, RepeatedEvaluationIdentical) {
    ScaleSet scales({{32, 32}, {16, 16}});
    Model m = build_model(resnet8(NormKind::ScaleBN), scales, 6);
    Dataset ds = synthetic_dataset(37, 128, 10);
    const auto r1 = evaluate(m, ds, 16, 16);
    const auto r2 = evaluate(m, ds, 16, 16);
    EXPECT_EQ(r1.accuracy, r2.accuracy);
    EXPECT_EQ(r1.bank_index, 1);
}

TEST(Evaluate, RandomLogitModelNearChance) {
    ModelConfig mc;
    mc.family = ModelFamily::SmallCnn;
    mc.norm = NormKind::BatchNorm;
    Model m = build_model(mc, 123);  // untrained: logits uncorrelated with labels
    Dataset ds = synthetic_dataset(38, 1000, 10);
    const double acc = evaluate(m, ds, 32, 32).accuracy;
    EXPECT_GE(acc, 0.06);
    EXPECT_LE(acc, 0.14);
}

TEST(Evaluate, UnregisteredScaleListsBanksAndNearestOverride) {
    ScaleSet scales({{32, 32}, {16, 16}});
    Model m = build_model(resnet8(NormKind::ScaleBN), scales, 6);
    Dataset ds = synthetic_dataset(39, 32, 10);
    try {
        evaluate(m, ds, 20, 20);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("32x32,16x16"), std::string::npos) << e.what();
    }
    EvalOptions opts;
    opts.nearest_bank = true;
    const auto res = evaluate(m, ds, 20, 20, opts);
    EXPECT_EQ(res.bank_index, 1);  // 20x20 is nearest 16x16 by area
}

TEST(Train, NonFiniteLossAbortsWithLastGoodCheckpoint) {
    const auto dir = fs::temp_directory_path() / "sct_diverge";
    fs::remove_all(dir);
    ModelConfig mc;
    mc.family = ModelFamily::SmallCnn;
    mc.norm = NormKind::None;  // nothing re-normalizes the blow-up
    Model m = build_model(mc, 8);
    Dataset ds = synthetic_dataset(40, 64, 10);
    SCTConfig cfg;
    cfg.scale_set = ScaleSet({{32, 32}});
    cfg.epochs = 50;
    cfg.batch_size = 32;
    cfg.lr0 = 1e9;
    cfg.momentum = 0.0f;
    cfg.weight_decay = 0.0f;
    cfg.out_dir = dir.string();
    EXPECT_THROW(train(m, ds, cfg), TrainingDiverged);

    ASSERT_TRUE(fs::exists(dir / "checkpoint.bin"));
    ModelConfig mc2 = mc;
    Model restored = build_model(mc2, 1);
    load_model_from_file(restored, (dir / "checkpoint.bin").string());
    for (const auto& e : restored.state_entries())
        for (std::size_t i = 0; i < e.len; ++i)
            ASSERT_TRUE(std::isfinite(e.data[i])) << e.name;
    fs::remove_all(dir);
}

TEST(SchemeScales, BuiltinsMatchNamedSchemes) {
    EXPECT_EQ(scheme_scales("standard").str(), "224x224");
    EXPECT_EQ(scheme_scales("sct-a").str(), "320x320,224x224,192x192");
    EXPECT_EQ(scheme_scales("sct-b").str(), "320x320,224x224,192x192,128x128,64x64");
    EXPECT_EQ(scheme_scales("cifar-32-24").str(), "32x32,24x24");
    EXPECT_EQ(scheme_scales("cifar-32-28").str(), "32x32,28x28");
    EXPECT_EQ(scheme_scales("cifar-32-16").str(), "32x32,16x16");
    EXPECT_THROW(scheme_scales("nope"), std::invalid_argument);
}

TEST(SCTConfig, DefaultsAndValidation) {
    SCTConfig cfg;
    cfg.scale_set = ScaleSet({{32, 32}, {16, 16}});
    const auto alphas = cfg.resolved_alphas();
    ASSERT_EQ(alphas.size(), 2u);
    EXPECT_FLOAT_EQ(alphas[0], 0.5f);
    EXPECT_FLOAT_EQ(alphas[1], 0.5f);

    cfg.epochs = 160;
    EXPECT_EQ(cfg.resolved_milestones(), (std::vector<int>{80, 120}));
    cfg.epochs = 40;
    EXPECT_EQ(cfg.resolved_milestones(), (std::vector<int>{20, 30}));

    cfg.alphas = {0.5f};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.alphas = {0.5f, -0.1f};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
