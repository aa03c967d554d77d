// Command-line entry point: train / eval / probe / plotdata / selftest.
// Exit codes: 0 success, 1 usage or config error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sct/checkpoint.hpp"
#include "sct/config.hpp"
#include "sct/data.hpp"
#include "sct/diagnostics.hpp"
#include "sct/models.hpp"
#include "sct/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sct;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CliState {
    std::string config_path;
    std::map<std::string, std::string> overrides;
};

// Registers a string option that lands in the override map under `key`.
void add_kv(CLI::App* cmd, CliState& st, const std::string& flag, const std::string& key,
            const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&st, key](const std::string& v) { st.overrides[key] = v; }, help);
}

void add_kv_flag(CLI::App* cmd, CliState& st, const std::string& flag, const std::string& key,
                 const std::string& help) {
    cmd->add_flag_callback(
        flag, [&st, key]() { st.overrides[key] = "1"; }, help);
}

void add_common_options(CLI::App* cmd, CliState& st) {
    cmd->add_option("--config", st.config_path, "key=value config file");
    add_kv(cmd, st, "--family", "family", "resnet-cifar|small-cnn");
    add_kv(cmd, st, "--depth", "depth", "resnet depth (6n+2)");
    add_kv(cmd, st, "--norm", "norm", "bn|sbn|gn|fixup");
    add_kv(cmd, st, "--num-classes", "num_classes", "number of classes");
    add_kv(cmd, st, "--width-multiplier", "width_multiplier", "channel width multiplier");
    add_kv(cmd, st, "--gn-groups", "gn_groups", "groups for group norm");
    add_kv(cmd, st, "--scheme", "scheme",
           "standard|sct-a|sct-b|cifar-32|cifar-32-24|cifar-32-28|cifar-32-16");
    add_kv(cmd, st, "--scales", "scales", "explicit scale list, e.g. 32x32,16x16");
    add_kv(cmd, st, "--alphas", "alphas", "per-scale loss weights (default uniform 1/M)");
    add_kv(cmd, st, "--epochs", "epochs", "training epochs");
    add_kv(cmd, st, "--batch-size", "batch_size", "mini-batch size");
    add_kv(cmd, st, "--lr0", "lr0", "initial learning rate");
    add_kv(cmd, st, "--schedule", "schedule", "cosine|step");
    add_kv(cmd, st, "--milestones", "milestones", "step-schedule epochs, e.g. 80,120");
    add_kv(cmd, st, "--calibration", "calibration", "avg|max");
    add_kv(cmd, st, "--seed", "seed", "run seed");
    add_kv_flag(cmd, st, "--deterministic", "deterministic", "bit-reproducible mode");
    add_kv_flag(cmd, st, "--skip-zero-weight", "skip_zero_weight",
                "do not forward scales whose alpha is 0");
    add_kv(cmd, st, "--momentum", "momentum", "SGD momentum");
    add_kv(cmd, st, "--weight-decay", "weight_decay", "L2 weight decay");
    add_kv(cmd, st, "--pad-crop", "pad_crop", "augmentation pad-then-crop pixels");
    add_kv(cmd, st, "--hflip-prob", "hflip_prob", "horizontal flip probability");
    add_kv(cmd, st, "--mean", "mean", "normalization mean, 3 values");
    add_kv(cmd, st, "--std", "std", "normalization std, 3 values");
    add_kv(cmd, st, "--data-dir", "data_dir", "directory with CIFAR-10 binary batches");
    add_kv_flag(cmd, st, "--synthetic", "synthetic", "use the synthetic dataset");
    add_kv(cmd, st, "--synthetic-train-count", "synthetic_train_count", "synthetic train size");
    add_kv(cmd, st, "--synthetic-test-count", "synthetic_test_count", "synthetic test size");
    add_kv(cmd, st, "--train-subset", "train_subset", "train on a seeded subset of this size");
    add_kv(cmd, st, "--out-dir", "out_dir", "run output directory");
    add_kv(cmd, st, "--checkpoint-every", "checkpoint_every", "checkpoint every N epochs");
    add_kv_flag(cmd, st, "--nearest-bank", "nearest_bank",
                "serve unregistered eval sizes from the nearest S-BN bank");
}

RunConfig resolve_config(const CliState& st) {
    RunConfig rc;
    if (!st.config_path.empty()) rc.load_file(st.config_path);
    for (const auto& [k, v] : st.overrides) rc.set(k, v);
    return rc;
}

std::pair<Dataset, Dataset> load_data(const ResolvedRun& run) {
    if (run.synthetic) {
        Dataset train = synthetic_dataset(42, run.synthetic_train_count, run.model.num_classes);
        Dataset test = synthetic_dataset(43, run.synthetic_test_count, run.model.num_classes);
        test.split = "test";
        return {std::move(train), std::move(test)};
    }
    if (run.data_dir.empty())
        throw std::invalid_argument("no data source: pass --data-dir or --synthetic");
    return load_cifar10(run.data_dir);
}

Model build_from_run(const ResolvedRun& run) {
    Model model = run.model.norm == NormKind::ScaleBN
                      ? build_model(run.model, run.sct.scale_set, run.sct.seed)
                      : build_model(run.model, run.sct.seed);
    if (run.fixup) model.fixup_initialize();
    return model;
}

int cmd_train(const CliState& st) {
    RunConfig rc;
    ResolvedRun run;
    try {
        rc = resolve_config(st);
        run = resolve_run(rc);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        auto [train_set, test_set] = load_data(run);
        if (run.train_subset > 0) train_set = train_set.subset(run.train_subset, run.sct.seed);
        Model model = build_from_run(run);
        std::printf("training %s | scales %s | %d epochs | %d train images\n",
                    model.arch_string().c_str(), run.sct.scale_set.str().c_str(), run.sct.epochs,
                    train_set.count());
        TrainState state =
            train(model, train_set, run.sct, rc.echo(), [&](int epoch, double loss, double lr) {
                std::printf("epoch %3d | lr %.5f | mean loss %.4f\n", epoch, lr, loss);
                std::fflush(stdout);
            });
        std::printf("done: %lld steps, checkpoint at %s/checkpoint.bin\n",
                    state.step, run.sct.out_dir.c_str());
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_eval(const CliState& st, const std::string& checkpoint,
             const std::vector<std::pair<int, int>>& sizes_flag) {
    RunConfig rc;
    ResolvedRun run;
    try {
        rc = resolve_config(st);
        run = resolve_run(rc);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        Checkpoint ck = load_checkpoint(checkpoint);
        auto [mc, scales] = parse_arch_string(ck.arch);
        Model model = mc.norm == NormKind::ScaleBN ? build_model(mc, scales, 1)
                                                   : build_model(mc, 1);
        load_model(model, ck);

        auto [train_set, test_set] = load_data(run);
        (void)train_set;

        std::vector<std::pair<int, int>> sizes = sizes_flag;
        for (const auto& s : run.test_sizes) sizes.push_back(s);
        if (sizes.empty()) sizes = {{kImageSize, kImageSize}};

        EvalOptions opts;
        opts.nearest_bank = run.nearest_bank;
        opts.calibration = run.sct.calibration;
        opts.augment = run.sct.augment;

        const std::string out_dir = st.overrides.count("out_dir")
                                        ? run.sct.out_dir
                                        : fs::path(checkpoint).parent_path().string();
        if (!out_dir.empty()) fs::create_directories(out_dir);
        std::ofstream csv(out_dir.empty() ? "eval.csv" : out_dir + "/eval.csv", std::ios::trunc);
        csv << "test_h,test_w,accuracy,bank\n";

        std::printf("%-12s %-10s %s\n", "test size", "accuracy", "bank");
        int ok_rows = 0;
        for (const auto& [h, w] : sizes) {
            try {
                const EvalResult res = evaluate(model, test_set, h, w, opts);
                const std::string bank =
                    res.bank_index >= 0 ? "scale" + std::to_string(res.bank_index) : "-";
                std::printf("%-12s %-10.4f %s\n",
                            (std::to_string(h) + "x" + std::to_string(w)).c_str(), res.accuracy,
                            bank.c_str());
                csv << h << "," << w << "," << res.accuracy << "," << bank << "\n";
                ++ok_rows;
            } catch (const std::exception& e) {
                std::printf("%-12s error: %s\n",
                            (std::to_string(h) + "x" + std::to_string(w)).c_str(), e.what());
                csv << h << "," << w << ",error,-\n";
            }
        }
        return ok_rows > 0 ? kExitOk : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_probe(const CliState& st, const std::string& checkpoint,
              const std::vector<std::pair<int, int>>& sizes_flag, int slice, bool pre_activation) {
    RunConfig rc;
    ResolvedRun run;
    try {
        rc = resolve_config(st);
        run = resolve_run(rc);
        if (slice <= 0) throw std::invalid_argument("probe slice size must be positive");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        Checkpoint ck = load_checkpoint(checkpoint);
        auto [mc, scales] = parse_arch_string(ck.arch);
        Model model = mc.norm == NormKind::ScaleBN ? build_model(mc, scales, 1)
                                                   : build_model(mc, 1);
        load_model(model, ck);

        auto [train_set, test_set] = load_data(run);
        (void)train_set;
        Dataset slice_set = test_set.count() > slice ? test_set.subset(slice, run.sct.seed)
                                                     : test_set;

        ScaleSet probe_scales = run.sct.scale_set;
        if (!sizes_flag.empty()) probe_scales = ScaleSet(sizes_flag);
        else if (mc.norm == NormKind::ScaleBN) probe_scales = scales;

        ProbeOptions opts;
        opts.pre_activation = pre_activation;
        opts.augment = run.sct.augment;
        auto records = probe_activations(model, slice_set, probe_scales, opts);
        std::vector<DivergenceReport> reports{
            divergence_report(records, DivergenceMetric::SymKL),
            divergence_report(records, DivergenceMetric::W1)};
        emit_report(records, reports, run.sct.out_dir);
        std::printf("wrote %s/distributions.csv and %s/divergence.csv (%zu records)\n",
                    run.sct.out_dir.c_str(), run.sct.out_dir.c_str(), records.size());
        for (const auto& rep : reports)
            for (const auto& e : rep.entries)
                std::printf("stage %d | scales %d vs %d | %s = %.6f\n", e.stage_index, e.scale_a,
                            e.scale_b, rep.metric_name.c_str(), e.value);
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_plotdata(const std::string& input, const std::string& out_dir) {
    try {
        emit_plotdata(input, out_dir);
        std::printf("wrote per-stage overlay series under %s\n", out_dir.c_str());
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

// Fast invariant battery. `fault` deliberately breaks one check so the
// battery itself can be shown to detect failures.
int cmd_selftest(const std::string& fault) {
    if (!fault.empty() && fault != "bn-eps") {
        std::cerr << "config error: unknown fault '" << fault << "' (supported: bn-eps)\n";
        return kExitUsage;
    }
    int failures = 0;
    auto report = [&](const std::string& name, bool ok, const std::string& detail = "") {
        std::printf("%s %s%s\n", ok ? "PASS" : "FAIL", name.c_str(),
                    detail.empty() ? "" : (": " + detail).c_str());
        if (!ok) ++failures;
    };

    // Gradient check: conv+relu+linear chain against central differences.
    {
        Rng rng(1);
        Tensor x(2, 2, 6, 6), w(3, 2, 3, 3), wfc(4, 3, 1, 1);
        for (auto* t : {&x, &w, &wfc})
            for (std::size_t i = 0; i < t->numel(); ++i) t->data()[i] = rng.uniform(-0.8f, 0.8f);
        w.set_requires_grad(true);
        wfc.set_requires_grad(true);
        auto forward = [&](Tape& tape) {
            Tensor h = relu(tape, conv2d(tape, x, w, nullptr, 1, 1));
            Tensor p = adaptive_avg_pool(tape, h, 1, 1);
            return softmax_cross_entropy(tape, linear(tape, p, wfc, nullptr), {1, 3});
        };
        Tape tape;
        Tensor loss = forward(tape);
        tape.backward(loss);
        double worst = 0.0;
        Rng probe(2);
        for (Tensor* t : {&w, &wfc}) {
            for (int trial = 0; trial < 6; ++trial) {
                const std::size_t i = probe.uniform_below(static_cast<std::uint32_t>(t->numel()));
                float* p = t->data();
                const float saved = p[i];
                const double h = 1e-3;
                Tape t1;
                RecordingGuard g1(t1, false);
                p[i] = static_cast<float>(saved + h);
                const double up = forward(t1).item();
                p[i] = static_cast<float>(saved - h);
                const double down = forward(t1).item();
                p[i] = saved;
                const double fd = (up - down) / (2 * h);
                worst = std::max(worst, std::abs(t->grad()[i] - fd) / std::max(1.0, std::abs(fd)));
            }
        }
        report("gradient-check", worst < 1e-3, "max rel err " + std::to_string(worst));
    }

    // Resize identities.
    {
        Rng rng(3);
        Tensor x(1, 2, 7, 5);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.0f, 1.0f);
        Tape tape;
        Tensor same = bilinear_resize(tape, x, 7, 5);
        bool identity = true;
        for (std::size_t i = 0; i < x.numel(); ++i)
            identity = identity && same.data()[i] == x.data()[i];
        Tensor half = bilinear_resize(
            tape, Tensor::from_vector(Shape(1, 1, 1, 2), {0.0f, 1.0f}), 1, 4);
        const float want[4] = {0.0f, 0.25f, 0.75f, 1.0f};
        bool halfpix = true;
        for (int i = 0; i < 4; ++i) halfpix = halfpix && std::abs(half.data()[i] - want[i]) < 1e-6f;
        report("resize-identity", identity);
        report("resize-half-pixel", halfpix);
    }

    // BN statistics: train-mode output mean ~ beta, var ~ gamma^2.
    {
        Rng rng(4);
        Tensor x(8, 2, 4, 4);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.normal(1.0f, 2.0f);
        NormParamBank bank(2);
        if (fault == "bn-eps") bank.eps = 0.05f;  // injected fault
        bank.gamma.value.data()[0] = 1.5f;
        bank.beta.value.data()[1] = -0.5f;
        Tape tape;
        Tensor out = bn_forward_train(tape, x, bank);
        bool ok = true;
        for (int c = 0; c < 2; ++c) {
            double sum = 0.0, sq = 0.0;
            const int m = 8 * 4 * 4;
            for (int n = 0; n < 8; ++n)
                for (int h = 0; h < 4; ++h)
                    for (int wct = 0; wct < 4; ++wct) sum += out.at(n, c, h, wct);
            const double mean = sum / m;
            for (int n = 0; n < 8; ++n)
                for (int h = 0; h < 4; ++h)
                    for (int wct = 0; wct < 4; ++wct) {
                        const double d = out.at(n, c, h, wct) - mean;
                        sq += d * d;
                    }
            const double g = bank.gamma.value.data()[c];
            ok = ok && std::abs(mean - bank.beta.value.data()[c]) < 1e-4 &&
                 std::abs(sq / m - g * g) < 1e-3;
        }
        report("bn-statistics", ok);
    }

    // S-BN bank equivalence (bitwise against vanilla BN).
    {
        Rng rng(5);
        Tensor x(4, 3, 4, 4);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-2.0f, 2.0f);
        SBNState state(3, ScaleSet({{8, 8}, {4, 4}}));
        NormParamBank vanilla(3);
        Tape tape;
        Tensor a = sbn_forward(tape, x, 0, state, Mode::Train);
        Tensor b = bn_forward_train(tape, x, vanilla);
        bool same = true;
        for (std::size_t i = 0; i < a.numel(); ++i) same = same && a.data()[i] == b.data()[i];
        report("sbn-bank-identity", same);
    }

    // Total-loss identities.
    {
        Tape tape;
        std::vector<Tensor> pair{Tensor::scalar(1.0f), Tensor::scalar(3.0f)};
        const bool exact = weighted_sum(tape, pair, {0.25f, 0.75f}).item() == 2.5f;
        Rng rng(6);
        Tensor logits(3, 4, 1, 1);
        for (std::size_t i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.uniform(-1.f, 1.f);
        std::vector<int> labels{0, 2, 1};
        Tensor single = softmax_cross_entropy(tape, logits, labels);
        Tensor reduced = sct_loss(tape, {logits, logits}, labels, {0.5f, 0.5f});
        report("loss-identities", exact && reduced.item() == single.item());
    }

    // Seeded determinism over 10 optimizer steps.
    {
        auto run = [](std::vector<float>* out) {
            Rng rng(7);
            Tensor x(4, 2, 5, 5);
            for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.f, 1.f);
            Parameter w("w", Tensor(2, 2, 3, 3));
            for (std::size_t i = 0; i < w.value.numel(); ++i)
                w.value.data()[i] = rng.uniform(-0.4f, 0.4f);
            Parameter fcw("fc", Tensor(3, 2, 1, 1));
            for (std::size_t i = 0; i < fcw.value.numel(); ++i)
                fcw.value.data()[i] = rng.uniform(-0.4f, 0.4f);
            SgdMomentum opt({&w, &fcw}, 0.9f, 1e-4f);
            for (int s = 0; s < 10; ++s) {
                Tape tape;
                Tensor h = relu(tape, conv2d(tape, x, w.value, nullptr, 1, 1));
                Tensor logits = linear(tape, adaptive_avg_pool(tape, h, 1, 1), fcw.value, nullptr);
                Tensor loss = softmax_cross_entropy(tape, logits, {0, 1, 2, 0});
                opt.zero_grad();
                tape.backward(loss);
                opt.step(0.05f);
                out->push_back(loss.item());
            }
        };
        std::vector<float> a, b;
        run(&a);
        run(&b);
        report("determinism", a == b);
    }

    std::printf("%s: %d failure(s)\n", failures == 0 ? "selftest passed" : "selftest FAILED",
                failures);
    return failures == 0 ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scale-calibrated multi-resolution CNN training"};
    app.require_subcommand(1);

    CliState train_st, eval_st, probe_st;

    CLI::App* train_cmd = app.add_subcommand("train", "train a model, writing a run directory");
    add_common_options(train_cmd, train_st);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint at one or more sizes");
    add_common_options(eval_cmd, eval_st);
    std::string eval_ckpt;
    std::vector<std::pair<int, int>> eval_sizes;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--test-size", eval_sizes, "test size H W (repeatable)");

    CLI::App* probe_cmd =
        app.add_subcommand("probe", "per-stage activation distributions and divergences");
    add_common_options(probe_cmd, probe_st);
    std::string probe_ckpt;
    std::vector<std::pair<int, int>> probe_sizes;
    int probe_slice = 512;
    bool pre_activation = false;
    probe_cmd->add_option("--checkpoint", probe_ckpt, "checkpoint file")->required();
    probe_cmd->add_option("--probe-size", probe_sizes, "probe size H W (repeatable)");
    probe_cmd->add_option("--slice", probe_slice, "number of images to probe");
    probe_cmd->add_flag("--pre-activation", pre_activation, "capture pre-activation taps");

    CLI::App* plot_cmd = app.add_subcommand("plotdata", "re-bin distributions.csv for plotting");
    std::string plot_in, plot_out = "plot";
    plot_cmd->add_option("--in", plot_in, "distributions.csv produced by probe")->required();
    plot_cmd->add_option("--out-dir", plot_out, "overlay output directory");

    CLI::App* self_cmd = app.add_subcommand("selftest", "fast invariant battery");
    std::string fault;
    self_cmd->add_option("--break", fault, "inject a named fault (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (train_cmd->parsed()) return cmd_train(train_st);
    if (eval_cmd->parsed()) return cmd_eval(eval_st, eval_ckpt, eval_sizes);
    if (probe_cmd->parsed()) return cmd_probe(probe_st, probe_ckpt, probe_sizes, probe_slice,
                                              pre_activation);
    if (plot_cmd->parsed()) return cmd_plotdata(plot_in, plot_out);
    if (self_cmd->parsed()) return cmd_selftest(fault);
    return kExitUsage;
}
