#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sct/diagnostics.hpp"

using namespace sct;

namespace {

namespace fs = std::filesystem;

StageDistributionRecord record_from_values(const std::vector<float>& values, int stage = 0,
                                            int scale = 0) {
    StageDistributionRecord r;
    r.stage_index = stage;
    r.scale_index = scale;
    r.histogram.assign(r.spec.bins, 0);
    double sum = 0.0, sq = 0.0;
    for (float v : values) {
        ++r.histogram[r.spec.bin_of(v)];
        sum += v;
        sq += static_cast<double>(v) * v;
    }
    r.sample_count = values.size();
    r.mean = sum / values.size();
    r.variance = sq / values.size() - r.mean * r.mean;
    r.check();
    return r;
}

Model taps_model(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.family = ModelFamily::SmallCnn;
    cfg.norm = NormKind::BatchNorm;
    return build_model(cfg, seed);
}

}  // namespace

TEST(Probe, DeterministicAcrossRuns) {
    Model m = taps_model(3);
    Dataset ds = synthetic_dataset(50, 48, 10);
    ScaleSet scales({{32, 32}, {16, 16}});
    auto a = probe_activations(m, ds, scales);
    auto b = probe_activations(m, ds, scales);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].histogram, b[i].histogram);
        EXPECT_EQ(a[i].mean, b[i].mean);
        EXPECT_EQ(a[i].sample_count, b[i].sample_count);
    }
}

TEST(Probe, RecordCountAndSampleBookkeeping) {
    Model m = taps_model(4);
    Dataset ds = synthetic_dataset(51, 40, 10);
    ScaleSet scales({{32, 32}, {16, 16}});
    ProbeOptions opts;
    opts.batch_size = 16;
    auto records = probe_activations(m, ds, scales, opts);
    ASSERT_EQ(records.size(), 6u);  // 2 scales x 3 stages

    // small-cnn channels are (8, 16, 32); stage sizes follow ceil(H/2) twice.
    auto expected = [&](int scale_h, int stage) -> std::uint64_t {
        const int c = stage == 0 ? 8 : (stage == 1 ? 16 : 32);
        int h = scale_h;
        if (stage >= 1) h = (h + 1) / 2;
        if (stage >= 2) h = (h + 1) / 2;
        return static_cast<std::uint64_t>(40) * c * h * h;
    };
    for (const auto& r : records) {
        const int scale_h = r.scale_index == 0 ? 32 : 16;
        EXPECT_EQ(r.sample_count, expected(scale_h, r.stage_index))
            << "scale " << r.scale_index << " stage " << r.stage_index;
        r.check();
    }
}

TEST(Probe, ConstantInputIdentityLikeNetworkHasZeroVariance) {
    ModelConfig cfg;
    cfg.family = ModelFamily::SmallCnn;
    cfg.norm = NormKind::None;
    Model m = build_model(cfg, 5);
    // Zero conv weights and equal biases make every activation one constant.
    for (auto* p : m.parameters()) {
        if (p->name.find("conv.weight") != std::string::npos)
            for (std::size_t i = 0; i < p->value.numel(); ++i) p->value.data()[i] = 0.0f;
        if (p->name.find("conv.bias") != std::string::npos)
            for (std::size_t i = 0; i < p->value.numel(); ++i) p->value.data()[i] = 0.5f;
    }
    Dataset ds;
    ds.num_classes = 10;
    ds.images.assign(4 * kImageBytes, 128);
    ds.labels.assign(4, 0);
    auto records = probe_activations(m, ds, ScaleSet({{32, 32}}));
    for (const auto& r : records) {
        EXPECT_NEAR(r.variance, 0.0, 1e-9);
        EXPECT_NEAR(r.mean, 0.5, 1e-6);
    }
}

TEST(Probe, ModelWithoutTapsRejected) {
    ModelConfig cfg;
    cfg.family = ModelFamily::SmallCnn;
    cfg.enable_taps = false;
    Model m = build_model(cfg, 6);
    Dataset ds = synthetic_dataset(52, 16, 10);
    EXPECT_THROW(probe_activations(m, ds, ScaleSet({{32, 32}})), std::invalid_argument);
}

TEST(Probe, SbnUsesOwnBankAndChecksRegistration) {
    ScaleSet scales({{32, 32}, {16, 16}});
    ModelConfig cfg;
    cfg.depth = 8;
    cfg.norm = NormKind::ScaleBN;
    cfg.width_multiplier = 0.5f;
    Model m = build_model(cfg, scales, 7);
    Dataset ds = synthetic_dataset(53, 16, 10);
    EXPECT_NO_THROW(probe_activations(m, ds, scales));
    EXPECT_THROW(probe_activations(m, ds, ScaleSet({{24, 24}})), std::invalid_argument);
}

TEST(Divergence, IdenticalRecordsGiveZero) {
    Rng rng(8);
    std::vector<float> vals;
    for (int i = 0; i < 5000; ++i) vals.push_back(rng.normal());
    auto r = record_from_values(vals);
    EXPECT_DOUBLE_EQ(distribution_divergence(r, r, DivergenceMetric::SymKL), 0.0);
    EXPECT_DOUBLE_EQ(distribution_divergence(r, r, DivergenceMetric::W1), 0.0);
}

TEST(Divergence, DisjointOneBinW1IsCenterDistance) {
    StageDistributionRecord a, b;
    a.histogram.assign(a.spec.bins, 0);
    b.histogram.assign(b.spec.bins, 0);
    a.histogram[10] = 1000;
    b.histogram[42] = 1000;
    a.sample_count = b.sample_count = 1000;
    const double want = std::abs(a.spec.bin_center(42) - a.spec.bin_center(10));
    EXPECT_NEAR(distribution_divergence(a, b, DivergenceMetric::W1), want, 1e-9);
}

TEST(Divergence, ShiftedGaussiansW1NearOne) {
    Rng rng(9);
    std::vector<float> va, vb;
    for (int i = 0; i < 100000; ++i) {
        va.push_back(rng.normal(0.0f, 1.0f));
        vb.push_back(rng.normal(1.0f, 1.0f));
    }
    auto ra = record_from_values(va);
    auto rb = record_from_values(vb);
    EXPECT_NEAR(distribution_divergence(ra, rb, DivergenceMetric::W1), 1.0, 0.05);
}

TEST(Divergence, SymmetricAndNonnegative) {
    Rng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<float> va, vb;
        for (int i = 0; i < 2000; ++i) {
            va.push_back(rng.normal(rng.uniform(-2.0f, 2.0f), 1.0f));
            vb.push_back(rng.normal(rng.uniform(-2.0f, 2.0f), 0.5f));
        }
        auto ra = record_from_values(va);
        auto rb = record_from_values(vb);
        for (auto metric : {DivergenceMetric::SymKL, DivergenceMetric::W1}) {
            const double ab = distribution_divergence(ra, rb, metric);
            const double ba = distribution_divergence(rb, ra, metric);
            EXPECT_GE(ab, 0.0);
            EXPECT_NEAR(ab, ba, 1e-12);
        }
    }
}

TEST(Divergence, BinMismatchRejected) {
    StageDistributionRecord a, b;
    a.histogram.assign(a.spec.bins, 1);
    a.sample_count = a.spec.bins;
    b.spec.bins = 32;
    b.histogram.assign(32, 1);
    b.sample_count = 32;
    EXPECT_THROW(distribution_divergence(a, b, DivergenceMetric::W1), std::invalid_argument);
}

TEST(Report, RowCountsAndRoundTrip) {
    Model m = taps_model(11);
    Dataset ds = synthetic_dataset(54, 24, 10);
    ScaleSet scales({{32, 32}, {16, 16}});
    auto records = probe_activations(m, ds, scales);
    std::vector<DivergenceReport> reports{divergence_report(records, DivergenceMetric::SymKL),
                                          divergence_report(records, DivergenceMetric::W1)};
    // stages x scale-pairs x metrics = 3 x 1 x 2.
    EXPECT_EQ(reports[0].entries.size(), 3u);
    EXPECT_EQ(reports[1].entries.size(), 3u);

    const auto dir = fs::temp_directory_path() / "sct_diag_report";
    fs::remove_all(dir);
    emit_report(records, reports, dir.string());

    auto parsed = parse_distributions_csv((dir / "distributions.csv").string());
    ASSERT_EQ(parsed.size(), records.size());
    for (const auto& r : records) {
        bool found = false;
        for (const auto& p : parsed)
            if (p.stage_index == r.stage_index && p.scale_index == r.scale_index) {
                found = true;
                EXPECT_EQ(p.histogram, r.histogram);
                EXPECT_EQ(p.sample_count, r.sample_count);
            }
        EXPECT_TRUE(found);
    }

    std::ifstream div((dir / "divergence.csv").string());
    std::string line;
    int rows = 0;
    std::getline(div, line);
    EXPECT_EQ(line, "stage,scale_a,scale_b,metric,value");
    while (std::getline(div, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, 6);  // 3 stages x 1 pair x 2 metrics
    fs::remove_all(dir);
}

TEST(Report, EmptyRecordsGiveHeaderOnlyFiles) {
    const auto dir = fs::temp_directory_path() / "sct_diag_empty";
    fs::remove_all(dir);
    emit_report({}, {}, dir.string());
    std::ifstream dist((dir / "distributions.csv").string());
    std::string content((std::istreambuf_iterator<char>(dist)), std::istreambuf_iterator<char>());
    EXPECT_EQ(content, "stage,scale,bin_center,count\n");
    std::ifstream div((dir / "divergence.csv").string());
    std::string content2((std::istreambuf_iterator<char>(div)), std::istreambuf_iterator<char>());
    EXPECT_EQ(content2, "stage,scale_a,scale_b,metric,value\n");
    fs::remove_all(dir);
}

TEST(Report, PlotdataOverlaySeries) {
    Model m = taps_model(12);
    Dataset ds = synthetic_dataset(55, 16, 10);
    ScaleSet scales({{32, 32}, {16, 16}});
    auto records = probe_activations(m, ds, scales);
    const auto dir = fs::temp_directory_path() / "sct_diag_plot";
    fs::remove_all(dir);
    emit_report(records, {}, dir.string());
    emit_plotdata((dir / "distributions.csv").string(), (dir / "plot").string());
    for (int st = 0; st < 3; ++st) {
        std::ifstream os((dir / "plot" / ("overlay_stage" + std::to_string(st) + ".csv")).string());
        ASSERT_TRUE(os.good()) << "stage " << st;
        std::string header;
        std::getline(os, header);
        EXPECT_EQ(header, "bin_center,density_scale_0,density_scale_1");
        int rows = 0;
        std::string line;
        while (std::getline(os, line))
            if (!line.empty()) ++rows;
        EXPECT_EQ(rows, 64);
    }
    fs::remove_all(dir);
}

TEST(Histogram, OutliersClampToEdgeBins) {
    HistogramSpec spec;
    EXPECT_EQ(spec.bin_of(-100.0f), 0);
    EXPECT_EQ(spec.bin_of(100.0f), spec.bins - 1);
    EXPECT_EQ(spec.bin_of(-8.0f), 0);
    // Center of bin i recovers bin i.
    for (int i = 0; i < spec.bins; ++i)
        EXPECT_EQ(spec.bin_of(static_cast<float>(spec.bin_center(i))), i);
}
