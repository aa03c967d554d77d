#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/data.hpp"
#include "sct/models.hpp"
#include "sct/pipeline.hpp"
#include "sct/resample.hpp"

namespace sct {

struct HistogramSpec {
    int bins = 64;
    float lo = -8.0f;
    float hi = 8.0f;

    bool operator==(const HistogramSpec& o) const {
        return bins == o.bins && lo == o.lo && hi == o.hi;
    }
    double bin_width() const { return (static_cast<double>(hi) - lo) / bins; }
    double bin_center(int i) const { return lo + (i + 0.5) * bin_width(); }
    // Outliers clamp to the edge bins.
    int bin_of(float v) const {
        const int i = static_cast<int>((static_cast<double>(v) - lo) / bin_width());
        return std::clamp(i, 0, bins - 1);
    }
};

// Aggregated activation distribution of one (stage, scale) cell.
struct StageDistributionRecord {
    int stage_index = 0;
    int scale_index = 0;
    std::uint64_t sample_count = 0;
    double mean = 0.0;
    double variance = 0.0;
    HistogramSpec spec;
    std::vector<std::uint64_t> histogram;

    void check() const {
        std::uint64_t total = 0;
        for (auto c : histogram) total += c;
        if (total != sample_count)
            throw std::logic_error("StageDistributionRecord: histogram total " +
                                   std::to_string(total) + " != sample_count " +
                                   std::to_string(sample_count));
    }
};

struct DivergenceEntry {
    int stage_index = 0;
    int scale_a = 0;
    int scale_b = 0;
    double value = 0.0;
};

struct DivergenceReport {
    std::string metric_name;
    std::vector<DivergenceEntry> entries;
};

enum class DivergenceMetric { SymKL, W1 };

inline std::string divergence_metric_str(DivergenceMetric m) {
    return m == DivergenceMetric::SymKL ? "sym-kl" : "w1";
}

struct ProbeOptions {
    bool pre_activation = false;
    int batch_size = 128;
    HistogramSpec spec;
    AugmentConfig augment;
};

// Runs the eval-mode distribution probe: for every scale in scale_set and
// every stage tap, aggregates all activation elements over the slice into
// one record. Read-only over the model.
inline std::vector<StageDistributionRecord> probe_activations(Model& model, const Dataset& slice,
                                                              const ScaleSet& scale_set,
                                                              const ProbeOptions& opts = {}) {
    if (!model.config().enable_taps)
        throw std::invalid_argument("probe_activations: model was built without stage taps");
    if (slice.count() < 1) throw std::invalid_argument("probe_activations: empty slice");
    if (model.config().norm == NormKind::ScaleBN) {
        for (const auto& [h, w] : scale_set.sizes)
            if (!model.scale_set().index_of(h, w))
                throw std::invalid_argument("probe_activations: scale " +
                                            ScaleSet::size_str({h, w}) +
                                            " has no registered S-BN bank (registered: " +
                                            model.scale_set().str() + ")");
    }

    const int stages = model.num_stages();
    std::vector<StageDistributionRecord> records(
        static_cast<std::size_t>(scale_set.count()) * stages);
    std::vector<double> sums(records.size(), 0.0), sqsums(records.size(), 0.0);
    for (int si = 0; si < scale_set.count(); ++si)
        for (int st = 0; st < stages; ++st) {
            auto& r = records[si * stages + st];
            r.scale_index = si;
            r.stage_index = st;
            r.spec = opts.spec;
            r.histogram.assign(opts.spec.bins, 0);
        }

    Rng unused_rng(0);
    for (int si = 0; si < scale_set.count(); ++si) {
        const auto [th, tw] = scale_set.sizes[si];
        // S-BN probes use the scale's own bank, i.e. what inference computes.
        const int scale_index = model.config().norm == NormKind::ScaleBN
                                    ? *model.scale_set().index_of(th, tw)
                                    : si;
        for (int start = 0; start < slice.count(); start += opts.batch_size) {
            const int bsz = std::min(opts.batch_size, slice.count() - start);
            std::vector<int> idx(bsz);
            std::iota(idx.begin(), idx.end(), start);
            Tape tape;
            RecordingGuard guard(tape, false);
            Tensor batch = augment_batch(slice, idx, opts.augment, unused_rng, false);
            if (batch.h() != th || batch.w() != tw) batch = bilinear_resize(tape, batch, th, tw);
            TapSink taps;
            taps.pre_activation = opts.pre_activation;
            model.forward_features(tape, batch, scale_index, Mode::Eval, &taps);
            for (int st = 0; st < stages; ++st) {
                auto& r = records[si * stages + st];
                const Tensor& act = taps.captured[st];
                for (std::size_t i = 0; i < act.numel(); ++i) {
                    const float v = act.data()[i];
                    ++r.histogram[r.spec.bin_of(v)];
                    sums[si * stages + st] += v;
                    sqsums[si * stages + st] += static_cast<double>(v) * v;
                }
                r.sample_count += act.numel();
            }
        }
    }

    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& r = records[i];
        if (r.sample_count > 0) {
            r.mean = sums[i] / r.sample_count;
            r.variance = std::max(0.0, sqsums[i] / r.sample_count - r.mean * r.mean);
        }
        r.check();
    }
    return records;
}

// Symmetric KL over Laplace-smoothed normalized histograms, or discrete
// 1-Wasserstein over bin centers. Both are symmetric and nonnegative.
inline double distribution_divergence(const StageDistributionRecord& a,
                                      const StageDistributionRecord& b, DivergenceMetric metric) {
    if (!(a.spec == b.spec) || a.histogram.size() != b.histogram.size())
        throw std::invalid_argument("distribution_divergence: histogram binning mismatch");
    if (a.sample_count == 0 || b.sample_count == 0)
        throw std::invalid_argument("distribution_divergence: empty record");

    const int bins = a.spec.bins;
    if (metric == DivergenceMetric::SymKL) {
        const double ta = static_cast<double>(a.sample_count) + bins;
        const double tb = static_cast<double>(b.sample_count) + bins;
        double kl_ab = 0.0, kl_ba = 0.0;
        for (int i = 0; i < bins; ++i) {
            const double p = (a.histogram[i] + 1.0) / ta;
            const double q = (b.histogram[i] + 1.0) / tb;
            kl_ab += p * std::log(p / q);
            kl_ba += q * std::log(q / p);
        }
        return kl_ab + kl_ba;
    }
    // W1 = bin_width * sum |CDF_a - CDF_b|.
    double cdf_a = 0.0, cdf_b = 0.0, acc = 0.0;
    for (int i = 0; i < bins; ++i) {
        cdf_a += static_cast<double>(a.histogram[i]) / a.sample_count;
        cdf_b += static_cast<double>(b.histogram[i]) / b.sample_count;
        acc += std::abs(cdf_a - cdf_b);
    }
    return acc * a.spec.bin_width();
}

// All scale pairs (a < b) per stage under one metric.
inline DivergenceReport divergence_report(const std::vector<StageDistributionRecord>& records,
                                          DivergenceMetric metric) {
    DivergenceReport report;
    report.metric_name = divergence_metric_str(metric);
    int stages = 0, scales = 0;
    for (const auto& r : records) {
        stages = std::max(stages, r.stage_index + 1);
        scales = std::max(scales, r.scale_index + 1);
    }
    auto find = [&](int scale, int stage) -> const StageDistributionRecord* {
        for (const auto& r : records)
            if (r.scale_index == scale && r.stage_index == stage) return &r;
        return nullptr;
    };
    for (int st = 0; st < stages; ++st)
        for (int sa = 0; sa < scales; ++sa)
            for (int sb = sa + 1; sb < scales; ++sb) {
                const auto* ra = find(sa, st);
                const auto* rb = find(sb, st);
                if (!ra || !rb) continue;
                report.entries.push_back({st, sa, sb, distribution_divergence(*ra, *rb, metric)});
            }
    return report;
}

namespace detail {

inline std::string diag_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace detail

// Writes distributions.csv (stage, scale, bin_center, count) and
// divergence.csv (stage, scale_a, scale_b, metric, value) under dir.
inline void emit_report(const std::vector<StageDistributionRecord>& records,
                        const std::vector<DivergenceReport>& reports, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string dist_path = dir + "/distributions.csv";
    std::ofstream dist(dist_path, std::ios::trunc);
    if (!dist) throw std::runtime_error("cannot write " + dist_path);
    dist << "stage,scale,bin_center,count\n";
    for (const auto& r : records)
        for (int i = 0; i < r.spec.bins; ++i)
            dist << r.stage_index << "," << r.scale_index << ","
                 << detail::diag_num(r.spec.bin_center(i)) << "," << r.histogram[i] << "\n";

    const std::string div_path = dir + "/divergence.csv";
    std::ofstream div(div_path, std::ios::trunc);
    if (!div) throw std::runtime_error("cannot write " + div_path);
    div << "stage,scale_a,scale_b,metric,value\n";
    for (const auto& rep : reports)
        for (const auto& e : rep.entries)
            div << e.stage_index << "," << e.scale_a << "," << e.scale_b << "," << rep.metric_name
                << "," << detail::diag_num(e.value) << "\n";
}

// Round-trip parser for distributions.csv; also backs the plotdata command.
inline std::vector<StageDistributionRecord> parse_distributions_csv(const std::string& path,
                                                                    const HistogramSpec& spec = {}) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "stage,scale,bin_center,count")
        throw std::runtime_error(path + ": unexpected header '" + line + "'");

    std::vector<StageDistributionRecord> records;
    auto cell = [&](int stage, int scale) -> StageDistributionRecord& {
        for (auto& r : records)
            if (r.stage_index == stage && r.scale_index == scale) return r;
        records.emplace_back();
        records.back().stage_index = stage;
        records.back().scale_index = scale;
        records.back().spec = spec;
        records.back().histogram.assign(spec.bins, 0);
        return records.back();
    };
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string f0, f1, f2, f3;
        if (!std::getline(ss, f0, ',') || !std::getline(ss, f1, ',') ||
            !std::getline(ss, f2, ',') || !std::getline(ss, f3, ','))
            throw std::runtime_error(path + ": malformed row '" + line + "'");
        auto& r = cell(std::stoi(f0), std::stoi(f1));
        const double center = std::stod(f2);
        const int bin = r.spec.bin_of(static_cast<float>(center));
        r.histogram[bin] += std::stoull(f3);
        r.sample_count += std::stoull(f3);
    }
    return records;
}

// Re-bins distributions.csv into one overlay series file per stage:
// bin_center plus one density column per scale.
inline void emit_plotdata(const std::string& distributions_csv, const std::string& out_dir,
                          const HistogramSpec& spec = {}) {
    const auto records = parse_distributions_csv(distributions_csv, spec);
    std::filesystem::create_directories(out_dir);
    int stages = 0, scales = 0;
    for (const auto& r : records) {
        stages = std::max(stages, r.stage_index + 1);
        scales = std::max(scales, r.scale_index + 1);
    }
    for (int st = 0; st < stages; ++st) {
        std::ofstream os(out_dir + "/overlay_stage" + std::to_string(st) + ".csv",
                         std::ios::trunc);
        os << "bin_center";
        for (int sc = 0; sc < scales; ++sc) os << ",density_scale_" << sc;
        os << "\n";
        for (int i = 0; i < spec.bins; ++i) {
            os << detail::diag_num(spec.bin_center(i));
            for (int sc = 0; sc < scales; ++sc) {
                double density = 0.0;
                for (const auto& r : records)
                    if (r.stage_index == st && r.scale_index == sc && r.sample_count > 0)
                        density = static_cast<double>(r.histogram[i]) /
                                  (r.sample_count * r.spec.bin_width());
                os << "," << detail::diag_num(density);
            }
            os << "\n";
        }
    }
}

}  // namespace sct
