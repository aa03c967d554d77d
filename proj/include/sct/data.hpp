#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/rng.hpp"
#include "sct/tensor.hpp"

namespace sct {

constexpr int kImageChannels = 3;
constexpr int kImageSize = 32;
constexpr std::size_t kImageBytes = kImageChannels * kImageSize * kImageSize;  // 3072
constexpr std::size_t kCifarRecordBytes = kImageBytes + 1;                     // 3073

// Byte-valued source images in (count, 3, 32, 32) channel-major order.
struct Dataset {
    std::vector<std::uint8_t> images;
    std::vector<int> labels;
    int num_classes = 10;
    std::string split = "train";

    int count() const { return static_cast<int>(labels.size()); }

    const std::uint8_t* image(int i) const { return images.data() + i * kImageBytes; }

    void validate() const {
        if (labels.empty()) throw std::invalid_argument("Dataset: empty");
        if (images.size() != labels.size() * kImageBytes)
            throw std::invalid_argument("Dataset: image/label count mismatch");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] < 0 || labels[i] >= num_classes)
                throw std::invalid_argument("Dataset: label " + std::to_string(labels[i]) +
                                            " at index " + std::to_string(i) + " outside [0," +
                                            std::to_string(num_classes) + ")");
    }

    // Seeded shuffle, then the first `n` records.
    Dataset subset(int n, std::uint64_t seed) const {
        if (n <= 0 || n > count())
            throw std::invalid_argument("Dataset::subset: bad size " + std::to_string(n));
        std::vector<int> idx(count());
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng(Rng::mix(seed, 0x5b5e7));
        rng.shuffle(idx);
        Dataset out;
        out.num_classes = num_classes;
        out.split = split;
        out.images.resize(static_cast<std::size_t>(n) * kImageBytes);
        out.labels.resize(n);
        for (int i = 0; i < n; ++i) {
            std::copy_n(image(idx[i]), kImageBytes, out.images.data() + i * kImageBytes);
            out.labels[i] = labels[idx[i]];
        }
        return out;
    }
};

namespace detail {

inline void load_cifar_file(const std::string& path, Dataset& out) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("CIFAR-10 file missing: " + path);
    const auto size = static_cast<std::size_t>(is.tellg());
    if (size % kCifarRecordBytes != 0)
        throw std::runtime_error(path + ": truncated record at offset " +
                                 std::to_string(size - size % kCifarRecordBytes) + " (file size " +
                                 std::to_string(size) + ")");
    const std::size_t records = size / kCifarRecordBytes;
    is.seekg(0);
    std::vector<std::uint8_t> record(kCifarRecordBytes);
    for (std::size_t r = 0; r < records; ++r) {
        is.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes);
        if (!is)
            throw std::runtime_error(path + ": read failure at offset " +
                                     std::to_string(r * kCifarRecordBytes));
        const int label = record[0];
        if (label >= out.num_classes)
            throw std::runtime_error(path + ": label " + std::to_string(label) + " at offset " +
                                     std::to_string(r * kCifarRecordBytes) + " outside [0,10)");
        out.labels.push_back(label);
        out.images.insert(out.images.end(), record.begin() + 1, record.end());
    }
}

}  // namespace detail

// Loads the standard 6-file CIFAR-10 binary layout: data_batch_{1..5}.bin
// plus test_batch.bin, 3073-byte records (1 label byte, then R,G,B planes).
inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
    Dataset train, test;
    train.split = "train";
    test.split = "test";
    for (int i = 1; i <= 5; ++i)
        detail::load_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin", train);
    detail::load_cifar_file(dir + "/test_batch.bin", test);
    train.validate();
    test.validate();
    return {std::move(train), std::move(test)};
}

// Class-conditional synthetic images: each class owns a grid cell and a
// palette color; a colored disc is drawn there under position/size jitter,
// plus a high-frequency checker overlay and pixel noise. The checker carries
// no label information but makes image statistics resolution-sensitive.
// Stratified by construction: label of record i is i mod num_classes.
inline Dataset synthetic_dataset(std::uint64_t seed, int count, int num_classes,
                                 const std::string& mode = "separable-blobs") {
    if (mode != "separable-blobs")
        throw std::invalid_argument("synthetic_dataset: unknown mode '" + mode + "'");
    if (num_classes < 2 || num_classes > 16)
        throw std::invalid_argument("synthetic_dataset: num_classes must be in [2,16]");
    if (count < num_classes)
        throw std::invalid_argument("synthetic_dataset: count must be >= num_classes");

    static constexpr int kPalette[16][3] = {
        {220, 60, 60},   {60, 200, 60},   {70, 70, 220},  {220, 200, 40},
        {200, 60, 200},  {60, 200, 200},  {230, 140, 30}, {140, 80, 200},
        {120, 200, 120}, {200, 120, 120}, {80, 160, 220}, {220, 160, 160},
        {160, 220, 80},  {100, 100, 100}, {240, 240, 240}, {30, 30, 30}};

    const int grid = 4;  // class cell = (k % 4, k / 4) on a 4x4 layout
    Dataset ds;
    ds.num_classes = num_classes;
    ds.split = "train";
    ds.images.resize(static_cast<std::size_t>(count) * kImageBytes);
    ds.labels.resize(count);

    Rng rng(Rng::mix(seed, 0x0DA7A));
    for (int i = 0; i < count; ++i) {
        const int label = i % num_classes;
        ds.labels[i] = label;
        std::uint8_t* img = ds.images.data() + static_cast<std::size_t>(i) * kImageBytes;

        // Background: soft gray with a per-image brightness offset.
        const float bg = 96.0f + rng.uniform(-20.0f, 20.0f);

        // Blob geometry: cell center plus jitter.
        const float cx = (label % grid) * 8.0f + 4.0f + rng.uniform(-2.5f, 2.5f);
        const float cy = (label / grid) * 8.0f + 4.0f + rng.uniform(-2.5f, 2.5f);
        const float radius = rng.uniform(3.0f, 5.0f);
        const float r2 = radius * radius;

        const int phase = rng.uniform_int(0, 1);
        const float checker_amp = rng.uniform(14.0f, 26.0f);

        for (int c = 0; c < 3; ++c) {
            const float col = static_cast<float>(kPalette[label][c]);
            for (int y = 0; y < kImageSize; ++y)
                for (int x = 0; x < kImageSize; ++x) {
                    const float dx = x - cx, dy = y - cy;
                    const float d2 = dx * dx + dy * dy;
                    float v = bg;
                    if (d2 < r2) {
                        const float blend = 1.0f - d2 / r2;  // soft edge
                        v = bg + (col - bg) * blend;
                    }
                    // Period-2 checker: visible at full resolution, averaged
                    // away by downsampling.
                    v += (((x + y + phase) & 1) ? checker_amp : -checker_amp);
                    v += rng.normal(0.0f, 18.0f);
                    img[(c * kImageSize + y) * kImageSize + x] =
                        static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
                }
        }
    }
    return ds;
}

struct AugmentConfig {
    int pad_crop = 4;
    float hflip_prob = 0.5f;
    float mean[3] = {0.4914f, 0.4822f, 0.4465f};
    float std[3] = {0.2470f, 0.2435f, 0.2616f};

    void validate() const {
        if (pad_crop < 0) throw std::invalid_argument("AugmentConfig: pad_crop must be >= 0");
        if (hflip_prob < 0.0f || hflip_prob > 1.0f)
            throw std::invalid_argument("AugmentConfig: hflip_prob outside [0,1]");
        for (float s : std)
            if (s <= 0.0f) throw std::invalid_argument("AugmentConfig: std must be positive");
    }
};

// Crop -> flip -> normalize for the train split; normalize only otherwise.
// Output batch rows follow `indices` order, so image/label pairing is the
// caller's index order.
inline Tensor augment_batch(const Dataset& ds, const std::vector<int>& indices,
                            const AugmentConfig& cfg, Rng& rng, bool train) {
    cfg.validate();
    const int B = static_cast<int>(indices.size());
    Tensor out(B, kImageChannels, kImageSize, kImageSize);
    for (int b = 0; b < B; ++b) {
        const std::uint8_t* src = ds.image(indices[b]);
        int dy = 0, dx = 0;
        bool flip = false;
        if (train) {
            dy = rng.uniform_int(0, 2 * cfg.pad_crop);
            dx = rng.uniform_int(0, 2 * cfg.pad_crop);
            flip = rng.bernoulli(cfg.hflip_prob);
        } else {
            dy = cfg.pad_crop;
            dx = cfg.pad_crop;  // center of the zero-padded frame == original
        }
        for (int c = 0; c < kImageChannels; ++c) {
            const float inv_std = 1.0f / cfg.std[c];
            const float mean = cfg.mean[c];
            for (int y = 0; y < kImageSize; ++y)
                for (int x = 0; x < kImageSize; ++x) {
                    const int sy = y + dy - cfg.pad_crop;
                    const int xf = flip ? kImageSize - 1 - x : x;
                    const int sx = xf + dx - cfg.pad_crop;
                    float v = 0.0f;
                    if (sy >= 0 && sy < kImageSize && sx >= 0 && sx < kImageSize)
                        v = static_cast<float>(src[(c * kImageSize + sy) * kImageSize + sx]);
                    out.at(b, c, y, x) = (v / 255.0f - mean) * inv_std;
                }
        }
    }
    return out;
}

inline float denormalize_pixel(float v, const AugmentConfig& cfg, int channel) {
    return (v * cfg.std[channel] + cfg.mean[channel]) * 255.0f;
}

}  // namespace sct
