#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gradcheck_util.hpp"
#include "sct/checkpoint.hpp"
#include "sct/models.hpp"

using namespace sct;
using testutil::random_tensor;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void randomize_state(Model& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& e : m.state_entries())
        for (std::size_t i = 0; i < e.len; ++i) e.data[i] = rng.uniform(-1.0f, 1.0f);
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesEveryEntry) {
    ScaleSet scales({{32, 32}, {16, 16}});
    ModelConfig cfg;
    cfg.depth = 8;
    cfg.norm = NormKind::ScaleBN;
    Model a = build_model(cfg, scales, 1);
    randomize_state(a, 99);
    const std::string path = temp_path("sct_ckpt_roundtrip.bin");
    save_model(path, a);

    Model b = build_model(cfg, scales, 2);  // different init
    load_model_from_file(b, path);
    auto ea = a.state_entries();
    auto eb = b.state_entries();
    ASSERT_EQ(ea.size(), eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) {
        ASSERT_EQ(ea[i].name, eb[i].name);
        for (std::size_t j = 0; j < ea[i].len; ++j)
            ASSERT_EQ(ea[i].data[j], eb[i].data[j]) << ea[i].name << "[" << j << "]";
    }
    std::remove(path.c_str());
}

TEST(Checkpoint, SbnBanksSelfDescribing) {
    ScaleSet scales({{32, 32}, {16, 16}, {8, 8}});
    ModelConfig cfg;
    cfg.depth = 8;
    cfg.norm = NormKind::ScaleBN;
    Model m = build_model(cfg, scales, 1);
    const std::string path = temp_path("sct_ckpt_sbn.bin");
    save_model(path, m);
    Checkpoint ck = load_checkpoint(path);

    int max_scale = -1;
    for (const auto& [name, entry] : ck.entries) {
        const auto pos = name.find(".scale");
        if (pos != std::string::npos)
            max_scale = std::max(max_scale, std::stoi(name.substr(pos + 6)));
    }
    EXPECT_EQ(max_scale + 1, 3);  // checkpoint reveals M
    EXPECT_NE(ck.arch.find("scales=32x32,16x16,8x8"), std::string::npos) << ck.arch;
    std::remove(path.c_str());
}

TEST(Checkpoint, ArchMismatchRejected) {
    ModelConfig cfg;
    cfg.depth = 8;
    Model a = build_model(cfg, 1);
    const std::string path = temp_path("sct_ckpt_arch.bin");
    save_model(path, a);

    ModelConfig other = cfg;
    other.depth = 14;
    Model b = build_model(other, 1);
    EXPECT_THROW(load_model_from_file(b, path), std::runtime_error);
    std::remove(path.c_str());
}

TEST(Checkpoint, BadMagicRejected) {
    const std::string path = temp_path("sct_ckpt_magic.bin");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOTACKPT-garbage";
    }
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST(Checkpoint, TruncatedPayloadRejected) {
    ModelConfig cfg;
    cfg.depth = 8;
    Model m = build_model(cfg, 1);
    const std::string path = temp_path("sct_ckpt_trunc.bin");
    save_model(path, m);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST(Checkpoint, MissingEntryRejected) {
    ModelConfig cfg;
    cfg.depth = 8;
    Model m = build_model(cfg, 1);
    const std::string path = temp_path("sct_ckpt_missing.bin");
    auto entries = m.state_entries();
    entries.pop_back();  // drop one entry, keep arch
    save_checkpoint(path, entries, m.arch_string());
    EXPECT_THROW(load_model_from_file(m, path), std::runtime_error);
    std::remove(path.c_str());
}

TEST(Checkpoint, FormatLayoutIsStable) {
    // Hand-parse the header: magic, version, count, then first entry fields.
    ModelConfig cfg;
    cfg.depth = 8;
    Model m = build_model(cfg, 1);
    const std::string path = temp_path("sct_ckpt_layout.bin");
    save_model(path, m);

    std::ifstream is(path, std::ios::binary);
    char magic[8];
    is.read(magic, 8);
    EXPECT_EQ(std::string(magic, 8), "SCALECAL");
    std::uint32_t version = 0, count = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&count), 4);
    EXPECT_EQ(version, 1u);
    EXPECT_EQ(count, m.state_entries().size() + 1);  // + arch entry

    std::uint16_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 2);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    EXPECT_EQ(name, kArchEntryName);
    std::remove(path.c_str());
}
