#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/models.hpp"

namespace sct {

// Checkpoint binary layout (little-endian):
//   8-byte magic "SCALECAL", u32 version = 1, u32 entry count, then per entry
//   u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload.
// The architecture string rides along as a synthetic entry "__meta.arch"
// whose payload stores one byte per float.

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'A', 'L', 'E', 'C', 'A', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kArchEntryName = "__meta.arch";

struct CheckpointEntry {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

struct Checkpoint {
    std::string arch;
    std::map<std::string, CheckpointEntry> entries;
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error(path + ": truncated while reading " + std::string(what));
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<StateEntry>& entries,
                            const std::string& arch) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 8);
    detail::write_pod(os, kCheckpointVersion);
    detail::write_pod(os, static_cast<std::uint32_t>(entries.size() + 1));

    auto write_entry = [&](const std::string& name, const std::vector<std::uint32_t>& dims,
                           const float* data, std::size_t len) {
        if (name.size() > 0xFFFF)
            throw std::invalid_argument("checkpoint entry name too long: " + name);
        detail::write_pod(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod(os, static_cast<std::uint8_t>(dims.size()));
        for (std::uint32_t d : dims) detail::write_pod(os, d);
        os.write(reinterpret_cast<const char*>(data),
                 static_cast<std::streamsize>(len * sizeof(float)));
    };

    std::vector<float> arch_floats(arch.size());
    for (std::size_t i = 0; i < arch.size(); ++i)
        arch_floats[i] = static_cast<float>(static_cast<unsigned char>(arch[i]));
    write_entry(kArchEntryName, {static_cast<std::uint32_t>(arch_floats.size())},
                arch_floats.data(), arch_floats.size());

    for (const auto& e : entries) write_entry(e.name, e.dims, e.data, e.len);
    if (!os) throw std::runtime_error("write failure on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error(path + ": bad checkpoint magic");
    const auto version = detail::read_pod<std::uint32_t>(is, path, "version");
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    const auto count = detail::read_pod<std::uint32_t>(is, path, "entry count");

    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint16_t>(is, path, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error(path + ": truncated entry name");
        const auto rank = detail::read_pod<std::uint8_t>(is, path, "rank");
        CheckpointEntry entry;
        std::size_t len = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            const auto d = detail::read_pod<std::uint32_t>(is, path, "dim");
            entry.dims.push_back(d);
            len *= d;
        }
        entry.data.resize(len);
        is.read(reinterpret_cast<char*>(entry.data.data()),
                static_cast<std::streamsize>(len * sizeof(float)));
        if (!is) throw std::runtime_error(path + ": truncated payload of entry '" + name + "'");
        if (name == kArchEntryName) {
            ck.arch.resize(entry.data.size());
            for (std::size_t j = 0; j < entry.data.size(); ++j)
                ck.arch[j] = static_cast<char>(static_cast<unsigned char>(entry.data[j]));
        } else {
            ck.entries.emplace(std::move(name), std::move(entry));
        }
    }
    return ck;
}

inline void save_model(const std::string& path, Model& model) {
    save_checkpoint(path, model.state_entries(), model.arch_string());
}

// Strict load: architecture string and the exact entry name set must match.
inline void load_model(Model& model, const Checkpoint& ck) {
    if (ck.arch != model.arch_string())
        throw std::runtime_error("checkpoint architecture '" + ck.arch +
                                 "' does not match model '" + model.arch_string() + "'");
    auto entries = model.state_entries();
    if (entries.size() != ck.entries.size())
        throw std::runtime_error("checkpoint has " + std::to_string(ck.entries.size()) +
                                 " entries, model expects " + std::to_string(entries.size()));
    for (auto& e : entries) {
        const auto it = ck.entries.find(e.name);
        if (it == ck.entries.end())
            throw std::runtime_error("checkpoint is missing entry '" + e.name + "'");
        if (it->second.data.size() != e.len)
            throw std::runtime_error("checkpoint entry '" + e.name + "' has " +
                                     std::to_string(it->second.data.size()) +
                                     " values, model expects " + std::to_string(e.len));
        std::memcpy(e.data, it->second.data.data(), e.len * sizeof(float));
    }
}

inline void load_model_from_file(Model& model, const std::string& path) {
    load_model(model, load_checkpoint(path));
}

}  // namespace sct
