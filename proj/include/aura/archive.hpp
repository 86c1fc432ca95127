#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace aura::archive {

/// Binary container for named tensors plus a JSON header.
///
/// Layout (little-endian):
///   "AURAARCH" | u32 version | u64 header length | header JSON
///   | u64 tensor count | per tensor: u32 name length, name, u8 dtype,
///     u32 rank, i64 dims[rank], raw row-major data
///   | SHA-256 of every preceding byte
///
/// Writing the same tensors and header always yields the same bytes.
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    torch::Tensor value;
};

struct Archive {
    nlohmann::json header = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    /// nullptr when absent.
    const torch::Tensor* find(const std::string& name) const;
};

std::string encode(const Archive& archive);
/// Throws ArchiveError on bad magic, unsupported version, truncation or a trailer
/// checksum that does not match the content.
Archive decode(const std::string& bytes);

void write(const std::filesystem::path& path, const Archive& archive);
Archive read(const std::filesystem::path& path);

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Checksum of tensor names, shapes and contents in the given order.
std::string tensors_checksum(const std::vector<NamedTensor>& tensors);

} // namespace aura::archive
