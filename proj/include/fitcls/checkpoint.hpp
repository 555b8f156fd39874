#pragma once

#include "fitcls/error.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fitcls {

// On-disk layout, all integers little-endian:
//   "FITC" | u32 version | u64 header bytes | JSON header | f64 arrays
// The header lists arrays as {name, shape} in payload order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Wrong magic or unsupported version.
class CheckpointVersionError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

/// File ends before the header or payload it declares.
class CheckpointTruncatedError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

/// Header and payload disagree, or the header is malformed.
class CheckpointStructureError : public ArtifactError {
public:
    using ArtifactError::ArtifactError;
};

struct NamedArray {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

struct Checkpoint {
    std::string kind;
    std::uint64_t vocab_hash = 0;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray& array(std::string_view name) const;
    bool has_array(std::string_view name) const;
    void add(std::string name, std::vector<std::size_t> shape, std::vector<double> data);
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fitcls
