#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgen/tensor.hpp"

// Checkpoint directory: one TNSR file per named tensor plus manifest.json
// {format, version, meta, tensors: [{name, file, shape, frozen}]}.
namespace pcgen {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
    std::string name;  // [A-Za-z0-9._-]+, also the file stem
    Tensor tensor;
    bool frozen = false;
};

struct LoadedCheckpoint {
    nlohmann::json meta;
    std::vector<CheckpointEntry> entries;

    /// nullptr if absent.
    const CheckpointEntry* find(const std::string& name) const;
    /// Throws CheckpointError if absent.
    const Tensor& at(const std::string& name) const;
};

/// Writes into a sibling temporary directory and renames it over `dir`, so a
/// crash never leaves a half-written checkpoint under the final name.
void write_checkpoint(const std::filesystem::path& dir, const nlohmann::json& meta,
                      const std::vector<CheckpointEntry>& entries);

/// Reads and validates every listed tensor (shape must match the manifest).
LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir);

}  // namespace pcgen
