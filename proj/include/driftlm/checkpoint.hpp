#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "driftlm/backbone.hpp"

namespace driftlm {

inline constexpr int checkpoint_version = 1;

struct AdamMoments {
    DenoiserParams first;
    DenoiserParams second;
};

/// On-disk state shared by base training, drift training, sampling and eval.
/// Reference queues are not persisted.
struct Checkpoint {
    DenoiserParams params;
    std::optional<AdamMoments> moments;
    std::int64_t step = 0;
};

// Self-describing JSON: parameter name -> {shape, row-major values}. Doubles
// are written in shortest round-trip form, so save/load is lossless.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws ParseError on malformed or truncated input, VersionMismatch on a
// different format version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace driftlm
