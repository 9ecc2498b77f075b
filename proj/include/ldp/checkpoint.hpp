#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ldp/run_config.hpp"
#include "ldp/train.hpp"

// Checkpoint file: "LDPC", u16 version, architecture text, config text,
// named parameter tensors, Adam moments, epoch counter, CRC32 trailer.
// Integers and doubles little-endian.

namespace ldp {

struct Checkpoint {
  RunConfig config;  ///< resolved
  ParamStore params;
  AdamState optimizer;
  std::uint64_t epoch = 0;
};

/// Fresh parameters and zero moments for `config`.
Checkpoint initial_checkpoint(const RunConfig& config);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
/// FormatError on damaged or inconsistent bytes.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ldp
