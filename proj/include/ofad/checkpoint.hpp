// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary checkpoint container, all integers and reals little-endian:
//
//   "OFADCKPT"            8-byte format tag
//   u32  version          (kCheckpointVersion)
//   u64  spec length, spec bytes (compact JSON of the NetworkSpec)
//   section "weights"     u32 count, then per array: u32 name length, name,
//                         u64 element count, f64 elements
//   section "ema"         same layout, names as in "weights"
//   u8   optimizer present
//   [u64 step, f64 learning_rate, beta1, beta2, epsilon,
//    section "adam.m", section "adam.v"]
//
// Arrays appear in ParamLayout declaration order.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ofad/netcore.hpp"

namespace ofad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ScoreNetwork net;
  std::optional<OptimizerState> optimizer;
};

std::vector<std::uint8_t> serialize_checkpoint(const ScoreNetwork& net, const OptimizerState* optimizer);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ScoreNetwork& net, const OptimizerState* optimizer);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ofad
