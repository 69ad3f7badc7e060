// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint format shared by encoder and prompt state. Plain text, one
// record per line:
//
//   mvlpt-tensors 1
//   kind <kind>
//   meta <key> <value>                 (zero or more)
//   tensor <name> <rank> <d0> .. <dk>  followed by one line of values
//   end
//   checksum <16 hex digits>
//
// Values are written in shortest round-trip form, so a load/save cycle is
// byte-exact. The checksum is FNV-1a 64 over every byte before the
// "checksum" line.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvlpt/array.hpp"

namespace mvlpt {

inline constexpr int kTensorFormatVersion = 1;

struct TensorBundle {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Array>> tensors;

  const Array& tensor(std::string_view name) const;
  const std::string& meta_value(std::string_view key) const;
  bool has_meta(std::string_view key) const;
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::string format_double(double value);

std::string serialize(const TensorBundle& bundle);
// `origin` names the source in error messages.
TensorBundle deserialize(std::string_view text, std::string_view origin = "<memory>");

void save_bundle(const std::filesystem::path& path, const TensorBundle& bundle);
TensorBundle load_bundle(const std::filesystem::path& path);

}  // namespace mvlpt
