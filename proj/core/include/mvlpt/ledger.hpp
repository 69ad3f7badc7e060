// SPDX-License-Identifier: Apache-2.0
//
// Result persistence: the CSV results ledger (one row per run and task) and
// the append-only JSON-lines run manifest.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace mvlpt {

inline constexpr std::string_view kLedgerHeader =
    "experiment_id,mode,source_spec,adaptation_spec,shots,seed,task,val_acc,test_acc";

// source_spec:     random | none | multitask:<ids joined by '+'> | task:<id>
// adaptation_spec: single | zero-shot | transfer | best:<ids> | worst:<ids>
// Group runs list the target first in the adaptation spec.
struct LedgerRow {
  std::string experiment_id;
  std::string mode;
  std::string source_spec;
  std::string adaptation_spec;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::size_t task = 0;
  double val_acc = 0.0;
  double test_acc = 0.0;

  // Identity of the row; accuracies are excluded.
  std::tuple<std::string, std::string, std::string, std::string, std::size_t, std::uint64_t, std::size_t> key() const;
};

std::string format_ledger_row(const LedgerRow& row);
LedgerRow parse_ledger_row(std::string_view line, std::string_view origin = "<ledger>", std::size_t line_no = 0);

// Missing file reads as empty. Throws FormatError on a bad header or row.
std::vector<LedgerRow> read_ledger(const std::filesystem::path& path);

// Appends the rows whose key is not in the ledger yet, creating the file
// with its header if needed. Returns how many rows were written.
std::size_t append_ledger(const std::filesystem::path& path, const std::vector<LedgerRow>& rows);

struct RunManifest {
  std::string command;
  std::string stage;
  std::string stage_key;  // hex stage hash
  std::string config_hash;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::uint64_t> seeds;
  double seconds = 0.0;
  bool cache_hit = false;
};

void append_manifest(const std::filesystem::path& path, const RunManifest& manifest);
std::vector<RunManifest> read_manifests(const std::filesystem::path& path);

}  // namespace mvlpt
