// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/ledger.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mvlpt/errors.hpp"
#include "mvlpt/tensor_io.hpp"

namespace mvlpt {

std::tuple<std::string, std::string, std::string, std::string, std::size_t, std::uint64_t, std::size_t>
LedgerRow::key() const {
  return {experiment_id, mode, source_spec, adaptation_spec, shots, seed, task};
}

std::string format_ledger_row(const LedgerRow& r) {
  for (const auto* field : {&r.experiment_id, &r.mode, &r.source_spec, &r.adaptation_spec})
    if (field->find_first_of(",\n\r") != std::string::npos)
      throw ContractError("ledger fields cannot contain commas or newlines: '" + *field + "'");
  if (!std::isfinite(r.val_acc) || !std::isfinite(r.test_acc))
    throw ContractError("ledger row for task " + std::to_string(r.task) + " has a non-finite accuracy");
  return r.experiment_id + "," + r.mode + "," + r.source_spec + "," + r.adaptation_spec + "," +
         std::to_string(r.shots) + "," + std::to_string(r.seed) + "," + std::to_string(r.task) + "," +
         format_double(r.val_acc) + "," + format_double(r.test_acc);
}

namespace {

template <typename T>
T field_number(std::string_view s, const std::string& where) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw FormatError(where + "bad number '" + std::string(s) + "'");
  return v;
}

}  // namespace

LedgerRow parse_ledger_row(std::string_view line, std::string_view origin, std::size_t line_no) {
  const std::string where = std::string(origin) + ":" + std::to_string(line_no) + ": ";
  std::vector<std::string_view> f;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    f.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (f.size() != 9) throw FormatError(where + "expected 9 columns, got " + std::to_string(f.size()));
  LedgerRow r;
  r.experiment_id = f[0];
  r.mode = f[1];
  r.source_spec = f[2];
  r.adaptation_spec = f[3];
  r.shots = field_number<std::size_t>(f[4], where);
  r.seed = field_number<std::uint64_t>(f[5], where);
  r.task = field_number<std::size_t>(f[6], where);
  r.val_acc = field_number<double>(f[7], where);
  r.test_acc = field_number<double>(f[8], where);
  if (!std::isfinite(r.val_acc) || !std::isfinite(r.test_acc)) throw FormatError(where + "non-finite accuracy");
  return r;
}

std::vector<LedgerRow> read_ledger(const std::filesystem::path& path) {
  std::vector<LedgerRow> rows;
  std::ifstream in(path, std::ios::binary);
  if (!in) return rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != kLedgerHeader) throw FormatError(path.string() + ": unexpected ledger header");
      continue;
    }
    if (line.empty()) continue;
    rows.push_back(parse_ledger_row(line, path.string(), line_no));
  }
  return rows;
}

std::size_t append_ledger(const std::filesystem::path& path, const std::vector<LedgerRow>& rows) {
  const auto existing = read_ledger(path);
  std::set<decltype(LedgerRow{}.key())> seen;
  for (const auto& r : existing) seen.insert(r.key());
  const bool fresh = !std::filesystem::exists(path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot open ledger " + path.string() + " for appending");
  if (fresh) out << kLedgerHeader << "\n";
  std::size_t written = 0;
  for (const auto& r : rows) {
    if (!seen.insert(r.key()).second) continue;
    out << format_ledger_row(r) << "\n";
    ++written;
  }
  out.flush();
  if (!out) throw Error("failed writing ledger " + path.string());
  return written;
}

void append_manifest(const std::filesystem::path& path, const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["stage"] = m.stage;
  j["stage_key"] = m.stage_key;
  j["config_hash"] = m.config_hash;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["seeds"] = m.seeds;
  j["seconds"] = m.seconds;
  j["cache_hit"] = m.cache_hit;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot open manifest " + path.string());
  out << j.dump() << "\n";
}

std::vector<RunManifest> read_manifests(const std::filesystem::path& path) {
  std::vector<RunManifest> out;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RunManifest m;
      m.command = j.at("command").get<std::string>();
      m.stage = j.at("stage").get<std::string>();
      m.stage_key = j.at("stage_key").get<std::string>();
      m.config_hash = j.at("config_hash").get<std::string>();
      m.inputs = j.at("inputs").get<std::vector<std::string>>();
      m.outputs = j.at("outputs").get<std::vector<std::string>>();
      m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      m.seconds = j.at("seconds").get<double>();
      m.cache_hit = j.at("cache_hit").get<bool>();
      out.push_back(std::move(m));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mvlpt
