// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment driver behind the command-line tool. Output layout
// under the chosen directory:
//
//   ledger.csv            results ledger
//   manifest.jsonl        one record per executed or cached stage
//   cache/<stage>-<key>/  checkpoints, keyed by the stage's config hash
//   report/               summary tables and transfer heatmaps
//
// Each stage is computed at most once per key; later requests load the
// cached checkpoint and log a cache hit.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "mvlpt/config.hpp"
#include "mvlpt/ledger.hpp"
#include "mvlpt/transfer.hpp"

namespace mvlpt {

class Workspace {
 public:
  Workspace(ExperimentConfig config, std::filesystem::path out, std::string command, std::ostream& log);
  ~Workspace();
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return out_; }
  std::filesystem::path ledger_path() const { return out_ / "ledger.csv"; }
  std::filesystem::path manifest_path() const { return out_ / "manifest.jsonl"; }
  std::filesystem::path report_dir() const { return out_ / "report"; }

  const TaskSuite& suite();
  const EncoderWeights& encoder();
  FeatureCache& features();
  const FewShotSplit& split(std::size_t task, std::size_t shots, std::uint64_t seed);

  // Shared prompt over the source tasks at `experiment.shots`.
  const PromptState& init_prompt(PromptMode mode, std::uint64_t seed);
  // Per-task prompts at `experiment.transfer_shots`, evaluated on every
  // task. Also records the T^2 transfer rows in the ledger.
  const TransferMatrix& transfer(PromptMode mode);
  TaskGrouping grouping(PromptMode mode, GroupStrategy strategy, std::size_t group_size);
  // Zero-shot, random-init and multitask-init singletons plus best/worst
  // groups for every target. Returns the number of new ledger rows.
  std::size_t adapt(PromptMode mode, std::uint64_t seed);

  std::size_t cache_hits() const { return hits_; }
  std::size_t cache_misses() const { return misses_; }

 private:
  std::filesystem::path stage_dir(std::string_view stage) const;
  void record(const std::string& stage, std::uint64_t key, std::vector<std::string> inputs,
              std::vector<std::string> outputs, std::vector<std::uint64_t> seeds, double seconds, bool hit);
  struct CachedRun {
    PromptState prompt;
    std::vector<TaskResult> tasks;
  };
  CachedRun cached_run(const std::string& stage, const std::filesystem::path& file, std::uint64_t seed,
                       const std::function<RunResult()>& train);

  ExperimentConfig config_;
  std::filesystem::path out_;
  std::string command_;
  std::ostream& log_;
  std::optional<TaskSuite> suite_;
  std::optional<EncoderWeights> encoder_;
  std::unique_ptr<FeatureCache> features_;
  std::map<std::tuple<std::size_t, std::size_t, std::uint64_t>, FewShotSplit> splits_;
  std::map<std::pair<PromptMode, std::uint64_t>, PromptState> inits_;
  std::map<PromptMode, TransferMatrix> matrices_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

struct ReportOutput {
  std::string table;  // human-readable summary
  std::vector<std::string> warnings;
  std::vector<std::filesystem::path> files;
};

// Rebuilds every report artifact from ledger rows alone:
//   summary.csv   mean and sample std over seeds of the per-seed mean target
//                 accuracy, per (experiment, mode, source, strategy, shots)
//   per_task.csv  the same statistics per task
//   <experiment>-transfer-<mode>.{csv,svg}  normalized transfer matrix
ReportOutput write_report(const std::vector<LedgerRow>& rows, const std::filesystem::path& dir);

struct CommandOptions {
  std::optional<std::filesystem::path> config;  // defaults when absent
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> shots;
  std::optional<PromptMode> mode;
  std::filesystem::path out = "mvlpt-out";
};

// Loads the config and applies the command-line overrides.
ExperimentConfig resolve_config(const CommandOptions& options);

// Commands: pipeline, pretrain, init, adapt, transfer, group, report.
// Returns the process exit status; errors are reported on `err`.
int run_command(std::string_view command, const CommandOptions& options, std::ostream& out, std::ostream& err);

}  // namespace mvlpt
