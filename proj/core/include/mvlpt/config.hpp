// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: a flat "key = value" text file.
//
//   # comment
//   schema = 1
//   suite.tasks = 10
//   experiment.modes = text, visual, unified
//
// `schema` is required and must equal kConfigSchema. Unknown or repeated
// keys are errors; omitted keys keep their defaults. Lists are comma
// separated.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mvlpt/encoders.hpp"
#include "mvlpt/prompts.hpp"
#include "mvlpt/taskgen.hpp"
#include "mvlpt/trainer.hpp"

namespace mvlpt {

inline constexpr int kConfigSchema = 1;

struct ExperimentConfig {
  std::string experiment_id = "default";
  SuiteConfig suite;
  EncoderConfig encoder;  // vocab and patch sizes follow `suite`
  PretrainConfig pretrain;
  std::size_t pretrain_pairs = 1024;
  PromptConfig prompt;
  TrainConfig train;

  std::vector<PromptMode> modes{PromptMode::text, PromptMode::visual, PromptMode::unified};
  std::vector<std::size_t> sources{0, 1, 2, 3, 4};
  std::vector<std::size_t> targets{5, 6, 7, 8, 9};
  std::size_t shots = 5;
  std::vector<std::uint64_t> seeds{0};
  std::size_t transfer_shots = 20;
  std::uint64_t transfer_seed = 0;
  std::vector<std::size_t> group_sizes{2};
  bool random_baseline = true;

  // Encoder settings with the suite-dependent sizes filled in.
  EncoderConfig encoder_config() const;
  void validate() const;
};

// `origin` names the source in error messages.
ExperimentConfig parse_config(std::string_view text, std::string_view origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

// Every key with its resolved value, sorted by key. Configs that differ
// only in key order, comments or spelled-out defaults render identically.
std::string canonical_config(const ExperimentConfig& config);
std::uint64_t config_hash(const ExperimentConfig& config);

// Hash over the stage name and only the keys that stage depends on, so a
// changed seed list does not invalidate a pretrained encoder.
// Stages: suite, pretrain, init, transfer, adapt.
std::uint64_t stage_hash(const ExperimentConfig& config, std::string_view stage);

}  // namespace mvlpt
