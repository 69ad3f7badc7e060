// SPDX-License-Identifier: Apache-2.0
//
// Prompt tuning on frozen encoders. Both stages share one loop:
//   multitask_init - one shared prompt over a mixed stream of source tasks
//   adapt          - tune a copy of an initial prompt on a target group
// A group of one task is ordinary single-task prompt tuning.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "mvlpt/encoders.hpp"
#include "mvlpt/optimizer.hpp"
#include "mvlpt/prompts.hpp"
#include "mvlpt/taskgen.hpp"

namespace mvlpt {

enum class TaskMixing { uniform, proportional };

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  std::size_t warmup_epochs = 1;
  AdamOptions adam;
  std::size_t eval_every = 5;
  TaskMixing mixing = TaskMixing::uniform;
  bool require_loss_decrease = true;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr std::size_t kAcceptanceEpochs = 40;

std::size_t steps_per_epoch(const std::vector<FewShotSplit>& group, std::size_t batch_size);
LrSchedule make_schedule(const TrainConfig& config, std::size_t steps_per_epoch);
double lr_at(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch);

enum class SplitRole { train, val, test };

// Embeddings that do not depend on the prompt being tuned: un-prompted image
// embeddings (text mode) and template class embeddings (visual mode).
class FeatureCache {
 public:
  explicit FeatureCache(const EncoderWeights& weights) : weights_(&weights) {}

  const Array& image_embeddings(const FewShotSplit& split, SplitRole role);
  const Array& class_embeddings(const TaskSpec& task);
  const EncoderWeights& weights() const { return *weights_; }

 private:
  const EncoderWeights* weights_;
  std::map<std::tuple<std::size_t, std::size_t, std::uint64_t, int>, Array> images_;
  std::map<std::size_t, Array> classes_;
};

const std::vector<Example>& examples(const FewShotSplit& split, SplitRole role);

struct SplitScore {
  double accuracy = 0.0;
  double loss = 0.0;
};

// Fraction correct under argmax cosine similarity, plus mean cross-entropy.
// Runs without recording a graph.
SplitScore score(const PromptState& prompt, const TaskSpec& task, const FewShotSplit& split, SplitRole role,
                 FeatureCache& cache);
double evaluate(const PromptState& prompt, const TaskSpec& task, const FewShotSplit& split, FeatureCache& cache,
                SplitRole role = SplitRole::test);

// Zero-shot baseline with the fixed template classifier.
double zero_shot_accuracy(const TaskSpec& task, const FewShotSplit& split, SplitRole role, FeatureCache& cache);

// Training objective for one batch: cross-entropy over cosine-similarity
// logits divided by tau, with the graph recorded back to the prompt.
Var prompt_batch_loss(const PromptState& prompt, const TaskSpec& task, const ImageRefs& images,
                      std::span<const std::size_t> labels, FeatureCache& cache);

struct CheckpointRecord {
  std::size_t epoch = 0;
  std::vector<double> val_accuracy;  // per task in the group
  double mean_val_accuracy = 0.0;
  double mean_val_loss = 0.0;
};

struct TaskResult {
  std::size_t task_id = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct RunResult {
  PromptState prompt;  // best checkpoint
  std::size_t best_epoch = 0;
  std::vector<CheckpointRecord> history;
  std::vector<TaskResult> tasks;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::size_t steps = 0;

  double mean_test_accuracy() const;
  double mean_val_accuracy() const;
  const TaskResult& task(std::size_t task_id) const;
};

RunResult multitask_init(const TaskSuite& suite, const std::vector<FewShotSplit>& sources, PromptMode mode,
                         const PromptConfig& prompt_config, const TrainConfig& config, FeatureCache& cache);

// `init` == nullptr starts from a fresh random prompt.
RunResult adapt(const TaskSuite& suite, const std::vector<FewShotSplit>& group, const PromptState* init,
                PromptMode mode, const PromptConfig& prompt_config, const TrainConfig& config, FeatureCache& cache);

struct EvalReport {
  std::vector<std::size_t> task_ids;
  std::vector<double> mean;
  std::vector<double> stddev;  // sample std over seeds; 0 for one seed
  std::size_t seeds = 0;
  double overall_mean = 0.0;
  double overall_stddev = 0.0;
};

// Aggregates per-seed runs over the same task group.
EvalReport make_eval_report(const std::vector<RunResult>& runs_over_seeds);

double sample_stddev(const std::vector<double>& values);

}  // namespace mvlpt
