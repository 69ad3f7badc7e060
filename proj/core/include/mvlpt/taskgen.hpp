// SPDX-License-Identifier: Apache-2.0
//
// Synthetic task families. Each class is a Gaussian prototype over the
// patch grid plus a short token name; images are prototype + isotropic noise.
// Cross-task relatedness is controlled by blending prototypes toward an
// anchor task and by copying name tokens from task 0.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mvlpt/array.hpp"
#include "mvlpt/encoders.hpp"

namespace mvlpt {

struct SuiteConfig {
  std::uint64_t seed = 0;
  std::size_t n_tasks = 10;
  std::size_t classes_per_task = 8;
  double visual_sim = 0.7;
  double label_sim = 0.7;
  double noise_scale = 1.0;
  // Tasks 0..anchor_groups-1 get fresh prototypes; task j >= anchor_groups
  // blends toward task (j mod anchor_groups). With 1 every task blends
  // toward task 0.
  std::size_t anchor_groups = 1;
  std::size_t name_length = 2;
  std::size_t patch_count = 16;
  std::size_t patch_dim = 12;
  std::size_t vocab_size = 64;

  void validate() const;
};

struct ClassSpec {
  std::vector<int> name;
  Array prototype;  // patch_count x patch_dim
};

struct TaskSpec {
  std::size_t task_id = 0;
  std::vector<ClassSpec> classes;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return classes.size(); }
  std::vector<std::vector<int>> class_names() const;
};

struct TaskSuite {
  SuiteConfig config;
  std::vector<TaskSpec> tasks;
  Array visual_similarity;  // T x T, symmetric, unit diagonal, in [0, 1]
  Array label_similarity;   // T x T, symmetric, unit diagonal, in [0, 1]
};

TaskSuite generate_suite(const SuiteConfig& config);
TaskSuite generate_suite(std::uint64_t seed, std::size_t n_tasks, std::size_t classes_per_task,
                         double visual_sim, double label_sim);

struct Example {
  Array patches;
  std::size_t label = 0;
  std::size_t index = 0;  // unique within a (task, shots, seed) split
};

inline constexpr std::size_t kTestPerClass = 50;
inline constexpr double kValFraction = 0.2;

struct FewShotSplit {
  std::size_t task_id = 0;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

// Validation count carved out of `drawn` few-shot examples.
std::size_t validation_count(std::size_t drawn);

// k noisy draws per class, shuffled, then ceil(20%) moved to validation.
// The test set depends only on the task, so every shot/seed combination is
// scored on the same images.
FewShotSplit sample_shots(const TaskSpec& task, std::size_t shots, std::uint64_t seed,
                          std::size_t test_per_class = kTestPerClass);

// Class-balanced (image, template + name) pairs over every task in the suite.
std::vector<ImageTextPair> paired_pretraining_set(const TaskSuite& suite, std::size_t size, std::uint64_t seed);

// Knobs and seeds only; raw arrays are regenerated from them.
std::string suite_manifest(const TaskSuite& suite);
TaskSuite suite_from_manifest(const std::string& text);
std::string split_manifest(const FewShotSplit& split);
FewShotSplit split_from_manifest(const TaskSuite& suite, const std::string& text);

}  // namespace mvlpt
