// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot transferability between tasks and the grouping strategies built
// on it. Entry (s, t) of the matrix is the test accuracy of the prompt tuned
// on task s, applied unchanged to task t.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mvlpt/array.hpp"
#include "mvlpt/prompts.hpp"
#include "mvlpt/taskgen.hpp"
#include "mvlpt/trainer.hpp"

namespace mvlpt {

struct TransferMatrix {
  PromptMode mode = PromptMode::text;
  Array raw_scores;  // [T x T], row = source prompt, column = target task
  Array scores;      // raw_scores divided by each column's maximum
  std::size_t evaluations = 0;

  std::size_t size() const { return scores.rows(); }
};

// Divides every column by its maximum. Throws DegenerateInputError when a
// column is all zero.
Array normalize_columns(const Array& raw);

// `prompts[s]` must have been tuned on task s; `splits[t]` supplies task t's
// test set.
TransferMatrix build_matrix(const std::vector<PromptState>& prompts, const TaskSuite& suite,
                            const std::vector<FewShotSplit>& splits, PromptMode mode, FeatureCache& cache);

// Wraps precomputed raw scores, e.g. reloaded from a ledger.
TransferMatrix matrix_from_raw(PromptMode mode, Array raw_scores);

enum class GroupStrategy { best, worst };

std::string_view to_string(GroupStrategy strategy);
GroupStrategy parse_group_strategy(std::string_view name);

struct TaskGrouping {
  GroupStrategy strategy = GroupStrategy::best;
  std::size_t group_size = 1;
  // groups[t] = {t, partners...}, partners in selection order.
  std::vector<std::vector<std::size_t>> groups;
};

// Partners of each target are the (group_size - 1) other tasks with the
// highest (best) or lowest (worst) normalized score in the target's column.
// Ties go to the lower task id.
TaskGrouping select_groups(const TransferMatrix& matrix, GroupStrategy strategy, std::size_t group_size);

// Test accuracy on `target` of the candidate run with the highest validation
// accuracy on `target`. Earlier candidates win ties.
double pick_adapted_result(const std::vector<RunResult>& runs, std::size_t target);

// CSV with a header row and a leading column of task ids.
std::string matrix_csv(const Array& scores);

// Heatmap with one cell per entry. Cell fill interpolates linearly in RGB
// from kRampLow (score 0) to kRampHigh (score 1).
inline constexpr std::string_view kRampLow = "#f7fbff";
inline constexpr std::string_view kRampHigh = "#08306b";
std::string ramp_color(double value);
std::string matrix_svg(const Array& scores, std::string_view title);

}  // namespace mvlpt
