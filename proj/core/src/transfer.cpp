// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "mvlpt/errors.hpp"
#include "mvlpt/tensor_io.hpp"

namespace mvlpt {

Array normalize_columns(const Array& raw) {
  if (raw.shape().size() != 2) throw DimensionError("normalize_columns: expected a matrix, got " + shape_string(raw.shape()));
  Array out = raw;
  for (std::size_t c = 0; c < raw.cols(); ++c) {
    double top = 0.0;
    for (std::size_t r = 0; r < raw.rows(); ++r) top = std::max(top, raw.at(r, c));
    if (!(top > 0.0)) throw DegenerateInputError("normalize_columns: column " + std::to_string(c) + " has no positive score");
    for (std::size_t r = 0; r < raw.rows(); ++r) out.at(r, c) = raw.at(r, c) / top;
  }
  return out;
}

TransferMatrix matrix_from_raw(PromptMode mode, Array raw_scores) {
  if (raw_scores.shape().size() != 2 || raw_scores.rows() != raw_scores.cols())
    throw DimensionError("transfer matrix must be square, got " + shape_string(raw_scores.shape()));
  for (double v : raw_scores.data())
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("transfer scores must lie in [0, 1]");
  TransferMatrix m;
  m.mode = mode;
  m.scores = normalize_columns(raw_scores);
  m.raw_scores = std::move(raw_scores);
  m.evaluations = m.raw_scores.size();
  return m;
}

TransferMatrix build_matrix(const std::vector<PromptState>& prompts, const TaskSuite& suite,
                            const std::vector<FewShotSplit>& splits, PromptMode mode, FeatureCache& cache) {
  const std::size_t T = suite.tasks.size();
  if (prompts.size() != T) {
    throw ContractError("build_matrix: need one prompt per task (" + std::to_string(T) + "), got " +
                        std::to_string(prompts.size()));
  }
  if (splits.size() != T) throw ContractError("build_matrix: need one split per task");
  for (std::size_t s = 0; s < T; ++s) {
    if (prompts[s].mode != mode) {
      throw ContractError("build_matrix: prompt " + std::to_string(s) + " is " + std::string(to_string(prompts[s].mode)) +
                          ", expected " + std::string(to_string(mode)));
    }
    if (splits[s].task_id != s) throw ContractError("build_matrix: splits must be ordered by task id");
  }
  Array raw({T, T});
  std::size_t evaluations = 0;
  for (std::size_t s = 0; s < T; ++s) {
    for (std::size_t t = 0; t < T; ++t) {
      raw.at(s, t) = evaluate(prompts[s], suite.tasks[t], splits[t], cache, SplitRole::test);
      ++evaluations;
    }
  }
  TransferMatrix m = matrix_from_raw(mode, std::move(raw));
  m.evaluations = evaluations;
  return m;
}

std::string_view to_string(GroupStrategy strategy) {
  return strategy == GroupStrategy::best ? "best" : "worst";
}

GroupStrategy parse_group_strategy(std::string_view name) {
  if (name == "best") return GroupStrategy::best;
  if (name == "worst") return GroupStrategy::worst;
  throw ConfigError("unknown grouping strategy '" + std::string(name) + "' (expected best or worst)");
}

TaskGrouping select_groups(const TransferMatrix& matrix, GroupStrategy strategy, std::size_t group_size) {
  const std::size_t T = matrix.size();
  if (group_size > T) {
    throw ConfigError("group size " + std::to_string(group_size) + " exceeds the number of tasks " + std::to_string(T));
  }
  if (group_size < 1 || group_size > 3) throw ConfigError("group size must be 1, 2 or 3");
  TaskGrouping g;
  g.strategy = strategy;
  g.group_size = group_size;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::size_t> others;
    for (std::size_t s = 0; s < T; ++s)
      if (s != t) others.push_back(s);
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
      const double sa = matrix.scores.at(a, t);
      const double sb = matrix.scores.at(b, t);
      return strategy == GroupStrategy::best ? sa > sb : sa < sb;
    });
    std::vector<std::size_t> group{t};
    group.insert(group.end(), others.begin(), others.begin() + std::ptrdiff_t(group_size - 1));
    g.groups.push_back(std::move(group));
  }
  return g;
}

double pick_adapted_result(const std::vector<RunResult>& runs, std::size_t target) {
  const TaskResult* chosen = nullptr;
  for (const auto& run : runs) {
    for (const auto& t : run.tasks) {
      if (t.task_id != target) continue;
      if (chosen == nullptr || t.val_accuracy > chosen->val_accuracy) chosen = &t;
    }
  }
  if (chosen == nullptr) throw ContractError("pick_adapted_result: no run contains task " + std::to_string(target));
  return chosen->test_accuracy;
}

std::string matrix_csv(const Array& scores) {
  std::string out = "source";
  for (std::size_t c = 0; c < scores.cols(); ++c) out += "," + std::to_string(c);
  out += "\n";
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    out += std::to_string(r);
    for (std::size_t c = 0; c < scores.cols(); ++c) out += "," + format_double(scores.at(r, c));
    out += "\n";
  }
  return out;
}

namespace {

int hex_channel(std::string_view color, std::size_t i) {
  return std::stoi(std::string(color.substr(1 + 2 * i, 2)), nullptr, 16);
}

}  // namespace

std::string ramp_color(double value) {
  const double v = std::clamp(value, 0.0, 1.0);
  int rgb[3];
  for (std::size_t i = 0; i < 3; ++i) {
    const double lo = hex_channel(kRampLow, i);
    const double hi = hex_channel(kRampHigh, i);
    rgb[i] = int(std::lround(lo + (hi - lo) * v));
  }
  return fmt::format("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2]);
}

std::string matrix_svg(const Array& scores, std::string_view title) {
  constexpr int cell = 36;
  constexpr int margin = 48;
  const int rows = int(scores.rows());
  const int cols = int(scores.cols());
  const int width = margin + cols * cell + 8;
  const int height = margin + rows * cell + 8;
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "font-family=\"sans-serif\" font-size=\"10\">\n",
      width, height, width, height);
  out += fmt::format("<title>{}</title>\n", title);
  out += fmt::format("<text x=\"4\" y=\"14\" font-size=\"12\">{}</text>\n", title);
  out += fmt::format("<text x=\"{}\" y=\"30\">target</text>\n", margin);
  out += fmt::format("<text x=\"4\" y=\"{}\">source</text>\n", margin - 6);
  for (int c = 0; c < cols; ++c)
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", margin + c * cell + cell / 2,
                       margin - 4, c);
  for (int r = 0; r < rows; ++r) {
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", margin - 6,
                       margin + r * cell + cell / 2 + 4, r);
    for (int c = 0; c < cols; ++c) {
      const double v = scores.at(std::size_t(r), std::size_t(c));
      out += fmt::format(
          "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"><title>{} -> {}: {:.3f}</title></rect>\n",
          margin + c * cell, margin + r * cell, cell, cell, ramp_color(v), r, c, v);
    }
  }
  out += "</svg>\n";
  return out;
}

}  // namespace mvlpt
