// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <regex>

#include "mvlpt/errors.hpp"
#include "mvlpt/transfer.hpp"
#include "small_world.hpp"

namespace mvlpt {
namespace {

using testing::small_prompt_config;
using testing::small_train_config;
using testing::small_world;

Array random_scores(std::size_t T, Rng& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Array a({T, T});
  for (double& v : a.data()) v = u(rng);
  return a;
}

TEST(Normalize, WorkedExample) {
  const Array raw = Array::matrix({{0.8, 0.2, 0.5}, {0.4, 0.4, 0.25}, {0.2, 0.1, 0.5}});
  const Array n = normalize_columns(raw);
  const Array expected = Array::matrix({{1.0, 0.5, 1.0}, {0.5, 1.0, 0.5}, {0.25, 0.25, 1.0}});
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(n[i], expected[i], 1e-15);
}

TEST(Normalize, ColumnMaximaAreOneAndOrderIsKept) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 2 + std::size_t(trial % 9);
    const Array raw = random_scores(T, rng);
    const Array n = normalize_columns(raw);
    for (std::size_t c = 0; c < T; ++c) {
      double mx = 0.0;
      for (std::size_t r = 0; r < T; ++r) {
        mx = std::max(mx, n.at(r, c));
        for (std::size_t q = 0; q < T; ++q) EXPECT_EQ(raw.at(r, c) < raw.at(q, c), n.at(r, c) < n.at(q, c));
      }
      EXPECT_NEAR(mx, 1.0, 1e-12);
    }
  }
}

TEST(Normalize, ZeroColumnIsDegenerate) {
  const Array raw = Array::matrix({{0.5, 0.0}, {0.2, 0.0}});
  EXPECT_THROW(normalize_columns(raw), DegenerateInputError);
}

TEST(MatrixFromRaw, ValidatesInput) {
  EXPECT_THROW(matrix_from_raw(PromptMode::text, Array({2, 3}, 0.5)), DimensionError);
  EXPECT_THROW(matrix_from_raw(PromptMode::text, Array::matrix({{0.5, 1.5}, {0.2, 0.3}})), ContractError);
  const TransferMatrix m = matrix_from_raw(PromptMode::visual, Array::matrix({{0.5, 0.4}, {0.25, 0.8}}));
  EXPECT_EQ(m.mode, PromptMode::visual);
  EXPECT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(m.scores.at(1, 0), 0.5);
}

TEST(Grouping, WorkedExample) {
  // Column t holds how well each source transfers to target t.
  const TransferMatrix m = matrix_from_raw(PromptMode::text, Array::matrix({{1.0, 0.9, 0.2, 0.5},
                                                                           {0.3, 1.0, 0.6, 0.5},
                                                                           {0.8, 0.1, 1.0, 0.7},
                                                                           {0.6, 0.4, 0.6, 1.0}}));
  const TaskGrouping best = select_groups(m, GroupStrategy::best, 2);
  const TaskGrouping worst = select_groups(m, GroupStrategy::worst, 2);
  EXPECT_EQ(best.groups, (std::vector<std::vector<std::size_t>>{{0, 2}, {1, 0}, {2, 1}, {3, 2}}));
  EXPECT_EQ(worst.groups, (std::vector<std::vector<std::size_t>>{{0, 1}, {1, 2}, {2, 0}, {3, 0}}));
  const TaskGrouping three = select_groups(m, GroupStrategy::best, 3);
  // Column 2 ties sources 1 and 3 at 0.6; the lower id wins.
  EXPECT_EQ(three.groups[2], (std::vector<std::size_t>{2, 1, 3}));
  EXPECT_EQ(select_groups(m, GroupStrategy::best, 1).groups[3], (std::vector<std::size_t>{3}));
}

TEST(Grouping, BestAndWorstPartnersDiffer) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t T = 3 + std::size_t(trial % 8);
    const TransferMatrix m = matrix_from_raw(PromptMode::text, random_scores(T, rng));
    for (std::size_t g : {2u, 3u}) {
      if (g > T) continue;
      const TaskGrouping best = select_groups(m, GroupStrategy::best, g);
      const TaskGrouping worst = select_groups(m, GroupStrategy::worst, g);
      // Disjoint whenever the other tasks can supply both partner sets.
      const bool room = 2 * (g - 1) <= T - 1;
      for (std::size_t t = 0; t < T; ++t) {
        ASSERT_EQ(best.groups[t].size(), g);
        EXPECT_EQ(best.groups[t][0], t);
        EXPECT_EQ(worst.groups[t][0], t);
        for (std::size_t i = 1; i < g; ++i) {
          EXPECT_NE(best.groups[t][i], t);
          EXPECT_NE(worst.groups[t][i], t);
          for (std::size_t j = 1; j < g && room; ++j) {
            EXPECT_NE(best.groups[t][i], worst.groups[t][j]);
            EXPECT_GT(m.scores.at(best.groups[t][i], t), m.scores.at(worst.groups[t][j], t));
          }
        }
      }
    }
  }
}

TEST(Grouping, FollowsTaskRelabeling) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 6;
    const Array raw = random_scores(T, rng);
    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Array permuted({T, T});
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t t = 0; t < T; ++t) permuted.at(perm[s], perm[t]) = raw.at(s, t);
    for (GroupStrategy g : {GroupStrategy::best, GroupStrategy::worst}) {
      const auto a = select_groups(matrix_from_raw(PromptMode::text, raw), g, 3);
      const auto b = select_groups(matrix_from_raw(PromptMode::text, permuted), g, 3);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(perm[a.groups[t][i]], b.groups[perm[t]][i]);
    }
  }
}

TEST(Grouping, RejectsBadSizes) {
  const TransferMatrix m = matrix_from_raw(PromptMode::text, Array::matrix({{1.0, 0.5}, {0.5, 1.0}}));
  EXPECT_THROW(select_groups(m, GroupStrategy::best, 3), ConfigError);
  EXPECT_THROW(select_groups(m, GroupStrategy::best, 0), ConfigError);
  Rng rng(1);
  const TransferMatrix big = matrix_from_raw(PromptMode::text, random_scores(6, rng));
  EXPECT_THROW(select_groups(big, GroupStrategy::worst, 4), ConfigError);
  EXPECT_EQ(parse_group_strategy("worst"), GroupStrategy::worst);
  EXPECT_EQ(to_string(GroupStrategy::best), "best");
  EXPECT_THROW(parse_group_strategy("median"), ConfigError);
}

RunResult candidate(std::size_t task, double val, double test) {
  RunResult r;
  r.tasks.push_back({task, val, test});
  return r;
}

TEST(PickAdapted, ChoosesByValidationOnly) {
  std::vector<RunResult> runs{candidate(5, 0.6, 0.9), candidate(5, 0.8, 0.7), candidate(5, 0.7, 0.95)};
  EXPECT_DOUBLE_EQ(pick_adapted_result(runs, 5), 0.7);
  // Changing test accuracy never changes the pick.
  runs[2].tasks[0].test_accuracy = 1.0;
  runs[1].tasks[0].test_accuracy = 0.1;
  EXPECT_DOUBLE_EQ(pick_adapted_result(runs, 5), 0.1);
  // Raising another candidate's validation accuracy does.
  runs[2].tasks[0].val_accuracy = 0.85;
  EXPECT_DOUBLE_EQ(pick_adapted_result(runs, 5), 1.0);
}

TEST(PickAdapted, EarlierCandidateWinsTiesAndGroupsCount) {
  RunResult pair;
  pair.tasks = {{5, 0.75, 0.6}, {2, 0.9, 0.9}};
  const std::vector<RunResult> runs{candidate(5, 0.75, 0.5), pair};
  EXPECT_DOUBLE_EQ(pick_adapted_result(runs, 5), 0.5);
  EXPECT_THROW(pick_adapted_result(runs, 7), ContractError);
}

TEST(Artifacts, CsvLayout) {
  const Array s = Array::matrix({{1.0, 0.5}, {0.25, 1.0}});
  EXPECT_EQ(matrix_csv(s), "source,0,1\n0,1,0.5\n1,0.25,1\n");
}

TEST(Artifacts, RampEndpoints) {
  EXPECT_EQ(ramp_color(0.0), kRampLow);
  EXPECT_EQ(ramp_color(1.0), kRampHigh);
  EXPECT_EQ(ramp_color(-3.0), kRampLow);
  EXPECT_EQ(ramp_color(0.5), "#8096b5");
}

TEST(Artifacts, SvgHasOneCellPerEntry) {
  Rng rng(2);
  for (std::size_t T : {2u, 5u, 10u}) {
    const std::string svg = matrix_svg(normalize_columns(random_scores(T, rng)), "text");
    const std::regex cell("<rect class=\"cell\"");
    const auto n = std::distance(std::sregex_iterator(svg.begin(), svg.end(), cell), std::sregex_iterator());
    EXPECT_EQ(std::size_t(n), T * T);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
  }
}

TEST(BuildMatrix, RejectsMismatchedPrompts) {
  const auto& w = small_world();
  FeatureCache cache(w.encoder);
  std::vector<PromptState> prompts;
  std::vector<FewShotSplit> splits;
  for (const auto& task : w.suite.tasks) {
    prompts.push_back(PromptState::initialize(PromptMode::text, w.encoder.config, small_prompt_config(), task.task_id));
    splits.push_back(sample_shots(task, 1, 0));
  }
  prompts[3] = PromptState::initialize(PromptMode::visual, w.encoder.config, small_prompt_config(), 3);
  EXPECT_THROW(build_matrix(prompts, w.suite, splits, PromptMode::text, cache), ContractError);
  prompts.pop_back();
  EXPECT_THROW(build_matrix(prompts, w.suite, splits, PromptMode::visual, cache), ContractError);
}

TEST(BuildMatrix, TunedPromptsPreferTheirOwnTask) {
  const auto& w = small_world();
  FeatureCache cache(w.encoder);
  const std::size_t T = w.suite.tasks.size();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::vector<PromptState> prompts;
    std::vector<FewShotSplit> splits;
    for (const auto& task : w.suite.tasks) {
      splits.push_back(sample_shots(task, 20, seed));
      prompts.push_back(adapt(w.suite, {splits.back()}, nullptr, PromptMode::text, small_prompt_config(),
                              small_train_config(seed), cache)
                            .prompt);
    }
    const TransferMatrix m = build_matrix(prompts, w.suite, splits, PromptMode::text, cache);
    EXPECT_EQ(m.evaluations, T * T);
    double diag = 0.0;
    double off = 0.0;
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t t = 0; t < T; ++t) (s == t ? diag : off) += m.raw_scores.at(s, t);
    EXPECT_GT(diag / double(T), off / double(T * (T - 1))) << "seed " << seed;
    for (std::size_t c = 0; c < T; ++c) {
      double mx = 0.0;
      for (std::size_t r = 0; r < T; ++r) mx = std::max(mx, m.scores.at(r, c));
      EXPECT_NEAR(mx, 1.0, 1e-12);
    }
  }
}

}  // namespace
}  // namespace mvlpt
