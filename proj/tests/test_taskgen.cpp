// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "mvlpt/errors.hpp"
#include "mvlpt/taskgen.hpp"

namespace mvlpt {
namespace {

double raw_cosine(const Array& a, const Array& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Mean cosine between task 1's prototypes and their anchors in task 0.
double mean_anchor_cosine(double visual_sim, std::size_t draws) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    const TaskSuite s = generate_suite(1000 + d, 2, 4, visual_sim, 0.5);
    for (std::size_t c = 0; c < 4; ++c) {
      total += raw_cosine(s.tasks[0].classes[c].prototype, s.tasks[1].classes[c].prototype);
      ++n;
    }
  }
  return total / double(n);
}

TEST(Suite, SameSeedSameSuite) {
  const TaskSuite a = generate_suite(4, 5, 3, 0.6, 0.4);
  const TaskSuite b = generate_suite(4, 5, 3, 0.6, 0.4);
  EXPECT_EQ(suite_manifest(a), suite_manifest(b));
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(a.tasks[t].classes[c].prototype, b.tasks[t].classes[c].prototype);
  EXPECT_NE(suite_manifest(a), suite_manifest(generate_suite(5, 5, 3, 0.6, 0.4)));
}

TEST(Suite, ShapesAndNames) {
  SuiteConfig c;
  c.n_tasks = 4;
  c.classes_per_task = 5;
  const TaskSuite s = generate_suite(c);
  ASSERT_EQ(s.tasks.size(), 4u);
  for (const auto& t : s.tasks) {
    ASSERT_EQ(t.num_classes(), 5u);
    const auto names = t.class_names();
    EXPECT_EQ(std::set(names.begin(), names.end()).size(), 5u) << "task " << t.task_id;
    for (const auto& cls : t.classes) {
      EXPECT_EQ(cls.prototype.shape(), (Shape{c.patch_count, c.patch_dim}));
      for (int tok : cls.name) {
        EXPECT_GE(tok, kReservedTokens);
        EXPECT_LT(tok, int(c.vocab_size));
      }
    }
  }
}

TEST(Suite, UnrelatedPrototypesAreNearOrthogonal) {
  EXPECT_LT(std::abs(mean_anchor_cosine(0.0, 100)), 0.1);
}

TEST(Suite, VisualSimilarityIsMonotone) {
  const double low = mean_anchor_cosine(0.2, 50);
  const double mid = mean_anchor_cosine(0.5, 50);
  const double high = mean_anchor_cosine(0.8, 50);
  EXPECT_LT(low, mid);
  EXPECT_LT(mid, high);
}

TEST(Suite, FullSimilarityCopiesTheAnchor) {
  const TaskSuite s = generate_suite(8, 3, 4, 1.0, 1.0);
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t c = 0; c < 4; ++c) {
      const auto& a = s.tasks[0].classes[c];
      const auto& b = s.tasks[t].classes[c];
      for (std::size_t i = 0; i < a.prototype.size(); ++i) EXPECT_NEAR(a.prototype[i], b.prototype[i], 1e-12);
      EXPECT_EQ(a.name, b.name);
      EXPECT_NEAR(s.visual_similarity.at(0, t), 1.0, 1e-12);
      EXPECT_DOUBLE_EQ(s.label_similarity.at(0, t), 1.0);
    }
}

TEST(Suite, AnchorGroupsClusterTasks) {
  SuiteConfig c;
  c.seed = 2;
  c.n_tasks = 6;
  c.classes_per_task = 4;
  c.visual_sim = 0.9;
  c.anchor_groups = 2;
  const TaskSuite s = generate_suite(c);
  // Even tasks blend toward task 0, odd tasks toward task 1.
  for (std::size_t t = 2; t < 6; ++t) {
    const std::size_t same = t % 2;
    const std::size_t other = 1 - same;
    EXPECT_GT(s.visual_similarity.at(t, same), s.visual_similarity.at(t, other) + 0.3) << "task " << t;
  }
}

TEST(Suite, SimilarityMatricesAreWellFormed) {
  const TaskSuite s = generate_suite(6, 5, 4, 0.5, 0.5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(s.visual_similarity.at(i, j), s.visual_similarity.at(j, i));
      EXPECT_EQ(s.label_similarity.at(i, j), s.label_similarity.at(j, i));
      EXPECT_GE(s.visual_similarity.at(i, j), 0.0);
      EXPECT_LE(s.visual_similarity.at(i, j), 1.0 + 1e-12);
      if (i == j) {
        EXPECT_EQ(s.visual_similarity.at(i, j), 1.0);
      }
    }
}

TEST(Suite, BadConfigsAreRejected) {
  EXPECT_THROW(generate_suite(0, 1, 4, 0.5, 0.5), ConfigError);
  EXPECT_THROW(generate_suite(0, 3, 1, 0.5, 0.5), ConfigError);
  EXPECT_THROW(generate_suite(0, 3, 4, 1.5, 0.5), ConfigError);
  EXPECT_THROW(generate_suite(0, 3, 4, 0.5, -0.1), ConfigError);
  SuiteConfig c;
  c.anchor_groups = 0;
  EXPECT_THROW(generate_suite(c), ConfigError);
  c = {};
  c.vocab_size = 6;
  c.name_length = 1;
  c.classes_per_task = 3;
  EXPECT_THROW(generate_suite(c), ConfigError);
}

TEST(Shots, ValidationCounts) {
  EXPECT_EQ(validation_count(20), 4u);
  EXPECT_EQ(validation_count(4), 1u);
  EXPECT_EQ(validation_count(5), 1u);
  EXPECT_EQ(validation_count(6), 2u);
  EXPECT_EQ(validation_count(1), 0u);
}

TEST(Shots, SplitSizes) {
  const TaskSuite s = generate_suite(1, 2, 4, 0.5, 0.5);
  const FewShotSplit five = sample_shots(s.tasks[1], 5, 0);
  EXPECT_EQ(five.train.size(), 16u);
  EXPECT_EQ(five.val.size(), 4u);
  EXPECT_EQ(five.test.size(), 4 * kTestPerClass);
  const FewShotSplit one = sample_shots(s.tasks[1], 1, 0);
  EXPECT_EQ(one.train.size(), 3u);
  EXPECT_EQ(one.val.size(), 1u);
}

TEST(Shots, PartitionsAreDisjoint) {
  const TaskSuite s = generate_suite(1, 2, 4, 0.5, 0.5);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FewShotSplit sp = sample_shots(s.tasks[0], 5, seed);
    std::set<std::size_t> ids;
    std::size_t total = 0;
    for (const auto* part : {&sp.train, &sp.val, &sp.test})
      for (const auto& e : *part) {
        ids.insert(e.index);
        ++total;
      }
    EXPECT_EQ(ids.size(), total);
    for (const auto& tr : sp.train)
      for (const auto& te : sp.test) EXPECT_NE(tr.patches, te.patches);
  }
}

TEST(Shots, EveryClassDrawsKShots) {
  const TaskSuite s = generate_suite(1, 2, 4, 0.5, 0.5);
  const FewShotSplit sp = sample_shots(s.tasks[0], 5, 3);
  std::map<std::size_t, std::size_t> per_class;
  for (const auto* part : {&sp.train, &sp.val})
    for (const auto& e : *part) ++per_class[e.label];
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(per_class[c], 5u);
}

TEST(Shots, DeterministicAndSeedDependent) {
  const TaskSuite s = generate_suite(1, 2, 4, 0.5, 0.5);
  const FewShotSplit a = sample_shots(s.tasks[0], 5, 7);
  const FewShotSplit b = sample_shots(s.tasks[0], 5, 7);
  const FewShotSplit c = sample_shots(s.tasks[0], 5, 8);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].patches, b.train[i].patches);
  EXPECT_NE(a.train[0].patches, c.train[0].patches);
  // The test set belongs to the task, not to the draw.
  for (std::size_t i = 0; i < a.test.size(); ++i) EXPECT_EQ(a.test[i].patches, c.test[i].patches);
}

TEST(Shots, ZeroShotsIsRejected) {
  const TaskSuite s = generate_suite(1, 2, 4, 0.5, 0.5);
  EXPECT_THROW(sample_shots(s.tasks[0], 0, 0), ContractError);
}

TEST(PretrainingSet, IsClassBalanced) {
  SuiteConfig c;
  c.seed = 3;
  const TaskSuite s = generate_suite(c);
  const auto pairs = paired_pretraining_set(s, 1024, 1);
  ASSERT_EQ(pairs.size(), 1024u);
  std::map<std::size_t, std::size_t> counts;
  for (const auto& p : pairs) ++counts[p.class_key];
  const std::size_t keys = c.n_tasks * c.classes_per_task;
  EXPECT_EQ(counts.size(), keys);
  const double expected = 1024.0 / double(keys);
  for (const auto& [key, n] : counts) EXPECT_LE(std::abs(double(n) - expected), 0.1 * expected) << "class " << key;
}

TEST(PretrainingSet, CaptionsUseTheTemplate) {
  const TaskSuite s = generate_suite(3, 3, 4, 0.5, 0.5);
  for (const auto& p : paired_pretraining_set(s, 40, 0)) {
    const auto& cls = s.tasks[p.class_key / 4].classes[p.class_key % 4];
    EXPECT_EQ(p.caption, template_caption(cls.name));
  }
}

TEST(Manifest, SuiteRoundTrip) {
  SuiteConfig c;
  c.seed = 11;
  c.n_tasks = 4;
  c.anchor_groups = 2;
  c.noise_scale = 0.75;
  const TaskSuite s = generate_suite(c);
  const std::string text = suite_manifest(s);
  const TaskSuite back = suite_from_manifest(text);
  EXPECT_EQ(suite_manifest(back), text);
  EXPECT_EQ(back.tasks[3].classes[2].prototype, s.tasks[3].classes[2].prototype);
}

TEST(Manifest, TamperedSuiteIsRejected) {
  const TaskSuite s = generate_suite(11, 3, 4, 0.5, 0.5);
  std::string text = suite_manifest(s);
  const auto pos = text.find("\"seed\": 11");
  ASSERT_NE(pos, std::string::npos);
  const std::string needle = "\"class_names\"";
  const auto names = text.find(needle);
  ASSERT_NE(names, std::string::npos);
  const auto digit = text.find_first_of("0123456789", names);
  text[digit] = text[digit] == '9' ? '8' : char(text[digit] + 1);
  EXPECT_THROW(suite_from_manifest(text), FormatError);
}

TEST(Manifest, SplitRoundTrip) {
  const TaskSuite s = generate_suite(2, 3, 4, 0.5, 0.5);
  const FewShotSplit sp = sample_shots(s.tasks[2], 5, 4);
  const FewShotSplit back = split_from_manifest(s, split_manifest(sp));
  EXPECT_EQ(back.task_id, 2u);
  ASSERT_EQ(back.train.size(), sp.train.size());
  for (std::size_t i = 0; i < sp.train.size(); ++i) EXPECT_EQ(back.train[i].patches, sp.train[i].patches);
  EXPECT_EQ(back.test.size(), sp.test.size());
}

}  // namespace
}  // namespace mvlpt
