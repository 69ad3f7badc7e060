// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "grad_cases.hpp"
#include "mvlpt/errors.hpp"
#include "small_world.hpp"

namespace mvlpt {
namespace {

using testing::small_world;

double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

// Direct symmetric InfoNCE in long double.
double infonce_oracle(const Array& img, const Array& txt, double tau) {
  const std::size_t n = img.rows();
  const std::size_t d = img.cols();
  std::vector<long double> logits(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += (long double)img.at(i, k) * txt.at(j, k);
      logits[i * n + j] = dot / tau;
    }
  long double rows = 0, cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long double zr = 0, zc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      zr += std::exp(logits[i * n + j]);
      zc += std::exp(logits[j * n + i]);
    }
    rows += std::log(zr) - logits[i * n + i];
    cols += std::log(zc) - logits[i * n + i];
  }
  return double((rows + cols) / (2.0L * n));
}

Array unit_rows(Shape shape, Rng& rng) {
  Array a = normal_array(shape, 1.0, rng);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double n = row_norm(a.row(r));
    for (double& v : a.row(r)) v /= n;
  }
  return a;
}

class LogNIdentity : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LogNIdentity, IdenticalEmbeddingsGiveLogN) {
  const std::size_t n = GetParam();
  Rng rng(n);
  const Array one = unit_rows({1, 6}, rng);
  Array img({n, 6});
  Array txt({n, 6});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(one.data().begin(), one.data().end(), img.row(i).begin());
    std::copy(one.data().begin(), one.data().end(), txt.row(i).begin());
  }
  for (double tau : {0.01, 0.07, 1.0}) {
    EXPECT_NEAR(contrastive_loss(img, txt, tau), std::log(double(n)), 1e-9) << "tau " << tau;
  }
  const Var v = contrastive_loss(Var::constant(img), Var::constant(txt), Var::constant(Array::scalar(std::log(0.07))));
  EXPECT_NEAR(v.value().item(), std::log(double(n)), 1e-9);
}

INSTANTIATE_TEST_SUITE_P(BatchSizes, LogNIdentity, ::testing::Values(2, 4, 8));

TEST(ContrastiveLoss, MatchesDirectComputation) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Array img = unit_rows({4, 5}, rng);
    const Array txt = unit_rows({4, 5}, rng);
    EXPECT_NEAR(contrastive_loss(img, txt, 0.3), infonce_oracle(img, txt, 0.3), 1e-12);
    const Var v = contrastive_loss(Var::constant(img), Var::constant(txt), Var::constant(Array::scalar(std::log(0.3))));
    EXPECT_NEAR(v.value().item(), infonce_oracle(img, txt, 0.3), 1e-12);
  }
}

TEST(ContrastiveLoss, FallsAsTemperatureFallsForAlignedPairs) {
  Rng rng(3);
  const Array img = unit_rows({6, 8}, rng);
  Array txt = img;
  double previous = std::numeric_limits<double>::infinity();
  for (double tau : {2.0, 1.0, 0.5, 0.2, 0.1, 0.05}) {
    const double loss = contrastive_loss(img, txt, tau);
    EXPECT_LT(loss, previous) << "tau " << tau;
    previous = loss;
  }
}

TEST(ContrastiveLoss, RejectsBatchBelowTwo) {
  Rng rng(1);
  const Array one = unit_rows({1, 4}, rng);
  EXPECT_THROW(contrastive_loss(one, one, 0.1), ContractError);
}

TEST(Encoders, EmbeddingsAreUnitNorm) {
  const auto config = testing::small_encoder();
  const EncoderWeights w = EncoderWeights::initialize(config, 9);
  Rng rng(2);
  for (int i = 0; i < 5; ++i) {
    const Array img = encode_image(normal_array({config.patch_count, config.patch_dim}, 1.0, rng), w);
    EXPECT_NEAR(row_norm(img.data()), 1.0, 1e-12);
    const std::vector<int> tokens{0, 1, 2, 3, 4 + i, 5 + i};
    EXPECT_NEAR(row_norm(encode_text(tokens, w).data()), 1.0, 1e-12);
  }
}

TEST(Encoders, RejectsOutOfVocabularyAndOverlongText) {
  const auto config = testing::small_encoder();
  const EncoderWeights w = EncoderWeights::initialize(config, 9);
  const std::vector<int> bad{0, 1, int(config.vocab_size)};
  EXPECT_THROW(encode_text(bad, w), VocabularyError);
  const std::vector<int> long_text(config.max_text_len + 1, 5);
  EXPECT_THROW(encode_text(long_text, w), LengthError);
}

TEST(Encoders, RejectsWrongImageShape) {
  const auto config = testing::small_encoder();
  const EncoderWeights w = EncoderWeights::initialize(config, 9);
  EXPECT_THROW(encode_image(Array({config.patch_count + 1, config.patch_dim}), w), DimensionError);
}

TEST(ZeroShot, DuplicateClassNamesAreRejected) {
  const EncoderWeights w = EncoderWeights::initialize(testing::small_encoder(), 9);
  try {
    build_zero_shot_classifier(w, {{4, 5}, {6, 7}, {4, 5}});
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("{4,5}"), std::string::npos) << e.what();
  }
}

TEST(ZeroShot, ArgmaxIsInvariantToScaleAndFollowsPermutation) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Array cls = unit_rows({5, 6}, rng);
    const Array img = unit_rows({1, 6}, rng);
    const std::size_t k = argmax_similarity(img.data(), cls);
    std::vector<double> scaled(img.data().begin(), img.data().end());
    for (double& v : scaled) v *= 3.7;
    EXPECT_EQ(argmax_similarity(scaled, cls), k);
    // Reverse the class order.
    Array rev({5, 6});
    for (std::size_t r = 0; r < 5; ++r) std::copy(cls.row(4 - r).begin(), cls.row(4 - r).end(), rev.row(r).begin());
    EXPECT_EQ(argmax_similarity(img.data(), rev), 4 - k);
  }
}

TEST(ZeroShot, ClassifierRowsAreTemplateEncodings) {
  const EncoderWeights w = EncoderWeights::initialize(testing::small_encoder(), 9);
  const std::vector<std::vector<int>> names{{4, 5}, {6}, {7, 8, 9}};
  const ClassifierSet set = build_zero_shot_classifier(w, names);
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Array e = encode_text(template_caption(names[i]), w);
    for (std::size_t k = 0; k < e.size(); ++k) EXPECT_DOUBLE_EQ(set.weights.at(i, k), e[k]);
  }
  EXPECT_EQ(template_caption(names[2]), (std::vector<int>{0, 1, 2, 3, 7, 8, 9}));
}

TEST(Pretrain, InitialLossIsNearLogBatch) {
  const auto& w = small_world();
  const double ln_n = std::log(16.0);
  EXPECT_NEAR(w.loss_trace.front(), ln_n, 0.2 * ln_n);
  EXPECT_LE(w.loss_trace.back(), 0.6 * w.loss_trace.front());
}

TEST(Pretrain, ReturnsFrozenEncoder) {
  const auto& w = small_world();
  EXPECT_TRUE(w.encoder.frozen());
  EXPECT_GT(w.encoder.temperature(), 0.0);
  for (Parameter* p : const_cast<EncoderWeights&>(w.encoder).parameters()) EXPECT_FALSE(p->has_gradient());
}

TEST(Pretrain, IsDeterministic) {
  const auto& w = small_world();
  PretrainConfig pc;
  pc.steps = 800;
  pc.batch_size = 16;
  pc.seed = 1;
  const auto again = pretrain(paired_pretraining_set(w.suite, 1024, 2), testing::small_world_encoder(w.suite.config), pc);
  EXPECT_EQ(serialize(again.weights.to_bundle()), serialize(w.encoder.to_bundle()));
  EXPECT_EQ(again.loss_trace, w.loss_trace);
}

TEST(Pretrain, TooFewStepsIsATrainingFailure) {
  const auto& w = small_world();
  PretrainConfig pc;
  pc.steps = 2;
  pc.batch_size = 16;
  EXPECT_THROW(pretrain(paired_pretraining_set(w.suite, 64, 2), testing::small_world_encoder(w.suite.config), pc),
               TrainingFailure);
}

TEST(Pretrain, DatasetSmallerThanBatchIsRejected) {
  const auto& w = small_world();
  PretrainConfig pc;
  pc.batch_size = 16;
  EXPECT_THROW(pretrain(paired_pretraining_set(w.suite, 8, 2), testing::small_world_encoder(w.suite.config), pc),
               ContractError);
}

TEST(Pretrain, ZeroShotBeatsChanceOnUnseenImages) {
  const auto& w = small_world();
  FeatureCache cache(w.encoder);
  const double chance = 1.0 / double(w.suite.config.classes_per_task);
  double total = 0.0;
  for (const auto& task : w.suite.tasks) {
    const FewShotSplit split = sample_shots(task, 1, 0);
    const double acc = zero_shot_accuracy(task, split, SplitRole::test, cache);
    EXPECT_GT(acc, 1.5 * chance) << "task " << task.task_id;
    total += acc;
  }
  EXPECT_GT(total / double(w.suite.tasks.size()), 0.7);
}

TEST(Pretrain, PrototypesMapToTheirOwnClass) {
  const auto& w = small_world();
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const auto& task : w.suite.tasks) {
    const auto names = task.class_names();
    for (std::size_t k = 0; k < task.classes.size(); ++k) {
      correct += zero_shot_classify(task.classes[k].prototype, names, w.encoder) == k;
      ++total;
    }
  }
  EXPECT_GE(double(correct) / double(total), 0.9) << correct << "/" << total;
}

TEST(Checkpoint, RoundTripIsByteExact) {
  const auto& w = small_world();
  const std::string text = serialize(w.encoder.to_bundle());
  const EncoderWeights back = EncoderWeights::from_bundle(deserialize(text));
  EXPECT_EQ(serialize(back.to_bundle()), text);
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.temperature(), w.encoder.temperature());
}

TEST(Checkpoint, CorruptionNamesTheFile) {
  const auto& w = small_world();
  const auto path = std::filesystem::temp_directory_path() / "mvlpt-test-encoder.tensors";
  save_bundle(path, w.encoder.to_bundle());
  std::string text;
  {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  const auto pos = text.find("tensor ", 0);
  const auto digit = text.find_first_of("123456789", text.find('\n', pos) + 1);
  text[digit] = text[digit] == '9' ? '8' : char(text[digit] + 1);
  {
    std::ofstream out(path, std::ios::trunc);
    out << text;
  }
  try {
    load_bundle(path);
    FAIL() << "expected ChecksumError";
  } catch (const ChecksumError& e) {
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, WrongKindIsRejected) {
  TensorBundle b;
  b.kind = "prompt";
  EXPECT_THROW(EncoderWeights::from_bundle(b), FormatError);
}

}  // namespace
}  // namespace mvlpt
