// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "mvlpt/encoders.hpp"
#include "mvlpt/ops.hpp"
#include "mvlpt/optimizer.hpp"
#include "mvlpt/prompts.hpp"
#include "mvlpt/random.hpp"
#include "mvlpt/taskgen.hpp"
#include "mvlpt/trainer.hpp"

namespace {

using namespace mvlpt;

void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  Rng rng(1);
  const Var a = Var::constant(normal_array({n, n}, 1.0, rng));
  const Var b = Var::constant(normal_array({n, n}, 1.0, rng));
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).value().data().data());
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_AttentionForwardBackward(benchmark::State& state) {
  Rng rng(2);
  TransformerLayer layer = TransformerLayer::initialize(32, 64, rng);
  const Var x = Var::constant(normal_array({33, 32}, 1.0, rng));
  for (auto _ : state) {
    backward(sum(transformer_layer(layer, x, {2, 0, true})));
    layer.for_each("", [](const std::string&, Parameter& p) { p.zero_grad(); });
  }
}
BENCHMARK(BM_AttentionForwardBackward);

void BM_EncodeImageBatch(benchmark::State& state) {
  const EncoderConfig enc;
  const EncoderWeights w = EncoderWeights::initialize(enc, 3);
  Rng rng(3);
  std::vector<Array> images;
  for (int i = 0; i < 32; ++i) images.push_back(normal_array({enc.patch_count, enc.patch_dim}, 1.0, rng));
  ImageRefs refs;
  for (const auto& img : images) refs.push_back(&img);
  const PromptState visual = PromptState::initialize(PromptMode::visual, enc, {}, 1);
  const PromptRows rows = realize(visual, enc.vision_layers);
  for (auto _ : state) benchmark::DoNotOptimize(encode_images(w, refs, &rows.visual).embeddings.value().data().data());
}
BENCHMARK(BM_EncodeImageBatch);

void BM_PromptTrainingStep(benchmark::State& state) {
  const auto mode = static_cast<PromptMode>(state.range(0));
  SuiteConfig sc;
  sc.n_tasks = 2;
  const TaskSuite suite = generate_suite(sc);
  EncoderConfig enc;
  enc.vocab_size = sc.vocab_size;
  enc.patch_count = sc.patch_count;
  enc.patch_dim = sc.patch_dim;
  EncoderWeights w = EncoderWeights::initialize(enc, 4);
  w.freeze();
  FeatureCache cache(w);
  const FewShotSplit split = sample_shots(suite.tasks[0], 5, 0);
  ImageRefs refs;
  std::vector<std::size_t> labels;
  for (const auto& e : split.train) {
    refs.push_back(&e.patches);
    labels.push_back(e.label);
  }
  PromptState prompt = PromptState::initialize(mode, enc, {}, 1);
  Adam opt(prompt.parameters());
  for (auto _ : state) {
    opt.zero_grad();
    backward(prompt_batch_loss(prompt, suite.tasks[0], refs, labels, cache));
    opt.step(1e-3);
  }
  state.SetLabel(std::string(to_string(mode)));
}
BENCHMARK(BM_PromptTrainingStep)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
