// SPDX-License-Identifier: Apache-2.0
//
// Toy CLIP: a causal text transformer and a ViT-style image transformer that
// map token sequences and patch grids onto the unit sphere in a shared
// embedding space.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mvlpt/autodiff.hpp"
#include "mvlpt/ops.hpp"
#include "mvlpt/random.hpp"
#include "mvlpt/tensor_io.hpp"

namespace mvlpt {

// Token ids 0..3 are reserved for the fixed zero-shot template
// ("a photo of a"); class names draw from the rest of the vocabulary.
inline constexpr std::array<int, 4> kTemplateTokens{0, 1, 2, 3};
inline constexpr int kReservedTokens = 4;

struct EncoderConfig {
  std::size_t embed_dim = 32;
  std::size_t text_layers = 2;
  std::size_t vision_layers = 2;
  std::size_t heads = 2;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 24;
  std::size_t patch_count = 16;
  std::size_t patch_dim = 12;
  std::size_t ffn_multiplier = 2;

  void validate() const;
};

// Pre-norm transformer block weights.
struct TransformerLayer {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;

  static TransformerLayer initialize(std::size_t width, std::size_t ffn_width, Rng& rng);
  void for_each(const std::string& prefix,
                const std::function<void(const std::string&, Parameter&)>& fn);
};

// x + SA(LN(x)), then + FFN(LN(.)).
Var transformer_layer(const TransformerLayer& layer, const Var& x, const AttentionOptions& attn);

struct EncoderWeights {
  EncoderConfig config;

  Parameter token_embedding;  // vocab x d
  Parameter text_position;    // max_text_len x d
  std::vector<TransformerLayer> text_layers;
  Parameter text_ln_gain, text_ln_bias;
  Parameter text_projection;  // d x d

  Parameter patch_projection;  // patch_dim x d
  Parameter patch_bias;        // d
  Parameter cls_token;         // 1 x d
  Parameter vision_position;   // (1 + patch_count) x d
  std::vector<TransformerLayer> vision_layers;
  Parameter vision_ln_gain, vision_ln_bias;
  Parameter vision_projection;  // d x d

  Parameter log_temperature;  // scalar, log tau

  static EncoderWeights initialize(const EncoderConfig& config, std::uint64_t seed);

  // Visits every parameter under a stable, unique name.
  void for_each(const std::function<void(const std::string&, Parameter&)>& fn);
  std::vector<Parameter*> parameters();

  void freeze();
  bool frozen() const;
  double temperature() const;

  TensorBundle to_bundle() const;
  static EncoderWeights from_bundle(const TensorBundle& bundle);
};

Var embed_tokens(const EncoderWeights& weights, std::span<const int> tokens);

// `sequences` stacks equal-length embedded sequences ([batch*len x d]).
// Returns one unit-norm row per sequence, pooled at its final position.
Var encode_text_embedded(const EncoderWeights& weights, const Var& sequences, std::size_t seq_len);
Var encode_token_batch(const EncoderWeights& weights, const std::vector<std::vector<int>>& sequences);
Array encode_text(std::span<const int> tokens, const EncoderWeights& weights);

// Prompt rows inserted after CLS at each vision layer; the previous layer's
// outputs at those positions are discarded.
struct VisualPromptRows {
  std::vector<Var> per_layer;
};

struct ImageBatch {
  Var embeddings;                              // batch x d, unit rows
  std::vector<std::size_t> layer_seq_lengths;  // sequence length entering each layer
};

using ImageRefs = std::vector<const Array*>;

ImageBatch encode_images(const EncoderWeights& weights, const ImageRefs& images,
                         const VisualPromptRows* prompt = nullptr);
Array encode_image(const Array& patches, const EncoderWeights& weights,
                   const VisualPromptRows* prompt = nullptr);

// Symmetric InfoNCE over cosine similarities scaled by 1/tau. Rows must be
// unit-normalized; row i of each side is the positive pair.
Var contrastive_loss(const Var& image_embs, const Var& text_embs, const Var& log_tau);
double contrastive_loss(const Array& image_embs, const Array& text_embs, double tau);

// Per-class text embeddings from the fixed template plus class tokens.
struct ClassifierSet {
  Array weights;  // classes x d
};

ClassifierSet build_zero_shot_classifier(const EncoderWeights& weights,
                                         const std::vector<std::vector<int>>& class_names);
void check_distinct_class_names(const std::vector<std::vector<int>>& class_names);
std::vector<int> template_caption(std::span<const int> class_tokens);

std::size_t argmax_similarity(std::span<const double> image_emb, const Array& classifier);
std::size_t zero_shot_classify(const Array& patches, const std::vector<std::vector<int>>& class_names,
                               const EncoderWeights& weights);

struct ImageTextPair {
  Array patches;
  std::vector<int> caption;
  std::size_t class_key = 0;  // global (task, class) index for balance checks
};

struct PretrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  EncoderWeights weights;
  std::vector<double> loss_trace;
};

// Contrastive pretraining from random init. Throws TrainingFailure unless the
// late-run loss is at most half the initial loss. Returned weights are frozen.
PretrainResult pretrain(const std::vector<ImageTextPair>& data, const EncoderConfig& config,
                        const PretrainConfig& pretrain_config);

}  // namespace mvlpt
