// SPDX-License-Identifier: Apache-2.0
//
// The three learnable prompt mechanisms:
//   text    - n context rows prepended to the class tokens (CoOp)
//   visual  - n rows per vision layer inserted after CLS (deep VPT)
//   unified - n_T + n_V shared rows passed through a small transformer
//             block, then split into text context and visual rows (UPT)
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvlpt/encoders.hpp"

namespace mvlpt {

enum class PromptMode { text, visual, unified };

std::string_view to_string(PromptMode mode);
PromptMode parse_prompt_mode(std::string_view name);
inline constexpr PromptMode kAllModes[] = {PromptMode::text, PromptMode::visual, PromptMode::unified};

struct PromptConfig {
  std::size_t text_context = 16;
  std::size_t visual_context = 16;
  std::size_t unified_text_context = 4;
  std::size_t unified_visual_context = 4;
  std::size_t unified_hidden = 128;
  std::size_t unified_heads = 1;
  std::size_t unified_ffn_hidden = 128;
  double init_std = 0.02;

  void validate() const;
};

// Transform applied to the concatenated unified prompt:
//   h  = U W_in + b_in
//   h' = SA(h) + LN1(h)
//   o  = FFN(LN2(h')) + LN2(h')
//   U^ = o W_out + b_out
// The residual branches add the layer-normalized input, not the raw input.
struct UnifiedTransform {
  Parameter in_proj, in_bias;
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;
  Parameter out_proj, out_bias;
  std::size_t heads = 1;

  static UnifiedTransform initialize(std::size_t width, const PromptConfig& config, Rng& rng);
  void for_each(const std::function<void(const std::string&, Parameter&)>& fn);
};

struct PromptState {
  PromptMode mode = PromptMode::text;

  Parameter text_context;                // text: n x d
  std::vector<Parameter> visual_layers;  // visual: one n x d block per vision layer
  Parameter unified_text;                // unified: n_T x d
  Parameter unified_visual;              // unified: n_V x d
  UnifiedTransform transform;            // unified only

  static PromptState initialize(PromptMode mode, const EncoderConfig& encoder, const PromptConfig& config,
                                std::uint64_t seed);

  void for_each(const std::function<void(const std::string&, Parameter&)>& fn);
  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;

  TensorBundle to_bundle() const;
  static PromptState from_bundle(const TensorBundle& bundle);
};

// Prompt rows ready for the encoders. `text` is undefined for the visual
// mode; `visual.per_layer` is empty for the text mode.
struct PromptRows {
  Var text;
  VisualPromptRows visual;
};

PromptRows realize(const PromptState& state, std::size_t vision_layers);

// [p_1 .. p_n, class tokens] as embedded rows; only the context rows carry
// gradients.
Var build_text_input(const Var& context, std::span<const int> class_tokens, const EncoderWeights& weights);

// Input sequence of vision layer `layer_index`: [CLS, prompt rows of that
// layer, patch rows].
Var inject_visual(const VisualPromptRows& prompt, std::size_t layer_index, const Var& cls, const Var& patches);

std::pair<Var, Var> transform_unified(const PromptState& state);

std::size_t count_prompt_params(PromptMode mode, const EncoderConfig& encoder, const PromptConfig& config);

}  // namespace mvlpt
