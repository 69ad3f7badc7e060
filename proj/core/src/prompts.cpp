// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/prompts.hpp"

#include <cmath>

#include "mvlpt/errors.hpp"

namespace mvlpt {

std::string_view to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::text: return "text";
    case PromptMode::visual: return "visual";
    case PromptMode::unified: return "unified";
  }
  return "unknown";
}

PromptMode parse_prompt_mode(std::string_view name) {
  if (name == "text") return PromptMode::text;
  if (name == "visual") return PromptMode::visual;
  if (name == "unified") return PromptMode::unified;
  throw ConfigError("unknown prompt mode '" + std::string(name) + "' (expected text, visual or unified)");
}

void PromptConfig::validate() const {
  if (text_context == 0 || visual_context == 0 || unified_text_context == 0 || unified_visual_context == 0) {
    throw ConfigError("prompt context lengths must be at least 1");
  }
  if (unified_hidden == 0 || unified_ffn_hidden == 0 || unified_heads == 0 || unified_hidden % unified_heads != 0) {
    throw ConfigError("unified transform: hidden width must be positive and divisible by its heads");
  }
  if (!(init_std > 0.0)) throw ConfigError("prompt init_std must be positive");
}

namespace {

Parameter gaussian(const Shape& shape, double stddev, Rng& rng) { return Parameter(normal_array(shape, stddev, rng)); }
Parameter filled(const Shape& shape, double v) { return Parameter(Array(shape, v)); }

}  // namespace

UnifiedTransform UnifiedTransform::initialize(std::size_t width, const PromptConfig& config, Rng& rng) {
  const std::size_t h = config.unified_hidden;
  const std::size_t f = config.unified_ffn_hidden;
  const double sh = 1.0 / std::sqrt(double(h));
  UnifiedTransform t;
  t.heads = config.unified_heads;
  t.in_proj = gaussian({width, h}, 1.0 / std::sqrt(double(width)), rng);
  t.in_bias = filled({h}, 0.0);
  t.ln1_gain = filled({h}, 1.0);
  t.ln1_bias = filled({h}, 0.0);
  t.wq = gaussian({h, h}, sh, rng);
  t.bq = filled({h}, 0.0);
  t.wk = gaussian({h, h}, sh, rng);
  t.bk = filled({h}, 0.0);
  t.wv = gaussian({h, h}, sh, rng);
  t.bv = filled({h}, 0.0);
  t.wo = gaussian({h, h}, sh, rng);
  t.bo = filled({h}, 0.0);
  t.ln2_gain = filled({h}, 1.0);
  t.ln2_bias = filled({h}, 0.0);
  t.w1 = gaussian({h, f}, sh, rng);
  t.b1 = filled({f}, 0.0);
  t.w2 = gaussian({f, h}, 1.0 / std::sqrt(double(f)), rng);
  t.b2 = filled({h}, 0.0);
  // Small output scale keeps the transformed rows near the prompt init
  // magnitude.
  t.out_proj = gaussian({h, width}, config.init_std / std::sqrt(double(h)), rng);
  t.out_bias = filled({width}, 0.0);
  return t;
}

void UnifiedTransform::for_each(const std::function<void(const std::string&, Parameter&)>& fn) {
  fn("theta.in_proj", in_proj);
  fn("theta.in_bias", in_bias);
  fn("theta.ln1_gain", ln1_gain);
  fn("theta.ln1_bias", ln1_bias);
  fn("theta.wq", wq);
  fn("theta.bq", bq);
  fn("theta.wk", wk);
  fn("theta.bk", bk);
  fn("theta.wv", wv);
  fn("theta.bv", bv);
  fn("theta.wo", wo);
  fn("theta.bo", bo);
  fn("theta.ln2_gain", ln2_gain);
  fn("theta.ln2_bias", ln2_bias);
  fn("theta.w1", w1);
  fn("theta.b1", b1);
  fn("theta.w2", w2);
  fn("theta.b2", b2);
  fn("theta.out_proj", out_proj);
  fn("theta.out_bias", out_bias);
}

PromptState PromptState::initialize(PromptMode mode, const EncoderConfig& encoder, const PromptConfig& config,
                                    std::uint64_t seed) {
  encoder.validate();
  config.validate();
  Rng rng(derive_seed(seed, {0x70726f6d, std::uint64_t(mode)}));
  const std::size_t d = encoder.embed_dim;
  PromptState s;
  s.mode = mode;
  switch (mode) {
    case PromptMode::text:
      s.text_context = gaussian({config.text_context, d}, config.init_std, rng);
      break;
    case PromptMode::visual:
      for (std::size_t i = 0; i < encoder.vision_layers; ++i)
        s.visual_layers.push_back(gaussian({config.visual_context, d}, config.init_std, rng));
      break;
    case PromptMode::unified:
      s.unified_text = gaussian({config.unified_text_context, d}, config.init_std, rng);
      s.unified_visual = gaussian({config.unified_visual_context, d}, config.init_std, rng);
      s.transform = UnifiedTransform::initialize(d, config, rng);
      break;
  }
  return s;
}

void PromptState::for_each(const std::function<void(const std::string&, Parameter&)>& fn) {
  switch (mode) {
    case PromptMode::text:
      fn("text.context", text_context);
      break;
    case PromptMode::visual:
      for (std::size_t i = 0; i < visual_layers.size(); ++i) fn("visual.layer" + std::to_string(i), visual_layers[i]);
      break;
    case PromptMode::unified:
      fn("unified.text", unified_text);
      fn("unified.visual", unified_visual);
      transform.for_each(fn);
      break;
  }
}

std::vector<Parameter*> PromptState::parameters() {
  std::vector<Parameter*> out;
  for_each([&out](const std::string&, Parameter& p) { out.push_back(&p); });
  return out;
}

std::size_t PromptState::parameter_count() const {
  std::size_t n = 0;
  const_cast<PromptState*>(this)->for_each([&n](const std::string&, Parameter& p) { n += p.size(); });
  return n;
}

TensorBundle PromptState::to_bundle() const {
  TensorBundle b;
  b.kind = "prompt";
  b.meta.emplace_back("mode", std::string(to_string(mode)));
  switch (mode) {
    case PromptMode::text:
      b.meta.emplace_back("context", std::to_string(text_context.shape()[0]));
      break;
    case PromptMode::visual:
      b.meta.emplace_back("context", std::to_string(visual_layers.front().shape()[0]));
      b.meta.emplace_back("layers", std::to_string(visual_layers.size()));
      break;
    case PromptMode::unified:
      b.meta.emplace_back("text_context", std::to_string(unified_text.shape()[0]));
      b.meta.emplace_back("visual_context", std::to_string(unified_visual.shape()[0]));
      b.meta.emplace_back("heads", std::to_string(transform.heads));
      break;
  }
  const_cast<PromptState*>(this)->for_each(
      [&b](const std::string& name, Parameter& p) { b.tensors.emplace_back(name, p.value()); });
  return b;
}

PromptState PromptState::from_bundle(const TensorBundle& bundle) {
  if (bundle.kind != "prompt") throw FormatError("expected a prompt bundle, got '" + bundle.kind + "'");
  PromptState s;
  s.mode = parse_prompt_mode(bundle.meta_value("mode"));
  switch (s.mode) {
    case PromptMode::text:
      s.text_context = Parameter(bundle.tensor("text.context"));
      break;
    case PromptMode::visual: {
      const std::size_t layers = std::stoull(bundle.meta_value("layers"));
      for (std::size_t i = 0; i < layers; ++i)
        s.visual_layers.emplace_back(bundle.tensor("visual.layer" + std::to_string(i)));
      break;
    }
    case PromptMode::unified:
      s.unified_text = Parameter(bundle.tensor("unified.text"));
      s.unified_visual = Parameter(bundle.tensor("unified.visual"));
      s.transform.heads = std::stoull(bundle.meta_value("heads"));
      s.transform.for_each([&bundle](const std::string& name, Parameter& p) { p = Parameter(bundle.tensor(name)); });
      break;
  }
  return s;
}

std::pair<Var, Var> transform_unified(const PromptState& state) {
  if (state.mode != PromptMode::unified) throw ContractError("transform_unified on a non-unified prompt");
  const UnifiedTransform& t = state.transform;
  const std::size_t n_text = state.unified_text.shape()[0];
  const std::size_t n_visual = state.unified_visual.shape()[0];
  const Var parts[] = {state.unified_text.var(), state.unified_visual.var()};
  const Var u = concat_rows(parts);
  const Var h = add_bias(matmul(u, t.in_proj.var()), t.in_bias.var());

  const Var q = add_bias(matmul(h, t.wq.var()), t.bq.var());
  const Var k = add_bias(matmul(h, t.wk.var()), t.bk.var());
  const Var v = add_bias(matmul(h, t.wv.var()), t.bv.var());
  const Var sa = add_bias(attention(q, k, v, t.wo.var(), AttentionOptions{t.heads, 0, false}), t.bo.var());
  const Var h1 = add(sa, layer_norm(h, t.ln1_gain.var(), t.ln1_bias.var()));

  const Var n1 = layer_norm(h1, t.ln2_gain.var(), t.ln2_bias.var());
  const Var ffn = add_bias(matmul(gelu(add_bias(matmul(n1, t.w1.var()), t.b1.var())), t.w2.var()), t.b2.var());
  const Var h2 = add(ffn, n1);

  const Var out = add_bias(matmul(h2, t.out_proj.var()), t.out_bias.var());
  return {slice_rows(out, 0, n_text), slice_rows(out, n_text, n_visual)};
}

PromptRows realize(const PromptState& state, std::size_t vision_layers) {
  PromptRows rows;
  switch (state.mode) {
    case PromptMode::text:
      rows.text = state.text_context.var();
      break;
    case PromptMode::visual:
      if (state.visual_layers.size() != vision_layers) {
        throw DimensionError("visual prompt has " + std::to_string(state.visual_layers.size()) +
                             " layer blocks, encoder has " + std::to_string(vision_layers));
      }
      for (const auto& p : state.visual_layers) rows.visual.per_layer.push_back(p.var());
      break;
    case PromptMode::unified: {
      auto [text, visual] = transform_unified(state);
      rows.text = text;
      rows.visual.per_layer.assign(vision_layers, visual);
      break;
    }
  }
  return rows;
}

Var build_text_input(const Var& context, std::span<const int> class_tokens, const EncoderWeights& weights) {
  const std::size_t n = context.rows();
  if (n + class_tokens.size() > weights.config.max_text_len) {
    throw LengthError("text prompt of " + std::to_string(n) + " context rows plus a class name of " +
                      std::to_string(class_tokens.size()) + " tokens exceeds max_text_len " +
                      std::to_string(weights.config.max_text_len));
  }
  if (context.cols() != weights.config.embed_dim) {
    throw DimensionError("text context width " + std::to_string(context.cols()) + " != embed_dim " +
                         std::to_string(weights.config.embed_dim));
  }
  if (class_tokens.empty()) return context;
  const Var parts[] = {context, embed_tokens(weights, class_tokens)};
  return concat_rows(parts);
}

Var inject_visual(const VisualPromptRows& prompt, std::size_t layer_index, const Var& cls, const Var& patches) {
  if (layer_index >= prompt.per_layer.size()) {
    throw DimensionError("vision layer index " + std::to_string(layer_index) + " out of range for " +
                         std::to_string(prompt.per_layer.size()) + " prompt blocks");
  }
  const Var parts[] = {cls, prompt.per_layer[layer_index], patches};
  return concat_rows(parts);
}

std::size_t count_prompt_params(PromptMode mode, const EncoderConfig& encoder, const PromptConfig& config) {
  const std::size_t d = encoder.embed_dim;
  switch (mode) {
    case PromptMode::text:
      return config.text_context * d;
    case PromptMode::visual:
      return encoder.vision_layers * config.visual_context * d;
    case PromptMode::unified: {
      const std::size_t h = config.unified_hidden;
      const std::size_t f = config.unified_ffn_hidden;
      const std::size_t theta = (d * h + h)          // input projection
                                + 2 * h              // LN1
                                + 4 * (h * h + h)    // q, k, v, o
                                + 2 * h              // LN2
                                + (h * f + f) + (f * h + h)  // FFN
                                + (h * d + d);       // output projection
      return (config.unified_text_context + config.unified_visual_context) * d + theta;
    }
  }
  throw ConfigError("unknown prompt mode");
}

}  // namespace mvlpt
