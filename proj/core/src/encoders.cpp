// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mvlpt/errors.hpp"
#include "mvlpt/optimizer.hpp"

namespace mvlpt {

void EncoderConfig::validate() const {
  const std::pair<const char*, std::size_t> counts[] = {
      {"embed_dim", embed_dim},       {"text_layers", text_layers}, {"vision_layers", vision_layers},
      {"heads", heads},               {"vocab_size", vocab_size},   {"max_text_len", max_text_len},
      {"patch_count", patch_count},   {"patch_dim", patch_dim},     {"ffn_multiplier", ffn_multiplier}};
  for (const auto& [name, value] : counts) {
    if (value == 0) throw ConfigError(std::string("encoder config: ") + name + " must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("encoder config: embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (vocab_size <= std::size_t(kReservedTokens)) {
    throw ConfigError("encoder config: vocab_size must exceed the reserved template ids");
  }
  if (max_text_len <= kTemplateTokens.size()) {
    throw ConfigError("encoder config: max_text_len leaves no room after the template");
  }
}

namespace {

Parameter gaussian(const Shape& shape, double stddev, Rng& rng) {
  return Parameter(normal_array(shape, stddev, rng), true);
}

Parameter constant(const Shape& shape, double value) { return Parameter(Array(shape, value), true); }

constexpr double kInitialPoolGain = 0.15;

}  // namespace

TransformerLayer TransformerLayer::initialize(std::size_t width, std::size_t ffn_width, Rng& rng) {
  const double s_in = 1.0 / std::sqrt(double(width));
  const double s_ffn = 1.0 / std::sqrt(double(ffn_width));
  TransformerLayer l;
  l.ln1_gain = constant({width}, 1.0);
  l.ln1_bias = constant({width}, 0.0);
  l.wq = gaussian({width, width}, s_in, rng);
  l.bq = constant({width}, 0.0);
  l.wk = gaussian({width, width}, s_in, rng);
  l.bk = constant({width}, 0.0);
  l.wv = gaussian({width, width}, s_in, rng);
  l.bv = constant({width}, 0.0);
  l.wo = gaussian({width, width}, s_in, rng);
  l.bo = constant({width}, 0.0);
  l.ln2_gain = constant({width}, 1.0);
  l.ln2_bias = constant({width}, 0.0);
  l.w1 = gaussian({width, ffn_width}, s_in, rng);
  l.b1 = constant({ffn_width}, 0.0);
  l.w2 = gaussian({ffn_width, width}, s_ffn, rng);
  l.b2 = constant({width}, 0.0);
  return l;
}

void TransformerLayer::for_each(const std::string& prefix,
                                const std::function<void(const std::string&, Parameter&)>& fn) {
  fn(prefix + ".ln1_gain", ln1_gain);
  fn(prefix + ".ln1_bias", ln1_bias);
  fn(prefix + ".wq", wq);
  fn(prefix + ".bq", bq);
  fn(prefix + ".wk", wk);
  fn(prefix + ".bk", bk);
  fn(prefix + ".wv", wv);
  fn(prefix + ".bv", bv);
  fn(prefix + ".wo", wo);
  fn(prefix + ".bo", bo);
  fn(prefix + ".ln2_gain", ln2_gain);
  fn(prefix + ".ln2_bias", ln2_bias);
  fn(prefix + ".w1", w1);
  fn(prefix + ".b1", b1);
  fn(prefix + ".w2", w2);
  fn(prefix + ".b2", b2);
}

Var transformer_layer(const TransformerLayer& layer, const Var& x, const AttentionOptions& attn) {
  const Var h = layer_norm(x, layer.ln1_gain.var(), layer.ln1_bias.var());
  const Var q = add_bias(matmul(h, layer.wq.var()), layer.bq.var());
  const Var k = add_bias(matmul(h, layer.wk.var()), layer.bk.var());
  const Var v = add_bias(matmul(h, layer.wv.var()), layer.bv.var());
  const Var a = add_bias(attention(q, k, v, layer.wo.var(), attn), layer.bo.var());
  const Var x1 = add(x, a);
  const Var h2 = layer_norm(x1, layer.ln2_gain.var(), layer.ln2_bias.var());
  const Var f = add_bias(matmul(gelu(add_bias(matmul(h2, layer.w1.var()), layer.b1.var())), layer.w2.var()),
                         layer.b2.var());
  return add(x1, f);
}

EncoderWeights EncoderWeights::initialize(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, {0x656e63}));
  const std::size_t d = config.embed_dim;
  const std::size_t ffn = d * config.ffn_multiplier;
  EncoderWeights w;
  w.config = config;
  w.token_embedding = gaussian({config.vocab_size, d}, 0.5, rng);
  w.text_position = gaussian({config.max_text_len, d}, 0.1, rng);
  for (std::size_t i = 0; i < config.text_layers; ++i)
    w.text_layers.push_back(TransformerLayer::initialize(d, ffn, rng));
  // Small gain plus a shared bias makes freshly initialized embeddings nearly
  // parallel, so the initial contrastive loss sits near ln(batch).
  w.text_ln_gain = constant({d}, kInitialPoolGain);
  w.text_ln_bias = gaussian({d}, 1.0, rng);
  w.text_projection = gaussian({d, d}, 1.0 / std::sqrt(double(d)), rng);

  w.patch_projection = gaussian({config.patch_dim, d}, 1.0 / std::sqrt(double(config.patch_dim)), rng);
  w.patch_bias = constant({d}, 0.0);
  w.cls_token = gaussian({1, d}, 0.5, rng);
  w.vision_position = gaussian({1 + config.patch_count, d}, 0.1, rng);
  for (std::size_t i = 0; i < config.vision_layers; ++i)
    w.vision_layers.push_back(TransformerLayer::initialize(d, ffn, rng));
  w.vision_ln_gain = constant({d}, kInitialPoolGain);
  w.vision_ln_bias = gaussian({d}, 1.0, rng);
  w.vision_projection = gaussian({d, d}, 1.0 / std::sqrt(double(d)), rng);

  w.log_temperature = Parameter(Array::scalar(std::log(0.07)), true);
  return w;
}

void EncoderWeights::for_each(const std::function<void(const std::string&, Parameter&)>& fn) {
  fn("text.token_embedding", token_embedding);
  fn("text.position", text_position);
  for (std::size_t i = 0; i < text_layers.size(); ++i) text_layers[i].for_each("text.layer" + std::to_string(i), fn);
  fn("text.ln_gain", text_ln_gain);
  fn("text.ln_bias", text_ln_bias);
  fn("text.projection", text_projection);
  fn("vision.patch_projection", patch_projection);
  fn("vision.patch_bias", patch_bias);
  fn("vision.cls", cls_token);
  fn("vision.position", vision_position);
  for (std::size_t i = 0; i < vision_layers.size(); ++i)
    vision_layers[i].for_each("vision.layer" + std::to_string(i), fn);
  fn("vision.ln_gain", vision_ln_gain);
  fn("vision.ln_bias", vision_ln_bias);
  fn("vision.projection", vision_projection);
  fn("log_temperature", log_temperature);
}

std::vector<Parameter*> EncoderWeights::parameters() {
  std::vector<Parameter*> out;
  for_each([&out](const std::string&, Parameter& p) { out.push_back(&p); });
  return out;
}

void EncoderWeights::freeze() {
  for (Parameter* p : parameters()) {
    p->set_trainable(false);
    p->zero_grad();
  }
}

bool EncoderWeights::frozen() const {
  bool all = true;
  const_cast<EncoderWeights*>(this)->for_each(
      [&all](const std::string&, Parameter& p) { all = all && !p.trainable(); });
  return all;
}

double EncoderWeights::temperature() const { return std::exp(log_temperature.value().item()); }

TensorBundle EncoderWeights::to_bundle() const {
  TensorBundle b;
  b.kind = "encoder";
  const auto& c = config;
  b.meta = {{"embed_dim", std::to_string(c.embed_dim)},
            {"text_layers", std::to_string(c.text_layers)},
            {"vision_layers", std::to_string(c.vision_layers)},
            {"heads", std::to_string(c.heads)},
            {"vocab_size", std::to_string(c.vocab_size)},
            {"max_text_len", std::to_string(c.max_text_len)},
            {"patch_count", std::to_string(c.patch_count)},
            {"patch_dim", std::to_string(c.patch_dim)},
            {"ffn_multiplier", std::to_string(c.ffn_multiplier)},
            {"frozen", frozen() ? "1" : "0"}};
  const_cast<EncoderWeights*>(this)->for_each(
      [&b](const std::string& name, Parameter& p) { b.tensors.emplace_back(name, p.value()); });
  return b;
}

EncoderWeights EncoderWeights::from_bundle(const TensorBundle& bundle) {
  if (bundle.kind != "encoder") throw FormatError("expected an encoder bundle, got '" + bundle.kind + "'");
  auto count = [&bundle](const char* key) { return std::size_t(std::stoull(bundle.meta_value(key))); };
  EncoderConfig c;
  c.embed_dim = count("embed_dim");
  c.text_layers = count("text_layers");
  c.vision_layers = count("vision_layers");
  c.heads = count("heads");
  c.vocab_size = count("vocab_size");
  c.max_text_len = count("max_text_len");
  c.patch_count = count("patch_count");
  c.patch_dim = count("patch_dim");
  c.ffn_multiplier = count("ffn_multiplier");
  EncoderWeights w = initialize(c, 0);
  w.for_each([&bundle](const std::string& name, Parameter& p) {
    const Array& a = bundle.tensor(name);
    if (a.shape() != p.shape()) {
      throw FormatError("tensor " + name + " has shape " + shape_string(a.shape()) + ", expected " +
                        shape_string(p.shape()));
    }
    p.mutable_value() = a;
  });
  if (bundle.meta_value("frozen") == "1") w.freeze();
  return w;
}

Var embed_tokens(const EncoderWeights& weights, std::span<const int> tokens) {
  std::vector<RowRef> refs(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || std::size_t(tokens[i]) >= weights.config.vocab_size) {
      throw VocabularyError("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                            std::to_string(weights.config.vocab_size));
    }
    refs[i] = {0, std::size_t(tokens[i])};
  }
  const Var table = weights.token_embedding.var();
  return gather_rows(std::span<const Var>(&table, 1), refs);
}

Var encode_text_embedded(const EncoderWeights& weights, const Var& sequences, std::size_t seq_len) {
  const EncoderConfig& c = weights.config;
  if (seq_len == 0 || seq_len > c.max_text_len) {
    throw LengthError("text sequence of length " + std::to_string(seq_len) + " exceeds max_text_len " +
                      std::to_string(c.max_text_len));
  }
  if (sequences.rows() % seq_len != 0) {
    throw DimensionError("encode_text_embedded: rows do not divide into sequences of " + std::to_string(seq_len));
  }
  const std::size_t batch = sequences.rows() / seq_len;
  std::vector<RowRef> pos(sequences.rows());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = {0, i % seq_len};
  const Var pos_table = weights.text_position.var();
  Var x = add(sequences, gather_rows(std::span<const Var>(&pos_table, 1), pos));

  const AttentionOptions attn{c.heads, seq_len, true};
  for (const auto& layer : weights.text_layers) x = transformer_layer(layer, x, attn);

  std::vector<std::size_t> last(batch);
  for (std::size_t b = 0; b < batch; ++b) last[b] = b * seq_len + seq_len - 1;
  Var pooled = layer_norm(select_rows(x, last), weights.text_ln_gain.var(), weights.text_ln_bias.var());
  return l2_normalize_rows(matmul(pooled, weights.text_projection.var()));
}

Var encode_token_batch(const EncoderWeights& weights, const std::vector<std::vector<int>>& sequences) {
  if (sequences.empty()) throw ContractError("encode_token_batch: empty batch");
  const std::size_t len = sequences.front().size();
  std::vector<int> flat;
  flat.reserve(len * sequences.size());
  for (const auto& s : sequences) {
    if (s.size() != len) throw LengthError("encode_token_batch: sequences must share one length");
    if (len > weights.config.max_text_len) {
      throw LengthError("token sequence of length " + std::to_string(len) + " exceeds max_text_len " +
                        std::to_string(weights.config.max_text_len));
    }
    flat.insert(flat.end(), s.begin(), s.end());
  }
  return encode_text_embedded(weights, embed_tokens(weights, flat), len);
}

Array encode_text(std::span<const int> tokens, const EncoderWeights& weights) {
  if (tokens.size() > weights.config.max_text_len) {
    throw LengthError("token sequence of length " + std::to_string(tokens.size()) + " exceeds max_text_len " +
                      std::to_string(weights.config.max_text_len));
  }
  NoGradGuard no_grad;
  const Var e = encode_text_embedded(weights, embed_tokens(weights, tokens), tokens.size());
  return e.value().reshaped({weights.config.embed_dim});
}

ImageBatch encode_images(const EncoderWeights& weights, const ImageRefs& images, const VisualPromptRows* prompt) {
  const EncoderConfig& c = weights.config;
  if (images.empty()) throw ContractError("encode_images: empty batch");
  const std::size_t m = c.patch_count;
  const std::size_t batch = images.size();
  Array stacked({batch * m, c.patch_dim});
  for (std::size_t b = 0; b < batch; ++b) {
    const Array& img = *images[b];
    if (img.rows() != m || img.cols() != c.patch_dim) {
      throw DimensionError("image has shape " + shape_string(img.shape()) + ", expected [" + std::to_string(m) +
                           "x" + std::to_string(c.patch_dim) + "]");
    }
    std::copy(img.data().begin(), img.data().end(), stacked.data().begin() + std::ptrdiff_t(b * m * c.patch_dim));
  }
  if (prompt != nullptr && prompt->per_layer.size() != c.vision_layers) {
    throw DimensionError("visual prompt supplies " + std::to_string(prompt->per_layer.size()) +
                         " layers, encoder has " + std::to_string(c.vision_layers));
  }
  const std::size_t n = prompt == nullptr ? 0 : prompt->per_layer.front().rows();

  const Var patch_tokens =
      add_bias(matmul(Var::constant(std::move(stacked)), weights.patch_projection.var()), weights.patch_bias.var());

  // [cls, q_1..q_m] + positions, per image.
  const std::size_t base_len = 1 + m;
  std::vector<RowRef> base_refs(batch * base_len);
  std::vector<RowRef> pos_refs(batch * base_len);
  for (std::size_t b = 0; b < batch; ++b) {
    base_refs[b * base_len] = {0, 0};
    pos_refs[b * base_len] = {0, 0};
    for (std::size_t j = 0; j < m; ++j) {
      base_refs[b * base_len + 1 + j] = {1, b * m + j};
      pos_refs[b * base_len + 1 + j] = {0, 1 + j};
    }
  }
  const Var base_sources[] = {weights.cls_token.var(), patch_tokens};
  const Var pos_table = weights.vision_position.var();
  Var x = add(gather_rows(base_sources, base_refs), gather_rows(std::span<const Var>(&pos_table, 1), pos_refs));

  const std::size_t seq = base_len + n;
  std::vector<RowRef> layer_refs;
  if (prompt != nullptr) {
    // Source 0 holds per-image rows laid out with stride `src_len`; prompt
    // rows come from source 1.
    layer_refs.resize(batch * seq);
  }
  ImageBatch result;
  const AttentionOptions attn{c.heads, seq, false};
  for (std::size_t i = 0; i < c.vision_layers; ++i) {
    if (prompt != nullptr) {
      const std::size_t src_len = i == 0 ? base_len : seq;
      const std::size_t skip = i == 0 ? 0 : n;
      for (std::size_t b = 0; b < batch; ++b) {
        RowRef* out = layer_refs.data() + b * seq;
        out[0] = {0, b * src_len};
        for (std::size_t p = 0; p < n; ++p) out[1 + p] = {1, p};
        for (std::size_t j = 0; j < m; ++j) out[1 + n + j] = {0, b * src_len + 1 + skip + j};
      }
      const Var& rows = prompt->per_layer[i];
      if (rows.rows() != n || rows.cols() != c.embed_dim) {
        throw DimensionError("visual prompt for layer " + std::to_string(i) + " has shape " +
                             shape_string(rows.shape()));
      }
      const Var sources[] = {x, rows};
      x = gather_rows(sources, layer_refs);
    }
    result.layer_seq_lengths.push_back(seq);
    x = transformer_layer(weights.vision_layers[i], x, attn);
  }

  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * seq;
  const Var pooled = layer_norm(select_rows(x, cls_rows), weights.vision_ln_gain.var(), weights.vision_ln_bias.var());
  result.embeddings = l2_normalize_rows(matmul(pooled, weights.vision_projection.var()));
  return result;
}

Array encode_image(const Array& patches, const EncoderWeights& weights, const VisualPromptRows* prompt) {
  NoGradGuard no_grad;
  const ImageBatch out = encode_images(weights, {&patches}, prompt);
  return out.embeddings.value().reshaped({weights.config.embed_dim});
}

Var contrastive_loss(const Var& image_embs, const Var& text_embs, const Var& log_tau) {
  if (image_embs.rows() < 2) {
    throw ContractError("contrastive_loss: batch of " + std::to_string(image_embs.rows()) + " is below 2");
  }
  if (image_embs.shape() != text_embs.shape()) {
    throw DimensionError("contrastive_loss: " + shape_string(image_embs.shape()) + " vs " +
                         shape_string(text_embs.shape()));
  }
  const std::size_t n = image_embs.rows();
  std::vector<std::size_t> diag(n);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  const Var inv_tau = exp(scale(log_tau, -1.0));
  const Var logits = mul_scalar(matmul_nt(image_embs, text_embs), inv_tau);
  const Var i2t = cross_entropy(logits, diag);
  const Var t2i = cross_entropy(transpose(logits), diag);
  return scale(add(i2t, t2i), 0.5);
}

double contrastive_loss(const Array& image_embs, const Array& text_embs, double tau) {
  NoGradGuard no_grad;
  return contrastive_loss(Var::constant(image_embs), Var::constant(text_embs),
                          Var::constant(Array::scalar(std::log(tau))))
      .value()
      .item();
}

void check_distinct_class_names(const std::vector<std::vector<int>>& class_names) {
  if (class_names.size() < 2) throw ContractError("classifier needs at least 2 classes");
  std::set<std::vector<int>> seen;
  for (const auto& name : class_names) {
    if (!seen.insert(name).second) {
      std::ostringstream s;
      s << "duplicate class name {";
      for (std::size_t i = 0; i < name.size(); ++i) s << (i ? "," : "") << name[i];
      s << "} in classifier set";
      throw ContractError(s.str());
    }
  }
}

std::vector<int> template_caption(std::span<const int> class_tokens) {
  std::vector<int> out(kTemplateTokens.begin(), kTemplateTokens.end());
  out.insert(out.end(), class_tokens.begin(), class_tokens.end());
  return out;
}

ClassifierSet build_zero_shot_classifier(const EncoderWeights& weights,
                                         const std::vector<std::vector<int>>& class_names) {
  check_distinct_class_names(class_names);
  NoGradGuard no_grad;
  std::vector<std::vector<int>> captions;
  captions.reserve(class_names.size());
  for (const auto& name : class_names) captions.push_back(template_caption(name));
  // Names of different lengths go through separately; equal lengths batch.
  ClassifierSet out{Array({class_names.size(), weights.config.embed_dim})};
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const Array e = encode_text(captions[i], weights);
    std::copy(e.data().begin(), e.data().end(), out.weights.row(i).begin());
  }
  return out;
}

std::size_t argmax_similarity(std::span<const double> image_emb, const Array& classifier) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < classifier.rows(); ++k) {
    auto w = classifier.row(k);
    double s = 0.0;
    double ww = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      s += w[j] * image_emb[j];
      ww += w[j] * w[j];
    }
    s /= std::sqrt(ww);
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best;
}

std::size_t zero_shot_classify(const Array& patches, const std::vector<std::vector<int>>& class_names,
                               const EncoderWeights& weights) {
  const ClassifierSet classifier = build_zero_shot_classifier(weights, class_names);
  const Array image = encode_image(patches, weights);
  return argmax_similarity(image.data(), classifier.weights);
}

PretrainResult pretrain(const std::vector<ImageTextPair>& data, const EncoderConfig& config,
                        const PretrainConfig& pc) {
  if (data.size() < pc.batch_size || pc.batch_size < 2) {
    throw ContractError("pretrain: dataset of " + std::to_string(data.size()) + " pairs cannot fill batches of " +
                        std::to_string(pc.batch_size));
  }
  PretrainResult result{EncoderWeights::initialize(config, pc.seed), {}};
  EncoderWeights& w = result.weights;
  Adam adam(w.parameters());
  const LrSchedule schedule{pc.learning_rate, std::max<std::size_t>(1, pc.steps / 20), pc.steps};
  Rng rng(derive_seed(pc.seed, {0x707265}));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < pc.steps; ++step) {
    ImageRefs images;
    std::vector<std::vector<int>> captions;
    for (std::size_t b = 0; b < pc.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const ImageTextPair& pair = data[order[cursor++]];
      images.push_back(&pair.patches);
      captions.push_back(pair.caption);
    }
    adam.zero_grad();
    const Var img = encode_images(w, images).embeddings;
    const Var txt = encode_token_batch(w, captions);
    const Var loss = contrastive_loss(img, txt, w.log_temperature.var());
    result.loss_trace.push_back(loss.value().item());
    backward(loss);
    adam.step(schedule.at(step + 1));
    // Keep tau inside CLIP's clamp range.
    double& log_tau = w.log_temperature.mutable_value()[0];
    log_tau = std::clamp(log_tau, std::log(0.01), std::log(1.0));
  }

  const auto& trace = result.loss_trace;
  const std::size_t tail = std::max<std::size_t>(1, std::min<std::size_t>(10, trace.size() / 4));
  const double initial = trace.front();
  const double late = std::accumulate(trace.end() - std::ptrdiff_t(tail), trace.end(), 0.0) / double(tail);
  if (!(late <= 0.5 * initial)) {
    std::ostringstream msg;
    msg << "pretraining reduced the contrastive loss from " << initial << " only to " << late
        << " (needs <= 50%); trace:";
    for (std::size_t i = 0; i < trace.size(); i += std::max<std::size_t>(1, trace.size() / 20)) msg << ' ' << trace[i];
    throw TrainingFailure(msg.str());
  }
  w.freeze();
  return result;
}

}  // namespace mvlpt
