// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mvlpt/errors.hpp"

namespace mvlpt {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train config: epochs must be positive");
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (warmup_epochs >= epochs) throw ConfigError("train config: warmup_epochs must be below epochs");
  if (eval_every == 0) throw ConfigError("train config: eval_every must be positive");
}

std::size_t steps_per_epoch(const std::vector<FewShotSplit>& group, std::size_t batch_size) {
  std::size_t total = 0;
  for (const auto& s : group) total += s.train.size();
  return std::max<std::size_t>(1, (total + batch_size - 1) / batch_size);
}

LrSchedule make_schedule(const TrainConfig& config, std::size_t spe) {
  return LrSchedule{config.learning_rate, config.warmup_epochs * spe, config.epochs * spe};
}

double lr_at(std::size_t step, const TrainConfig& config, std::size_t spe) {
  return make_schedule(config, spe).at(step);
}

const std::vector<Example>& examples(const FewShotSplit& split, SplitRole role) {
  switch (role) {
    case SplitRole::train: return split.train;
    case SplitRole::val: return split.val;
    case SplitRole::test: return split.test;
  }
  return split.test;
}

namespace {

constexpr std::size_t kEvalChunk = 50;

}  // namespace

const Array& FeatureCache::image_embeddings(const FewShotSplit& split, SplitRole role) {
  const auto key = std::make_tuple(split.task_id, split.shots, split.seed, int(role));
  auto it = images_.find(key);
  if (it != images_.end()) return it->second;
  NoGradGuard no_grad;
  const auto& ex = examples(split, role);
  const std::size_t d = weights_->config.embed_dim;
  Array out({std::max<std::size_t>(1, ex.size()), d});
  for (std::size_t start = 0; start < ex.size(); start += kEvalChunk) {
    ImageRefs refs;
    for (std::size_t i = start; i < std::min(ex.size(), start + kEvalChunk); ++i) refs.push_back(&ex[i].patches);
    const Array e = encode_images(*weights_, refs).embeddings.value();
    std::copy(e.data().begin(), e.data().end(), out.data().begin() + std::ptrdiff_t(start * d));
  }
  return images_.emplace(key, std::move(out)).first->second;
}

const Array& FeatureCache::class_embeddings(const TaskSpec& task) {
  auto it = classes_.find(task.task_id);
  if (it != classes_.end()) return it->second;
  return classes_.emplace(task.task_id, build_zero_shot_classifier(*weights_, task.class_names()).weights)
      .first->second;
}

namespace {

Var class_embeddings(const PromptRows& rows, PromptMode mode, const TaskSpec& task, FeatureCache& cache) {
  if (mode == PromptMode::visual) return Var::constant(cache.class_embeddings(task));
  const EncoderWeights& w = cache.weights();
  const auto names = task.class_names();
  check_distinct_class_names(names);
  const bool uniform = std::all_of(names.begin(), names.end(),
                                   [&names](const auto& n) { return n.size() == names.front().size(); });
  if (uniform) {
    std::vector<Var> seqs;
    seqs.reserve(names.size());
    for (const auto& name : names) seqs.push_back(build_text_input(rows.text, name, w));
    return encode_text_embedded(w, concat_rows(seqs), seqs.front().rows());
  }
  std::vector<Var> embs;
  for (const auto& name : names) {
    const Var seq = build_text_input(rows.text, name, w);
    embs.push_back(encode_text_embedded(w, seq, seq.rows()));
  }
  return concat_rows(embs);
}

Var image_embeddings(const PromptRows& rows, PromptMode mode, const ImageRefs& images, FeatureCache& cache) {
  return encode_images(cache.weights(), images, mode == PromptMode::text ? nullptr : &rows.visual).embeddings;
}

Var logits(const Var& images, const Var& classes, double temperature) {
  return scale(matmul_nt(images, classes), 1.0 / temperature);
}

Var batch_loss(const PromptRows& rows, PromptMode mode, const TaskSpec& task, const Var& images,
               std::span<const std::size_t> labels, FeatureCache& cache) {
  const Var classes = class_embeddings(rows, mode, task, cache);
  return cross_entropy(logits(images, classes, cache.weights().temperature()), labels);
}

}  // namespace

Var prompt_batch_loss(const PromptState& prompt, const TaskSpec& task, const ImageRefs& images,
                      std::span<const std::size_t> labels, FeatureCache& cache) {
  const PromptRows rows = realize(prompt, cache.weights().config.vision_layers);
  return batch_loss(rows, prompt.mode, task, image_embeddings(rows, prompt.mode, images, cache), labels, cache);
}

SplitScore score(const PromptState& prompt, const TaskSpec& task, const FewShotSplit& split, SplitRole role,
                 FeatureCache& cache) {
  const auto& ex = examples(split, role);
  if (ex.empty()) throw ContractError("evaluate: empty split for task " + std::to_string(task.task_id));
  if (split.task_id != task.task_id) throw ContractError("evaluate: split and task disagree on task id");
  NoGradGuard no_grad;
  const EncoderWeights& w = cache.weights();
  const PromptRows rows = realize(prompt, w.config.vision_layers);
  const Var classes = class_embeddings(rows, prompt.mode, task, cache);
  const double tau = w.temperature();

  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t start = 0; start < ex.size(); start += kEvalChunk) {
    const std::size_t end = std::min(ex.size(), start + kEvalChunk);
    Var imgs;
    if (prompt.mode == PromptMode::text) {
      const Array& all = cache.image_embeddings(split, role);
      std::vector<std::size_t> idx(end - start);
      std::iota(idx.begin(), idx.end(), start);
      imgs = select_rows(Var::constant(all), idx);
    } else {
      ImageRefs refs;
      for (std::size_t i = start; i < end; ++i) refs.push_back(&ex[i].patches);
      imgs = image_embeddings(rows, prompt.mode, refs, cache);
    }
    const Var z = logits(imgs, classes, tau);
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) labels.push_back(ex[i].label);
    loss += cross_entropy(z, labels).value().item() * double(end - start);
    for (std::size_t i = start; i < end; ++i) {
      auto row = z.value().row(i - start);
      const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == ex[i].label ? 1 : 0;
    }
  }
  return {double(correct) / double(ex.size()), loss / double(ex.size())};
}

double evaluate(const PromptState& prompt, const TaskSpec& task, const FewShotSplit& split, FeatureCache& cache,
                SplitRole role) {
  return score(prompt, task, split, role, cache).accuracy;
}

double zero_shot_accuracy(const TaskSpec& task, const FewShotSplit& split, SplitRole role, FeatureCache& cache) {
  const auto& ex = examples(split, role);
  if (ex.empty()) throw ContractError("zero-shot evaluation on an empty split");
  const Array& classes = cache.class_embeddings(task);
  const Array& images = cache.image_embeddings(split, role);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ex.size(); ++i)
    correct += argmax_similarity(images.row(i), classes) == ex[i].label ? 1 : 0;
  return double(correct) / double(ex.size());
}

double RunResult::mean_test_accuracy() const {
  double s = 0.0;
  for (const auto& t : tasks) s += t.test_accuracy;
  return tasks.empty() ? 0.0 : s / double(tasks.size());
}

double RunResult::mean_val_accuracy() const {
  double s = 0.0;
  for (const auto& t : tasks) s += t.val_accuracy;
  return tasks.empty() ? 0.0 : s / double(tasks.size());
}

const TaskResult& RunResult::task(std::size_t task_id) const {
  for (const auto& t : tasks)
    if (t.task_id == task_id) return t;
  throw ContractError("run has no result for task " + std::to_string(task_id));
}

namespace {

const TaskSpec& lookup(const TaskSuite& suite, std::size_t task_id) {
  if (task_id >= suite.tasks.size()) throw ContractError("unknown task id " + std::to_string(task_id));
  return suite.tasks[task_id];
}

// Mean training loss over every train example in the group.
double full_train_loss(const PromptState& prompt, const TaskSuite& suite, const std::vector<FewShotSplit>& group,
                       FeatureCache& cache) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& split : group) {
    const SplitScore s = score(prompt, lookup(suite, split.task_id), split, SplitRole::train, cache);
    total += s.loss * double(split.train.size());
    n += split.train.size();
  }
  return total / double(n);
}

CheckpointRecord validate_group(const PromptState& prompt, std::size_t epoch, const TaskSuite& suite,
                                const std::vector<FewShotSplit>& group, FeatureCache& cache) {
  CheckpointRecord rec;
  rec.epoch = epoch;
  for (const auto& split : group) {
    const SplitScore s = score(prompt, lookup(suite, split.task_id), split, SplitRole::val, cache);
    rec.val_accuracy.push_back(s.accuracy);
    rec.mean_val_accuracy += s.accuracy;
    rec.mean_val_loss += s.loss;
  }
  rec.mean_val_accuracy /= double(group.size());
  rec.mean_val_loss /= double(group.size());
  return rec;
}

bool better(const CheckpointRecord& a, const CheckpointRecord& b) {
  if (a.mean_val_accuracy != b.mean_val_accuracy) return a.mean_val_accuracy > b.mean_val_accuracy;
  return a.mean_val_loss < b.mean_val_loss;
}

RunResult tune(const TaskSuite& suite, const std::vector<FewShotSplit>& group, PromptState state,
               const TrainConfig& config, FeatureCache& cache) {
  config.validate();
  if (group.empty()) throw ContractError("prompt tuning needs at least one task");
  for (const auto& split : group) {
    lookup(suite, split.task_id);
    if (split.train.empty()) {
      throw ContractError("task " + std::to_string(split.task_id) + " has no training example after the split");
    }
    if (split.val.empty()) throw ContractError("task " + std::to_string(split.task_id) + " has no validation example");
  }

  const EncoderWeights& w = cache.weights();
  const std::size_t spe = steps_per_epoch(group, config.batch_size);
  const LrSchedule schedule = make_schedule(config, spe);

  std::vector<std::uint64_t> tags{0x74756e65, std::uint64_t(state.mode)};
  for (const auto& s : group) tags.push_back(s.task_id);
  std::uint64_t stream = config.seed;
  for (auto t : tags) stream = derive_seed(stream, {t});
  Rng rng(stream);

  std::vector<double> mix(group.size(), 1.0);
  if (config.mixing == TaskMixing::proportional)
    for (std::size_t i = 0; i < group.size(); ++i) mix[i] = double(group[i].train.size());
  std::discrete_distribution<std::size_t> pick_task(mix.begin(), mix.end());

  RunResult result;
  result.initial_train_loss = full_train_loss(state, suite, group, cache);
  result.history.push_back(validate_group(state, 0, suite, group, cache));
  result.prompt = state;
  CheckpointRecord best = result.history.back();

  std::vector<Parameter*> params = state.parameters();
  Adam adam(params, config.adam);
  std::vector<std::size_t> order;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t step = (epoch - 1) * spe + s;
      const FewShotSplit& split = group[group.size() == 1 ? 0 : pick_task(rng)];
      const TaskSpec& task = lookup(suite, split.task_id);
      const std::size_t b = std::min(config.batch_size, split.train.size());
      order.resize(split.train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(b);

      adam.zero_grad();
      const PromptRows rows = realize(state, w.config.vision_layers);
      Var imgs;
      if (state.mode == PromptMode::text) {
        imgs = select_rows(Var::constant(cache.image_embeddings(split, SplitRole::train)), order);
      } else {
        ImageRefs refs;
        for (auto i : order) refs.push_back(&split.train[i].patches);
        imgs = image_embeddings(rows, state.mode, refs, cache);
      }
      std::vector<std::size_t> labels;
      for (auto i : order) labels.push_back(split.train[i].label);
      const Var loss = batch_loss(rows, state.mode, task, imgs, labels, cache);
      backward(loss);
      adam.step(schedule.at(step));
      ++result.steps;
    }
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      result.history.push_back(validate_group(state, epoch, suite, group, cache));
      if (better(result.history.back(), best)) {
        best = result.history.back();
        result.prompt = state;
      }
    }
  }
  adam.zero_grad();

  result.final_train_loss = full_train_loss(state, suite, group, cache);
  if (config.require_loss_decrease && !(result.final_train_loss < result.initial_train_loss)) {
    std::ostringstream msg;
    msg << "prompt tuning (" << to_string(state.mode) << ", " << group.size()
        << " task(s)) did not reduce the training loss: " << result.initial_train_loss << " -> "
        << result.final_train_loss;
    throw TrainingFailure(msg.str());
  }

  result.best_epoch = best.epoch;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const FewShotSplit& split = group[i];
    TaskResult tr;
    tr.task_id = split.task_id;
    tr.val_accuracy = best.val_accuracy[i];
    tr.test_accuracy = evaluate(result.prompt, lookup(suite, split.task_id), split, cache, SplitRole::test);
    result.tasks.push_back(tr);
  }
  return result;
}

std::uint64_t group_seed(const TrainConfig& config, const std::vector<FewShotSplit>& group) {
  std::uint64_t s = derive_seed(config.seed, {0x696e6974});
  for (const auto& split : group) s = derive_seed(s, {split.task_id});
  return s;
}

}  // namespace

RunResult multitask_init(const TaskSuite& suite, const std::vector<FewShotSplit>& sources, PromptMode mode,
                         const PromptConfig& prompt_config, const TrainConfig& config, FeatureCache& cache) {
  if (sources.empty()) throw ContractError("multitask_init: empty source task list");
  PromptState init =
      PromptState::initialize(mode, cache.weights().config, prompt_config, group_seed(config, sources));
  return tune(suite, sources, std::move(init), config, cache);
}

RunResult adapt(const TaskSuite& suite, const std::vector<FewShotSplit>& group, const PromptState* init,
                PromptMode mode, const PromptConfig& prompt_config, const TrainConfig& config, FeatureCache& cache) {
  if (group.empty()) throw ContractError("adapt: empty task group");
  if (init != nullptr && init->mode != mode) {
    throw ContractError("adapt: initial prompt is " + std::string(to_string(init->mode)) + ", requested " +
                        std::string(to_string(mode)));
  }
  PromptState start = init != nullptr
                          ? *init
                          : PromptState::initialize(mode, cache.weights().config, prompt_config, group_seed(config, group));
  return tune(suite, group, std::move(start), config, cache);
}

double sample_stddev(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / double(values.size() - 1));
}

EvalReport make_eval_report(const std::vector<RunResult>& runs) {
  if (runs.empty()) throw ContractError("make_eval_report: no runs");
  EvalReport report;
  report.seeds = runs.size();
  for (const auto& t : runs.front().tasks) report.task_ids.push_back(t.task_id);
  std::vector<double> overall;
  for (const auto& run : runs) overall.push_back(run.mean_test_accuracy());
  for (std::size_t id : report.task_ids) {
    std::vector<double> accs;
    for (const auto& run : runs) accs.push_back(run.task(id).test_accuracy);
    report.mean.push_back(std::accumulate(accs.begin(), accs.end(), 0.0) / double(accs.size()));
    report.stddev.push_back(sample_stddev(accs));
  }
  report.overall_mean = std::accumulate(overall.begin(), overall.end(), 0.0) / double(overall.size());
  report.overall_stddev = sample_stddev(overall);
  return report;
}

}  // namespace mvlpt
