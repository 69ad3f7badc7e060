// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "json.hpp"
#include "mvlpt/errors.hpp"
#include "mvlpt/ops.hpp"
#include "mvlpt/random.hpp"

namespace mvlpt {

void SuiteConfig::validate() const {
  if (n_tasks < 2) throw ConfigError("suite needs at least 2 tasks, got " + std::to_string(n_tasks));
  if (classes_per_task < 2) throw ConfigError("tasks need at least 2 classes");
  if (!(visual_sim >= 0.0 && visual_sim <= 1.0)) throw ConfigError("visual_sim must lie in [0, 1]");
  if (!(label_sim >= 0.0 && label_sim <= 1.0)) throw ConfigError("label_sim must lie in [0, 1]");
  if (!(noise_scale >= 0.0)) throw ConfigError("noise_scale must be non-negative");
  if (anchor_groups == 0 || anchor_groups > n_tasks) throw ConfigError("anchor_groups must lie in [1, n_tasks]");
  if (name_length == 0 || patch_count == 0 || patch_dim == 0) throw ConfigError("suite sizes must be positive");
  if (vocab_size <= std::size_t(kReservedTokens) + 1) throw ConfigError("vocabulary too small for class names");
  const double name_space = std::pow(double(vocab_size - kReservedTokens), double(name_length));
  if (double(classes_per_task) > name_space) throw ConfigError("not enough distinct class names");
}

std::vector<std::vector<int>> TaskSpec::class_names() const {
  std::vector<std::vector<int>> out;
  out.reserve(classes.size());
  for (const auto& c : classes) out.push_back(c.name);
  return out;
}

namespace {

// Rescales to unit RMS so prototypes have comparable energy whatever the
// blend weight.
void normalize_rms(Array& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  const double rms = std::sqrt(s / double(a.size()));
  if (rms > 0.0)
    for (double& v : a.data()) v /= rms;
}

int random_token(const SuiteConfig& c, Rng& rng) {
  std::uniform_int_distribution<int> dist(kReservedTokens, int(c.vocab_size) - 1);
  return dist(rng);
}

}  // namespace

TaskSuite generate_suite(const SuiteConfig& config) {
  config.validate();
  TaskSuite suite;
  suite.config = config;
  const Shape proto_shape{config.patch_count, config.patch_dim};

  for (std::size_t t = 0; t < config.n_tasks; ++t) {
    Rng rng(derive_seed(config.seed, {0x7461736b, t}));
    TaskSpec task;
    task.task_id = t;
    task.noise_scale = config.noise_scale;
    task.seed = derive_seed(config.seed, {0x74657374, t});
    const bool is_anchor = t < config.anchor_groups;
    const TaskSpec* anchor = is_anchor ? nullptr : &suite.tasks[t % config.anchor_groups];
    const TaskSpec* namesake = t == 0 ? nullptr : &suite.tasks[0];
    std::bernoulli_distribution copy_token(config.label_sim);

    std::set<std::vector<int>> used;
    for (std::size_t c = 0; c < config.classes_per_task; ++c) {
      ClassSpec cls;
      Array fresh = normal_array(proto_shape, 1.0, rng);
      if (anchor == nullptr) {
        cls.prototype = std::move(fresh);
      } else {
        cls.prototype = Array(proto_shape);
        const auto a = anchor->classes[c].prototype.data();
        const auto f = fresh.data();
        auto p = cls.prototype.data();
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = config.visual_sim * a[i] + (1.0 - config.visual_sim) * f[i];
      }
      normalize_rms(cls.prototype);

      // Copy decisions are drawn up front so the stream does not depend on
      // how many retries uniqueness needs.
      std::vector<bool> copies(config.name_length);
      for (std::size_t k = 0; k < config.name_length; ++k) copies[k] = namesake != nullptr && copy_token(rng);
      std::vector<int> name(config.name_length);
      for (std::size_t k = 0; k < config.name_length; ++k)
        name[k] = copies[k] ? namesake->classes[c].name[k] : random_token(config, rng);
      while (used.count(name) != 0) {
        for (std::size_t k = 0; k < config.name_length; ++k)
          if (!copies[k]) name[k] = random_token(config, rng);
        if (used.count(name) != 0) name[rng() % config.name_length] = random_token(config, rng);
      }
      used.insert(name);
      cls.name = std::move(name);
      task.classes.push_back(std::move(cls));
    }
    suite.tasks.push_back(std::move(task));
  }

  const std::size_t T = config.n_tasks;
  suite.visual_similarity = Array({T, T});
  suite.label_similarity = Array({T, T});
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      if (i == j) {
        suite.visual_similarity.at(i, j) = 1.0;
        suite.label_similarity.at(i, j) = 1.0;
        continue;
      }
      double vis = 0.0;
      double lab = 0.0;
      for (std::size_t c = 0; c < config.classes_per_task; ++c) {
        const auto& a = suite.tasks[i].classes[c];
        const auto& b = suite.tasks[j].classes[c];
        vis += std::max(0.0, cosine_sim(a.prototype, b.prototype));
        std::size_t same = 0;
        for (std::size_t k = 0; k < config.name_length; ++k) same += a.name[k] == b.name[k] ? 1 : 0;
        lab += double(same) / double(config.name_length);
      }
      suite.visual_similarity.at(i, j) = vis / double(config.classes_per_task);
      suite.label_similarity.at(i, j) = lab / double(config.classes_per_task);
    }
  }
  return suite;
}

TaskSuite generate_suite(std::uint64_t seed, std::size_t n_tasks, std::size_t classes_per_task, double visual_sim,
                         double label_sim) {
  SuiteConfig c;
  c.seed = seed;
  c.n_tasks = n_tasks;
  c.classes_per_task = classes_per_task;
  c.visual_sim = visual_sim;
  c.label_sim = label_sim;
  return generate_suite(c);
}

namespace {

Array draw_image(const ClassSpec& cls, double noise, Rng& rng) {
  Array img = cls.prototype;
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : img.data()) v += noise * dist(rng);
  return img;
}

}  // namespace

std::size_t validation_count(std::size_t drawn) {
  if (drawn < 2) return 0;
  return std::max<std::size_t>(1, std::size_t(std::ceil(kValFraction * double(drawn) - 1e-9)));
}

FewShotSplit sample_shots(const TaskSpec& task, std::size_t shots, std::uint64_t seed, std::size_t test_per_class) {
  if (shots == 0) throw ContractError("sample_shots: k = 0 has no training data; use the zero-shot path");
  FewShotSplit split;
  split.task_id = task.task_id;
  split.shots = shots;
  split.seed = seed;

  Rng draw_rng(derive_seed(task.seed, {0x73686f74, shots, seed}));
  std::vector<Example> drawn;
  for (std::size_t c = 0; c < task.num_classes(); ++c)
    for (std::size_t k = 0; k < shots; ++k)
      drawn.push_back({draw_image(task.classes[c], task.noise_scale, draw_rng), c, 0});
  std::shuffle(drawn.begin(), drawn.end(), draw_rng);
  for (std::size_t i = 0; i < drawn.size(); ++i) drawn[i].index = i;
  const std::size_t n_val = validation_count(drawn.size());
  split.val.assign(drawn.begin(), drawn.begin() + std::ptrdiff_t(n_val));
  split.train.assign(drawn.begin() + std::ptrdiff_t(n_val), drawn.end());

  Rng test_rng(derive_seed(task.seed, {0x65766c}));
  std::size_t next = drawn.size();
  for (std::size_t c = 0; c < task.num_classes(); ++c)
    for (std::size_t k = 0; k < test_per_class; ++k)
      split.test.push_back({draw_image(task.classes[c], task.noise_scale, test_rng), c, next++});
  return split;
}

std::vector<ImageTextPair> paired_pretraining_set(const TaskSuite& suite, std::size_t size, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> keys;  // (task, class)
  for (const auto& task : suite.tasks)
    for (std::size_t c = 0; c < task.num_classes(); ++c) keys.emplace_back(task.task_id, c);
  Rng rng(derive_seed(seed, {0x70616972}));
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<ImageTextPair> pairs;
  pairs.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t key = order[i % order.size()];
    const auto [t, c] = keys[key];
    const ClassSpec& cls = suite.tasks[t].classes[c];
    pairs.push_back({draw_image(cls, suite.tasks[t].noise_scale, rng), template_caption(cls.name), key});
  }
  std::shuffle(pairs.begin(), pairs.end(), rng);
  return pairs;
}

std::string suite_manifest(const TaskSuite& suite) {
  const SuiteConfig& c = suite.config;
  nlohmann::ordered_json j;
  j["kind"] = "suite";
  j["version"] = 1;
  j["seed"] = c.seed;
  j["n_tasks"] = c.n_tasks;
  j["classes_per_task"] = c.classes_per_task;
  j["visual_sim"] = c.visual_sim;
  j["label_sim"] = c.label_sim;
  j["noise_scale"] = c.noise_scale;
  j["anchor_groups"] = c.anchor_groups;
  j["name_length"] = c.name_length;
  j["patch_count"] = c.patch_count;
  j["patch_dim"] = c.patch_dim;
  j["vocab_size"] = c.vocab_size;
  auto& tasks = j["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : suite.tasks) {
    nlohmann::ordered_json tj;
    tj["task_id"] = t.task_id;
    tj["seed"] = t.seed;
    tj["class_names"] = t.class_names();
    tasks.push_back(std::move(tj));
  }
  return j.dump(2) + "\n";
}

TaskSuite suite_from_manifest(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("kind") != "suite" || j.at("version") != 1) throw FormatError("not a version-1 suite manifest");
  SuiteConfig c;
  c.seed = j.at("seed");
  c.n_tasks = j.at("n_tasks");
  c.classes_per_task = j.at("classes_per_task");
  c.visual_sim = j.at("visual_sim");
  c.label_sim = j.at("label_sim");
  c.noise_scale = j.at("noise_scale");
  c.anchor_groups = j.at("anchor_groups");
  c.name_length = j.at("name_length");
  c.patch_count = j.at("patch_count");
  c.patch_dim = j.at("patch_dim");
  c.vocab_size = j.at("vocab_size");
  TaskSuite suite = generate_suite(c);
  for (const auto& tj : j.at("tasks")) {
    const std::size_t id = tj.at("task_id");
    if (id >= suite.tasks.size() || suite.tasks[id].seed != tj.at("seed").get<std::uint64_t>() ||
        suite.tasks[id].class_names() != tj.at("class_names").get<std::vector<std::vector<int>>>()) {
      throw FormatError("suite manifest does not reproduce task " + std::to_string(id));
    }
  }
  return suite;
}

std::string split_manifest(const FewShotSplit& split) {
  nlohmann::ordered_json j;
  j["kind"] = "split";
  j["version"] = 1;
  j["task_id"] = split.task_id;
  j["shots"] = split.shots;
  j["seed"] = split.seed;
  j["train"] = split.train.size();
  j["val"] = split.val.size();
  j["test"] = split.test.size();
  return j.dump(2) + "\n";
}

FewShotSplit split_from_manifest(const TaskSuite& suite, const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("kind") != "split" || j.at("version") != 1) throw FormatError("not a version-1 split manifest");
  const std::size_t id = j.at("task_id");
  if (id >= suite.tasks.size()) throw FormatError("split manifest names unknown task " + std::to_string(id));
  const std::size_t test_per_class = j.at("test").get<std::size_t>() / suite.tasks[id].num_classes();
  FewShotSplit split = sample_shots(suite.tasks[id], j.at("shots"), j.at("seed"), test_per_class);
  if (split.train.size() != j.at("train").get<std::size_t>() || split.val.size() != j.at("val").get<std::size_t>()) {
    throw FormatError("split manifest sizes do not match regenerated split");
  }
  return split;
}

}  // namespace mvlpt
