// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "mvlpt/errors.hpp"
#include "mvlpt/tensor_io.hpp"

namespace mvlpt {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigError("'" + std::string(s) + "' is not a valid number");
  return v;
}

bool parse_bool(std::string_view s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("'" + std::string(s) + "' is not true or false");
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

struct Key {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <typename T>
Key size_key(T ExperimentConfig::*group, std::size_t T::*field) {
  return {[=](const ExperimentConfig& c) { return std::to_string(c.*group.*field); },
          [=](ExperimentConfig& c, std::string_view v) { c.*group.*field = parse_number<std::size_t>(v); }};
}

template <typename T>
Key u64_key(T ExperimentConfig::*group, std::uint64_t T::*field) {
  return {[=](const ExperimentConfig& c) { return std::to_string(c.*group.*field); },
          [=](ExperimentConfig& c, std::string_view v) { c.*group.*field = parse_number<std::uint64_t>(v); }};
}

template <typename T>
Key double_key(T ExperimentConfig::*group, double T::*field) {
  return {[=](const ExperimentConfig& c) { return format_double(c.*group.*field); },
          [=](ExperimentConfig& c, std::string_view v) { c.*group.*field = parse_number<double>(v); }};
}

template <typename T>
Key top_key(T ExperimentConfig::*field) {
  return {[=](const ExperimentConfig& c) {
            if constexpr (std::is_same_v<T, bool>) return std::string(c.*field ? "true" : "false");
            else return std::to_string(c.*field);
          },
          [=](ExperimentConfig& c, std::string_view v) {
            if constexpr (std::is_same_v<T, bool>) c.*field = parse_bool(v);
            else c.*field = parse_number<T>(v);
          }};
}

template <typename T>
Key list_key(std::vector<T> ExperimentConfig::*field) {
  return {[=](const ExperimentConfig& c) {
            return join<T>(c.*field, [](const T& x) { return std::to_string(x); });
          },
          [=](ExperimentConfig& c, std::string_view v) {
            std::vector<T> out;
            for (auto item : split_list(v)) out.push_back(parse_number<T>(item));
            c.*field = std::move(out);
          }};
}

const std::map<std::string, Key>& keys() {
  using C = ExperimentConfig;
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> k;
    k["experiment.id"] = {[](const C& c) { return c.experiment_id; },
                          [](C& c, std::string_view v) { c.experiment_id = std::string(v); }};
    k["experiment.modes"] = {
        [](const C& c) {
          return join<PromptMode>(c.modes, [](const PromptMode& m) { return std::string(to_string(m)); });
        },
        [](C& c, std::string_view v) {
          std::vector<PromptMode> out;
          for (auto item : split_list(v)) out.push_back(parse_prompt_mode(item));
          c.modes = std::move(out);
        }};
    k["experiment.sources"] = list_key(&C::sources);
    k["experiment.targets"] = list_key(&C::targets);
    k["experiment.shots"] = top_key(&C::shots);
    k["experiment.seeds"] = list_key(&C::seeds);
    k["experiment.transfer_shots"] = top_key(&C::transfer_shots);
    k["experiment.transfer_seed"] = top_key(&C::transfer_seed);
    k["experiment.group_sizes"] = list_key(&C::group_sizes);
    k["experiment.random_baseline"] = top_key(&C::random_baseline);

    k["suite.seed"] = u64_key(&C::suite, &SuiteConfig::seed);
    k["suite.tasks"] = size_key(&C::suite, &SuiteConfig::n_tasks);
    k["suite.classes"] = size_key(&C::suite, &SuiteConfig::classes_per_task);
    k["suite.visual_sim"] = double_key(&C::suite, &SuiteConfig::visual_sim);
    k["suite.label_sim"] = double_key(&C::suite, &SuiteConfig::label_sim);
    k["suite.noise"] = double_key(&C::suite, &SuiteConfig::noise_scale);
    k["suite.anchor_groups"] = size_key(&C::suite, &SuiteConfig::anchor_groups);
    k["suite.name_length"] = size_key(&C::suite, &SuiteConfig::name_length);
    k["suite.patch_count"] = size_key(&C::suite, &SuiteConfig::patch_count);
    k["suite.patch_dim"] = size_key(&C::suite, &SuiteConfig::patch_dim);
    k["suite.vocab"] = size_key(&C::suite, &SuiteConfig::vocab_size);

    k["encoder.embed_dim"] = size_key(&C::encoder, &EncoderConfig::embed_dim);
    k["encoder.text_layers"] = size_key(&C::encoder, &EncoderConfig::text_layers);
    k["encoder.vision_layers"] = size_key(&C::encoder, &EncoderConfig::vision_layers);
    k["encoder.heads"] = size_key(&C::encoder, &EncoderConfig::heads);
    k["encoder.max_text_len"] = size_key(&C::encoder, &EncoderConfig::max_text_len);
    k["encoder.ffn_multiplier"] = size_key(&C::encoder, &EncoderConfig::ffn_multiplier);

    k["pretrain.steps"] = size_key(&C::pretrain, &PretrainConfig::steps);
    k["pretrain.batch"] = size_key(&C::pretrain, &PretrainConfig::batch_size);
    k["pretrain.lr"] = double_key(&C::pretrain, &PretrainConfig::learning_rate);
    k["pretrain.seed"] = u64_key(&C::pretrain, &PretrainConfig::seed);
    k["pretrain.pairs"] = top_key(&C::pretrain_pairs);

    k["prompt.text_context"] = size_key(&C::prompt, &PromptConfig::text_context);
    k["prompt.visual_context"] = size_key(&C::prompt, &PromptConfig::visual_context);
    k["prompt.unified_text_context"] = size_key(&C::prompt, &PromptConfig::unified_text_context);
    k["prompt.unified_visual_context"] = size_key(&C::prompt, &PromptConfig::unified_visual_context);
    k["prompt.unified_hidden"] = size_key(&C::prompt, &PromptConfig::unified_hidden);
    k["prompt.unified_heads"] = size_key(&C::prompt, &PromptConfig::unified_heads);
    k["prompt.unified_ffn_hidden"] = size_key(&C::prompt, &PromptConfig::unified_ffn_hidden);
    k["prompt.init_std"] = double_key(&C::prompt, &PromptConfig::init_std);

    k["train.epochs"] = size_key(&C::train, &TrainConfig::epochs);
    k["train.batch"] = size_key(&C::train, &TrainConfig::batch_size);
    k["train.lr"] = double_key(&C::train, &TrainConfig::learning_rate);
    k["train.warmup_epochs"] = size_key(&C::train, &TrainConfig::warmup_epochs);
    k["train.eval_every"] = size_key(&C::train, &TrainConfig::eval_every);
    k["train.mixing"] = {[](const C& c) {
                           return std::string(c.train.mixing == TaskMixing::uniform ? "uniform" : "proportional");
                         },
                         [](C& c, std::string_view v) {
                           if (v == "uniform") c.train.mixing = TaskMixing::uniform;
                           else if (v == "proportional") c.train.mixing = TaskMixing::proportional;
                           else throw ConfigError("train.mixing must be uniform or proportional");
                         }};
    return k;
  }();
  return table;
}

// Key prefixes each stage depends on.
const std::map<std::string_view, std::vector<std::string_view>>& stage_inputs() {
  static const std::map<std::string_view, std::vector<std::string_view>> table{
      {"suite", {"suite."}},
      {"pretrain", {"suite.", "encoder.", "pretrain."}},
      {"init", {"suite.", "encoder.", "pretrain.", "prompt.", "train.", "experiment.sources", "experiment.shots"}},
      {"transfer",
       {"suite.", "encoder.", "pretrain.", "prompt.", "train.", "experiment.transfer_shots",
        "experiment.transfer_seed"}},
      {"adapt",
       {"suite.", "encoder.", "pretrain.", "prompt.", "train.", "experiment.sources", "experiment.shots",
        "experiment.transfer_shots", "experiment.transfer_seed"}},
  };
  return table;
}

bool starts_with_any(const std::string& key, const std::vector<std::string_view>& prefixes) {
  return std::any_of(prefixes.begin(), prefixes.end(),
                     [&key](std::string_view p) { return std::string_view(key).substr(0, p.size()) == p; });
}

}  // namespace

EncoderConfig ExperimentConfig::encoder_config() const {
  EncoderConfig e = encoder;
  e.vocab_size = suite.vocab_size;
  e.patch_count = suite.patch_count;
  e.patch_dim = suite.patch_dim;
  return e;
}

void ExperimentConfig::validate() const {
  if (experiment_id.empty() || experiment_id.find_first_of(",\n\r\"") != std::string::npos)
    throw ConfigError("experiment.id must be nonempty and free of commas, quotes and newlines");
  suite.validate();
  encoder_config().validate();
  prompt.validate();
  train.validate();
  if (pretrain.steps == 0 || pretrain.batch_size < 2) throw ConfigError("pretrain needs steps > 0 and batch >= 2");
  if (!(pretrain.learning_rate > 0.0)) throw ConfigError("pretrain.lr must be positive");
  if (pretrain_pairs < pretrain.batch_size) throw ConfigError("pretrain.pairs must be at least pretrain.batch");
  if (modes.empty()) throw ConfigError("experiment.modes is empty");
  if (sources.empty() || targets.empty()) throw ConfigError("experiment.sources and experiment.targets must be nonempty");
  if (seeds.empty()) throw ConfigError("experiment.seeds is empty");
  if (shots == 0 || transfer_shots == 0) throw ConfigError("shot counts must be positive");
  std::set<std::size_t> seen;
  for (auto t : sources) {
    if (t >= suite.n_tasks) throw ConfigError("source task " + std::to_string(t) + " out of range");
    if (!seen.insert(t).second) throw ConfigError("source task " + std::to_string(t) + " listed twice");
  }
  std::set<std::size_t> seen_targets;
  for (auto t : targets) {
    if (t >= suite.n_tasks) throw ConfigError("target task " + std::to_string(t) + " out of range");
    if (seen.count(t) != 0) throw ConfigError("task " + std::to_string(t) + " is both a source and a target");
    if (!seen_targets.insert(t).second) throw ConfigError("target task " + std::to_string(t) + " listed twice");
  }
  for (auto g : group_sizes)
    if (g < 2 || g > 3 || g > suite.n_tasks) throw ConfigError("experiment.group_sizes entries must be 2 or 3");
}

ExperimentConfig parse_config(std::string_view text, std::string_view origin) {
  ExperimentConfig config;
  std::set<std::string> given;
  bool has_schema = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = std::string(origin) + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!given.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
    if (key == "schema") {
      int schema = 0;
      try {
        schema = parse_number<int>(value);
      } catch (const ConfigError& e) {
        throw ConfigError(where + e.what());
      }
      if (schema != kConfigSchema) {
        throw ConfigError(where + "unsupported schema " + std::string(value) + " (expected " +
                          std::to_string(kConfigSchema) + ")");
      }
      has_schema = true;
      continue;
    }
    const auto it = keys().find(key);
    if (it == keys().end()) throw ConfigError(where + "unknown key '" + key + "'");
    try {
      it->second.set(config, value);
    } catch (const Error& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  if (!has_schema) throw ConfigError(std::string(origin) + ": missing 'schema' line");
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::string canonical_config(const ExperimentConfig& config) {
  std::string out = "schema = " + std::to_string(kConfigSchema) + "\n";
  for (const auto& [name, key] : keys()) out += name + " = " + key.get(config) + "\n";
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& config) { return fnv1a64(canonical_config(config)); }

std::uint64_t stage_hash(const ExperimentConfig& config, std::string_view stage) {
  const auto it = stage_inputs().find(stage);
  if (it == stage_inputs().end()) throw ContractError("unknown pipeline stage '" + std::string(stage) + "'");
  std::string text = "stage " + std::string(stage) + "\nschema = " + std::to_string(kConfigSchema) + "\n";
  for (const auto& [name, key] : keys())
    if (starts_with_any(name, it->second)) text += name + " = " + key.get(config) + "\n";
  return fnv1a64(text);
}

}  // namespace mvlpt
