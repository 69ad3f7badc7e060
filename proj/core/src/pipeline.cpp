// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "mvlpt/errors.hpp"

namespace mvlpt {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "+" : "") + std::to_string(ids[i]);
  return out;
}

std::string prefix(const std::string& spec) { return spec.substr(0, spec.find(':')); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = c.train;
  t.seed = seed;
  return t;
}

}  // namespace

Workspace::Workspace(ExperimentConfig config, fs::path out, std::string command, std::ostream& log)
    : config_(std::move(config)), out_(std::move(out)), command_(std::move(command)), log_(log) {
  config_.validate();
  fs::create_directories(out_);
}

Workspace::~Workspace() = default;

fs::path Workspace::stage_dir(std::string_view stage) const {
  return out_ / "cache" / (std::string(stage) + "-" + hex64(stage_hash(config_, stage)));
}

void Workspace::record(const std::string& stage, std::uint64_t key, std::vector<std::string> inputs,
                       std::vector<std::string> outputs, std::vector<std::uint64_t> seeds, double seconds,
                       bool hit) {
  if (hit) {
    ++hits_;
    log_ << "cache hit: " << stage;
  } else {
    ++misses_;
    log_ << "computed: " << stage << fmt::format(" ({:.1f}s)", seconds);
  }
  for (const auto& o : outputs) log_ << " -> " << o;
  log_ << "\n";
  RunManifest m;
  m.command = command_;
  m.stage = stage;
  m.stage_key = hex64(key);
  m.config_hash = hex64(config_hash(config_));
  m.inputs = std::move(inputs);
  m.outputs = std::move(outputs);
  m.seeds = std::move(seeds);
  m.seconds = seconds;
  m.cache_hit = hit;
  append_manifest(manifest_path(), m);
}

const TaskSuite& Workspace::suite() {
  if (suite_) return *suite_;
  const auto start = Clock::now();
  const fs::path file = stage_dir("suite") / "suite.json";
  const bool hit = fs::exists(file);
  if (hit) {
    suite_ = suite_from_manifest(read_text(file));
  } else {
    suite_ = generate_suite(config_.suite);
    write_text(file, suite_manifest(*suite_));
  }
  record("suite", stage_hash(config_, "suite"), {}, {file.string()}, {config_.suite.seed}, seconds_since(start), hit);
  return *suite_;
}

const EncoderWeights& Workspace::encoder() {
  if (encoder_) return *encoder_;
  const TaskSuite& s = suite();
  const auto start = Clock::now();
  const fs::path file = stage_dir("pretrain") / "encoder.tensors";
  const bool hit = fs::exists(file);
  if (hit) {
    encoder_ = EncoderWeights::from_bundle(load_bundle(file));
    if (!encoder_->frozen()) throw FormatError(file.string() + ": encoder checkpoint is not frozen");
  } else {
    const auto pairs = paired_pretraining_set(s, config_.pretrain_pairs, config_.pretrain.seed);
    PretrainResult r = pretrain(pairs, config_.encoder_config(), config_.pretrain);
    TensorBundle b = r.weights.to_bundle();
    b.meta.emplace_back("initial_loss", format_double(r.loss_trace.front()));
    b.meta.emplace_back("final_loss", format_double(r.loss_trace.back()));
    save_bundle(file, b);
    encoder_ = std::move(r.weights);
  }
  record("pretrain", stage_hash(config_, "pretrain"), {(stage_dir("suite") / "suite.json").string()},
         {file.string()}, {config_.pretrain.seed}, seconds_since(start), hit);
  features_ = std::make_unique<FeatureCache>(*encoder_);
  return *encoder_;
}

FeatureCache& Workspace::features() {
  encoder();
  return *features_;
}

const FewShotSplit& Workspace::split(std::size_t task, std::size_t shots, std::uint64_t seed) {
  const auto key = std::make_tuple(task, shots, seed);
  auto it = splits_.find(key);
  if (it != splits_.end()) return it->second;
  return splits_.emplace(key, sample_shots(suite().tasks.at(task), shots, seed)).first->second;
}

Workspace::CachedRun Workspace::cached_run(const std::string& stage, const fs::path& file, std::uint64_t seed,
                                           const std::function<RunResult()>& train) {
  const auto start = Clock::now();
  const bool hit = fs::exists(file);
  CachedRun run;
  if (hit) {
    const TensorBundle b = load_bundle(file);
    run.prompt = PromptState::from_bundle(b);
    std::istringstream ids(b.meta_value("tasks"));
    std::string id;
    while (std::getline(ids, id, '+')) {
      TaskResult t;
      t.task_id = std::stoull(id);
      t.val_accuracy = std::stod(b.meta_value("val." + id));
      t.test_accuracy = std::stod(b.meta_value("test." + id));
      run.tasks.push_back(t);
    }
  } else {
    RunResult r = train();
    TensorBundle b = r.prompt.to_bundle();
    std::vector<std::size_t> ids;
    for (const auto& t : r.tasks) ids.push_back(t.task_id);
    b.meta.emplace_back("tasks", join_ids(ids));
    b.meta.emplace_back("best_epoch", std::to_string(r.best_epoch));
    for (const auto& t : r.tasks) {
      b.meta.emplace_back("val." + std::to_string(t.task_id), format_double(t.val_accuracy));
      b.meta.emplace_back("test." + std::to_string(t.task_id), format_double(t.test_accuracy));
    }
    save_bundle(file, b);
    run.prompt = std::move(r.prompt);
    run.tasks = std::move(r.tasks);
  }
  record(stage, stage_hash(config_, stage),
         {(stage_dir("pretrain") / "encoder.tensors").string()}, {file.string()}, {seed}, seconds_since(start), hit);
  return run;
}

const PromptState& Workspace::init_prompt(PromptMode mode, std::uint64_t seed) {
  const auto key = std::make_pair(mode, seed);
  auto it = inits_.find(key);
  if (it != inits_.end()) return it->second;
  encoder();
  std::vector<FewShotSplit> sources;
  for (auto t : config_.sources) sources.push_back(split(t, config_.shots, seed));
  const fs::path file =
      stage_dir("init") / fmt::format("init-{}-seed{}.tensors", to_string(mode), seed);
  CachedRun run = cached_run("init", file, seed, [&] {
    return multitask_init(*suite_, sources, mode, config_.prompt, train_config(config_, seed), *features_);
  });
  return inits_.emplace(key, std::move(run.prompt)).first->second;
}

const TransferMatrix& Workspace::transfer(PromptMode mode) {
  auto it = matrices_.find(mode);
  if (it != matrices_.end()) return it->second;
  encoder();
  const std::size_t T = suite_->tasks.size();
  const std::uint64_t seed = config_.transfer_seed;
  std::vector<FewShotSplit> splits;
  std::vector<PromptState> prompts;
  for (std::size_t t = 0; t < T; ++t) {
    splits.push_back(split(t, config_.transfer_shots, seed));
    const fs::path file = stage_dir("transfer") / fmt::format("task{}-{}.tensors", t, to_string(mode));
    std::vector<FewShotSplit> group{splits.back()};
    prompts.push_back(cached_run("transfer", file, seed, [&] {
                        return mvlpt::adapt(*suite_, group, nullptr, mode, config_.prompt, train_config(config_, seed),
                                     *features_);
                      }).prompt);
  }

  const auto start = Clock::now();
  const fs::path file = stage_dir("transfer") / fmt::format("matrix-{}.tensors", to_string(mode));
  const bool hit = fs::exists(file);
  TransferMatrix m;
  Array val({T, T});
  if (hit) {
    const TensorBundle b = load_bundle(file);
    m = matrix_from_raw(mode, b.tensor("raw"));
    val = b.tensor("val");
  } else {
    m = build_matrix(prompts, *suite_, splits, mode, *features_);
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t t = 0; t < T; ++t)
        val.at(s, t) = evaluate(prompts[s], suite_->tasks[t], splits[t], *features_, SplitRole::val);
    TensorBundle b;
    b.kind = "transfer";
    b.meta.emplace_back("mode", std::string(to_string(mode)));
    b.tensors.emplace_back("raw", m.raw_scores);
    b.tensors.emplace_back("val", val);
    save_bundle(file, b);
  }
  record("transfer-matrix", stage_hash(config_, "transfer"), {}, {file.string()}, {seed}, seconds_since(start), hit);

  std::vector<LedgerRow> rows;
  for (std::size_t s = 0; s < T; ++s) {
    for (std::size_t t = 0; t < T; ++t) {
      rows.push_back({config_.experiment_id, std::string(to_string(mode)), "task:" + std::to_string(s), "transfer",
                      config_.transfer_shots, seed, t, val.at(s, t), m.raw_scores.at(s, t)});
    }
  }
  append_ledger(ledger_path(), rows);
  return matrices_.emplace(mode, std::move(m)).first->second;
}

TaskGrouping Workspace::grouping(PromptMode mode, GroupStrategy strategy, std::size_t group_size) {
  return select_groups(transfer(mode), strategy, group_size);
}

std::size_t Workspace::adapt(PromptMode mode, std::uint64_t seed) {
  encoder();
  const std::string mode_name(to_string(mode));
  const TrainConfig tc = train_config(config_, seed);
  const std::string multitask_spec = "multitask:" + join_ids(config_.sources);
  std::vector<LedgerRow> rows;
  auto add_rows = [&](const std::string& source, const std::string& spec, const std::vector<TaskResult>& tasks) {
    for (const auto& t : tasks)
      rows.push_back({config_.experiment_id, mode_name, source, spec, config_.shots, seed, t.task_id, t.val_accuracy,
                      t.test_accuracy});
  };
  auto run_group = [&](const std::string& source, const std::string& spec, const std::vector<std::size_t>& ids,
                       const PromptState* init) {
    std::vector<FewShotSplit> group;
    for (auto id : ids) group.push_back(split(id, config_.shots, seed));
    const fs::path file =
        stage_dir("adapt") / fmt::format("{}-seed{}-{}-{}-{}.tensors", mode_name, seed,
                                         source == "random" ? "random" : "multitask", prefix(spec), join_ids(ids));
    CachedRun run = cached_run("adapt", file, seed, [&] {
      return mvlpt::adapt(*suite_, group, init, mode, config_.prompt, tc, *features_);
    });
    add_rows(source, spec, run.tasks);
  };

  for (auto t : config_.targets) {
    const FewShotSplit& sp = split(t, config_.shots, seed);
    const TaskSpec& task = suite_->tasks[t];
    rows.push_back({config_.experiment_id, mode_name, "none", "zero-shot", config_.shots, seed, t,
                    zero_shot_accuracy(task, sp, SplitRole::val, *features_),
                    zero_shot_accuracy(task, sp, SplitRole::test, *features_)});
  }
  if (config_.random_baseline)
    for (auto t : config_.targets) run_group("random", "single", {t}, nullptr);
  const PromptState& init = init_prompt(mode, seed);
  for (auto t : config_.targets) run_group(multitask_spec, "single", {t}, &init);
  for (auto size : config_.group_sizes) {
    for (auto strategy : {GroupStrategy::best, GroupStrategy::worst}) {
      const TaskGrouping g = grouping(mode, strategy, size);
      for (auto t : config_.targets) {
        const auto& ids = g.groups[t];
        run_group(multitask_spec, std::string(to_string(strategy)) + ":" + join_ids(ids), ids, &init);
      }
    }
  }
  return append_ledger(ledger_path(), rows);
}

// ---------------------------------------------------------------------------
// Report

namespace {

// First id in "<strategy>:<ids>", or -1 when the spec names no group.
long group_target(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) return -1;
  return std::stol(spec.substr(colon + 1));
}

struct Stats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  s.std = sample_stddev(v);
  return s;
}

}  // namespace

ReportOutput write_report(const std::vector<LedgerRow>& rows, const fs::path& dir) {
  if (rows.empty()) throw ContractError("report: the ledger has no rows");
  ReportOutput out;
  using GroupKey = std::tuple<std::string, std::string, std::string, std::string, std::size_t>;
  // group -> seed -> task -> test accuracy
  std::map<GroupKey, std::map<std::uint64_t, std::map<std::size_t, double>>> groups;
  // (experiment, mode) -> (source, target) -> raw score
  std::map<std::pair<std::string, std::string>, std::map<std::pair<std::size_t, std::size_t>, double>> transfers;

  for (const auto& r : rows) {
    const std::string strategy = prefix(r.adaptation_spec);
    if (strategy == "transfer") {
      transfers[{r.experiment_id, r.mode}][{std::stoull(r.source_spec.substr(r.source_spec.find(':') + 1)), r.task}] =
          r.test_acc;
      continue;
    }
    const long target = group_target(r.adaptation_spec);
    if (target >= 0 && std::size_t(target) != r.task) continue;  // partner rows
    groups[{r.experiment_id, r.mode, prefix(r.source_spec), strategy, r.shots}][r.seed][r.task] = r.test_acc;
  }

  std::vector<std::string> single_seed;
  std::string summary = "experiment_id,mode,source,strategy,shots,seeds,tasks,mean,std\n";
  std::string per_task = "experiment_id,mode,source,strategy,shots,task,seeds,mean,std\n";
  out.table = fmt::format("{:<12} {:<8} {:<10} {:<10} {:>5}  {:>17}  {}\n", "experiment", "mode", "source",
                          "strategy", "shots", "test acc", "seeds");
  for (const auto& [key, by_seed] : groups) {
    const auto& [exp, mode, source, strategy, shots] = key;
    const std::string label = fmt::format("{}/{}/{}/{}/{}-shot", exp, mode, source, strategy, shots);
    std::set<std::size_t> all_tasks;
    for (const auto& [seed, tasks] : by_seed)
      for (const auto& [task, acc] : tasks) all_tasks.insert(task);
    std::vector<double> seed_means;
    for (const auto& [seed, tasks] : by_seed) {
      if (tasks.size() != all_tasks.size())
        out.warnings.push_back(fmt::format("{}: seed {} is missing results for {} task(s)", label, seed,
                                           all_tasks.size() - tasks.size()));
      double s = 0.0;
      for (const auto& [task, acc] : tasks) s += acc;
      seed_means.push_back(s / double(tasks.size()));
    }
    const Stats st = stats(seed_means);
    if (st.n < 2) single_seed.push_back(label);
    summary += fmt::format("{},{},{},{},{},{},{},{:.6f},{:.6f}\n", exp, mode, source, strategy, shots, st.n,
                           all_tasks.size(), st.mean, st.std);
    out.table += fmt::format("{:<12} {:<8} {:<10} {:<10} {:>5}  {:.4f} +/- {:.4f}  {}\n", exp, mode, source,
                             strategy, shots, st.mean, st.std, st.n);
    for (auto task : all_tasks) {
      std::vector<double> accs;
      for (const auto& [seed, tasks] : by_seed) {
        auto it = tasks.find(task);
        if (it != tasks.end()) accs.push_back(it->second);
      }
      const Stats ts = stats(accs);
      if (ts.n != by_seed.size())
        out.warnings.push_back(fmt::format("{}: task {} has {} of {} seeds", label, task, ts.n, by_seed.size()));
      per_task += fmt::format("{},{},{},{},{},{},{},{:.6f},{:.6f}\n", exp, mode, source, strategy, shots, task, ts.n,
                              ts.mean, ts.std);
    }
  }

  if (!single_seed.empty()) {
    std::string w = fmt::format("{} aggregate(s) have a single seed; std reported as 0:", single_seed.size());
    for (const auto& l : single_seed) w += " " + l;
    out.warnings.push_back(w);
  }

  fs::create_directories(dir);
  write_text(dir / "summary.csv", summary);
  write_text(dir / "per_task.csv", per_task);
  out.files.push_back(dir / "summary.csv");
  out.files.push_back(dir / "per_task.csv");

  for (const auto& [key, cells] : transfers) {
    const auto& [exp, mode] = key;
    std::size_t T = 0;
    for (const auto& [st, acc] : cells) T = std::max({T, st.first + 1, st.second + 1});
    if (cells.size() != T * T) {
      out.warnings.push_back(fmt::format("{}/{}: transfer matrix has {} of {} cells; heatmap skipped", exp, mode,
                                         cells.size(), T * T));
      continue;
    }
    Array raw({T, T});
    for (const auto& [st, acc] : cells) raw.at(st.first, st.second) = acc;
    const TransferMatrix m = matrix_from_raw(parse_prompt_mode(mode), raw);
    const std::string stem = fmt::format("{}-transfer-{}", exp, mode);
    write_text(dir / (stem + ".csv"), matrix_csv(m.scores));
    write_text(dir / (stem + ".svg"),
               matrix_svg(m.scores, fmt::format("{} transfer ({} prompts, column-normalized)", exp, mode)));
    out.files.push_back(dir / (stem + ".csv"));
    out.files.push_back(dir / (stem + ".svg"));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

ExperimentConfig resolve_config(const CommandOptions& options) {
  ExperimentConfig c = options.config ? load_config(*options.config) : ExperimentConfig{};
  if (options.seed) c.seeds = {*options.seed};
  if (options.shots) c.shots = *options.shots;
  if (options.mode) c.modes = {*options.mode};
  c.validate();
  return c;
}

namespace {

void print_report(const Workspace& ws, std::ostream& out, std::ostream& err) {
  const ReportOutput r = write_report(read_ledger(ws.ledger_path()), ws.report_dir());
  out << r.table;
  for (const auto& w : r.warnings) err << "warning: " << w << "\n";
  for (const auto& f : r.files) out << "wrote " << f.string() << "\n";
}

void write_groups(Workspace& ws, PromptMode mode, std::ostream& out) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  for (auto size : ws.config().group_sizes) {
    for (auto strategy : {GroupStrategy::best, GroupStrategy::worst}) {
      const TaskGrouping g = ws.grouping(mode, strategy, size);
      auto& entry = j[std::string(to_string(strategy)) + "-" + std::to_string(size)];
      entry = nlohmann::ordered_json::array();
      for (const auto& group : g.groups) entry.push_back(group);
      out << to_string(mode) << " " << to_string(strategy) << "-" << size << ":";
      for (auto t : ws.config().targets) out << " " << join_ids(g.groups[t]);
      out << "\n";
    }
  }
  write_text(ws.out() / fmt::format("groups-{}.json", to_string(mode)), j.dump(2) + "\n");
}

}  // namespace

int run_command(std::string_view command, const CommandOptions& options, std::ostream& out, std::ostream& err) {
  try {
    if (command == "report") {
      const fs::path ledger = options.out / "ledger.csv";
      if (!fs::exists(ledger)) throw Error("no ledger at " + ledger.string());
      const ReportOutput r = write_report(read_ledger(ledger), options.out / "report");
      out << r.table;
      for (const auto& w : r.warnings) err << "warning: " << w << "\n";
      for (const auto& f : r.files) out << "wrote " << f.string() << "\n";
      return 0;
    }
    const ExperimentConfig config = resolve_config(options);
    Workspace ws(config, options.out, std::string(command), err);
    if (command == "pretrain") {
      ws.encoder();
    } else if (command == "init") {
      for (auto mode : config.modes)
        for (auto seed : config.seeds) ws.init_prompt(mode, seed);
    } else if (command == "transfer") {
      for (auto mode : config.modes) {
        const TransferMatrix& m = ws.transfer(mode);
        const fs::path csv = ws.out() / fmt::format("transfer-{}.csv", to_string(mode));
        write_text(csv, matrix_csv(m.scores));
        out << to_string(mode) << ": " << m.evaluations << " evaluations -> " << csv.string() << "\n";
      }
    } else if (command == "group") {
      for (auto mode : config.modes) write_groups(ws, mode, out);
    } else if (command == "adapt") {
      for (auto mode : config.modes)
        for (auto seed : config.seeds) out << to_string(mode) << " seed " << seed << ": " << ws.adapt(mode, seed) << " new ledger rows\n";
    } else if (command == "pipeline") {
      for (auto mode : config.modes) {
        ws.transfer(mode);
        write_groups(ws, mode, out);
        for (auto seed : config.seeds) ws.adapt(mode, seed);
      }
      print_report(ws, out, err);
    } else {
      throw ConfigError("unknown command '" + std::string(command) + "'");
    }
    err << fmt::format("cache: {} hit(s), {} computed\n", ws.cache_hits(), ws.cache_misses());
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mvlpt
