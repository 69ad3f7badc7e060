// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "mvlpt/config.hpp"
#include "mvlpt/errors.hpp"
#include "mvlpt/ledger.hpp"
#include "mvlpt/pipeline.hpp"

namespace fs = std::filesystem;

namespace mvlpt {
namespace {

const fs::path kConfigs = MVLPT_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mvlpt-test-" + name);
  fs::remove_all(dir);
  return dir;
}

std::string config_error(std::string_view text) {
  try {
    parse_config(text, "exp.conf");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, SchemaOnlyGivesDefaults) {
  const ExperimentConfig c = parse_config("schema = 1\n");
  const ExperimentConfig d;
  EXPECT_EQ(canonical_config(c), canonical_config(d));
  EXPECT_EQ(c.suite.classes_per_task, 8u);
  EXPECT_EQ(c.targets, (std::vector<std::size_t>{5, 6, 7, 8, 9}));
}

TEST(Config, ParsesEveryKind) {
  const ExperimentConfig c = parse_config(
      "schema = 1\n"
      "experiment.id = run-a   # trailing comment\n"
      "experiment.modes = visual, text\n"
      "experiment.seeds = 3,4\n"
      "experiment.random_baseline = false\n"
      "suite.visual_sim = 0.25\n"
      "train.mixing = proportional\n");
  EXPECT_EQ(c.experiment_id, "run-a");
  EXPECT_EQ(c.modes, (std::vector<PromptMode>{PromptMode::visual, PromptMode::text}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_FALSE(c.random_baseline);
  EXPECT_EQ(c.suite.visual_sim, 0.25);
  EXPECT_EQ(c.train.mixing, TaskMixing::proportional);
}

TEST(Config, EncoderFollowsSuiteSizes) {
  const ExperimentConfig c = parse_config("schema = 1\nsuite.patch_count = 9\nsuite.vocab = 40\n");
  EXPECT_EQ(c.encoder_config().patch_count, 9u);
  EXPECT_EQ(c.encoder_config().vocab_size, 40u);
}

TEST(Config, ErrorsNameTheLine) {
  EXPECT_EQ(config_error("schema = 1\nsuite.taks = 4\n"), "exp.conf:2: unknown key 'suite.taks'");
  EXPECT_NE(config_error("schema = 1\nsuite.tasks = 4\nsuite.tasks = 5\n").find("exp.conf:3"), std::string::npos);
  EXPECT_NE(config_error("suite.tasks = 4\n").find("missing 'schema'"), std::string::npos);
  EXPECT_NE(config_error("schema = 2\n").find("exp.conf:1"), std::string::npos);
  EXPECT_NE(config_error("schema = 1\nsuite.tasks 4\n").find("exp.conf:2"), std::string::npos);
  EXPECT_NE(config_error("schema = 1\nsuite.noise = loud\n").find("exp.conf:2"), std::string::npos);
  EXPECT_NE(config_error("schema = 1\nexperiment.modes = text, audio\n").find("exp.conf:2"), std::string::npos);
}

TEST(Config, CrossFieldValidation) {
  EXPECT_NE(config_error("schema = 1\nexperiment.sources = 0, 5\n").find("both a source and a target"),
            std::string::npos);
  EXPECT_NE(config_error("schema = 1\nexperiment.targets = 5, 12\n").find("out of range"), std::string::npos);
  EXPECT_NE(config_error("schema = 1\nexperiment.group_sizes = 4\n").find("2 or 3"), std::string::npos);
  EXPECT_NE(config_error("schema = 1\nexperiment.seeds =\n"), "");
}

TEST(Config, LoadReportsMissingFile) {
  EXPECT_THROW(load_config("/nonexistent/exp.conf"), ConfigError);
  EXPECT_NO_THROW(load_config(kConfigs / "smoke.conf"));
  EXPECT_NO_THROW(load_config(kConfigs / "desk.conf"));
}

TEST(ConfigHash, IgnoresOrderCommentsAndSpelledDefaults) {
  const std::string a = "schema = 1\nsuite.tasks = 12\nexperiment.targets = 6, 7, 8\n";
  const std::string b =
      "# reordered\nexperiment.targets = 6,7,8\n\nschema = 1\nsuite.tasks = 12  # six\nsuite.classes = 8\n"
      "train.lr = 0.002\n";
  EXPECT_EQ(config_hash(parse_config(a)), config_hash(parse_config(b)));
  EXPECT_NE(config_hash(parse_config(a)), config_hash(parse_config(a + "suite.classes = 5\n")));
}

TEST(ConfigHash, CanonicalFormReparses) {
  const ExperimentConfig c = load_config(kConfigs / "desk.conf");
  const std::string text = canonical_config(c);
  EXPECT_EQ(canonical_config(parse_config(text)), text);
}

TEST(StageHash, DependsOnlyOnStageInputs) {
  const ExperimentConfig base = parse_config("schema = 1\n");
  auto with = [](std::string line) { return parse_config("schema = 1\n" + line + "\n"); };
  const char* stages[] = {"suite", "pretrain", "init", "transfer", "adapt"};
  auto changed = [&](const ExperimentConfig& other) {
    std::vector<std::string> out;
    for (const char* s : stages)
      if (stage_hash(base, s) != stage_hash(other, s)) out.push_back(s);
    return out;
  };
  using V = std::vector<std::string>;
  EXPECT_EQ(changed(with("experiment.seeds = 0, 1, 2")), V{});
  EXPECT_EQ(changed(with("experiment.id = other")), V{});
  EXPECT_EQ(changed(with("suite.seed = 9")), (V{"suite", "pretrain", "init", "transfer", "adapt"}));
  EXPECT_EQ(changed(with("pretrain.steps = 100")), (V{"pretrain", "init", "transfer", "adapt"}));
  EXPECT_EQ(changed(with("train.lr = 0.01")), (V{"init", "transfer", "adapt"}));
  EXPECT_EQ(changed(with("experiment.shots = 1")), (V{"init", "adapt"}));
  EXPECT_EQ(changed(with("experiment.transfer_shots = 5")), (V{"transfer", "adapt"}));
  EXPECT_THROW(stage_hash(base, "evaluate"), ContractError);
}

LedgerRow row(std::string source, std::string adaptation, std::uint64_t seed, std::size_t task, double test,
              std::string mode = "text") {
  return {"exp", std::move(mode), std::move(source), std::move(adaptation), 5, seed, task, 0.5, test};
}

TEST(Ledger, RowRoundTrip) {
  const LedgerRow r = row("multitask:0+1+2", "best:5+3", 2, 5, 0.8125);
  const std::string line = format_ledger_row(r);
  EXPECT_EQ(line, "exp,text,multitask:0+1+2,best:5+3,5,2,5,0.5,0.8125");
  const LedgerRow back = parse_ledger_row(line);
  EXPECT_EQ(back.key(), r.key());
  EXPECT_EQ(back.test_acc, r.test_acc);
  EXPECT_EQ(format_ledger_row(back), line);
}

TEST(Ledger, BadRowsAreRejected) {
  EXPECT_THROW(parse_ledger_row("exp,text,random,single,5,0,5,0.5"), FormatError);
  EXPECT_THROW(parse_ledger_row("exp,text,random,single,5,0,5,0.5,nan"), FormatError);
  EXPECT_THROW(parse_ledger_row("exp,text,random,single,five,0,5,0.5,0.5"), FormatError);
  EXPECT_THROW(format_ledger_row(row("random", "single", 0, 5, std::nan(""))), ContractError);
  EXPECT_THROW(format_ledger_row(row("random,x", "single", 0, 5, 0.5)), ContractError);
}

TEST(Ledger, AppendSkipsKnownKeys) {
  const fs::path dir = scratch_dir("ledger");
  fs::create_directories(dir);
  const fs::path path = dir / "ledger.csv";
  EXPECT_TRUE(read_ledger(path).empty());
  EXPECT_EQ(append_ledger(path, {row("random", "single", 0, 5, 0.5), row("random", "single", 0, 6, 0.6)}), 2u);
  EXPECT_EQ(append_ledger(path, {row("random", "single", 0, 5, 0.9), row("random", "single", 1, 5, 0.7)}), 1u);
  const auto rows = read_ledger(path);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].test_acc, 0.5);
  EXPECT_EQ(slurp(path).substr(0, kLedgerHeader.size()), kLedgerHeader);
  fs::remove_all(dir);
}

TEST(Ledger, BadHeaderIsRejected) {
  const fs::path dir = scratch_dir("ledger-header");
  fs::create_directories(dir);
  std::ofstream(dir / "ledger.csv") << "a,b,c\n";
  EXPECT_THROW(read_ledger(dir / "ledger.csv"), FormatError);
  fs::remove_all(dir);
}

TEST(Manifest, RoundTrip) {
  const fs::path dir = scratch_dir("manifest");
  fs::create_directories(dir);
  RunManifest m{"pipeline", "pretrain", "00ff", "abcd", {"suite.json"}, {"encoder.tensors"}, {0, 1}, 1.5, false};
  append_manifest(dir / "m.jsonl", m);
  m.cache_hit = true;
  append_manifest(dir / "m.jsonl", m);
  const auto back = read_manifests(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].stage, "pretrain");
  EXPECT_EQ(back[0].seeds, (std::vector<std::uint64_t>{0, 1}));
  EXPECT_FALSE(back[0].cache_hit);
  EXPECT_TRUE(back[1].cache_hit);
  fs::remove_all(dir);
}

std::vector<LedgerRow> three_seed_rows() {
  std::vector<LedgerRow> rows;
  const double accs[3][2] = {{0.5, 0.7}, {0.7, 0.9}, {0.6, 0.8}};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (std::size_t t = 0; t < 2; ++t) {
      rows.push_back(row("random", "single", seed, 5 + t, accs[seed][t]));
      rows.push_back(row("multitask:0+1", "best:" + std::to_string(5 + t) + "+1", seed, 5 + t, accs[seed][t] + 0.05));
    }
  }
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t t = 0; t < 3; ++t)
      rows.push_back(row("task:" + std::to_string(s), "transfer", 0, t, s == t ? 0.9 : 0.3 + 0.1 * double(s)));
  return rows;
}

std::size_t count_cells(const std::string& svg) {
  const std::regex cell("<rect class=\"cell\"");
  return std::size_t(std::distance(std::sregex_iterator(svg.begin(), svg.end(), cell), std::sregex_iterator()));
}

TEST(Report, AggregatesSeedsWithSampleStd) {
  const fs::path dir = scratch_dir("report");
  const ReportOutput r = write_report(three_seed_rows(), dir);
  const std::string summary = slurp(dir / "summary.csv");
  EXPECT_NE(summary.find("exp,text,random,single,5,3,2,0.700000,0.100000\n"), std::string::npos) << summary;
  EXPECT_NE(summary.find("exp,text,multitask,best,5,3,2,0.750000,0.100000\n"), std::string::npos) << summary;
  EXPECT_EQ(summary.find("transfer"), std::string::npos);
  EXPECT_TRUE(r.warnings.empty());
  const std::string per_task = slurp(dir / "per_task.csv");
  EXPECT_NE(per_task.find("exp,text,random,single,5,5,3,0.600000,0.100000\n"), std::string::npos) << per_task;
  EXPECT_EQ(count_cells(slurp(dir / "exp-transfer-text.svg")), 9u);
  fs::remove_all(dir);
}

TEST(Report, TransferCsvIsColumnNormalized) {
  const fs::path dir = scratch_dir("report-csv");
  std::vector<LedgerRow> rows{row("random", "single", 0, 5, 0.5)};
  const double raw[2][2] = {{0.8, 0.3}, {0.4, 0.6}};
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t t = 0; t < 2; ++t) rows.push_back(row("task:" + std::to_string(s), "transfer", 0, t, raw[s][t]));
  write_report(rows, dir);
  EXPECT_EQ(slurp(dir / "exp-transfer-text.csv"), "source,0,1\n0,1,0.5\n1,0.5,1\n");
  fs::remove_all(dir);
}

TEST(Report, SingleSeedIsWarnedOnce) {
  const fs::path dir = scratch_dir("report-single");
  const ReportOutput r = write_report({row("random", "single", 0, 5, 0.5), row("random", "single", 0, 6, 0.7),
                                       row("none", "zero-shot", 0, 5, 0.4)},
                                      dir);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("2 aggregate(s) have a single seed"), std::string::npos) << r.warnings[0];
  EXPECT_NE(slurp(dir / "summary.csv").find("exp,text,random,single,5,1,2,0.600000,0.000000"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Report, MissingSeedResultsAreWarned) {
  const fs::path dir = scratch_dir("report-missing");
  const ReportOutput r = write_report({row("random", "single", 0, 5, 0.5), row("random", "single", 0, 6, 0.7),
                                       row("random", "single", 1, 5, 0.6)},
                                      dir);
  bool found = false;
  for (const auto& w : r.warnings) found = found || w.find("seed 1 is missing results for 1 task(s)") != std::string::npos;
  EXPECT_TRUE(found);
  EXPECT_THROW(write_report({}, dir), ContractError);
  fs::remove_all(dir);
}

TEST(Report, GroupPartnerRowsAreNotCounted) {
  const fs::path dir = scratch_dir("report-partner");
  write_report({row("multitask:0+1", "best:5+3", 0, 5, 0.8), row("multitask:0+1", "best:5+3", 0, 3, 0.1)}, dir);
  EXPECT_NE(slurp(dir / "summary.csv").find("exp,text,multitask,best,5,1,1,0.800000,0.000000"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Report, RegenerationIsByteIdentical) {
  const fs::path a = scratch_dir("report-a");
  const fs::path b = scratch_dir("report-b");
  auto rows = three_seed_rows();
  write_report(rows, a);
  std::reverse(rows.begin(), rows.end());
  write_report(rows, b);
  for (const char* f : {"summary.csv", "per_task.csv", "exp-transfer-text.csv", "exp-transfer-text.svg"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

class SmokePipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    out_ = scratch_dir("pipeline");
    CommandOptions o;
    o.config = kConfigs / "smoke.conf";
    o.out = out_;
    std::ostringstream out, err;
    status_ = run_command("pipeline", o, out, err);
    log_ = out.str() + err.str();
  }
  static void TearDownTestSuite() { fs::remove_all(out_); }

  static int run(std::string_view command, std::string* log = nullptr) {
    CommandOptions o;
    o.config = kConfigs / "smoke.conf";
    o.out = out_;
    std::ostringstream out, err;
    const int status = run_command(command, o, out, err);
    if (log) *log = out.str() + err.str();
    return status;
  }

  static inline fs::path out_;
  static inline int status_ = -1;
  static inline std::string log_;
};

TEST_F(SmokePipeline, ProducesLedgerReportAndManifest) {
  ASSERT_EQ(status_, 0) << log_;
  const auto rows = read_ledger(out_ / "ledger.csv");
  // Per mode: 4x4 transfer cells; per target: zero-shot, random, multitask, best and worst pairs.
  std::size_t transfer = 0;
  for (const auto& r : rows) transfer += r.adaptation_spec == "transfer";
  EXPECT_EQ(transfer, 3u * 16u);
  EXPECT_TRUE(fs::exists(out_ / "report" / "summary.csv"));
  EXPECT_EQ(count_cells(slurp(out_ / "report" / "smoke-transfer-unified.svg")), 16u);
  EXPECT_TRUE(fs::exists(out_ / "groups-visual.json"));
  const auto manifests = read_manifests(out_ / "manifest.jsonl");
  ASSERT_FALSE(manifests.empty());
  for (const auto& m : manifests) EXPECT_FALSE(m.cache_hit) << m.stage;
  EXPECT_NE(log_.find("0 hit(s)"), std::string::npos) << log_;
}

TEST_F(SmokePipeline, RerunIsServedFromCache) {
  ASSERT_EQ(status_, 0) << log_;
  const std::string ledger = slurp(out_ / "ledger.csv");
  const std::string summary = slurp(out_ / "report" / "summary.csv");
  std::string log;
  ASSERT_EQ(run("pipeline", &log), 0) << log;
  EXPECT_NE(log.find(", 0 computed"), std::string::npos) << log;
  EXPECT_EQ(slurp(out_ / "ledger.csv"), ledger);
  EXPECT_EQ(slurp(out_ / "report" / "summary.csv"), summary);
  ASSERT_EQ(run("report", &log), 0) << log;
  EXPECT_EQ(slurp(out_ / "report" / "summary.csv"), summary);
}

TEST_F(SmokePipeline, CorruptCheckpointIsReported) {
  ASSERT_EQ(status_, 0) << log_;
  fs::path encoder;
  for (const auto& e : fs::recursive_directory_iterator(out_ / "cache"))
    if (e.path().filename() == "encoder.tensors") encoder = e.path();
  ASSERT_FALSE(encoder.empty());
  const std::string good = slurp(encoder);
  std::string bad = good;
  bad[bad.size() / 2] = bad[bad.size() / 2] == '1' ? '2' : '1';
  std::ofstream(encoder, std::ios::binary | std::ios::trunc) << bad;
  std::string log;
  EXPECT_EQ(run("pretrain", &log), 1);
  EXPECT_NE(log.find("checksum mismatch"), std::string::npos) << log;
  EXPECT_NE(log.find(encoder.string()), std::string::npos) << log;
  std::ofstream(encoder, std::ios::binary | std::ios::trunc) << good;
  EXPECT_EQ(run("pretrain", &log), 0) << log;
}

TEST(Commands, ConfigErrorsExitNonZero) {
  const fs::path dir = scratch_dir("bad-config");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.conf") << "schema = 1\nsuite.taks = 4\n";
  CommandOptions o;
  o.config = dir / "bad.conf";
  o.out = dir / "out";
  std::ostringstream out, err;
  EXPECT_EQ(run_command("pretrain", o, out, err), 1);
  EXPECT_NE(err.str().find("bad.conf:2: unknown key 'suite.taks'"), std::string::npos) << err.str();
  std::ostringstream out2, err2;
  EXPECT_EQ(run_command("report", o, out2, err2), 1);
  EXPECT_NE(err2.str().find("no ledger"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Commands, OverridesApply) {
  CommandOptions o;
  o.config = kConfigs / "smoke.conf";
  o.seed = 7;
  o.shots = 20;
  o.mode = PromptMode::visual;
  const ExperimentConfig c = resolve_config(o);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{7}));
  EXPECT_EQ(c.shots, 20u);
  EXPECT_EQ(c.modes, (std::vector<PromptMode>{PromptMode::visual}));
}

}  // namespace
}  // namespace mvlpt
