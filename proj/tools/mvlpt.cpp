// SPDX-License-Identifier: Apache-2.0
//
// mvlpt: multitask prompt tuning experiments on synthetic task suites.
#include <malloc.h>

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mvlpt/pipeline.hpp"

int main(int argc, char** argv) {
  // Training allocates many short-lived mid-sized buffers; keep them on the
  // heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Multitask vision-language prompt tuning on synthetic task suites"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> shots;
  std::string mode;
  std::string out = "mvlpt-out";

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"pipeline", "generate suite, pretrain, init, transfer, group, adapt and report"},
      {"pretrain", "pretrain and freeze the encoders"},
      {"init", "multitask prompt initialization on the source tasks"},
      {"adapt", "adapt prompts to the target tasks (singleton, best and worst groups)"},
      {"transfer", "build the zero-shot transfer matrix"},
      {"group", "derive best/worst task groups from the transfer matrix"},
      {"report", "summarize the results ledger"},
  };
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--out", out, "output directory")->capture_default_str();
    if (std::string(c.name) == "report") continue;
    sub->add_option("--config", config_path, "experiment config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "run a single sampling/initialization seed");
    sub->add_option("--shots", shots, "shots per class")->check(CLI::IsMember({1, 5, 20}));
    sub->add_option("--mode", mode, "prompt mode")->check(CLI::IsMember({"text", "visual", "unified"}));
  }

  CLI11_PARSE(app, argc, argv);

  mvlpt::CommandOptions options;
  if (!config_path.empty()) options.config = config_path;
  options.seed = seed;
  options.shots = shots;
  if (!mode.empty()) options.mode = mvlpt::parse_prompt_mode(mode);
  options.out = out;
  return mvlpt::run_command(app.get_subcommands().front()->get_name(), options, std::cout, std::cerr);
}
