#include <CLI11.hpp>

#include <iostream>

#include "nepa/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"NEPA pretraining, transfer and diagnostics"};
  nepa::CliOptions opts;
  std::string config, resume;
  std::uint64_t seed = 0;
  app.add_option("command", opts.command, "pretrain | finetune | probe | analyze | gradcheck | ablate")
      ->required()
      ->check(CLI::IsMember({"pretrain", "finetune", "probe", "analyze", "gradcheck", "ablate"}));
  app.add_option("--config", config, "run configuration (JSON)")->required();
  auto* resume_opt = app.add_option("--resume", resume, "pretrain checkpoint to continue from");
  auto* seed_opt = app.add_option("--seed", seed, "overrides the configured seed");
  app.add_option("--table", opts.table, "ablation table: a, c or e")->check(CLI::IsMember({"a", "c", "e"}));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors count as configuration errors
  }
  opts.config = config;
  if (*resume_opt) opts.resume = resume;
  if (*seed_opt) opts.seed = seed;
  return nepa::run_command(opts, std::cout);
}
