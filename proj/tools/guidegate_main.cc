// Copyright 2026 The GuideGate Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// guidegate: demonstrations, guide pretraining, gated training and analysis.
//
//   guidegate gen-demos --config configs/gotoobj.json
//   guidegate pretrain  --config configs/gotoobj.json
//   guidegate train     --config configs/gotoobj.json [--baseline none|alone|guided]
//   guidegate analyze   runs/gotoobj
//   guidegate pipeline  --config configs/gotoobj.json [--baselines]

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "guidegate/cli.h"
#include "guidegate/errors.h"

namespace {

void add_common(CLI::App* cmd, guidegate::cli::CommandOptions& opts, std::optional<std::uint64_t>& seed,
                std::optional<std::string>& level, std::optional<double>& lambda) {
  cmd->add_option("--config", opts.config_path, "Configuration JSON file")->required();
  cmd->add_option("--seed", seed, "Overrides the config seed");
  cmd->add_option("--jobs", opts.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--level", level, "Overrides the config level (gotoobj, putnextlocal)");
  cmd->add_option("--lambda", lambda, "Overrides the guidance penalty");
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = guidegate::cli;
  CLI::App app{"Gated guidance imitation learning in a gridworld"};
  app.require_subcommand(1);

  cli::CommandOptions opts;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> level;
  std::optional<double> lambda;
  std::string baseline = "none";
  bool baselines = false;
  std::string run_dir;

  auto* gen = app.add_subcommand("gen-demos", "Generate expert demonstrations");
  add_common(gen, opts, seed, level, lambda);
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the guide on the demonstrations");
  add_common(pretrain, opts, seed, level, lambda);
  auto* train = app.add_subcommand("train", "Train the gated learner or a baseline");
  add_common(train, opts, seed, level, lambda);
  train->add_option("--baseline", baseline, "none (gated), alone or guided")
      ->check(CLI::IsMember({"none", "alone", "guided"}));
  auto* analyze = app.add_subcommand("analyze", "Compute analysis tables from frame logs");
  analyze->add_option("run_dir", run_dir, "Run directory")->required();
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage in order");
  add_common(pipeline, opts, seed, level, lambda);
  pipeline->add_flag("--baselines", baselines, "Also train both baselines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? guidegate::kExitOk : guidegate::kExitConfigError;
  }
  opts.seed = seed;
  opts.level = level;
  opts.lambda = lambda;

  if (*gen) return cli::cmd_gen_demos(opts, std::cout, std::cerr);
  if (*pretrain) return cli::cmd_pretrain(opts, std::cout, std::cerr);
  if (*train) return cli::cmd_train(opts, *cli::parse_baseline(baseline), std::cout, std::cerr);
  if (*analyze) return cli::cmd_analyze(run_dir, std::cout, std::cerr);
  if (*pipeline) return cli::cmd_pipeline(opts, baselines, std::cout, std::cerr);
  return guidegate::kExitFailure;
}
