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

#ifndef GUIDEGATE_CLI_H_
#define GUIDEGATE_CLI_H_

// The commands behind the `guidegate` executable. Each returns a process exit
// code (see errors.h) and reports problems on `err`.
//
// Run directory layout, under $GUIDEGATE_RUNS_DIR (default ./runs):
//
//   <name>/config.json        resolved configuration
//   <name>/manifest.json      per-stage status, input hashes, timings, seeds
//   <name>/demos.jsonl
//   <name>/checkpoints/       guide.ckpt, <mode>_seed_<s>.ckpt
//   <name>/frames/<mode>/seed_<s>/epoch_<e>.jsonl, heatmap_<e>.json
//   <name>/metrics.csv        gated runs; metrics_alone.csv, metrics_guided.csv
//   <name>/train_batches.csv  per-batch losses (same suffixes)
//   <name>/analysis/

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "guidegate/training.h"

namespace guidegate::cli {

struct CommandOptions {
  std::filesystem::path config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> level;
  std::optional<double> lambda;
  int jobs = 1;
  // Overrides $GUIDEGATE_RUNS_DIR.
  std::optional<std::filesystem::path> runs_root;
};

// Loads the config file and applies the command-line overrides.
training::TrainConfig resolve_config(const CommandOptions& options);
std::filesystem::path runs_root(const CommandOptions& options);
std::filesystem::path run_directory(const CommandOptions& options, const training::TrainConfig& config);

// Lower-case hex SHA-1 of "blob <size>\0<content>", as git hashes files.
std::string git_blob_hash(const std::filesystem::path& path);

int cmd_gen_demos(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_pretrain(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_train(const CommandOptions& options, training::RunMode mode, std::ostream& out,
              std::ostream& err);
int cmd_analyze(const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err);
// gen-demos, pretrain, gated training, optionally both baselines, analyze.
int cmd_pipeline(const CommandOptions& options, bool baselines, std::ostream& out,
                 std::ostream& err);

std::optional<training::RunMode> parse_baseline(std::string_view name);
std::string metrics_file_name(training::RunMode mode);
std::string batch_log_file_name(training::RunMode mode);

}  // namespace guidegate::cli

#endif  // GUIDEGATE_CLI_H_
