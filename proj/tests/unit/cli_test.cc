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

#include <fstream>
#include <set>
#include <sstream>

#include "analysis_oracle.h"
#include "doctest.h"
#include "guidegate/cli.h"
#include "guidegate/errors.h"
#include "json.hpp"
#include "temp_dir.h"

namespace cli = guidegate::cli;
namespace tr = guidegate::training;
namespace fs = std::filesystem;
using guidegate::testing::TempDir;

namespace {

const fs::path kConfigDir = fs::path(GUIDEGATE_SOURCE_DIR) / "configs";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// A tiny configuration written into `root`, with options pointing at it.
cli::CommandOptions tiny_options(const fs::path& root, const std::string& extra = "") {
  write_text(root / "tiny.json",
             R"({"level":"GoToObj","epochs":2,"batch_episodes":8,"seed":5,"demo_count":24,)"
             R"("validation_episodes":12,"pretrain_epochs":1,"runs":2,"heatmap_rollouts":4,)"
             R"("name":"tiny")" +
                 extra + "}");
  cli::CommandOptions o;
  o.config_path = root / "tiny.json";
  o.runs_root = root / "runs";
  return o;
}

std::set<std::string> file_names(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out.insert(e.path().filename().string());
  return out;
}

}  // namespace

TEST_CASE("git blob hashes match git hash-object") {
  TempDir dir;
  write_text(dir.path() / "hello.txt", "hello\n");
  CHECK(cli::git_blob_hash(dir.path() / "hello.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
  write_text(dir.path() / "empty.txt", "");
  CHECK(cli::git_blob_hash(dir.path() / "empty.txt") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK_THROWS_AS(cli::git_blob_hash(dir.path() / "absent"), guidegate::MissingPrerequisite);
}

TEST_CASE("bundled configurations load") {
  CHECK(tr::load_config(kConfigDir / "gotoobj.json") ==
        tr::default_config(guidegate::gridworld::Level::kGoToObj));
  auto put = tr::default_config(guidegate::gridworld::Level::kPutNextLocal);
  CHECK(tr::load_config(kConfigDir / "putnextlocal.json") == put);
  for (const char* name : {"smoke.json", "acceptance_gotoobj.json"}) {
    CHECK_NOTHROW(tr::load_config(kConfigDir / name));
  }
}

TEST_CASE("command-line overrides replace config fields") {
  TempDir dir;
  auto o = tiny_options(dir.path());
  o.seed = 44;
  o.lambda = 0.7;
  o.level = "PutNextLocal";
  const auto c = cli::resolve_config(o);
  CHECK(c.seed == 44);
  CHECK(c.lambda == 0.7);
  CHECK(c.level == guidegate::gridworld::Level::kPutNextLocal);
  CHECK(cli::run_directory(o, c) == dir.path() / "runs" / "tiny");
}

TEST_CASE("configuration problems exit with code 2") {
  TempDir dir;
  std::ostringstream out, err;
  cli::CommandOptions o;
  o.runs_root = dir.path();
  CHECK(cli::cmd_gen_demos(o, out, err) == guidegate::kExitConfigError);
  o.config_path = dir.path() / "missing.json";
  CHECK(cli::cmd_gen_demos(o, out, err) == guidegate::kExitConfigError);
  write_text(dir.path() / "bad.json", "{\"lambda\": -2}");
  o.config_path = dir.path() / "bad.json";
  CHECK(cli::cmd_train(o, tr::RunMode::kGated, out, err) == guidegate::kExitConfigError);
  write_text(dir.path() / "broken.json", "{\"lambda\": ");
  o.config_path = dir.path() / "broken.json";
  CHECK(cli::cmd_pretrain(o, out, err) == guidegate::kExitConfigError);
  CHECK(err.str().find("error: ") != std::string::npos);
}

TEST_CASE("missing stages exit with code 3") {
  TempDir dir;
  std::ostringstream out, err;
  auto o = tiny_options(dir.path());
  CHECK(cli::cmd_pretrain(o, out, err) == guidegate::kExitMissingPrerequisite);
  CHECK(cli::cmd_train(o, tr::RunMode::kAlone, out, err) == guidegate::kExitMissingPrerequisite);
  CHECK(cli::cmd_analyze(dir.path() / "runs" / "tiny", out, err) ==
        guidegate::kExitMissingPrerequisite);
  REQUIRE(cli::cmd_gen_demos(o, out, err) == guidegate::kExitOk);
  CHECK(cli::cmd_train(o, tr::RunMode::kGated, out, err) == guidegate::kExitMissingPrerequisite);
  // Demonstrations made for another demo_count are not reused.
  auto other = tiny_options(dir.path(), R"(,"demo_count":30)");
  CHECK(cli::cmd_pretrain(other, out, err) == guidegate::kExitMissingPrerequisite);
  // Refused stages leave no manifest entry.
  const auto manifest = nlohmann::json::parse(slurp(dir.path() / "runs" / "tiny" / "manifest.json"));
  CHECK(manifest.at("stages").at("gen-demos").at("status") == "complete");
  CHECK_FALSE(manifest.at("stages").contains("pretrain"));
}

TEST_CASE("corrupt inputs exit with code 4") {
  TempDir dir;
  std::ostringstream out, err;
  auto o = tiny_options(dir.path());
  REQUIRE(cli::cmd_gen_demos(o, out, err) == guidegate::kExitOk);
  const auto run = dir.path() / "runs" / "tiny";
  auto demos = slurp(run / "demos.jsonl");
  write_text(run / "demos.jsonl", demos.substr(0, demos.size() / 2));
  CHECK(cli::cmd_pretrain(o, out, err) == guidegate::kExitCorruptData);
  CHECK(err.str().find("corrupt data") != std::string::npos);

  write_text(run / "frames" / "gated" / "seed_5" / "epoch_000.jsonl", "{\"ep\":0}\n");
  CHECK(cli::cmd_analyze(run, out, err) == guidegate::kExitCorruptData);

  write_text(run / "checkpoints" / "guide.ckpt", "not a checkpoint");
  write_text(run / "demos.jsonl", demos);
  CHECK(cli::cmd_train(o, tr::RunMode::kGated, out, err) == guidegate::kExitCorruptData);
}

TEST_CASE("demonstrations are byte-identical across runs and job counts") {
  TempDir dir;
  std::ostringstream out, err;
  auto a = tiny_options(dir.path() / "a");
  auto b = tiny_options(dir.path() / "b");
  b.jobs = 3;
  REQUIRE(cli::cmd_gen_demos(a, out, err) == guidegate::kExitOk);
  REQUIRE(cli::cmd_gen_demos(b, out, err) == guidegate::kExitOk);
  const auto da = dir.path() / "a" / "runs" / "tiny" / "demos.jsonl";
  const auto db = dir.path() / "b" / "runs" / "tiny" / "demos.jsonl";
  CHECK(slurp(da) == slurp(db));
  const auto manifest = nlohmann::json::parse(slurp(dir.path() / "a" / "runs" / "tiny" / "manifest.json"));
  const auto& stage = manifest["stages"]["gen-demos"];
  CHECK(stage["demo_count"] == 24);
  CHECK(stage["outputs"]["demos.jsonl"] == cli::git_blob_hash(da));
  CHECK(stage["config"]["seed"] == 5);
}

TEST_CASE("a tiny pipeline produces every artifact") {
  TempDir dir;
  std::ostringstream out, err;
  auto o = tiny_options(dir.path());
  REQUIRE(cli::cmd_pipeline(o, true, out, err) == guidegate::kExitOk);
  INFO(err.str());
  const auto run = dir.path() / "runs" / "tiny";
  for (const char* f : {"config.json", "manifest.json", "demos.jsonl", "pretrain.csv", "metrics.csv",
                        "metrics_alone.csv", "metrics_guided.csv", "train_batches.csv",
                        "train_batches_alone.csv", "train_batches_guided.csv"}) {
    CHECK_MESSAGE(fs::exists(run / f), f);
  }
  for (const char* ckpt : {"guide.ckpt", "gated_seed_5.ckpt", "gated_seed_6.ckpt",
                           "alone_seed_5.ckpt", "guided_seed_6.ckpt"}) {
    CHECK_MESSAGE(fs::exists(run / "checkpoints" / ckpt), ckpt);
  }
  // Two runs times two epochs, plus the header.
  std::istringstream metrics(slurp(run / "metrics.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) ++lines;
  CHECK(lines == 5);
  CHECK(file_names(run / "frames" / "gated" / "seed_5") ==
        std::set<std::string>{"epoch_000.jsonl", "epoch_001.jsonl", "heatmap_0.json",
                              "heatmap_1.json"});
  CHECK(file_names(run / "frames" / "gated" / "seed_6") ==
        std::set<std::string>{"epoch_000.jsonl", "epoch_001.jsonl"});

  const std::set<std::string> expected = {"by_action.csv",      "by_message.csv", "by_obstype.csv",
                                          "quantiles.csv",      "counterfactual.csv",
                                          "heatmap_0.csv",      "heatmap_1.csv"};
  CHECK(file_names(run / "analysis") == expected);
  const auto report = guidegate::testing::verify_analysis(run);
  for (const auto& p : report.problems) INFO(p);
  CHECK(report.ok());

  // Re-running analyze replaces stale tables and reproduces the same bytes.
  const auto before = slurp(run / "analysis" / "by_action.csv");
  write_text(run / "analysis" / "stale.csv", "x\n");
  REQUIRE(cli::cmd_analyze(run, out, err) == guidegate::kExitOk);
  CHECK(file_names(run / "analysis") == expected);
  CHECK(slurp(run / "analysis" / "by_action.csv") == before);

  const auto manifest = nlohmann::json::parse(slurp(run / "manifest.json"));
  for (const char* stage : {"gen-demos", "pretrain", "train-gated", "train-alone", "train-guided"}) {
    CHECK_MESSAGE(manifest["stages"][stage]["status"] == "complete", stage);
  }
}
