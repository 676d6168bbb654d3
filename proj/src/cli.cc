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

#include "guidegate/cli.h"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>

#include "guidegate/errors.h"

namespace guidegate::cli {
namespace {

namespace fs = std::filesystem;
namespace gw = gridworld;
namespace tr = training;
using nlohmann::json;
using nlohmann::ordered_json;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

ordered_json read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return ordered_json::object();
  ordered_json j = ordered_json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return ordered_json::object();
  return j;
}

// Records one stage in manifest.json: written as running before the work
// starts, then marked complete or failed.
class StageRecord {
 public:
  StageRecord(const fs::path& run_dir, std::string stage, const tr::TrainConfig& config,
              const std::vector<fs::path>& inputs)
      : path_(run_dir / "manifest.json"), stage_(std::move(stage)),
        start_(std::chrono::steady_clock::now()) {
    ordered_json manifest = read_manifest(path_);
    manifest["name"] = config.name;
    ordered_json seeds = ordered_json::array();
    for (auto s : tr::run_seeds(config)) seeds.push_back(s);
    ordered_json entry;
    entry["status"] = "running";
    entry["started_at"] = utc_timestamp();
    entry["config"] = tr::config_to_json(config);
    entry["seed"] = config.seed;
    entry["run_seeds"] = seeds;
    ordered_json hashes = ordered_json::object();
    for (const auto& p : inputs) hashes[p.filename().string()] = git_blob_hash(p);
    entry["inputs"] = hashes;
    manifest["stages"][stage_] = entry;
    write_text(path_, manifest.dump(2) + "\n");
  }

  void complete(const ordered_json& outputs) { finish("complete", outputs, ""); }
  void fail(const std::string& message) { finish("failed", ordered_json::object(), message); }

 private:
  void finish(const char* status, const ordered_json& outputs, const std::string& message) {
    ordered_json manifest = read_manifest(path_);
    ordered_json& entry = manifest["stages"][stage_];
    entry["status"] = status;
    entry["finished_at"] = utc_timestamp();
    entry["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (!message.empty()) entry["error"] = message;
    for (const auto& item : outputs.items()) entry[item.key()] = item.value();
    write_text(path_, manifest.dump(2) + "\n");
  }

  fs::path path_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

template <typename Fn>
int guarded(const std::string& stage, std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << stage << ": " << e.what() << '\n';
    return kExitConfigError;
  } catch (const MissingPrerequisite& e) {
    err << "error: " << stage << ": " << e.what() << '\n';
    return kExitMissingPrerequisite;
  } catch (const CorruptData& e) {
    err << "error: " << stage << ": corrupt data (line " << e.line() << "): " << e.what() << '\n';
    return kExitCorruptData;
  } catch (const std::exception& e) {
    err << "error: " << stage << ": " << e.what() << '\n';
    return kExitFailure;
  }
}

// Runs `body` inside a manifest stage record; failures are recorded and
// rethrown.
template <typename Fn>
void recorded(const fs::path& run_dir, const std::string& stage, const tr::TrainConfig& config,
              const std::vector<fs::path>& inputs, Fn&& body) {
  StageRecord record(run_dir, stage, config, inputs);
  try {
    record.complete(body());
  } catch (const std::exception& e) {
    record.fail(e.what());
    throw;
  }
}

fs::path prepare_run_dir(const CommandOptions& options, const tr::TrainConfig& config) {
  fs::path dir = run_directory(options, config);
  fs::create_directories(dir);
  write_text(dir / "config.json", tr::config_to_json(config).dump(2) + "\n");
  return dir;
}

// Demonstrations of the run, checked against the configuration that asks
// for them.
std::vector<expert::Demonstration> load_matching_demos(const fs::path& run_dir,
                                                       const tr::TrainConfig& config) {
  const fs::path path = run_dir / "demos.jsonl";
  if (!fs::exists(path)) {
    throw MissingPrerequisite("no demonstrations at " + path.string() + "; run gen-demos first");
  }
  auto demos = expert::read_demos(path);
  bool matches = static_cast<int>(demos.size()) == config.demo_count;
  for (std::size_t i = 0; matches && i < demos.size(); ++i) {
    matches = demos[i].level == config.level &&
              demos[i].spec_seed == gw::derive_seed(config.seed, expert::kDemoStream, i);
  }
  if (!matches) {
    throw MissingPrerequisite(path.string() +
                              " was generated for a different level, seed or demo_count; "
                              "rerun gen-demos");
  }
  return demos;
}

std::string epoch_file(int epoch) {
  std::ostringstream name;
  name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".jsonl";
  return name.str();
}

ordered_json heatmap_json(int epoch, const analysis::HeatmapGrid& grid) {
  ordered_json j;
  j["epoch"] = epoch;
  j["size"] = grid.size;
  j["open"] = grid.open;
  j["count"] = grid.count;
  return j;
}

analysis::HeatmapGrid parse_heatmap(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot read " + path.string());
  json j = json::parse(in, nullptr, false);
  auto bad = [&](const std::string& why) {
    return CorruptData(path.string() + ": " + why, 1);
  };
  if (j.is_discarded() || !j.is_object()) throw bad("malformed JSON");
  analysis::HeatmapGrid grid;
  try {
    grid.size = j.at("size").get<int>();
    grid.open = j.at("open").get<std::vector<long>>();
    grid.count = j.at("count").get<std::vector<long>>();
  } catch (const json::exception& e) {
    throw bad(e.what());
  }
  const std::size_t cells = static_cast<std::size_t>(grid.size) * grid.size;
  if (grid.size < 1 || grid.open.size() != cells || grid.count.size() != cells) {
    throw bad("grid arrays do not match size");
  }
  for (std::size_t i = 0; i < cells; ++i) {
    if (grid.count[i] < 0 || grid.open[i] < 0 || grid.open[i] > grid.count[i]) {
      throw bad("inconsistent counts");
    }
  }
  return grid;
}

std::vector<std::pair<int, fs::path>> numbered_files(const fs::path& dir, const std::regex& pattern) {
  std::vector<std::pair<int, fs::path>> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && std::regex_match(name, m, pattern)) {
      files.emplace_back(std::stoi(m[1].str()), entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string format_seconds(double s) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << s << " s";
  return out.str();
}

std::string fixed3(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3) << v;
  return out.str();
}

}  // namespace

std::optional<tr::RunMode> parse_baseline(std::string_view name) {
  if (name == "none") return tr::RunMode::kGated;
  if (name == "alone") return tr::RunMode::kAlone;
  if (name == "guided") return tr::RunMode::kGuided;
  return std::nullopt;
}

std::string metrics_file_name(tr::RunMode mode) {
  return mode == tr::RunMode::kGated ? "metrics.csv"
                                     : "metrics_" + std::string(tr::run_mode_name(mode)) + ".csv";
}

std::string batch_log_file_name(tr::RunMode mode) {
  return mode == tr::RunMode::kGated
             ? "train_batches.csv"
             : "train_batches_" + std::string(tr::run_mode_name(mode)) + ".csv";
}

tr::TrainConfig resolve_config(const CommandOptions& options) {
  if (options.config_path.empty()) throw ConfigError("no config file given (--config PATH)");
  std::ifstream in(options.config_path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + options.config_path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) {
    throw ConfigError("config file is not valid JSON: " + options.config_path.string());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  if (options.level) j["level"] = *options.level;
  if (options.lambda) j["lambda"] = *options.lambda;
  if (options.seed) j["seed"] = *options.seed;
  return tr::config_from_json(j);
}

fs::path runs_root(const CommandOptions& options) {
  if (options.runs_root) return *options.runs_root;
  if (const char* env = std::getenv("GUIDEGATE_RUNS_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
  return "runs";
}

fs::path run_directory(const CommandOptions& options, const tr::TrainConfig& config) {
  return runs_root(options) / config.name;
}

std::string git_blob_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot read " + path.string());
  const std::string header = "blob " + std::to_string(fs::file_size(path)) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1) {
    throw std::runtime_error("SHA-1 initialization failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), in.gcount()) != 1) {
      throw std::runtime_error("SHA-1 update failed");
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) throw std::runtime_error("SHA-1 failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

int cmd_gen_demos(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return guarded("gen-demos", err, [&] {
    const auto config = resolve_config(options);
    const fs::path dir = prepare_run_dir(options, config);
    recorded(dir, "gen-demos", config, {dir / "config.json"}, [&] {
      const auto start = std::chrono::steady_clock::now();
      auto demos = expert::generate_demos(config.level, config.demo_count, config.seed, options.jobs);
      expert::write_demos(dir / "demos.jsonl", demos);
      long frames = 0;
      for (const auto& d : demos) frames += d.length();
      out << "gen-demos: " << demos.size() << " " << gw::level_name(config.level)
          << " demonstrations, " << frames << " frames ("
          << format_seconds(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count())
          << ")\n";
      ordered_json outputs;
      outputs["demo_count"] = demos.size();
      outputs["frames"] = frames;
      outputs["outputs"] = {{"demos.jsonl", git_blob_hash(dir / "demos.jsonl")}};
      return outputs;
    });
    return kExitOk;
  });
}

int cmd_pretrain(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return guarded("pretrain", err, [&] {
    const auto config = resolve_config(options);
    const fs::path dir = prepare_run_dir(options, config);
    const auto demos = load_matching_demos(dir, config);
    recorded(dir, "pretrain", config, {dir / "config.json", dir / "demos.jsonl"}, [&] {
      const auto data = tr::build_dataset(demos, options.jobs);
      agents::GuidePretrainModel<float> model;
      model.initialize(tr::guide_init_seed(config));
      std::ostringstream csv;
      csv << "epoch,loss,validation_accuracy,validation_success\n";
      const auto start = std::chrono::steady_clock::now();
      auto history = tr::pretrain_guide(model, data, config, options.jobs,
                                        [&](const tr::PretrainEpoch& e) {
        out << "pretrain epoch " << e.epoch << ": loss " << fixed3(e.loss) << ", accuracy "
            << fixed3(e.validation_accuracy) << ", success " << fixed3(e.validation_success)
            << " (" << format_seconds(std::chrono::duration<double>(
                                          std::chrono::steady_clock::now() - start).count())
            << ")\n" << std::flush;
      });
      for (const auto& e : history) {
        csv << e.epoch << ',' << analysis::format_number(e.loss) << ','
            << analysis::format_number(e.validation_accuracy) << ','
            << analysis::format_number(e.validation_success) << '\n';
      }
      write_text(dir / "pretrain.csv", csv.str());
      fs::create_directories(dir / "checkpoints");
      diffcore::save_checkpoint(model.params(), dir / "checkpoints" / "guide.ckpt", "guide.");
      ordered_json outputs;
      if (!history.empty()) {
        outputs["validation_accuracy"] = history.back().validation_accuracy;
        outputs["validation_success"] = history.back().validation_success;
      }
      outputs["outputs"] = {{"guide.ckpt", git_blob_hash(dir / "checkpoints" / "guide.ckpt")}};
      return outputs;
    });
    return kExitOk;
  });
}

int cmd_train(const CommandOptions& options, tr::RunMode mode, std::ostream& out,
              std::ostream& err) {
  const std::string stage = "train-" + std::string(tr::run_mode_name(mode));
  return guarded(stage, err, [&] {
    const auto config = resolve_config(options);
    const fs::path dir = prepare_run_dir(options, config);
    const auto demos = load_matching_demos(dir, config);
    const fs::path guide_path = dir / "checkpoints" / "guide.ckpt";
    const bool needs_guide = mode != tr::RunMode::kAlone;
    if (needs_guide && !fs::exists(guide_path)) {
      throw MissingPrerequisite("no guide checkpoint at " + guide_path.string() +
                                "; run pretrain first");
    }
    std::vector<fs::path> inputs = {dir / "config.json", dir / "demos.jsonl"};
    if (needs_guide) inputs.push_back(guide_path);

    recorded(dir, stage, config, inputs, [&] {
      const auto data = tr::build_dataset(demos, options.jobs);
      const auto gmode = tr::gate_mode(mode);
      const double lambda = tr::effective_lambda(mode, config);
      const std::string mode_name(tr::run_mode_name(mode));
      const fs::path frames_root = dir / "frames" / mode_name;
      fs::remove_all(frames_root);
      std::ostringstream metrics, batches;
      metrics << tr::metrics_csv_header() << '\n';
      batches << "run_seed,epoch,batch,frames,lambda,loss,ce,guidance_rate,tape_loss\n";
      const auto seeds = tr::run_seeds(config);
      const auto heatmap_spec = tr::heatmap_mission(config);
      ordered_json final_metrics = ordered_json::object();

      for (std::size_t run = 0; run < seeds.size(); ++run) {
        const std::uint64_t run_seed = seeds[run];
        const fs::path frame_dir = frames_root / ("seed_" + std::to_string(run_seed));
        fs::create_directories(frame_dir);
        tr::GatedAgent<float> agent;
        agent.initialize(tr::agent_init_seed(run_seed), config.gate_bias_init);
        if (needs_guide && diffcore::load_checkpoint(agent.params(), guide_path) == 0) {
          throw CorruptData(guide_path.string() + " holds no guide parameters", 0);
        }
        diffcore::Adam<float> adam(diffcore::AdamConfig{config.lr});
        for (int epoch = 0; epoch < config.epochs; ++epoch) {
          const auto start = std::chrono::steady_clock::now();
          std::vector<tr::BatchLog> log;
          const auto train = tr::train_gated_epoch(agent, adam, data, config, mode, epoch, run_seed, &log);
          auto val = tr::validate(agent, config, gmode, lambda, epoch, options.jobs);
          analysis::write_frame_log(frame_dir / epoch_file(epoch), val.frames);
          metrics << tr::metrics_csv_row(run_seed, val.metrics) << '\n';
          for (const auto& b : log) {
            batches << run_seed << ',' << b.epoch << ',' << b.batch << ',' << b.frames << ','
                    << analysis::format_number(lambda) << ',' << analysis::format_number(b.loss)
                    << ',' << analysis::format_number(b.ce) << ','
                    << analysis::format_number(b.guidance_rate) << ','
                    << analysis::format_number(b.tape_loss) << '\n';
          }
          write_text(dir / metrics_file_name(mode), metrics.str());
          write_text(dir / batch_log_file_name(mode), batches.str());
          if (mode == tr::RunMode::kGated && run == 0 && config.heatmap_rollouts > 0) {
            auto grid = tr::build_heatmap(agent, heatmap_spec, config.heatmap_rollouts, config.seed,
                                          gmode, config.batch_episodes, options.jobs);
            write_text(frame_dir / ("heatmap_" + std::to_string(epoch) + ".json"),
                       heatmap_json(epoch, grid).dump() + "\n");
          }
          out << mode_name << " seed " << run_seed << " epoch " << epoch << ": train loss "
              << fixed3(train.mean_total_loss) << " guidance " << fixed3(train.guidance_rate)
              << " | validation success " << fixed3(val.metrics.success_rate.value_or(0.0))
              << " accuracy " << fixed3(val.metrics.accuracy) << " guidance "
              << fixed3(val.metrics.guidance_rate) << " ("
              << format_seconds(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count())
              << ")\n" << std::flush;
          if (epoch + 1 == config.epochs) {
            final_metrics[std::to_string(run_seed)] = {
                {"success_rate", val.metrics.success_rate.value_or(0.0)},
                {"accuracy", val.metrics.accuracy},
                {"guidance_rate", val.metrics.guidance_rate}};
          }
        }
        fs::create_directories(dir / "checkpoints");
        diffcore::save_checkpoint(agent.params(), dir / "checkpoints" /
                                                      (mode_name + "_seed_" + std::to_string(run_seed) + ".ckpt"));
      }
      ordered_json outputs;
      outputs["final"] = final_metrics;
      outputs["outputs"] = {{metrics_file_name(mode), git_blob_hash(dir / metrics_file_name(mode))}};
      return outputs;
    });
    return kExitOk;
  });
}

int cmd_analyze(const fs::path& run_dir, std::ostream& out, std::ostream& err) {
  return guarded("analyze", err, [&] {
    const fs::path frames_root = run_dir / "frames" / "gated";
    if (!fs::is_directory(frames_root)) {
      throw MissingPrerequisite("no gated frame logs under " + frames_root.string());
    }
    std::vector<fs::path> seed_dirs;
    for (const auto& entry : fs::directory_iterator(frames_root)) {
      if (entry.is_directory()) seed_dirs.push_back(entry.path());
    }
    std::sort(seed_dirs.begin(), seed_dirs.end(), [](const fs::path& a, const fs::path& b) {
      auto num = [](const fs::path& p) {
        const std::string s = p.filename().string();
        return s.rfind("seed_", 0) == 0 ? std::stoull(s.substr(5)) : 0ULL;
      };
      return num(a) < num(b);
    });
    analysis::EpochFrames frames;
    std::map<int, analysis::HeatmapGrid> heatmaps;
    const std::regex epoch_pattern(R"(epoch_(\d+)\.jsonl)");
    const std::regex heatmap_pattern(R"(heatmap_(\d+)\.json)");
    for (const auto& seed_dir : seed_dirs) {
      for (const auto& [epoch, path] : numbered_files(seed_dir, epoch_pattern)) {
        auto log = analysis::read_frame_log(path);
        auto& pooled = frames[epoch];
        pooled.insert(pooled.end(), log.begin(), log.end());
      }
      for (const auto& [epoch, path] : numbered_files(seed_dir, heatmap_pattern)) {
        if (!heatmaps.count(epoch)) heatmaps.emplace(epoch, parse_heatmap(path));
      }
    }
    if (frames.empty()) throw MissingPrerequisite("no frame logs under " + frames_root.string());
    const fs::path out_dir = run_dir / "analysis";
    if (fs::is_directory(out_dir)) {
      for (const auto& entry : fs::directory_iterator(out_dir)) {
        if (entry.path().extension() == ".csv") fs::remove(entry.path());
      }
    }
    analysis::write_analysis(frames, heatmaps, out_dir);
    out << "analyze: " << frames.size() << " epochs, " << seed_dirs.size() << " runs -> "
        << out_dir.string() << "\n";
    return kExitOk;
  });
}

int cmd_pipeline(const CommandOptions& options, bool baselines, std::ostream& out,
                 std::ostream& err) {
  std::vector<std::pair<std::string, std::function<int()>>> stages = {
      {"gen-demos", [&] { return cmd_gen_demos(options, out, err); }},
      {"pretrain", [&] { return cmd_pretrain(options, out, err); }},
      {"train", [&] { return cmd_train(options, tr::RunMode::kGated, out, err); }},
  };
  if (baselines) {
    stages.emplace_back("train-alone", [&] { return cmd_train(options, tr::RunMode::kAlone, out, err); });
    stages.emplace_back("train-guided", [&] { return cmd_train(options, tr::RunMode::kGuided, out, err); });
  }
  stages.emplace_back("analyze", [&] {
    int code = guarded("analyze", err, [&] {
      return cmd_analyze(run_directory(options, resolve_config(options)), out, err);
    });
    return code;
  });
  for (auto& [name, fn] : stages) {
    const int code = fn();
    if (code != kExitOk) {
      err << "pipeline aborted at stage " << name << " (exit " << code << ")\n";
      return code;
    }
  }
  return kExitOk;
}

}  // namespace guidegate::cli
