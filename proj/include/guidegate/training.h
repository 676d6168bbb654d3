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

#ifndef GUIDEGATE_TRAINING_H_
#define GUIDEGATE_TRAINING_H_

// Imitation training of the guide and of the gated learner, greedy
// validation rollouts, and the metrics they report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "guidegate/agents.h"
#include "guidegate/analysis.h"
#include "guidegate/diffcore.h"
#include "guidegate/expert.h"
#include "guidegate/gridworld.h"
#include "json.hpp"

namespace guidegate::training {

using agents::GateMode;
using agents::GatedAgent;
using agents::GuidePretrainModel;
using analysis::FrameRecord;

struct TrainConfig {
  gridworld::Level level = gridworld::Level::kGoToObj;
  double lambda = 0.3;
  int epochs = 60;
  int batch_episodes = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  int demo_count = 20000;
  int validation_episodes = 500;
  double gate_bias_init = 2.0;
  int pretrain_epochs = 10;
  // Independent gated runs, seeded seed, seed + 1, ...
  int runs = 3;
  // Heatmap rollouts per epoch on the first run; 0 disables heatmaps.
  int heatmap_rollouts = 100;
  std::string name = "gotoobj";

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Level defaults: lambda 0.3 and 20000 demos for GoToObj, 0.05 and 50000 for
// PutNextLocal.
TrainConfig default_config(gridworld::Level level);
// Starts from the defaults of the "level" key and overrides the given
// fields. Unknown keys, wrong types and out-of-range values throw ConfigError.
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const TrainConfig& config);
// ConfigError if the file is missing or invalid.
TrainConfig load_config(const std::filesystem::path& path);
// Throws ConfigError describing the first invalid field.
void validate_config(const TrainConfig& config);

std::vector<std::uint64_t> run_seeds(const TrainConfig& config);
std::uint64_t guide_init_seed(const TrainConfig& config);
std::uint64_t agent_init_seed(std::uint64_t run_seed);

// L = L_ce + lambda * g. Negative lambda throws ConfigError.
double gated_loss(double l_ce, int g, double lambda);

// Absent values are written as empty CSV fields.
struct EpochMetrics {
  int epoch = 0;
  std::optional<double> success_rate;
  double accuracy = 0.0;
  double guidance_rate = 0.0;
  std::optional<double> acc_gate_open;
  std::optional<double> acc_gate_closed;
  std::optional<double> acc_forced_open;
  std::optional<double> acc_forced_closed;
  analysis::Quadruple loss;
  analysis::Quadruple entropy;
  double mean_total_loss = 0.0;
  double mean_ce = 0.0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

std::string metrics_csv_header();
std::string metrics_csv_row(std::uint64_t run_seed, const EpochMetrics& m);

// A demonstration replayed into model inputs.
struct Episode {
  std::vector<int> tokens;
  std::vector<gridworld::Observation> observations;
  std::vector<int> labels;
  int length() const { return static_cast<int>(labels.size()); }
};
std::vector<Episode> build_dataset(const std::vector<expert::Demonstration>& demos,
                                   int jobs = 1);

// One optimizer step. loss, ce and guidance_rate are frame means accumulated
// in double, so loss - ce - lambda * guidance_rate is zero up to rounding;
// tape_loss is the single-precision objective that was differentiated.
struct BatchLog {
  int epoch = 0;
  int batch = 0;
  long frames = 0;
  double loss = 0.0;
  double ce = 0.0;
  double guidance_rate = 0.0;
  double tape_loss = 0.0;
};

// Which model is trained: the gated learner, the learner without any guide,
// or the learner that always receives the message (lambda forced to 0).
enum class RunMode { kGated, kAlone, kGuided };
std::string_view run_mode_name(RunMode mode);
GateMode gate_mode(RunMode mode);
double effective_lambda(RunMode mode, const TrainConfig& config);

// One pass over `data` in batches of config.batch_episodes, shuffled by
// (run_seed, epoch). Returns training-frame metrics; success and
// intervention fields stay absent. Throws NonFiniteError on divergence.
EpochMetrics train_gated_epoch(GatedAgent<float>& agent, diffcore::Adam<float>& adam,
                               const std::vector<Episode>& data, const TrainConfig& config,
                               RunMode mode, int epoch, std::uint64_t run_seed,
                               std::vector<BatchLog>* log = nullptr);

// Greedy rollouts from arbitrary start states, batch_size episodes at a time.
struct RolloutResult {
  std::vector<bool> success;
  std::vector<int> length;
  // Ordered by episode, then time.
  std::vector<FrameRecord> frames;
};
RolloutResult rollout(const GatedAgent<float>& agent, const std::vector<gridworld::EnvState>& starts,
                      GateMode mode, int batch_size, int jobs = 1);

// Validation missions: seeds derive_seed(config.seed, kValidationStream, i).
std::vector<gridworld::EnvState> validation_starts(const TrainConfig& config);

struct ValidationResult {
  EpochMetrics metrics;
  std::vector<FrameRecord> frames;
};
ValidationResult validate(const GatedAgent<float>& agent, const TrainConfig& config, GateMode mode,
                          double lambda, int epoch = 0, int jobs = 1);
// Aggregates a frame log into validation metrics.
EpochMetrics summarize(const RolloutResult& result, double lambda, int epoch);

// The fixed heatmap mission and its seeded random start poses.
gridworld::MissionSpec heatmap_mission(const TrainConfig& config);
analysis::HeatmapGrid build_heatmap(const GatedAgent<float>& agent,
                                    const gridworld::MissionSpec& spec, int n_rollouts,
                                    std::uint64_t seed, GateMode mode = GateMode::kNatural,
                                    int batch_size = 64, int jobs = 1);

struct PretrainEpoch {
  int epoch = 0;
  double loss = 0.0;
  double validation_accuracy = 0.0;
  double validation_success = 0.0;
};
// Trains guide + temporary encoder/policy with cross-entropy through the
// message bottleneck; the caller saves the guide.* parameters.
std::vector<PretrainEpoch> pretrain_guide(GuidePretrainModel<float>& model,
                                          const std::vector<Episode>& data,
                                          const TrainConfig& config, int jobs = 1,
                                          const std::function<void(const PretrainEpoch&)>& progress = {});
// Greedy validation of the guide with its temporary policy acting:
// {accuracy, success rate}.
std::pair<double, double> evaluate_pretrained(const GuidePretrainModel<float>& model,
                                              const TrainConfig& config, int jobs = 1);

}  // namespace guidegate::training

#endif  // GUIDEGATE_TRAINING_H_
