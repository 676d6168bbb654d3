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

#ifndef GUIDEGATE_ANALYSIS_H_
#define GUIDEGATE_ANALYSIS_H_

// Statistics over validation frame logs: guidance rates conditioned on gate,
// action, message, observation type and time, intervention accuracies and
// counterfactual losses/entropies. Everything here except build_heatmap is a
// pure function of the log.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "guidegate/gridworld.h"

namespace guidegate::analysis {

using Distribution = std::array<double, gridworld::kNumActions>;

// One logged validation step. `t` is 1-based and `len` is the length of the
// episode the frame belongs to. msg is {-1, -1} when no guide was evaluated.
struct FrameRecord {
  int ep = 0;
  int t = 1;
  int len = 1;
  gridworld::Pos agent_pos;
  int action = 0;
  int expert = 0;
  int g = 0;
  std::array<int, 2> msg{0, 0};
  Distribution p_nat{};
  Distribution p_open{};
  Distribution p_closed{};
  std::array<int, 2> obs_type{0, 0};

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

// {"ep":..,"t":..,"len":..,"agent_pos":[c,r],"action":..,"expert":..,"g":..,
//  "msg":[w0,w1],"p_nat":[7],"p_open":[7],"p_closed":[7],"obs_type":[d1,d2]}
std::string to_jsonl_line(const FrameRecord& frame);
// Throws std::runtime_error describing the first problem.
FrameRecord parse_frame_line(std::string_view line);
void write_frame_log(const std::filesystem::path& path, std::span<const FrameRecord> frames);
// Throws MissingPrerequisite or CorruptData (with the 1-based line number).
std::vector<FrameRecord> read_frame_log(const std::filesystem::path& path);

// True when p_nat is bitwise p_open (g = 1) or p_closed (g = 0).
bool gate_consistent(const FrameRecord& frame);

// Features (color, kind) shared with the goal object by the objects directly
// left and right of the agent. The goal is the GoToObj target; in
// PutNextLocal it is the object to move, or the anchor while carrying it.
struct ObservationType {
  int d1 = 0;
  int d2 = 0;
  int index() const { return d1 * 3 + d2; }
  friend bool operator==(const ObservationType&, const ObservationType&) = default;
};
ObservationType observation_type(const gridworld::EnvState& state);

// -log p[label], with p clamped below at the smallest positive float.
double cross_entropy_of(const Distribution& p, int label);
// Shannon entropy in nats of p renormalized to sum 1, clamped to [0, ln 7].
double entropy_of(const Distribution& p);
int argmax_of(const Distribution& p);

// Throws std::domain_error on an empty log.
double guidance_rate(std::span<const FrameRecord> frames);
// Fraction of correct actions among frames with g == gate_value; nullopt when
// there are none.
std::optional<double> conditional_accuracy(std::span<const FrameRecord> frames, int gate_value);
// Accuracy of argmax(p_open) (forced_g = 1) or argmax(p_closed) over all frames.
double intervention_accuracy(std::span<const FrameRecord> frames, int forced_g);

struct Quadruple {
  std::optional<double> open_factual;
  std::optional<double> open_counterfactual;
  std::optional<double> closed_factual;
  std::optional<double> closed_counterfactual;
  friend bool operator==(const Quadruple&, const Quadruple&) = default;
};
// Open-gate frames: factual uses p_open, counterfactual p_closed; closed-gate
// frames the other way round.
Quadruple counterfactual_losses(std::span<const FrameRecord> frames);
Quadruple counterfactual_entropies(std::span<const FrameRecord> frames);

struct CategoryRate {
  long count = 0;
  long open = 0;
  double freq = 0.0;           // count / total frames
  std::optional<double> rate;  // open / count, absent when count == 0
};

std::array<CategoryRate, gridworld::kNumActions> guidance_by_action(
    std::span<const FrameRecord> frames);
// Indexed by word0 * 3 + word1. Frames without a message are skipped.
std::array<CategoryRate, 9> guidance_by_message(std::span<const FrameRecord> frames);
// Indexed by ObservationType::index().
std::array<CategoryRate, 9> guidance_by_obs_type(std::span<const FrameRecord> frames);

// k = ceil(10 t / len) for 1 <= t <= len.
int time_quantile(int t, int episode_len);
// Element k-1 is the guidance rate of quantile k.
std::array<std::optional<double>, 10> guidance_by_quantile(std::span<const FrameRecord> frames);

struct HeatmapGrid {
  int size = 0;
  std::vector<long> open;   // sum of g per cell, row-major
  std::vector<long> count;  // visits per cell
  long& open_at(gridworld::Pos p) { return open[p.row * size + p.col]; }
  long& count_at(gridworld::Pos p) { return count[p.row * size + p.col]; }
  std::optional<double> rate(gridworld::Pos p) const;
  long total_visits() const;
  friend bool operator==(const HeatmapGrid&, const HeatmapGrid&) = default;
};
HeatmapGrid heatmap_from_frames(int grid_size, std::span<const FrameRecord> frames);

// Frame logs of one run (or several, pooled) keyed by epoch.
using EpochFrames = std::map<int, std::vector<FrameRecord>>;

// Writes by_action.csv, by_message.csv, by_obstype.csv, quantiles.csv,
// counterfactual.csv and one heatmap_<epoch>.csv per entry of `heatmaps`.
// Missing values are empty fields; observation types that never occur are
// omitted.
void write_analysis(const EpochFrames& frames, const std::map<int, HeatmapGrid>& heatmaps,
                    const std::filesystem::path& out_dir);

// Shortest decimal form that round-trips a double.
std::string format_number(double v);
std::string format_optional(const std::optional<double>& v);

}  // namespace guidegate::analysis

#endif  // GUIDEGATE_ANALYSIS_H_
