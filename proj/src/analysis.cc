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

#include "guidegate/analysis.h"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "guidegate/errors.h"
#include "json.hpp"

namespace guidegate::analysis {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json pair_json(int a, int b) { return ordered_json::array({a, b}); }

ordered_json dist_json(const Distribution& p) {
  ordered_json out = ordered_json::array();
  for (double v : p) out.push_back(v);
  return out;
}

int get_int(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw std::runtime_error(std::string("missing key \"") + key + "\"");
  if (!it->is_number_integer()) throw std::runtime_error(std::string("\"") + key + "\" is not an integer");
  return it->get<int>();
}

std::array<int, 2> get_pair(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw std::runtime_error(std::string("missing key \"") + key + "\"");
  if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_integer() ||
      !(*it)[1].is_number_integer()) {
    throw std::runtime_error(std::string("\"") + key + "\" is not a pair of integers");
  }
  return {(*it)[0].get<int>(), (*it)[1].get<int>()};
}

Distribution get_dist(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw std::runtime_error(std::string("missing key \"") + key + "\"");
  if (!it->is_array() || it->size() != gridworld::kNumActions) {
    throw std::runtime_error(std::string("\"") + key + "\" must hold 7 numbers");
  }
  Distribution p{};
  for (int i = 0; i < gridworld::kNumActions; ++i) {
    if (!(*it)[i].is_number()) throw std::runtime_error(std::string("\"") + key + "\" must hold numbers");
    p[i] = (*it)[i].get<double>();
  }
  return p;
}

int shared_features(const gridworld::EnvState& state, gridworld::Pos cell,
                    const gridworld::WorldObject& goal) {
  int idx = state.object_at(cell);
  if (idx < 0) return 0;
  const auto& o = state.objects[idx];
  return (o.color == goal.color ? 1 : 0) + (o.kind == goal.kind ? 1 : 0);
}

template <std::size_t N, typename Key>
std::array<CategoryRate, N> bucket_rates(std::span<const FrameRecord> frames, Key key) {
  std::array<CategoryRate, N> out{};
  long total = 0;
  for (const auto& f : frames) {
    int k = key(f);
    if (k < 0) continue;
    if (k >= static_cast<int>(N)) throw std::out_of_range("category index out of range");
    ++out[k].count;
    out[k].open += f.g;
    ++total;
  }
  for (auto& c : out) {
    c.freq = total > 0 ? static_cast<double>(c.count) / static_cast<double>(total) : 0.0;
    if (c.count > 0) c.rate = static_cast<double>(c.open) / static_cast<double>(c.count);
  }
  return out;
}

std::optional<double> mean_or_missing(double sum, long n) {
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

template <typename Fn>
Quadruple bucketed_means(std::span<const FrameRecord> frames, Fn metric) {
  double s[4] = {0, 0, 0, 0};
  long n_open = 0, n_closed = 0;
  for (const auto& f : frames) {
    if (f.g == 1) {
      s[0] += metric(f.p_open, f.expert);
      s[1] += metric(f.p_closed, f.expert);
      ++n_open;
    } else {
      s[2] += metric(f.p_closed, f.expert);
      s[3] += metric(f.p_open, f.expert);
      ++n_closed;
    }
  }
  return {mean_or_missing(s[0], n_open), mean_or_missing(s[1], n_open),
          mean_or_missing(s[2], n_closed), mean_or_missing(s[3], n_closed)};
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

std::string to_jsonl_line(const FrameRecord& f) {
  ordered_json j;
  j["ep"] = f.ep;
  j["t"] = f.t;
  j["len"] = f.len;
  j["agent_pos"] = pair_json(f.agent_pos.col, f.agent_pos.row);
  j["action"] = f.action;
  j["expert"] = f.expert;
  j["g"] = f.g;
  j["msg"] = pair_json(f.msg[0], f.msg[1]);
  j["p_nat"] = dist_json(f.p_nat);
  j["p_open"] = dist_json(f.p_open);
  j["p_closed"] = dist_json(f.p_closed);
  j["obs_type"] = pair_json(f.obs_type[0], f.obs_type[1]);
  return j.dump();
}

FrameRecord parse_frame_line(std::string_view line) {
  json j = json::parse(line.begin(), line.end(), nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("malformed JSON");
  if (!j.is_object()) throw std::runtime_error("frame record is not a JSON object");
  FrameRecord f;
  f.ep = get_int(j, "ep");
  f.t = get_int(j, "t");
  f.len = get_int(j, "len");
  auto pos = get_pair(j, "agent_pos");
  f.agent_pos = {pos[0], pos[1]};
  f.action = get_int(j, "action");
  f.expert = get_int(j, "expert");
  f.g = get_int(j, "g");
  f.msg = get_pair(j, "msg");
  f.p_nat = get_dist(j, "p_nat");
  f.p_open = get_dist(j, "p_open");
  f.p_closed = get_dist(j, "p_closed");
  f.obs_type = get_pair(j, "obs_type");
  if (f.t < 1 || f.t > f.len) throw std::runtime_error("t outside 1..len");
  if (f.g != 0 && f.g != 1) throw std::runtime_error("g must be 0 or 1");
  if (f.action < 0 || f.action >= gridworld::kNumActions || f.expert < 0 ||
      f.expert >= gridworld::kNumActions) {
    throw std::runtime_error("action id out of range");
  }
  for (int w : f.msg) {
    if (w < -1 || w > 2) throw std::runtime_error("message word out of range");
  }
  for (int d : f.obs_type) {
    if (d < 0 || d > 2) throw std::runtime_error("observation type out of range");
  }
  return f;
}

void write_frame_log(const std::filesystem::path& path, std::span<const FrameRecord> frames) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& f : frames) out << to_jsonl_line(f) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<FrameRecord> read_frame_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("frame log not found: " + path.string());
  std::vector<FrameRecord> frames;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    try {
      frames.push_back(parse_frame_line(line));
    } catch (const std::exception& e) {
      throw CorruptData(path.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return frames;
}

bool gate_consistent(const FrameRecord& f) {
  const Distribution& ref = f.g == 1 ? f.p_open : f.p_closed;
  for (int i = 0; i < gridworld::kNumActions; ++i) {
    if (std::bit_cast<std::uint64_t>(f.p_nat[i]) != std::bit_cast<std::uint64_t>(ref[i])) return false;
  }
  return true;
}

ObservationType observation_type(const gridworld::EnvState& state) {
  const auto& spec = state.spec;
  gridworld::WorldObject goal = gridworld::target_object(spec);
  if (spec.level == gridworld::Level::kPutNextLocal && state.carrying &&
      state.carrying->same_identity(goal)) {
    goal = gridworld::anchor_object(spec);
  }
  auto left = state.agent_pos + gridworld::direction_vector(gridworld::turn_left(state.agent_dir));
  auto right = state.agent_pos + gridworld::direction_vector(gridworld::turn_right(state.agent_dir));
  return {shared_features(state, left, goal), shared_features(state, right, goal)};
}

double cross_entropy_of(const Distribution& p, int label) {
  double v = std::max(p.at(label), static_cast<double>(std::numeric_limits<float>::denorm_min()));
  return -std::log(v);
}

double entropy_of(const Distribution& p) {
  double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0.0)) throw std::domain_error("distribution has no mass");
  double h = 0.0;
  for (double v : p) {
    double q = v / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return std::clamp(h, 0.0, std::log(static_cast<double>(gridworld::kNumActions)));
}

int argmax_of(const Distribution& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double guidance_rate(std::span<const FrameRecord> frames) {
  if (frames.empty()) throw std::domain_error("guidance rate of an empty frame set is undefined");
  long open = 0;
  for (const auto& f : frames) open += f.g;
  return static_cast<double>(open) / static_cast<double>(frames.size());
}

std::optional<double> conditional_accuracy(std::span<const FrameRecord> frames, int gate_value) {
  long n = 0, correct = 0;
  for (const auto& f : frames) {
    if (f.g != gate_value) continue;
    ++n;
    correct += f.action == f.expert ? 1 : 0;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(n);
}

double intervention_accuracy(std::span<const FrameRecord> frames, int forced_g) {
  if (frames.empty()) throw std::domain_error("accuracy of an empty frame set is undefined");
  long correct = 0;
  for (const auto& f : frames) {
    const Distribution& p = forced_g == 1 ? f.p_open : f.p_closed;
    correct += argmax_of(p) == f.expert ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(frames.size());
}

Quadruple counterfactual_losses(std::span<const FrameRecord> frames) {
  return bucketed_means(frames, [](const Distribution& p, int label) {
    return cross_entropy_of(p, label);
  });
}

Quadruple counterfactual_entropies(std::span<const FrameRecord> frames) {
  return bucketed_means(frames, [](const Distribution& p, int) { return entropy_of(p); });
}

std::array<CategoryRate, gridworld::kNumActions> guidance_by_action(
    std::span<const FrameRecord> frames) {
  return bucket_rates<gridworld::kNumActions>(frames, [](const FrameRecord& f) { return f.action; });
}

std::array<CategoryRate, 9> guidance_by_message(std::span<const FrameRecord> frames) {
  return bucket_rates<9>(frames, [](const FrameRecord& f) {
    return f.msg[0] < 0 ? -1 : f.msg[0] * 3 + f.msg[1];
  });
}

std::array<CategoryRate, 9> guidance_by_obs_type(std::span<const FrameRecord> frames) {
  return bucket_rates<9>(frames, [](const FrameRecord& f) {
    return f.obs_type[0] * 3 + f.obs_type[1];
  });
}

int time_quantile(int t, int episode_len) {
  if (episode_len < 1 || t < 1 || t > episode_len) {
    throw std::invalid_argument("time_quantile: need 1 <= t <= len");
  }
  return (10 * t + episode_len - 1) / episode_len;
}

std::array<std::optional<double>, 10> guidance_by_quantile(std::span<const FrameRecord> frames) {
  auto buckets = bucket_rates<10>(frames, [](const FrameRecord& f) {
    return time_quantile(f.t, f.len) - 1;
  });
  std::array<std::optional<double>, 10> out;
  for (int k = 0; k < 10; ++k) out[k] = buckets[k].rate;
  return out;
}

std::optional<double> HeatmapGrid::rate(gridworld::Pos p) const {
  long n = count[p.row * size + p.col];
  if (n == 0) return std::nullopt;
  return static_cast<double>(open[p.row * size + p.col]) / static_cast<double>(n);
}

long HeatmapGrid::total_visits() const { return std::accumulate(count.begin(), count.end(), 0L); }

HeatmapGrid heatmap_from_frames(int grid_size, std::span<const FrameRecord> frames) {
  HeatmapGrid grid{grid_size, std::vector<long>(grid_size * grid_size, 0),
                   std::vector<long>(grid_size * grid_size, 0)};
  for (const auto& f : frames) {
    if (f.agent_pos.col < 0 || f.agent_pos.col >= grid_size || f.agent_pos.row < 0 ||
        f.agent_pos.row >= grid_size) {
      throw std::out_of_range("agent position outside the grid");
    }
    grid.open_at(f.agent_pos) += f.g;
    ++grid.count_at(f.agent_pos);
  }
  return grid;
}

std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_number(*v) : std::string();
}

void write_analysis(const EpochFrames& frames, const std::map<int, HeatmapGrid>& heatmaps,
                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto by_action = open_csv(out_dir / "by_action.csv");
  auto by_message = open_csv(out_dir / "by_message.csv");
  auto by_obstype = open_csv(out_dir / "by_obstype.csv");
  auto quantiles = open_csv(out_dir / "quantiles.csv");
  auto counterfactual = open_csv(out_dir / "counterfactual.csv");
  by_action << "epoch,action,rate,freq\n";
  by_message << "epoch,word0,word1,rate,freq\n";
  by_obstype << "epoch,d1,d2,rate,freq\n";
  quantiles << "epoch,k,rate\n";
  counterfactual << "epoch,bucket,loss,entropy\n";

  for (const auto& [epoch, log] : frames) {
    if (log.empty()) continue;
    std::span<const FrameRecord> fs(log);
    auto actions = guidance_by_action(fs);
    for (int a = 0; a < gridworld::kNumActions; ++a) {
      by_action << epoch << ',' << a << ',' << format_optional(actions[a].rate) << ','
                << format_number(actions[a].freq) << '\n';
    }
    auto messages = guidance_by_message(fs);
    for (int m = 0; m < 9; ++m) {
      by_message << epoch << ',' << m / 3 << ',' << m % 3 << ','
                 << format_optional(messages[m].rate) << ',' << format_number(messages[m].freq)
                 << '\n';
    }
    auto types = guidance_by_obs_type(fs);
    for (int k = 0; k < 9; ++k) {
      if (types[k].count == 0) continue;
      by_obstype << epoch << ',' << k / 3 << ',' << k % 3 << ',' << format_optional(types[k].rate)
                 << ',' << format_number(types[k].freq) << '\n';
    }
    auto q = guidance_by_quantile(fs);
    for (int k = 0; k < 10; ++k) {
      quantiles << epoch << ',' << k + 1 << ',' << format_optional(q[k]) << '\n';
    }
    auto loss = counterfactual_losses(fs);
    auto ent = counterfactual_entropies(fs);
    const std::pair<const char*, std::pair<std::optional<double>, std::optional<double>>> rows[] = {
        {"open_factual", {loss.open_factual, ent.open_factual}},
        {"open_counterfactual", {loss.open_counterfactual, ent.open_counterfactual}},
        {"closed_factual", {loss.closed_factual, ent.closed_factual}},
        {"closed_counterfactual", {loss.closed_counterfactual, ent.closed_counterfactual}},
    };
    for (const auto& [name, values] : rows) {
      counterfactual << epoch << ',' << name << ',' << format_optional(values.first) << ','
                     << format_optional(values.second) << '\n';
    }
  }

  for (const auto& [epoch, grid] : heatmaps) {
    auto out = open_csv(out_dir / ("heatmap_" + std::to_string(epoch) + ".csv"));
    out << "row,col,rate,count\n";
    for (int r = 0; r < grid.size; ++r) {
      for (int c = 0; c < grid.size; ++c) {
        gridworld::Pos p{c, r};
        out << r << ',' << c << ',' << format_optional(grid.rate(p)) << ','
            << grid.count[r * grid.size + c] << '\n';
      }
    }
  }
}

}  // namespace guidegate::analysis
