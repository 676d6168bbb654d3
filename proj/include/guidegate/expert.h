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

#ifndef GUIDEGATE_EXPERT_H_
#define GUIDEGATE_EXPERT_H_

// Scripted planner used as the imitation label source, and the demonstration
// datasets it produces.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "guidegate/gridworld.h"

namespace guidegate::expert {

struct Demonstration {
  std::uint64_t spec_seed = 0;
  gridworld::Level level = gridworld::Level::kGoToObj;
  std::vector<int> actions;
  int length() const { return static_cast<int>(actions.size()); }
  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

// Optimal-length action for GoToObj (ties: lowest action id first) and a
// phase plan for PutNextLocal. Throws PlannerFailure if no plan exists.
int expert_action(const gridworld::EnvState& state);

// Length of the shortest GoToObj solution from `state`, by the planner.
int shortest_solution_length(const gridworld::EnvState& state);

// Episode i uses mission seed derive_seed(seed, kDemoStream, i).
inline constexpr std::uint64_t kDemoStream = 0;
inline constexpr std::uint64_t kValidationStream = 1;
inline constexpr std::uint64_t kHeatmapStream = 2;

std::vector<Demonstration> generate_demos(gridworld::Level level, int n_episodes,
                                          std::uint64_t seed, int jobs = 1);

// Replays a demonstration from reset; returns the final state.
gridworld::EnvState replay(const Demonstration& demo);

// One JSON object per line:
// {"level":"GoToObj","seed":123,"actions":[...],"expert":true}
std::string to_jsonl_line(const Demonstration& demo);
void write_demos(const std::filesystem::path& path,
                 const std::vector<Demonstration>& demos);
// Throws MissingPrerequisite if absent and CorruptData on a bad line.
std::vector<Demonstration> read_demos(const std::filesystem::path& path);

}  // namespace guidegate::expert

#endif  // GUIDEGATE_EXPERT_H_
