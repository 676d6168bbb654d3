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

#ifndef GUIDEGATE_GRIDWORLD_H_
#define GUIDEGATE_GRIDWORLD_H_

// Single-room gridworld with GoToObj and PutNextLocal missions, synthetic
// template instructions and a 7x7 egocentric view.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace guidegate::gridworld {

enum class Level : std::uint8_t { kGoToObj, kPutNextLocal };
enum class ObjectKind : std::uint8_t { kBall, kBox, kKey };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kPurple, kYellow, kGrey };
// Clockwise order, so turning right is +1 mod 4.
enum class Direction : std::uint8_t { kNorth, kEast, kSouth, kWest };

inline constexpr int kNumKinds = 3;
inline constexpr int kNumColors = 6;
inline constexpr int kNumActions = 7;
inline constexpr int kDefaultGridSize = 8;
inline constexpr int kDefaultMaxSteps = 64;
inline constexpr int kPutNextObjects = 8;

// Action ids. Turn right is 0 and turn left is 1.
enum Action : int {
  kTurnRight = 0,
  kTurnLeft = 1,
  kForward = 2,
  kPickup = 3,
  kDrop = 4,
  kToggle = 5,
  kDone = 6,
};

struct Pos {
  int col = 0;
  int row = 0;
  friend bool operator==(const Pos&, const Pos&) = default;
};

Pos operator+(Pos a, Pos b);
Pos operator-(Pos a, Pos b);
Pos operator*(int k, Pos p);

// Unit vector of a facing direction; rows grow southwards.
Pos direction_vector(Direction d);
Direction turn_right(Direction d);
Direction turn_left(Direction d);

struct WorldObject {
  ObjectKind kind = ObjectKind::kBall;
  Color color = Color::kRed;
  Pos pos;
  bool same_identity(const WorldObject& o) const {
    return kind == o.kind && color == o.color;
  }
  friend bool operator==(const WorldObject&, const WorldObject&) = default;
};

struct MissionSpec {
  Level level = Level::kGoToObj;
  int grid_size = kDefaultGridSize;
  int max_steps = kDefaultMaxSteps;
  std::vector<WorldObject> objects;
  // GoToObj: index of the target. PutNextLocal: index of the object to move.
  int target = 0;
  // PutNextLocal only: index of the object to put the target next to.
  int anchor = -1;
  std::vector<std::string> instruction;
  std::uint64_t seed = 0;

  friend bool operator==(const MissionSpec&, const MissionSpec&) = default;
};

struct EnvState {
  MissionSpec spec;
  // Objects currently lying on the grid.
  std::vector<WorldObject> objects;
  Pos agent_pos;
  Direction agent_dir = Direction::kNorth;
  std::optional<WorldObject> carrying;
  int step_count = 0;
  int max_steps = kDefaultMaxSteps;
  bool done = false;
  bool success = false;

  Pos front_pos() const { return agent_pos + direction_vector(agent_dir); }
  // Index into `objects` of the object at `p`, or -1.
  int object_at(Pos p) const;
  bool is_wall(Pos p) const;
  // Interior cell with no object (the agent's own cell counts as empty).
  bool is_empty(Pos p) const;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

// Channel ids used in the view.
inline constexpr int kKindEmpty = 0;
inline constexpr int kKindWall = 1;
inline constexpr int kKindBall = 2;
inline constexpr int kKindBox = 3;
inline constexpr int kKindKey = 4;
inline constexpr int kNumKindIds = 5;
inline constexpr int kNumColorIds = kNumColors + 1;  // 0 = none
inline constexpr int kNumStateIds = 2;               // 1 = held by the agent

inline constexpr int kViewSize = 7;
inline constexpr int kViewChannels = 3;
inline constexpr int kViewCells = kViewSize * kViewSize;

struct Observation {
  // Row-major view cells, three channels each: kind, color, state.
  std::array<std::int8_t, kViewCells * kViewChannels> grid{};
  std::vector<int> instruction;

  int at(int col, int row, int channel) const {
    return grid[(row * kViewSize + col) * kViewChannels + channel];
  }
  std::int8_t& at(int col, int row, int channel) {
    return grid[(row * kViewSize + col) * kViewChannels + channel];
  }
  friend bool operator==(const Observation&, const Observation&) = default;
};

// Closed vocabulary of template words, sorted alphabetically.
const std::vector<std::string>& vocabulary();
int token_id(std::string_view word);
std::vector<int> tokenize(const std::vector<std::string>& words);

std::string_view kind_name(ObjectKind k);
std::string_view color_name(Color c);
std::string_view level_name(Level level);
// Accepts "GoToObj"/"gotoobj" and "PutNextLocal"/"putnextlocal".
std::optional<Level> parse_level(std::string_view name);

// The object the mission refers to first ("go to X" / "put X next to ...").
const WorldObject& target_object(const MissionSpec& spec);
const WorldObject& anchor_object(const MissionSpec& spec);

MissionSpec generate_mission(Level level, std::uint64_t seed,
                             int grid_size = kDefaultGridSize);

// Places the agent with a pose drawn from `spec.seed`.
EnvState reset(const MissionSpec& spec);
// Same mission, pose drawn from `pose_seed`.
EnvState reset(const MissionSpec& spec, std::uint64_t pose_seed);

// Throws std::logic_error when `state.done`.
EnvState step(const EnvState& state, int action);
void step_in_place(EnvState& state, int action);

Observation observe(const EnvState& state);

// Free interior cells (no object) in row-major order.
std::vector<Pos> free_cells(const EnvState& state);
bool mission_succeeded(const EnvState& state);

// Derives an independent 64-bit seed from (base, stream, index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                          std::uint64_t index);

}  // namespace guidegate::gridworld

#endif  // GUIDEGATE_GRIDWORLD_H_
