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

#include "guidegate/gridworld.h"

#include <algorithm>
#include <cctype>
#include <deque>
#include <random>
#include <stdexcept>

namespace guidegate::gridworld {

Pos operator+(Pos a, Pos b) { return {a.col + b.col, a.row + b.row}; }
Pos operator-(Pos a, Pos b) { return {a.col - b.col, a.row - b.row}; }
Pos operator*(int k, Pos p) { return {k * p.col, k * p.row}; }

Pos direction_vector(Direction d) {
  switch (d) {
    case Direction::kNorth: return {0, -1};
    case Direction::kEast: return {1, 0};
    case Direction::kSouth: return {0, 1};
    case Direction::kWest: return {-1, 0};
  }
  return {0, 0};
}

Direction turn_right(Direction d) {
  return static_cast<Direction>((static_cast<int>(d) + 1) % 4);
}

Direction turn_left(Direction d) {
  return static_cast<Direction>((static_cast<int>(d) + 3) % 4);
}

int EnvState::object_at(Pos p) const {
  for (int i = 0; i < static_cast<int>(objects.size()); ++i) {
    if (objects[i].pos == p) return i;
  }
  return -1;
}

bool EnvState::is_wall(Pos p) const {
  const int n = spec.grid_size;
  return p.col <= 0 || p.row <= 0 || p.col >= n - 1 || p.row >= n - 1;
}

bool EnvState::is_empty(Pos p) const {
  return !is_wall(p) && object_at(p) < 0;
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w = {"go",   "to",     "the",   "put",
                                  "next", "red",    "green", "blue",
                                  "purple", "yellow", "grey", "ball",
                                  "box",  "key"};
    std::sort(w.begin(), w.end());
    return w;
  }();
  return words;
}

int token_id(std::string_view word) {
  const auto& vocab = vocabulary();
  auto it = std::lower_bound(vocab.begin(), vocab.end(), word);
  if (it == vocab.end() || *it != word) {
    throw std::invalid_argument("word not in vocabulary: " + std::string(word));
  }
  return static_cast<int>(it - vocab.begin());
}

std::vector<int> tokenize(const std::vector<std::string>& words) {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(token_id(w));
  return ids;
}

std::string_view kind_name(ObjectKind k) {
  static constexpr std::array<std::string_view, kNumKinds> names = {"ball", "box",
                                                                    "key"};
  return names[static_cast<int>(k)];
}

std::string_view color_name(Color c) {
  static constexpr std::array<std::string_view, kNumColors> names = {
      "red", "green", "blue", "purple", "yellow", "grey"};
  return names[static_cast<int>(c)];
}

std::string_view level_name(Level level) {
  return level == Level::kGoToObj ? "GoToObj" : "PutNextLocal";
}

std::optional<Level> parse_level(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "gotoobj") return Level::kGoToObj;
  if (lower == "putnextlocal") return Level::kPutNextLocal;
  return std::nullopt;
}

const WorldObject& target_object(const MissionSpec& spec) {
  return spec.objects.at(spec.target);
}

const WorldObject& anchor_object(const MissionSpec& spec) {
  if (spec.anchor < 0) throw std::logic_error("mission has no anchor object");
  return spec.objects.at(spec.anchor);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                          std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base),
                    static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

constexpr std::uint64_t kGenerationStream = 0x67656e;  // "gen"
constexpr std::uint64_t kPoseStream = 0x706f7365;      // "pose"

std::vector<Pos> interior_cells(int grid_size) {
  std::vector<Pos> cells;
  for (int row = 1; row < grid_size - 1; ++row) {
    for (int col = 1; col < grid_size - 1; ++col) cells.push_back({col, row});
  }
  return cells;
}

bool adjacent(Pos a, Pos b) {
  return std::abs(a.col - b.col) + std::abs(a.row - b.row) == 1;
}

constexpr std::array<Pos, 4> kNeighbours = {Pos{0, -1}, Pos{1, 0}, Pos{0, 1},
                                            Pos{-1, 0}};

// Cells not occupied by objects other than `movable` must form one connected
// region that touches both the movable object and the anchor.
bool layout_solvable(const MissionSpec& spec) {
  const int n = spec.grid_size;
  auto blocked = [&](Pos p) {
    if (p.col <= 0 || p.row <= 0 || p.col >= n - 1 || p.row >= n - 1) return true;
    for (int i = 0; i < static_cast<int>(spec.objects.size()); ++i) {
      if (spec.objects[i].pos == p && i != spec.target) return true;
    }
    return false;
  };
  std::vector<Pos> open;
  for (Pos p : interior_cells(n)) {
    if (!blocked(p)) open.push_back(p);
  }
  if (open.size() < 3) return false;
  std::vector<char> seen(n * n, 0);
  std::deque<Pos> queue{open.front()};
  seen[open.front().row * n + open.front().col] = 1;
  std::size_t reached = 1;
  while (!queue.empty()) {
    Pos p = queue.front();
    queue.pop_front();
    for (Pos d : kNeighbours) {
      Pos q = p + d;
      if (blocked(q) || seen[q.row * n + q.col]) continue;
      seen[q.row * n + q.col] = 1;
      ++reached;
      queue.push_back(q);
    }
  }
  if (reached != open.size()) return false;
  if (spec.anchor >= 0) {
    Pos a = spec.objects[spec.anchor].pos;
    bool touches = std::any_of(kNeighbours.begin(), kNeighbours.end(),
                               [&](Pos d) { return !blocked(a + d); });
    if (!touches) return false;
  }
  return true;
}

}  // namespace

MissionSpec generate_mission(Level level, std::uint64_t seed, int grid_size) {
  if (grid_size < 5) throw std::invalid_argument("grid_size must be >= 5");
  std::mt19937_64 rng(derive_seed(seed, kGenerationStream, 0));
  const int num_objects = level == Level::kGoToObj ? 1 : kPutNextObjects;

  std::vector<std::pair<ObjectKind, Color>> identities;
  for (int k = 0; k < kNumKinds; ++k) {
    for (int c = 0; c < kNumColors; ++c) {
      identities.emplace_back(static_cast<ObjectKind>(k), static_cast<Color>(c));
    }
  }

  MissionSpec spec;
  spec.level = level;
  spec.grid_size = grid_size;
  spec.seed = seed;
  while (true) {
    spec.objects.clear();
    std::vector<Pos> cells = interior_cells(grid_size);
    std::vector<std::pair<ObjectKind, Color>> pool = identities;
    for (int i = 0; i < num_objects; ++i) {
      std::uniform_int_distribution<std::size_t> pick_id(0, pool.size() - 1);
      std::size_t id = pick_id(rng);
      std::uniform_int_distribution<std::size_t> pick_cell(0, cells.size() - 1);
      std::size_t cell = pick_cell(rng);
      spec.objects.push_back({pool[id].first, pool[id].second, cells[cell]});
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(id));
      cells.erase(cells.begin() + static_cast<std::ptrdiff_t>(cell));
    }
    if (level == Level::kGoToObj) {
      spec.target = 0;
      spec.anchor = -1;
    } else {
      std::uniform_int_distribution<int> pick(0, num_objects - 1);
      spec.target = pick(rng);
      do {
        spec.anchor = pick(rng);
      } while (spec.anchor == spec.target);
      if (adjacent(spec.objects[spec.target].pos, spec.objects[spec.anchor].pos)) {
        continue;
      }
    }
    if (layout_solvable(spec)) break;
  }

  const WorldObject& t = spec.objects[spec.target];
  if (level == Level::kGoToObj) {
    spec.instruction = {"go", "to", "the", std::string(color_name(t.color)),
                        std::string(kind_name(t.kind))};
  } else {
    const WorldObject& a = spec.objects[spec.anchor];
    spec.instruction = {"put",  "the",
                        std::string(color_name(t.color)),
                        std::string(kind_name(t.kind)),
                        "next", "to",
                        "the",  std::string(color_name(a.color)),
                        std::string(kind_name(a.kind))};
  }
  return spec;
}

EnvState reset(const MissionSpec& spec) { return reset(spec, spec.seed); }

EnvState reset(const MissionSpec& spec, std::uint64_t pose_seed) {
  EnvState state;
  state.spec = spec;
  state.objects = spec.objects;
  state.max_steps = spec.max_steps;
  std::mt19937_64 rng(derive_seed(pose_seed, kPoseStream, 0));
  std::vector<Pos> cells = free_cells(state);
  std::uniform_int_distribution<std::size_t> pick_cell(0, cells.size() - 1);
  state.agent_pos = cells[pick_cell(rng)];
  std::uniform_int_distribution<int> pick_dir(0, 3);
  state.agent_dir = static_cast<Direction>(pick_dir(rng));
  return state;
}

std::vector<Pos> free_cells(const EnvState& state) {
  std::vector<Pos> cells;
  for (Pos p : interior_cells(state.spec.grid_size)) {
    if (state.object_at(p) < 0) cells.push_back(p);
  }
  return cells;
}

bool mission_succeeded(const EnvState& state) {
  const MissionSpec& spec = state.spec;
  const WorldObject& target = target_object(spec);
  if (spec.level == Level::kGoToObj) {
    int i = state.object_at(state.front_pos());
    return i >= 0 && state.objects[i].same_identity(target);
  }
  const WorldObject& anchor = anchor_object(spec);
  const WorldObject* mover = nullptr;
  const WorldObject* fixed = nullptr;
  for (const auto& o : state.objects) {
    if (o.same_identity(target)) mover = &o;
    if (o.same_identity(anchor)) fixed = &o;
  }
  return mover != nullptr && fixed != nullptr && adjacent(mover->pos, fixed->pos);
}

void step_in_place(EnvState& state, int action) {
  if (state.done) throw std::logic_error("step() called on a finished episode");
  if (action < 0 || action >= kNumActions) {
    throw std::invalid_argument("action id out of range: " + std::to_string(action));
  }
  const Pos front = state.front_pos();
  switch (action) {
    case kTurnRight:
      state.agent_dir = turn_right(state.agent_dir);
      break;
    case kTurnLeft:
      state.agent_dir = turn_left(state.agent_dir);
      break;
    case kForward:
      if (state.is_empty(front)) state.agent_pos = front;
      break;
    case kPickup:
      if (!state.carrying) {
        int i = state.object_at(front);
        if (i >= 0) {
          state.carrying = state.objects[i];
          state.objects.erase(state.objects.begin() + i);
        }
      }
      break;
    case kDrop:
      if (state.carrying && state.is_empty(front)) {
        WorldObject o = *state.carrying;
        o.pos = front;
        state.objects.push_back(o);
        state.carrying.reset();
      }
      break;
    default:  // toggle and done change nothing in these levels
      break;
  }
  ++state.step_count;
  state.success = mission_succeeded(state);
  state.done = state.success || state.step_count >= state.max_steps;
}

EnvState step(const EnvState& state, int action) {
  EnvState next = state;
  step_in_place(next, action);
  return next;
}

Observation observe(const EnvState& state) {
  Observation obs;
  const Pos fwd = direction_vector(state.agent_dir);
  const Pos right = direction_vector(turn_right(state.agent_dir));
  for (int vr = 0; vr < kViewSize; ++vr) {
    for (int vc = 0; vc < kViewSize; ++vc) {
      const int ahead = kViewSize - 1 - vr;
      const int lateral = vc - kViewSize / 2;
      const Pos world = state.agent_pos + ahead * fwd + lateral * right;
      int kind = kKindEmpty, color = 0, held = 0;
      if (ahead == 0 && lateral == 0) {
        if (state.carrying) {
          kind = kKindBall + static_cast<int>(state.carrying->kind);
          color = 1 + static_cast<int>(state.carrying->color);
          held = 1;
        }
      } else if (state.is_wall(world)) {
        kind = kKindWall;
      } else if (int i = state.object_at(world); i >= 0) {
        kind = kKindBall + static_cast<int>(state.objects[i].kind);
        color = 1 + static_cast<int>(state.objects[i].color);
      }
      obs.at(vc, vr, 0) = static_cast<std::int8_t>(kind);
      obs.at(vc, vr, 1) = static_cast<std::int8_t>(color);
      obs.at(vc, vr, 2) = static_cast<std::int8_t>(held);
    }
  }
  obs.instruction = tokenize(state.spec.instruction);
  return obs;
}

}  // namespace guidegate::gridworld
