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

#include "guidegate/expert.h"

#include <array>
#include <deque>
#include <fstream>
#include <functional>
#include <sstream>

#include "guidegate/errors.h"
#include "guidegate/parallel.h"
#include "json.hpp"

namespace guidegate::expert {

using gridworld::Direction;
using gridworld::EnvState;
using gridworld::Pos;
using gridworld::WorldObject;

namespace {

struct NavPlan {
  int first_action = -1;
  int length = 0;
};

// Breadth-first search over (position, direction) using turn right, turn left
// and forward, in that order. The goal is tested on successors, so a plan
// always has at least one action. Objects do not move while navigating.
NavPlan plan_navigation(const EnvState& state,
                        const std::function<bool(Pos, Direction)>& goal) {
  const int n = state.spec.grid_size;
  auto index = [n](Pos p, Direction d) {
    return (p.row * n + p.col) * 4 + static_cast<int>(d);
  };
  struct Node {
    Pos pos;
    Direction dir;
    int first_action;
    int depth;
  };
  std::vector<char> seen(n * n * 4, 0);
  std::deque<Node> queue;
  queue.push_back({state.agent_pos, state.agent_dir, -1, 0});
  seen[index(state.agent_pos, state.agent_dir)] = 1;
  while (!queue.empty()) {
    Node cur = queue.front();
    queue.pop_front();
    for (int action : {gridworld::kTurnRight, gridworld::kTurnLeft,
                       gridworld::kForward}) {
      Node next = cur;
      next.depth = cur.depth + 1;
      if (cur.first_action < 0) next.first_action = action;
      if (action == gridworld::kTurnRight) {
        next.dir = gridworld::turn_right(cur.dir);
      } else if (action == gridworld::kTurnLeft) {
        next.dir = gridworld::turn_left(cur.dir);
      } else {
        Pos front = cur.pos + gridworld::direction_vector(cur.dir);
        if (state.is_empty(front)) next.pos = front;
      }
      if (goal(next.pos, next.dir)) return {next.first_action, next.depth};
      int key = index(next.pos, next.dir);
      if (seen[key]) continue;
      seen[key] = 1;
      queue.push_back(next);
    }
  }
  throw PlannerFailure("no navigation plan from (" +
                       std::to_string(state.agent_pos.col) + "," +
                       std::to_string(state.agent_pos.row) + ") in mission seed " +
                       std::to_string(state.spec.seed));
}

const WorldObject* find_on_grid(const EnvState& state, const WorldObject& ref) {
  for (const auto& o : state.objects) {
    if (o.same_identity(ref)) return &o;
  }
  return nullptr;
}

bool adjacent(Pos a, Pos b) {
  return std::abs(a.col - b.col) + std::abs(a.row - b.row) == 1;
}

Pos facing(Pos p, Direction d) { return p + gridworld::direction_vector(d); }

int put_next_action(const EnvState& state) {
  const WorldObject& mover = gridworld::target_object(state.spec);
  const WorldObject& anchor = gridworld::anchor_object(state.spec);
  if (state.carrying) {
    if (state.carrying->same_identity(mover)) {
      const WorldObject* a = find_on_grid(state, anchor);
      if (a == nullptr) throw PlannerFailure("anchor object is not on the grid");
      const Pos anchor_pos = a->pos;
      auto drop_spot = [&](Pos p, Direction d) {
        Pos f = facing(p, d);
        return state.is_empty(f) && adjacent(f, anchor_pos);
      };
      if (drop_spot(state.agent_pos, state.agent_dir)) return gridworld::kDrop;
      return plan_navigation(state, drop_spot).first_action;
    }
    // Holding the wrong object: put it down anywhere.
    auto any_spot = [&](Pos p, Direction d) { return state.is_empty(facing(p, d)); };
    if (any_spot(state.agent_pos, state.agent_dir)) return gridworld::kDrop;
    return plan_navigation(state, any_spot).first_action;
  }
  const WorldObject* m = find_on_grid(state, mover);
  if (m == nullptr) throw PlannerFailure("object to move is not on the grid");
  const Pos mover_pos = m->pos;
  if (state.front_pos() == mover_pos) return gridworld::kPickup;
  return plan_navigation(state, [&](Pos p, Direction d) {
           return facing(p, d) == mover_pos;
         }).first_action;
}

NavPlan go_to_plan(const EnvState& state) {
  const WorldObject* target = find_on_grid(state, gridworld::target_object(state.spec));
  if (target == nullptr) throw PlannerFailure("target object is not on the grid");
  const Pos goal = target->pos;
  return plan_navigation(state, [&](Pos p, Direction d) { return facing(p, d) == goal; });
}

}  // namespace

int expert_action(const EnvState& state) {
  if (state.done) throw std::logic_error("expert_action() on a finished episode");
  if (state.spec.level == gridworld::Level::kGoToObj) {
    return go_to_plan(state).first_action;
  }
  return put_next_action(state);
}

int shortest_solution_length(const EnvState& state) {
  if (state.spec.level != gridworld::Level::kGoToObj) {
    throw std::invalid_argument("shortest_solution_length is defined for GoToObj");
  }
  return go_to_plan(state).length;
}

EnvState replay(const Demonstration& demo) {
  auto spec = gridworld::generate_mission(demo.level, demo.spec_seed);
  EnvState state = gridworld::reset(spec);
  for (int a : demo.actions) gridworld::step_in_place(state, a);
  return state;
}

std::vector<Demonstration> generate_demos(gridworld::Level level, int n_episodes,
                                          std::uint64_t seed, int jobs) {
  if (n_episodes < 1) throw std::invalid_argument("n_episodes must be >= 1");
  std::vector<Demonstration> demos(n_episodes);
  parallel_for(n_episodes, jobs, [&](int i) {
    Demonstration d;
    d.level = level;
    d.spec_seed = gridworld::derive_seed(seed, kDemoStream, static_cast<std::uint64_t>(i));
    EnvState state = gridworld::reset(gridworld::generate_mission(level, d.spec_seed));
    while (!state.done) {
      int a = expert_action(state);
      d.actions.push_back(a);
      gridworld::step_in_place(state, a);
    }
    if (!state.success) {
      throw PlannerFailure("expert failed mission seed " + std::to_string(d.spec_seed));
    }
    demos[i] = std::move(d);
  });
  return demos;
}

std::string to_jsonl_line(const Demonstration& demo) {
  nlohmann::ordered_json j;
  j["level"] = std::string(gridworld::level_name(demo.level));
  j["seed"] = demo.spec_seed;
  j["actions"] = demo.actions;
  j["expert"] = true;
  return j.dump();
}

void write_demos(const std::filesystem::path& path,
                 const std::vector<Demonstration>& demos) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& d : demos) out << to_jsonl_line(d) << '\n';
}

std::vector<Demonstration> read_demos(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("demonstration file not found: " + path.string());
  std::vector<Demonstration> demos;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Demonstration d;
      auto level = gridworld::parse_level(j.at("level").get<std::string>());
      if (!level) throw std::runtime_error("unknown level");
      d.level = *level;
      d.spec_seed = j.at("seed").get<std::uint64_t>();
      d.actions = j.at("actions").get<std::vector<int>>();
      for (int a : d.actions) {
        if (a < 0 || a >= gridworld::kNumActions) throw std::runtime_error("bad action");
      }
      demos.push_back(std::move(d));
    } catch (const std::exception& e) {
      throw CorruptData(path.string() + ":" + std::to_string(line_no) + ": " + e.what(),
                        line_no);
    }
  }
  return demos;
}

}  // namespace guidegate::expert
