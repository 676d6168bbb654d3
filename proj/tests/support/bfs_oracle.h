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

#ifndef GUIDEGATE_TESTS_BFS_ORACLE_H_
#define GUIDEGATE_TESTS_BFS_ORACLE_H_

// A second shortest-path solver for GoToObj, sharing no code with the
// planner or the simulator: its own pose arithmetic, walls and blocking rule.

namespace guidegate::testing {

struct OraclePose {
  int col = 0;
  int row = 0;
  // 0 north, 1 east, 2 south, 3 west.
  int dir = 0;
};

// Fewest turn/forward actions after which the agent faces the object at
// (object_col, object_row) in a grid_size x grid_size room walled on its
// border. Success is judged after each action, so it is at least 1. Returns
// -1 if unreachable.
int oracle_shortest_length(int grid_size, OraclePose start, int object_col, int object_row);

}  // namespace guidegate::testing

#endif  // GUIDEGATE_TESTS_BFS_ORACLE_H_
