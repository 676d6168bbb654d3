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

#ifndef GUIDEGATE_ERRORS_H_
#define GUIDEGATE_ERRORS_H_

#include <stdexcept>
#include <string>

namespace guidegate {

// Process exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitMissingPrerequisite = 3;
inline constexpr int kExitCorruptData = 4;

// Invalid or unreadable configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file another stage should have produced does not exist.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A data file exists but cannot be parsed. `line` is 1-based, 0 if unknown.
class CorruptData : public std::runtime_error {
 public:
  CorruptData(const std::string& what, long line)
      : std::runtime_error(what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// The expert planner found no plan from a state.
class PlannerFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Loss or gradient became NaN/inf during optimization.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace guidegate

#endif  // GUIDEGATE_ERRORS_H_
