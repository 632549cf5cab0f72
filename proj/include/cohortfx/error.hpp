/*
 * Copyright 2026 The cohortfx Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cohortfx {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a logistic fit diverges because the classes are separable.
class SeparationError : public Error {
 public:
  explicit SeparationError(const std::string& what) : Error(what) {}
};

/// Pipeline stages, used to tag failures and pick process exit codes.
enum class Stage {
  config = 2,
  io = 3,
  preprocess = 4,
  cohort = 5,
  propensity = 6,
  matching = 7,
  estimation = 8,
  report = 9,
};

inline std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::config: return "config";
    case Stage::io: return "io";
    case Stage::preprocess: return "preprocess";
    case Stage::cohort: return "cohort";
    case Stage::propensity: return "propensity";
    case Stage::matching: return "matching";
    case Stage::estimation: return "estimation";
    case Stage::report: return "report";
  }
  return "unknown";
}

class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& what)
      : Error("[" + std::string(stage_name(stage)) + "] " + what), stage_(stage) {}

  Stage stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return static_cast<int>(stage_); }

 private:
  Stage stage_;
};

}  // namespace cohortfx
