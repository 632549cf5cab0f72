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

#include <cstdint>
#include <random>

namespace cohortfx::rng {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream `stream` of the master seed. Counter based, so stream i
/// can be produced without generating streams 0..i-1.
inline Engine substream(std::uint64_t seed, std::uint64_t stream) {
  return Engine(splitmix64(splitmix64(seed) ^ splitmix64(stream * 0xd1b54a32d192ed03ULL + 1)));
}

// Stream families, so that e.g. patient 3 and bootstrap replicate 3 never share a stream.
inline constexpr std::uint64_t kPatientStreams = 0x1000000000ULL;
inline constexpr std::uint64_t kFoldStreams = 0x2000000000ULL;
inline constexpr std::uint64_t kBootstrapStreams = 0x3000000000ULL;
inline constexpr std::uint64_t kOracleStreams = 0x4000000000ULL;

inline double normal(Engine& eng, double mean = 0.0, double sd = 1.0) {
  return std::normal_distribution<double>(mean, sd)(eng);
}

inline double uniform(Engine& eng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(eng);
}

inline bool bernoulli(Engine& eng, double p) {
  return uniform(eng) < p;
}

}  // namespace cohortfx::rng
