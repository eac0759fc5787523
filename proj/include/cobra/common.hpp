// Copyright 2026 The COBRA-lite Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <spdlog/spdlog.h>

namespace cobra {

// Input that does not satisfy a documented precondition (bad file, bad
// config, out-of-range value supplied by the caller).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while running an otherwise valid computation (NaN loss, empty
// candidate set, ...).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every beam of a retrieval request mapped to an empty partition.
class NoCandidatesError : public RuntimeError {
 public:
  NoCandidatesError() : RuntimeError("no candidates retrievable") {}
};

// 64-bit FNV-1a. Stable across platforms and standard libraries, which
// std::hash is not.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Dense vector of item features. Plain value type; cosine consumers
// normalize explicitly.
using DenseVector = std::vector<double>;

}  // namespace cobra
