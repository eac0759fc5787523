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

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cobra/common.hpp"
#include "cobra/corpus.hpp"

namespace cobra::text {

// Lowercased alphanumeric runs; everything else separates tokens.
inline std::vector<std::string> split_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Every token of the item's flattened attribute text, field names included.
inline std::vector<std::string> item_tokens(const corpus::Item& item) {
  std::vector<std::string> out;
  for (const auto& [field, value] : item.attributes) {
    for (auto& t : split_tokens(field)) out.push_back(std::move(t));
    for (auto& t : split_tokens(value)) out.push_back(std::move(t));
  }
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic hashed bag-of-tokens projection: every token maps to a
// fixed +-1 vector, the item vector is their unit-normalized sum. Used as
// quantizer input so semantic IDs can be fixed before any training.
inline DenseVector bag_of_tokens_embedding(const corpus::Item& item, int dim) {
  if (dim <= 0) throw ValidationError("embedding dimension must be positive");
  DenseVector v(static_cast<std::size_t>(dim), 0.0);
  for (const auto& tok : item_tokens(item)) {
    const std::uint64_t h = fnv1a64(tok);
    for (int i = 0; i < dim; ++i)
      v[static_cast<std::size_t>(i)] +=
          (splitmix64(h + static_cast<std::uint64_t>(i)) & 1ULL) ? 1.0 : -1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
  return v;
}

}  // namespace cobra::text
