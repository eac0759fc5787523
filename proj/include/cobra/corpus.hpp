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

// Item/interaction records, JSONL ingestion, k-core filtering, evaluation
// splits and a planted-hierarchy synthetic generator.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/common.hpp"

namespace cobra::corpus {

using Attribute = std::pair<std::string, std::string>;

struct Item {
  std::string item_id;
  std::vector<Attribute> attributes;

  bool operator==(const Item&) const = default;
};

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct UserSequence {
  std::string user_id;
  std::vector<Interaction> events;  // timestamp ascending, stable

  std::vector<std::string> item_ids() const {
    std::vector<std::string> out;
    out.reserve(events.size());
    for (const auto& e : events) out.push_back(e.item_id);
    return out;
  }

  bool operator==(const UserSequence&) const = default;
};

struct DatasetStats {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_interactions = 0;
  double mean_length = 0.0;
  double median_length = 0.0;

  bool operator==(const DatasetStats&) const = default;
};

class Dataset {
 public:
  Dataset() = default;

  // Builds a dataset from raw records. Items keep their given order;
  // sequences are grouped per user (ordered by user_id) and sorted by
  // timestamp with input order breaking ties.
  static Dataset from_records(std::vector<Item> items,
                              const std::vector<Interaction>& interactions) {
    Dataset d;
    for (auto& item : items) {
      if (item.attributes.empty())
        throw ValidationError("item " + item.item_id + " has no attributes");
      if (d.index_.count(item.item_id))
        throw ValidationError("duplicate item " + item.item_id);
      d.index_.emplace(item.item_id, d.items_.size());
      d.items_.push_back(std::move(item));
    }
    std::map<std::string, std::vector<Interaction>> by_user;
    for (const auto& x : interactions) {
      if (!d.index_.count(x.item_id)) throw ValidationError("unknown item " + x.item_id);
      by_user[x.user_id].push_back(x);
    }
    for (auto& [user, events] : by_user) {
      std::stable_sort(events.begin(), events.end(),
                       [](const Interaction& a, const Interaction& b) {
                         return a.timestamp < b.timestamp;
                       });
      d.sequences_.push_back(UserSequence{user, std::move(events)});
    }
    d.refresh_stats();
    return d;
  }

  const std::vector<Item>& items() const { return items_; }
  const std::vector<UserSequence>& sequences() const { return sequences_; }
  const DatasetStats& stats() const { return stats_; }

  bool has_item(const std::string& id) const { return index_.count(id) > 0; }

  const Item& item(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("unknown item " + id);
    return items_[it->second];
  }

  std::size_t item_position(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("unknown item " + id);
    return it->second;
  }

  const UserSequence* find_user(const std::string& user_id) const {
    auto it = std::lower_bound(
        sequences_.begin(), sequences_.end(), user_id,
        [](const UserSequence& s, const std::string& u) { return s.user_id < u; });
    if (it == sequences_.end() || it->user_id != user_id) return nullptr;
    return &*it;
  }

  // All interactions flattened in (user, time) order.
  std::vector<Interaction> interactions() const {
    std::vector<Interaction> out;
    for (const auto& s : sequences_) out.insert(out.end(), s.events.begin(), s.events.end());
    return out;
  }

  bool operator==(const Dataset& o) const {
    return items_ == o.items_ && sequences_ == o.sequences_ && stats_ == o.stats_;
  }

 private:
  void refresh_stats() {
    stats_ = DatasetStats{};
    stats_.n_users = sequences_.size();
    stats_.n_items = items_.size();
    std::vector<std::size_t> lengths;
    for (const auto& s : sequences_) {
      lengths.push_back(s.events.size());
      stats_.n_interactions += s.events.size();
    }
    if (!lengths.empty()) {
      stats_.mean_length =
          static_cast<double>(stats_.n_interactions) / static_cast<double>(lengths.size());
      std::sort(lengths.begin(), lengths.end());
      const std::size_t m = lengths.size() / 2;
      stats_.median_length = lengths.size() % 2
                                 ? static_cast<double>(lengths[m])
                                 : 0.5 * static_cast<double>(lengths[m - 1] + lengths[m]);
    }
  }

  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<UserSequence> sequences_;
  DatasetStats stats_;
};

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed line: " +
                            e.what());
    }
    if (!row.is_object())
      throw ValidationError(path + ":" + std::to_string(lineno) +
                            ": malformed line: expected a JSON object");
    row["__line"] = lineno;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string where(const std::string& path, const nlohmann::json& row) {
  return path + ":" + std::to_string(row.at("__line").get<std::size_t>());
}

}  // namespace detail

inline Dataset load_dataset(const std::string& items_path,
                            const std::string& interactions_path) {
  std::vector<Item> items;
  for (const auto& row : detail::read_jsonl(items_path)) {
    try {
      Item item;
      item.item_id = row.at("item_id").get<std::string>();
      for (const auto& a : row.at("attributes")) {
        if (!a.is_array() || a.size() != 2)
          throw ValidationError("attribute must be a [name, value] pair");
        item.attributes.emplace_back(a[0].get<std::string>(), a[1].get<std::string>());
      }
      items.push_back(std::move(item));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(detail::where(items_path, row) + ": malformed line: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(detail::where(items_path, row) + ": " + e.what());
    }
  }
  std::vector<Interaction> interactions;
  for (const auto& row : detail::read_jsonl(interactions_path)) {
    try {
      interactions.push_back(Interaction{row.at("user_id").get<std::string>(),
                                         row.at("item_id").get<std::string>(),
                                         row.at("ts").get<std::int64_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(detail::where(interactions_path, row) +
                            ": malformed line: " + e.what());
    }
  }
  return Dataset::from_records(std::move(items), interactions);
}

inline void save_dataset(const Dataset& d, const std::string& items_path,
                         const std::string& interactions_path) {
  std::ofstream items(items_path);
  if (!items) throw ValidationError("cannot write " + items_path);
  for (const auto& item : d.items()) {
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& [k, v] : item.attributes) attrs.push_back({k, v});
    items << nlohmann::json{{"item_id", item.item_id}, {"attributes", attrs}}.dump()
          << '\n';
  }
  std::ofstream inter(interactions_path);
  if (!inter) throw ValidationError("cannot write " + interactions_path);
  for (const auto& x : d.interactions())
    inter << nlohmann::json{{"user_id", x.user_id}, {"item_id", x.item_id}, {"ts", x.timestamp}}
                 .dump()
          << '\n';
}

// Iteratively drops users and items with fewer than k interactions until
// nothing changes. Repeat interactions with the same item each count.
inline Dataset filter_k_core(const Dataset& d, int k) {
  if (k < 1) throw ValidationError("k-core requires k >= 1");
  std::vector<Interaction> kept = d.interactions();
  while (true) {
    std::unordered_map<std::string, std::size_t> user_count, item_count;
    for (const auto& x : kept) {
      ++user_count[x.user_id];
      ++item_count[x.item_id];
    }
    std::vector<Interaction> next;
    next.reserve(kept.size());
    for (const auto& x : kept)
      if (user_count[x.user_id] >= static_cast<std::size_t>(k) &&
          item_count[x.item_id] >= static_cast<std::size_t>(k))
        next.push_back(x);
    if (next.size() == kept.size()) break;
    kept = std::move(next);
  }
  if (kept.empty()) throw ValidationError("k-core eliminated all data");
  std::unordered_map<std::string, bool> live;
  for (const auto& x : kept) live[x.item_id] = true;
  std::vector<Item> items;
  for (const auto& item : d.items())
    if (live.count(item.item_id)) items.push_back(item);
  return Dataset::from_records(std::move(items), kept);
}

enum class SplitScheme { kLeaveOneOut, kTemporalCutoff };

struct SplitSpec {
  SplitScheme scheme = SplitScheme::kLeaveOneOut;
  std::int64_t cutoff = 0;  // temporal only: targets are strictly after cutoff
};

struct TestCase {
  std::string user_id;
  std::vector<std::string> history;
  std::string target;

  bool operator==(const TestCase&) const = default;
};

struct Split {
  Dataset train;
  std::vector<TestCase> test;
};

inline Split split(const Dataset& d, const SplitSpec& spec) {
  std::vector<Interaction> train;
  std::vector<TestCase> test;
  std::size_t skipped = 0;
  for (const auto& seq : d.sequences()) {
    const auto& ev = seq.events;
    if (spec.scheme == SplitScheme::kLeaveOneOut) {
      if (ev.size() < 2) {
        train.insert(train.end(), ev.begin(), ev.end());
        ++skipped;
        continue;
      }
      train.insert(train.end(), ev.begin(), ev.end() - 1);
      TestCase tc{seq.user_id, {}, ev.back().item_id};
      for (std::size_t i = 0; i + 1 < ev.size(); ++i) tc.history.push_back(ev[i].item_id);
      test.push_back(std::move(tc));
    } else {
      TestCase tc{seq.user_id, {}, {}};
      for (const auto& x : ev) {
        if (x.timestamp <= spec.cutoff) {
          train.push_back(x);
          tc.history.push_back(x.item_id);
        } else if (tc.target.empty()) {
          tc.target = x.item_id;
        }
      }
      if (tc.history.empty() || tc.target.empty()) {
        ++skipped;
        continue;
      }
      test.push_back(std::move(tc));
    }
  }
  if (skipped > 0)
    spdlog::info("split: {} users without a usable (history, target) pair kept in train only",
                 skipped);
  return Split{Dataset::from_records(d.items(), train), std::move(test)};
}

struct SyntheticConfig {
  int n_users = 1000;
  int n_items = 500;
  int n_categories = 8;
  int n_subcategories = 4;
  int min_seq_len = 5;
  int max_seq_len = 12;
  int vocab_size = 2000;  // filler word pool
  double within_category_prob = 0.8;
  double successor_skew = 1.2;  // Zipf exponent of per-item successor preference
  std::uint64_t seed = 7;
};

struct ItemLabel {
  int category = 0;
  int subcategory = 0;
};

struct SyntheticCorpus {
  Dataset data;
  std::vector<ItemLabel> labels;  // parallel to data.items()
};

namespace detail {

// Uniform in [0, 1) from the top 53 bits; independent of the standard
// library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

inline std::size_t sample_weighted(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = uniform01(rng) * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace detail

inline void validate(const SyntheticConfig& c) {
  if (c.n_users < 1 || c.n_categories < 1 || c.n_subcategories < 1)
    throw ValidationError("synthetic config: counts must be positive");
  if (c.n_items < c.n_categories * c.n_subcategories)
    throw ValidationError("synthetic config: n_items must be >= n_categories * n_subcategories");
  if (c.n_items < 2 || (c.n_categories > 1 && c.n_items / c.n_categories < 2))
    throw ValidationError("synthetic config: every category needs at least two items");
  if (c.min_seq_len < 1 || c.max_seq_len < c.min_seq_len)
    throw ValidationError("synthetic config: bad sequence length range");
  if (c.within_category_prob < 0.0 || c.within_category_prob > 1.0)
    throw ValidationError("synthetic config: within_category_prob must lie in [0, 1]");
  if (c.vocab_size < 1) throw ValidationError("synthetic config: vocab_size must be positive");
}

// Items live in a planted category x subcategory grid. Each item's text
// carries category tokens, style tokens shared by subcategory s of every
// category, one cell token and item-unique tokens. Users walk a
// Markov chain that stays in the current category with the configured
// probability, following a skewed per-item successor preference that
// favours the current subcategory.
inline SyntheticCorpus generate_synthetic_labeled(const SyntheticConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(cfg.seed);
  const int cells = cfg.n_categories * cfg.n_subcategories;
  auto word = [](int w) { return "w" + std::to_string(w); };
  auto pad = [](int v, int width) {
    std::string s = std::to_string(v);
    return std::string(width > static_cast<int>(s.size()) ? width - s.size() : 0, '0') + s;
  };

  std::vector<corpus::Item> items;
  std::vector<ItemLabel> labels;
  std::vector<std::vector<int>> by_category(cfg.n_categories);
  for (int j = 0; j < cfg.n_items; ++j) {
    const int cell = j % cells;
    const int c = cell / cfg.n_subcategories;
    const int s = cell % cfg.n_subcategories;
    const std::string cat = "c" + std::to_string(c);
    const std::string sub = cat + "s" + std::to_string(s);
    const std::string style = "style" + std::to_string(s);
    auto filler = [&] { return word(static_cast<int>(detail::uniform_index(rng, cfg.vocab_size))); };
    corpus::Item item;
    item.item_id = "item" + pad(j, 5);
    item.attributes = {
        {"title", cat + "head " + sub + "head u" + std::to_string(j) + " " + filler()},
        {"category", cat + " " + cat + "kind " + cat + "line"},
        {"subcategory", style + " " + style + "kind " + sub + "kind"},
        {"brand", "b" + std::to_string(detail::uniform_index(rng, 50))},
        {"price", "p" + std::to_string(detail::uniform_index(rng, 5))},
        {"description", filler() + " " + filler() + " v" + std::to_string(j)},
    };
    items.push_back(std::move(item));
    labels.push_back(ItemLabel{c, s});
    by_category[c].push_back(j);
  }

  // Successor preference of each item over the other items of its category:
  // its own subcategory first, each group in random order.
  std::vector<std::vector<int>> succ(cfg.n_items);
  std::vector<std::vector<double>> succ_cdf(cfg.n_items);
  for (int j = 0; j < cfg.n_items; ++j) {
    auto& order = succ[j];
    for (int same = 1; same >= 0; --same) {
      const std::size_t begin = order.size();
      for (int other : by_category[labels[j].category])
        if (other != j && (labels[other].subcategory == labels[j].subcategory) == (same == 1))
          order.push_back(other);
      for (std::size_t i = order.size() - begin; i > 1; --i)
        std::swap(order[begin + i - 1], order[begin + detail::uniform_index(rng, i)]);
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < succ[j].size(); ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), cfg.successor_skew);
      succ_cdf[j].push_back(acc);
    }
  }

  std::vector<Interaction> interactions;
  for (int u = 0; u < cfg.n_users; ++u) {
    const std::string user = "user" + pad(u, 5);
    const int len = cfg.min_seq_len +
                    static_cast<int>(detail::uniform_index(
                        rng, static_cast<std::size_t>(cfg.max_seq_len - cfg.min_seq_len + 1)));
    int cur = static_cast<int>(detail::uniform_index(rng, cfg.n_items));
    for (int t = 0; t < len; ++t) {
      interactions.push_back(Interaction{user, items[cur].item_id, 1000 * u + t});
      const bool stay = detail::uniform01(rng) < cfg.within_category_prob;
      if ((stay || cfg.n_categories == 1) && !succ[cur].empty()) {
        cur = succ[cur][detail::sample_weighted(rng, succ_cdf[cur])];
      } else {
        int next = cur;
        while (labels[next].category == labels[cur].category)
          next = static_cast<int>(detail::uniform_index(rng, cfg.n_items));
        cur = next;
      }
    }
  }
  return SyntheticCorpus{Dataset::from_records(std::move(items), interactions),
                         std::move(labels)};
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  return generate_synthetic_labeled(cfg).data;
}

}  // namespace cobra::corpus
