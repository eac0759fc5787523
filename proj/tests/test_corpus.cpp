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

#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cobra/corpus.hpp"
#include "test_util.hpp"

namespace cobra::corpus {
namespace {

using cobra::testing::make_item;
using cobra::testing::temp_dir;

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string items_jsonl(std::initializer_list<const char*> ids) {
  std::string s;
  for (const char* id : ids)
    s += std::string("{\"item_id\":\"") + id + "\",\"attributes\":[[\"title\",\"t " + id + "\"]]}\n";
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(LoadDataset, SortsSequencesPerUser) {
  const auto dir = temp_dir("load");
  write(dir / "items.jsonl", items_jsonl({"i1", "i2", "i3"}));
  write(dir / "inter.jsonl",
        "{\"user_id\":\"u1\",\"item_id\":\"i1\",\"ts\":1}\n"
        "{\"user_id\":\"u1\",\"item_id\":\"i2\",\"ts\":2}\n"
        "{\"user_id\":\"u2\",\"item_id\":\"i3\",\"ts\":5}\n");
  const Dataset d = load_dataset((dir / "items.jsonl").string(), (dir / "inter.jsonl").string());
  ASSERT_EQ(d.sequences().size(), 2u);
  EXPECT_EQ(d.find_user("u1")->item_ids(), (std::vector<std::string>{"i1", "i2"}));
  EXPECT_EQ(d.find_user("u2")->item_ids(), (std::vector<std::string>{"i3"}));
  EXPECT_EQ(d.stats().n_users, 2u);
  EXPECT_EQ(d.stats().n_items, 3u);
  EXPECT_EQ(d.stats().n_interactions, 3u);
  EXPECT_DOUBLE_EQ(d.stats().mean_length, 1.5);
  EXPECT_DOUBLE_EQ(d.stats().median_length, 1.5);
}

TEST(LoadDataset, ShuffledTimestampsAreOrdered) {
  const Dataset d = Dataset::from_records(
      {make_item("a", "x"), make_item("b", "y"), make_item("c", "z")},
      {{"u1", "a", 9}, {"u1", "b", 2}, {"u1", "c", 5}});
  std::vector<std::int64_t> ts;
  for (const auto& e : d.find_user("u1")->events) ts.push_back(e.timestamp);
  EXPECT_EQ(ts, (std::vector<std::int64_t>{2, 5, 9}));
}

TEST(LoadDataset, EqualTimestampsKeepInputOrder) {
  const Dataset d = Dataset::from_records({make_item("a", "x"), make_item("b", "y")},
                                          {{"u1", "b", 3}, {"u1", "a", 3}});
  EXPECT_EQ(d.find_user("u1")->item_ids(), (std::vector<std::string>{"b", "a"}));
}

TEST(LoadDataset, UnknownItemIsNamed) {
  const auto dir = temp_dir("unknown");
  write(dir / "items.jsonl", items_jsonl({"i1"}));
  write(dir / "inter.jsonl", "{\"user_id\":\"u1\",\"item_id\":\"iX\",\"ts\":1}\n");
  try {
    load_dataset((dir / "items.jsonl").string(), (dir / "inter.jsonl").string());
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown item iX"), std::string::npos);
  }
}

TEST(LoadDataset, MalformedLineNamesFileAndLine) {
  const auto dir = temp_dir("malformed");
  write(dir / "items.jsonl", items_jsonl({"i1"}) + "{not json\n");
  write(dir / "inter.jsonl", "");
  try {
    load_dataset((dir / "items.jsonl").string(), (dir / "inter.jsonl").string());
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("items.jsonl:2"), std::string::npos) << msg;
  }
  write(dir / "inter.jsonl", "[1,2]\n");
  write(dir / "items.jsonl", items_jsonl({"i1"}));
  EXPECT_THROW(load_dataset((dir / "items.jsonl").string(), (dir / "inter.jsonl").string()),
               ValidationError);
  write(dir / "inter.jsonl", "{\"user_id\":\"u1\",\"item_id\":\"i1\"}\n");
  try {
    load_dataset((dir / "items.jsonl").string(), (dir / "inter.jsonl").string());
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("inter.jsonl:1"), std::string::npos);
  }
}

TEST(LoadDataset, RejectsDuplicatesAndEmptyAttributes) {
  EXPECT_THROW(Dataset::from_records({make_item("a", "x"), make_item("a", "y")}, {}),
               ValidationError);
  EXPECT_THROW(Dataset::from_records({Item{"a", {}}}, {}), ValidationError);
}

TEST(LoadDataset, SaveRoundTrips) {
  const auto dir = temp_dir("roundtrip");
  SyntheticConfig cfg;
  cfg.n_users = 30;
  cfg.n_items = 40;
  const Dataset d = generate_synthetic(cfg);
  save_dataset(d, (dir / "i.jsonl").string(), (dir / "x.jsonl").string());
  EXPECT_EQ(load_dataset((dir / "i.jsonl").string(), (dir / "x.jsonl").string()), d);
}

TEST(KCore, KOneIsIdentityForInteractedItems) {
  const Dataset d = Dataset::from_records({make_item("i1", "a"), make_item("i2", "b")},
                                          {{"u1", "i1", 1}, {"u2", "i2", 1}});
  EXPECT_EQ(filter_k_core(d, 1), d);
}

TEST(KCore, HandRunFixedPoint) {
  const Dataset d = Dataset::from_records({make_item("i1", "a"), make_item("i2", "b")},
                                          {{"u1", "i1", 1}, {"u1", "i2", 2}, {"u1", "i1", 3},
                                           {"u2", "i2", 1}});
  const Dataset f = filter_k_core(d, 2);
  ASSERT_EQ(f.sequences().size(), 1u);
  EXPECT_EQ(f.find_user("u1")->item_ids(), (std::vector<std::string>{"i1", "i1"}));
  EXPECT_FALSE(f.has_item("i2"));
  EXPECT_EQ(filter_k_core(f, 2), f);
}

TEST(KCore, EmptyResultIsAnError) {
  const Dataset d = Dataset::from_records({make_item("i1", "a")}, {{"u1", "i1", 1}});
  try {
    filter_k_core(d, 3);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("k-core eliminated all data"), std::string::npos);
  }
  EXPECT_THROW(filter_k_core(d, 0), ValidationError);
}

TEST(KCore, OutputIsFixedPointOnSynthetic) {
  SyntheticConfig cfg;
  cfg.n_users = 200;
  cfg.n_items = 120;
  const Dataset f = filter_k_core(generate_synthetic(cfg), 5);
  EXPECT_EQ(filter_k_core(f, 5), f);
}

TEST(Split, LeaveOneOut) {
  const Dataset d = Dataset::from_records(
      {make_item("i1", "a"), make_item("i2", "b"), make_item("i3", "c"), make_item("i4", "d")},
      {{"u1", "i1", 1}, {"u1", "i2", 2}, {"u1", "i3", 3}, {"u2", "i4", 1}});
  const Split s = split(d, SplitSpec{});
  ASSERT_EQ(s.test.size(), 1u);
  EXPECT_EQ(s.test[0], (TestCase{"u1", {"i1", "i2"}, "i3"}));
  EXPECT_EQ(s.train.find_user("u1")->item_ids(), (std::vector<std::string>{"i1", "i2"}));
  EXPECT_EQ(s.train.find_user("u2")->item_ids(), (std::vector<std::string>{"i4"}));
}

TEST(Split, TemporalCutoff) {
  const Dataset d = Dataset::from_records(
      {make_item("a", "x"), make_item("b", "y"), make_item("c", "z")},
      {{"u3", "a", 3}, {"u3", "b", 8}, {"u3", "c", 12}});
  const Split s = split(d, SplitSpec{SplitScheme::kTemporalCutoff, 10});
  ASSERT_EQ(s.test.size(), 1u);
  EXPECT_EQ(s.test[0], (TestCase{"u3", {"a", "b"}, "c"}));
  EXPECT_EQ(s.train.stats().n_interactions, 2u);
}

TEST(Split, NoLeakageOnSynthetic) {
  SyntheticConfig cfg;
  cfg.n_users = 100;
  cfg.n_items = 64;
  const Dataset d = generate_synthetic(cfg);
  const Split s = split(d, SplitSpec{});
  std::set<std::string> users;
  for (const auto& tc : s.test) {
    EXPECT_TRUE(users.insert(tc.user_id).second);
    const auto& full = d.find_user(tc.user_id)->events;
    const auto& train = s.train.find_user(tc.user_id)->events;
    ASSERT_EQ(train.size() + 1, full.size());
    EXPECT_EQ(full.back().item_id, tc.target);
    for (const auto& e : train) EXPECT_LT(e.timestamp, full.back().timestamp);
  }
}

TEST(Synthetic, DeterministicGivenSeed) {
  SyntheticConfig cfg;
  cfg.n_users = 50;
  cfg.n_items = 64;
  const auto dir = temp_dir("det");
  save_dataset(generate_synthetic(cfg), (dir / "a_i").string(), (dir / "a_x").string());
  save_dataset(generate_synthetic(cfg), (dir / "b_i").string(), (dir / "b_x").string());
  EXPECT_EQ(slurp(dir / "a_i"), slurp(dir / "b_i"));
  EXPECT_EQ(slurp(dir / "a_x"), slurp(dir / "b_x"));
  cfg.seed = 8;
  EXPECT_FALSE(generate_synthetic(cfg) == generate_synthetic(SyntheticConfig{50, 64}));
}

TEST(Synthetic, ForcedWithinCategoryWalks) {
  SyntheticConfig cfg;
  cfg.n_users = 100;
  cfg.n_items = 80;
  cfg.n_categories = 4;
  cfg.n_subcategories = 2;
  cfg.within_category_prob = 1.0;
  const auto sc = generate_synthetic_labeled(cfg);
  for (const auto& seq : sc.data.sequences()) {
    std::set<int> cats;
    for (const auto& e : seq.events) cats.insert(sc.labels[sc.data.item_position(e.item_id)].category);
    EXPECT_EQ(cats.size(), 1u) << seq.user_id;
  }
}

TEST(Synthetic, DefaultTransitionFrequencyMatchesConfig) {
  const SyntheticConfig cfg;  // 1000 users, 500 items, 8 x 4, seed 7
  const auto sc = generate_synthetic_labeled(cfg);
  long stay = 0, total = 0;
  for (const auto& seq : sc.data.sequences()) {
    for (std::size_t t = 1; t < seq.events.size(); ++t) {
      const auto a = sc.labels[sc.data.item_position(seq.events[t - 1].item_id)].category;
      const auto b = sc.labels[sc.data.item_position(seq.events[t].item_id)].category;
      stay += a == b;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(stay) / static_cast<double>(total), cfg.within_category_prob,
              0.05);
}

TEST(Synthetic, ItemTextCarriesHierarchyTokens) {
  SyntheticConfig cfg;
  cfg.n_users = 5;
  const auto sc = generate_synthetic_labeled(cfg);
  for (std::size_t i = 0; i < sc.data.items().size(); ++i) {
    const auto& item = sc.data.items()[i];
    const std::string cat = "c" + std::to_string(sc.labels[i].category);
    const std::string sub = cat + "s" + std::to_string(sc.labels[i].subcategory);
    bool has_cat = false, has_sub = false;
    for (const auto& [k, v] : item.attributes) {
      has_cat = has_cat || v.find(cat + "kind") != std::string::npos;
      has_sub = has_sub || v.find(sub + "kind") != std::string::npos;
    }
    EXPECT_TRUE(has_cat && has_sub) << item.item_id;
  }
}

TEST(Synthetic, InfeasibleConfigsRejected) {
  SyntheticConfig cfg;
  cfg.n_items = 10;  // fewer than 8 x 4 cells
  EXPECT_THROW(generate_synthetic(cfg), ValidationError);
  cfg = SyntheticConfig{};
  cfg.min_seq_len = 5;
  cfg.max_seq_len = 3;
  EXPECT_THROW(generate_synthetic(cfg), ValidationError);
  cfg = SyntheticConfig{};
  cfg.within_category_prob = 1.5;
  EXPECT_THROW(generate_synthetic(cfg), ValidationError);
}

}  // namespace
}  // namespace cobra::corpus
