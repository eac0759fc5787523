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

// Trainable item text encoder. An item's attributes are flattened to
// [CLS] field value ... [SEP] field value ..., embedded as the sum of
// token, position and token-type embeddings, run through a bidirectional
// transformer encoder, and the [CLS] output is the item's dense vector.

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/autodiff.hpp"
#include "cobra/corpus.hpp"
#include "cobra/nn.hpp"
#include "cobra/text.hpp"

namespace cobra::encoder {

using ad::Index;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

class Vocabulary {
 public:
  static constexpr int kCls = 0;
  static constexpr int kPad = 1;
  static constexpr int kUnk = 2;
  static constexpr int kSep = 3;
  static constexpr int kSpecials = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `content` lists non-special tokens in index order starting at kSpecials.
  explicit Vocabulary(const std::vector<std::string>& content) {
    tokens_ = {"[CLS]", "[PAD]", "[UNK]", "[SEP]"};
    for (const auto& t : content) tokens_.push_back(t);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw ValidationError("duplicate vocabulary token " + tokens_[i]);
    }
  }

  int lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

  nlohmann::json to_json() const {
    return std::vector<std::string>(tokens_.begin() + kSpecials, tokens_.end());
  }
  static Vocabulary from_json(const nlohmann::json& j) {
    return Vocabulary(j.get<std::vector<std::string>>());
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Frequency-ranked (ties lexicographic) tokens of all item texts; keeps
// max_size - 4 content tokens after the four specials.
inline Vocabulary build_vocab(const std::vector<corpus::Item>& items, int max_size) {
  if (max_size <= Vocabulary::kSpecials) throw ValidationError("vocabulary max_size must exceed 4");
  std::map<std::string, long> counts;
  for (const auto& item : items)
    for (const auto& t : text::item_tokens(item)) ++counts[t];
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> keep;
  for (const auto& [tok, n] : ranked) {
    if (static_cast<int>(keep.size()) + Vocabulary::kSpecials >= max_size) break;
    keep.push_back(tok);
  }
  return Vocabulary(keep);
}

inline Vocabulary build_vocab(const corpus::Dataset& d, int max_size) {
  return build_vocab(d.items(), max_size);
}

enum TokenType : int { kSpecialType = 0, kFieldType = 1, kValueType = 2, kTokenTypes = 3 };

struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> types;  // parallel to ids

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

inline TokenSequence tokenize_item(const corpus::Item& item, const Vocabulary& vocab,
                                   int max_item_tokens) {
  if (max_item_tokens < 1) throw ValidationError("max_item_tokens must be positive");
  TokenSequence seq;
  auto push = [&](int id, int type) {
    if (static_cast<int>(seq.ids.size()) < max_item_tokens) {
      seq.ids.push_back(id);
      seq.types.push_back(type);
    }
  };
  push(Vocabulary::kCls, kSpecialType);
  for (std::size_t a = 0; a < item.attributes.size(); ++a) {
    if (a > 0) push(Vocabulary::kSep, kSpecialType);
    for (const auto& t : text::split_tokens(item.attributes[a].first))
      push(vocab.lookup(t), kFieldType);
    for (const auto& t : text::split_tokens(item.attributes[a].second))
      push(vocab.lookup(t), kValueType);
  }
  return seq;
}

struct EncoderConfig {
  int embed_dim = 64;
  int layers = 1;
  int heads = 4;
  int ffn_dim = 128;
  int max_item_tokens = 64;
  double init_scale = 0.1;  // stddev of embedding tables
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"embed_dim", c.embed_dim}, {"layers", c.layers},
          {"heads", c.heads},         {"ffn_dim", c.ffn_dim},
          {"max_item_tokens", c.max_item_tokens}, {"init_scale", c.init_scale},
          {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_item_tokens = j.value("max_item_tokens", c.max_item_tokens);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

class ItemEncoder {
 public:
  ItemEncoder() = default;
  ItemEncoder(const EncoderConfig& cfg, int vocab_size) : cfg_(cfg), vocab_size_(vocab_size) {
    if (cfg.embed_dim <= 0 || cfg.layers < 0 || cfg.heads <= 0 ||
        cfg.embed_dim % cfg.heads != 0)
      throw ValidationError("encoder: embed_dim must be a positive multiple of heads");
    std::mt19937_64 rng(cfg.seed);
    token_emb_ = Parameter("encoder.token_emb",
                           nn::random_normal(vocab_size, cfg.embed_dim, cfg.init_scale, rng));
    pos_emb_ = Parameter("encoder.pos_emb", nn::random_normal(cfg.max_item_tokens, cfg.embed_dim,
                                                              cfg.init_scale, rng));
    type_emb_ = Parameter("encoder.type_emb",
                          nn::random_normal(kTokenTypes, cfg.embed_dim, cfg.init_scale, rng));
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back("encoder.block" + std::to_string(l), cfg.embed_dim, cfg.ffn_dim,
                           cfg.heads, rng);
    final_ln_ = nn::LayerNorm("encoder.final_ln", cfg.embed_dim);
  }

  const EncoderConfig& config() const { return cfg_; }
  int embed_dim() const { return cfg_.embed_dim; }
  int vocab_size() const { return vocab_size_; }

  // Encodes a batch of items packed back to back (no padding needed since
  // attention is confined to each item's own rows). Returns one [CLS]
  // output row per sequence.
  Var encode_batch(Tape& t, const std::vector<TokenSequence>& seqs) {
    std::vector<Index> ids, pos, types, cls_rows;
    ad::AttentionLayout layout;
    layout.causal = false;
    Index offset = 0;
    for (const auto& s : seqs) {
      if (s.ids.empty() || s.ids.front() != Vocabulary::kCls)
        throw ValidationError("token sequence must start with [CLS]");
      if (static_cast<int>(s.ids.size()) > cfg_.max_item_tokens)
        throw ValidationError("token sequence longer than max_item_tokens");
      for (std::size_t i = 0; i < s.ids.size(); ++i) {
        if (s.ids[i] < 0 || s.ids[i] >= vocab_size_)
          throw ValidationError("token id " + std::to_string(s.ids[i]) + " outside vocabulary");
        ids.push_back(s.ids[i]);
        pos.push_back(static_cast<Index>(i));
        types.push_back(s.types.at(i));
      }
      const auto n = static_cast<Index>(s.ids.size());
      layout.segments.push_back(ad::Segment{offset, n, n});
      cls_rows.push_back(offset);
      offset += n;
    }
    if (seqs.empty()) throw ValidationError("encode_batch of no items");
    Var x = ad::add(ad::add(ad::gather_rows(t.param(token_emb_), std::move(ids)),
                            ad::gather_rows(t.param(pos_emb_), std::move(pos))),
                    ad::gather_rows(t.param(type_emb_), std::move(types)));
    for (auto& b : blocks_) x = b(t, x, layout);
    return ad::gather_rows(final_ln_(t, x), std::move(cls_rows));
  }

  DenseVector encode(const TokenSequence& seq) {
    Tape t(false);
    const Matrix& m = encode_batch(t, {seq}).value();
    return DenseVector(m.data(), m.data() + m.cols());
  }

  Matrix encode_all(const std::vector<TokenSequence>& seqs, std::size_t chunk = 256) {
    Matrix out(static_cast<Index>(seqs.size()), cfg_.embed_dim);
    for (std::size_t start = 0; start < seqs.size(); start += chunk) {
      const std::size_t end = std::min(seqs.size(), start + chunk);
      Tape t(false);
      std::vector<TokenSequence> part(seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                      seqs.begin() + static_cast<std::ptrdiff_t>(end));
      out.middleRows(static_cast<Index>(start), static_cast<Index>(end - start)) =
          encode_batch(t, part).value();
    }
    return out;
  }

  template <typename F>
  void visit(F&& f) {
    f(token_emb_);
    f(pos_emb_);
    f(type_emb_);
    for (auto& b : blocks_) b.visit(f);
    final_ln_.visit(f);
  }

 private:
  EncoderConfig cfg_;
  int vocab_size_ = 0;
  Parameter token_emb_, pos_emb_, type_emb_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
};

// embeddings.tsv: item_id followed by embed_dim tab-separated floats.
inline void write_embeddings_tsv(const std::vector<std::string>& item_ids, const Matrix& emb,
                                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out.precision(17);
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    out << item_ids[i];
    for (Index c = 0; c < emb.cols(); ++c) out << '\t' << emb(static_cast<Index>(i), c);
    out << '\n';
  }
}

}  // namespace cobra::encoder
