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

// Causal decoder over the cascaded sparse/dense item stream.
//
// Every history item contributes L ID slots (one per quantizer level)
// followed by one dense slot:
//
//   [id0(1) .. idL-1(1) dense(1)  id0(2) .. idL-1(2) dense(2) ...]
//
// Each slot is its content embedding plus an item-position embedding
// (shared by all slots of one item) plus a type embedding (one type per
// ID level, one for dense). The level-l head reads the slot right before
// ID level l of the next item; the dense head reads the last ID slot of
// the next item, so the dense prediction is conditioned on the full ID.
//
// The two ablation layouts drop one slot kind: kNoId keeps only dense
// slots, kNoDense keeps only ID slots.

#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/autodiff.hpp"
#include "cobra/nn.hpp"
#include "cobra/quantizer.hpp"

namespace cobra::seq {

using ad::Index;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;
using quant::SparseId;

enum class Variant { kFull, kNoId, kNoDense };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoId: return "no-id";
    case Variant::kNoDense: return "no-dense";
  }
  return "full";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "no-id" || s == "no_id") return Variant::kNoId;
  if (s == "no-dense" || s == "no_dense") return Variant::kNoDense;
  throw ValidationError("unknown model variant '" + s + "'");
}

struct DecoderConfig {
  int model_dim = 64;
  int layers = 2;
  int heads = 4;
  int ffn_dim = 128;
  int max_history = 20;
  int embed_dim = 64;  // width of the item encoder's dense vectors
  std::vector<int> codebook_sizes{32, 32, 32};
  Variant variant = Variant::kFull;
  double init_scale = 0.1;
  std::uint64_t seed = 0;

  int levels() const { return static_cast<int>(codebook_sizes.size()); }
  bool uses_ids() const { return variant != Variant::kNoId; }
  bool uses_dense() const { return variant != Variant::kNoDense; }
};

inline nlohmann::json to_json(const DecoderConfig& c) {
  return {{"model_dim", c.model_dim},   {"layers", c.layers},
          {"heads", c.heads},           {"ffn_dim", c.ffn_dim},
          {"max_history", c.max_history}, {"embed_dim", c.embed_dim},
          {"codebook_sizes", c.codebook_sizes}, {"variant", to_string(c.variant)},
          {"init_scale", c.init_scale}, {"seed", c.seed}};
}

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  DecoderConfig c;
  c.model_dim = j.value("model_dim", c.model_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_history = j.value("max_history", c.max_history);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.codebook_sizes = j.value("codebook_sizes", c.codebook_sizes);
  c.variant = variant_from_string(j.value("variant", std::string("full")));
  c.init_scale = j.value("init_scale", c.init_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

enum class SlotKind { kId, kDense };

struct Slot {
  SlotKind kind = SlotKind::kId;
  int level = 0;        // ID slots
  int code = 0;         // ID slots
  Index dense_row = 0;  // dense slots: row of the dense source matrix
  int item_pos = 0;     // item ordinal, shared by all slots of one item
};

// One history element: its sparse ID and the row of its dense vector in
// whatever dense source matrix accompanies the sequence.
struct HistoryEntry {
  SparseId id;
  Index dense_row = 0;
};

struct CascadedSequence {
  std::vector<Slot> slots;
  int history_items = 0;   // complete items
  int pending_levels = 0;  // ID levels of the next item already appended
  int levels = 0;
  Variant variant = Variant::kFull;

  Index size() const { return static_cast<Index>(slots.size()); }
};

inline int slots_per_item(const DecoderConfig& cfg) {
  switch (cfg.variant) {
    case Variant::kFull: return cfg.levels() + 1;
    case Variant::kNoId: return 1;
    case Variant::kNoDense: return cfg.levels();
  }
  return cfg.levels() + 1;
}

// Lays out `history` (oldest first) plus an optional partial ID of the next
// item. Histories longer than max_history keep their most recent items.
inline CascadedSequence build_cascaded_sequence(const DecoderConfig& cfg,
                                                std::vector<HistoryEntry> history,
                                                const std::vector<int>& next_prefix = {}) {
  if (history.empty()) throw ValidationError("cascaded sequence needs a non-empty history");
  if (static_cast<int>(history.size()) > cfg.max_history) {
    spdlog::debug("history of {} items truncated to the most recent {}", history.size(),
                  cfg.max_history);
    history.erase(history.begin(),
                  history.end() - static_cast<std::ptrdiff_t>(cfg.max_history));
  }
  const int L = cfg.levels();
  if (static_cast<int>(next_prefix.size()) > L || (!cfg.uses_ids() && !next_prefix.empty()))
    throw ValidationError("next-item ID prefix longer than the ID depth");
  CascadedSequence s;
  s.levels = L;
  s.variant = cfg.variant;
  s.history_items = static_cast<int>(history.size());
  s.pending_levels = static_cast<int>(next_prefix.size());
  auto push_ids = [&](const std::vector<int>& codes, int pos) {
    for (std::size_t l = 0; l < codes.size(); ++l) {
      if (codes[l] < 0 || codes[l] >= cfg.codebook_sizes[l])
        throw ValidationError("ID code out of range at level " + std::to_string(l));
      s.slots.push_back(Slot{SlotKind::kId, static_cast<int>(l), codes[l], 0, pos});
    }
  };
  for (std::size_t t = 0; t < history.size(); ++t) {
    const int pos = static_cast<int>(t);
    if (cfg.uses_ids()) {
      if (static_cast<int>(history[t].id.codes.size()) != L)
        throw ValidationError("history item ID has wrong level count");
      push_ids(history[t].id.codes, pos);
    }
    if (cfg.uses_dense())
      s.slots.push_back(Slot{SlotKind::kDense, 0, 0, history[t].dense_row, pos});
  }
  push_ids(next_prefix, s.history_items);
  return s;
}

struct TrainingOutputs {
  std::vector<Var> level_logits;                  // per level: P x C_l
  std::vector<std::vector<Index>> level_targets;  // per level: P codes
  Var dense_pred;                                 // P x embed_dim (dense variants)
  std::vector<Index> target_dense_rows;           // P rows into the dense source
  std::vector<int> sequence_of;                   // P: batch row each prediction came from
  Index positions = 0;                            // P = sum over rows of (T - 1)
};

class CascadedDecoder {
 public:
  CascadedDecoder() = default;
  explicit CascadedDecoder(const DecoderConfig& cfg) : cfg_(cfg) {
    if (cfg.model_dim <= 0 || cfg.heads <= 0 || cfg.model_dim % cfg.heads != 0)
      throw ValidationError("decoder: model_dim must be a positive multiple of heads");
    if (cfg.levels() < 1) throw ValidationError("decoder needs at least one ID level");
    if (cfg.max_history < 1) throw ValidationError("decoder: max_history must be positive");
    std::mt19937_64 rng(cfg.seed);
    const int L = cfg.levels();
    if (cfg.uses_ids()) {
      for (int l = 0; l < L; ++l)
        id_emb_.emplace_back("decoder.id_emb" + std::to_string(l),
                             nn::random_normal(cfg.codebook_sizes[l], cfg.model_dim,
                                               cfg.init_scale, rng));
    }
    pos_emb_ = Parameter("decoder.item_pos_emb", nn::random_normal(cfg.max_history + 1,
                                                                  cfg.model_dim,
                                                                  cfg.init_scale, rng));
    type_emb_ = Parameter("decoder.type_emb",
                          nn::random_normal(L + 1, cfg.model_dim, cfg.init_scale, rng));
    if (cfg.uses_dense())
      dense_in_ = nn::Linear("decoder.dense_in", cfg.embed_dim, cfg.model_dim, rng);
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back("decoder.block" + std::to_string(l), cfg.model_dim, cfg.ffn_dim,
                           cfg.heads, rng);
    final_ln_ = nn::LayerNorm("decoder.final_ln", cfg.model_dim);
    if (cfg.uses_ids())
      for (int l = 0; l < L; ++l)
        heads_.emplace_back("decoder.sparse_head" + std::to_string(l), cfg.model_dim,
                            cfg.codebook_sizes[l], rng);
    if (cfg.uses_dense())
      dense_out_ = nn::Linear("decoder.dense_out", cfg.model_dim, cfg.embed_dim, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  int levels() const { return cfg_.levels(); }

  // Slot embeddings of a packed batch. Each sequence occupies `pad_to` rows
  // (or exactly its own length when pad_to is 0); padding rows are zero and
  // excluded from attention via the returned layout.
  Var embed(Tape& t, const std::vector<CascadedSequence>& batch, Var dense_source,
            Index pad_to, ad::AttentionLayout* layout) {
    const int L = levels();
    std::vector<std::vector<Index>> codes(static_cast<std::size_t>(L));
    std::vector<Index> dense_rows, pos, type;
    // For every packed row: (part, row within part); part L is dense,
    // part L+1 is the zero padding row.
    std::vector<std::pair<int, Index>> where;
    layout->segments.clear();
    layout->causal = true;
    Index offset = 0;
    for (const auto& s : batch) {
      if (s.variant != cfg_.variant || s.levels != L)
        throw ValidationError("sequence layout does not match the decoder variant");
      const Index len = pad_to > 0 ? pad_to : s.size();
      if (s.size() > len) throw ValidationError("sequence longer than the padded length");
      for (const Slot& slot : s.slots) {
        if (slot.item_pos > cfg_.max_history)
          throw ValidationError("item position beyond max_history");
        if (slot.kind == SlotKind::kId) {
          where.emplace_back(slot.level, static_cast<Index>(codes[slot.level].size()));
          codes[slot.level].push_back(slot.code);
          type.push_back(slot.level);
        } else {
          where.emplace_back(L, static_cast<Index>(dense_rows.size()));
          dense_rows.push_back(slot.dense_row);
          type.push_back(L);
        }
        pos.push_back(slot.item_pos);
      }
      for (Index i = s.size(); i < len; ++i) {
        where.emplace_back(L + 1, 0);
        pos.push_back(0);
        type.push_back(0);
      }
      layout->segments.push_back(ad::Segment{offset, len, s.size()});
      offset += len;
    }
    std::vector<Var> parts;
    std::vector<Index> part_offset(static_cast<std::size_t>(L + 2), 0);
    Index acc = 0;
    for (int l = 0; l < L; ++l) {
      part_offset[l] = acc;
      if (codes[l].empty()) continue;
      acc += static_cast<Index>(codes[l].size());
      parts.push_back(ad::gather_rows(t.param(id_emb_.at(l)), codes[l]));
    }
    part_offset[L] = acc;
    if (!dense_rows.empty()) {
      acc += static_cast<Index>(dense_rows.size());
      parts.push_back(dense_in_(t, ad::gather_rows(dense_source, dense_rows)));
    }
    part_offset[L + 1] = acc;
    parts.push_back(t.constant(Matrix::Zero(1, cfg_.model_dim)));
    std::vector<Index> order;
    order.reserve(where.size());
    for (const auto& [part, row] : where) order.push_back(part_offset[part] + row);
    Var content = ad::gather_rows(ad::concat_rows(parts), std::move(order));
    return ad::add(ad::add(content, ad::gather_rows(t.param(pos_emb_), std::move(pos))),
                   ad::gather_rows(t.param(type_emb_), std::move(type)));
  }

  Var hidden(Tape& t, Var x, const ad::AttentionLayout& layout) {
    for (auto& b : blocks_) x = b(t, x, layout);
    return final_ln_(t, x);
  }

  Var sparse_head(Tape& t, Var states, int level) {
    if (!cfg_.uses_ids()) throw ValidationError("this decoder variant has no sparse heads");
    return heads_.at(static_cast<std::size_t>(level))(t, states);
  }

  Var dense_head(Tape& t, Var states) {
    if (!cfg_.uses_dense()) throw ValidationError("this decoder variant has no dense head");
    return dense_out_(t, states);
  }

  // Teacher-forced pass over whole sequences: one forward yields every
  // next-item prediction. `items[b]` is the full item list of row b
  // (oldest first); predictions target items 1..T-1 of each row. The batch
  // is padded to its longest row.
  TrainingOutputs forward_training_pass(Tape& t,
                                        const std::vector<std::vector<HistoryEntry>>& items,
                                        Var dense_source) {
    const int L = levels();
    const int stride = slots_per_item(cfg_);
    std::vector<CascadedSequence> seqs;
    Index longest = 0;
    for (const auto& row : items) {
      if (static_cast<int>(row.size()) > cfg_.max_history + 1)
        throw ValidationError("training sequence longer than max_history + 1 items");
      seqs.push_back(build_cascaded_sequence(cfg_, row));
      longest = std::max(longest, seqs.back().size());
    }
    ad::AttentionLayout layout;
    Var h = hidden(t, embed(t, seqs, dense_source, longest, &layout), layout);

    TrainingOutputs out;
    std::vector<std::vector<Index>> sparse_rows(static_cast<std::size_t>(L));
    out.level_targets.resize(static_cast<std::size_t>(L));
    std::vector<Index> dense_query_rows;
    for (std::size_t b = 0; b < items.size(); ++b) {
      const Index base = layout.segments[b].offset;
      const auto& row = items[b];
      for (std::size_t ti = 1; ti < row.size(); ++ti) {
        const Index t0 = static_cast<Index>(ti) * stride;  // first slot of target item
        if (cfg_.uses_ids()) {
          for (int l = 0; l < L; ++l) {
            sparse_rows[l].push_back(base + t0 + l - 1);
            out.level_targets[l].push_back(row[ti].id.codes.at(static_cast<std::size_t>(l)));
          }
        }
        if (cfg_.uses_dense()) {
          const Index q = cfg_.variant == Variant::kNoId ? t0 - 1 : t0 + L - 1;
          dense_query_rows.push_back(base + q);
          out.target_dense_rows.push_back(row[ti].dense_row);
        }
        out.sequence_of.push_back(static_cast<int>(b));
        ++out.positions;
      }
    }
    if (out.positions == 0) return out;
    if (cfg_.uses_ids())
      for (int l = 0; l < L; ++l)
        out.level_logits.push_back(sparse_head(t, ad::gather_rows(h, sparse_rows[l]), l));
    if (cfg_.uses_dense())
      out.dense_pred = dense_head(t, ad::gather_rows(h, dense_query_rows));
    return out;
  }

  // Final hidden state of every sequence (inference).
  Matrix last_states(const std::vector<CascadedSequence>& seqs, const Matrix& dense_source) {
    Tape t(false);
    ad::AttentionLayout layout;
    Var src = t.constant(dense_source.size() ? dense_source : Matrix::Zero(1, cfg_.embed_dim));
    Var h = hidden(t, embed(t, seqs, src, 0, &layout), layout);
    std::vector<Index> last;
    for (const auto& seg : layout.segments) last.push_back(seg.offset + seg.valid - 1);
    return ad::gather_rows(h, last).value();
  }

  // Level-`level` logits for the next item of each sequence. Every sequence
  // must end right before that level's slot.
  Matrix forward_sparse_batch(const std::vector<CascadedSequence>& seqs, int level,
                              const Matrix& dense_source) {
    if (!cfg_.uses_ids()) throw ValidationError("this decoder variant has no sparse heads");
    if (level < 0 || level >= levels()) throw ValidationError("sparse level out of range");
    for (const auto& s : seqs)
      if (s.pending_levels != level)
        throw ValidationError("sequence does not end right before ID level " +
                              std::to_string(level));
    Tape t(false);
    return sparse_head(t, t.constant(last_states(seqs, dense_source)), level).value();
  }

  std::vector<double> forward_sparse(const CascadedSequence& seq, int level,
                                     const Matrix& dense_source) {
    const Matrix z = forward_sparse_batch({seq}, level, dense_source);
    return std::vector<double>(z.data(), z.data() + z.cols());
  }

  // Predicted dense vector for the next item. In the full layout every ID
  // level of the next item must already be appended.
  Matrix forward_dense_batch(const std::vector<CascadedSequence>& seqs,
                             const Matrix& dense_source) {
    if (!cfg_.uses_dense()) throw ValidationError("this decoder variant has no dense head");
    const int need = cfg_.uses_ids() ? levels() : 0;
    for (const auto& s : seqs)
      if (s.pending_levels != need)
        throw ValidationError("dense prediction needs the full next-item ID appended");
    Tape t(false);
    return dense_head(t, t.constant(last_states(seqs, dense_source))).value();
  }

  DenseVector forward_dense(const CascadedSequence& seq, const Matrix& dense_source) {
    const Matrix v = forward_dense_batch({seq}, dense_source);
    return DenseVector(v.data(), v.data() + v.cols());
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& p : id_emb_) f(p);
    f(pos_emb_);
    f(type_emb_);
    if (cfg_.uses_dense()) dense_in_.visit(f);
    for (auto& b : blocks_) b.visit(f);
    final_ln_.visit(f);
    for (auto& h : heads_) h.visit(f);
    if (cfg_.uses_dense()) dense_out_.visit(f);
  }

 private:
  DecoderConfig cfg_;
  std::vector<Parameter> id_emb_;
  Parameter pos_emb_, type_emb_;
  nn::Linear dense_in_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
  std::vector<nn::Linear> heads_;
  nn::Linear dense_out_;
};

}  // namespace cobra::seq
