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

// Coarse-to-fine retrieval:
//
//   1. beam search the top-M sparse IDs of the next item,
//   2. append each ID to the history and predict a refined dense query,
//   3. scan the ID's candidate partition C(ID) for the N nearest items,
//   4. score every candidate with BeamFusion
//        Phi = softmax_beams(tau * phi_beam) * softmax_in_beam(psi * cos),
//   5. keep the global top K.
//
// Both softmaxes are taken in log space, so ranking by log Phi never
// degenerates into ties through underflow at large psi.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cobra/autodiff.hpp"
#include "cobra/model.hpp"
#include "cobra/quantizer.hpp"

namespace cobra::retrieval {

using ad::Index;
using ad::Matrix;
using quant::SparseId;

struct BeamHypothesis {
  SparseId id;
  double score = 0.0;  // sum of per-level log-probabilities
};

struct Candidate {
  std::string item_id;
  double cosine = 0.0;
};

struct FusedCandidate {
  std::string item_id;
  int beam = 0;
  double cosine = 0.0;
  double phi = 0.0;      // ranking score (BeamFusion Phi for the full path)
  double log_phi = 0.0;  // log of phi; the sort key
};

struct FusionConfig {
  int m = 10;  // beams
  int n = 50;  // candidates per beam
  int k = 10;  // final list length
  double tau = 0.9;
  double psi = 16.0;

  void validate() const {
    if (m < 1 || n < 1 || k < 1) throw ValidationError("fusion config: M, N, K must be >= 1");
    if (tau < 0.0 || psi < 0.0) throw ValidationError("fusion config: tau, psi must be >= 0");
  }
};

enum class Ablation { kNone, kNoBeamFusion };

inline Ablation ablation_from_string(const std::string& s) {
  if (s == "none") return Ablation::kNone;
  if (s == "no-beamfusion" || s == "no_beamfusion") return Ablation::kNoBeamFusion;
  throw ValidationError("unknown ablation '" + s + "'");
}

struct IndexedItem {
  std::string item_id;
  SparseId id;
  DenseVector raw;   // encoder output, as fed to the decoder
  DenseVector unit;  // unit-normalized, for cosine search
};

// Items partitioned by sparse ID. Exact scan stands in for ANN; lookups of
// IDs with no items return an empty partition.
class CandidateIndex {
 public:
  CandidateIndex() = default;

  void add(IndexedItem item) {
    if (position_.count(item.item_id)) throw ValidationError("duplicate item " + item.item_id);
    position_.emplace(item.item_id, items_.size());
    partitions_[item.id].push_back(items_.size());
    items_.push_back(std::move(item));
  }

  const std::vector<std::size_t>& partition(const SparseId& id) const {
    static const std::vector<std::size_t> kEmpty;
    auto it = partitions_.find(id);
    return it == partitions_.end() ? kEmpty : it->second;
  }

  const IndexedItem& item(std::size_t i) const { return items_.at(i); }
  const IndexedItem& item(const std::string& item_id) const {
    auto it = position_.find(item_id);
    if (it == position_.end()) throw ValidationError("unknown item " + item_id);
    return items_[it->second];
  }
  bool contains(const std::string& item_id) const { return position_.count(item_id) > 0; }
  std::size_t size() const { return items_.size(); }
  const std::map<SparseId, std::vector<std::size_t>>& partitions() const { return partitions_; }

 private:
  std::vector<IndexedItem> items_;
  std::map<std::string, std::size_t> position_;
  std::map<SparseId, std::vector<std::size_t>> partitions_;
};

// Encodes every assigned item with the current encoder and partitions the
// catalog by its (frozen) sparse ID.
inline CandidateIndex build_index(const quant::CorpusAssignment& assignment,
                                  const std::vector<encoder::TokenSequence>& tokens,
                                  encoder::ItemEncoder& enc) {
  if (tokens.size() != assignment.item_ids.size())
    throw ValidationError("build_index: one token sequence per assigned item required");
  const Matrix emb = enc.encode_all(tokens);
  CandidateIndex index;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    IndexedItem it;
    it.item_id = assignment.item_ids[i];
    it.id = assignment.ids[i];
    const auto row = emb.row(static_cast<Index>(i));
    it.raw.assign(row.data(), row.data() + row.size());
    const double norm = row.norm();
    if (!(norm > 0.0)) throw RuntimeError("item " + it.item_id + " has a zero-norm embedding");
    it.unit = it.raw;
    for (double& x : it.unit) x /= norm;
    index.add(std::move(it));
  }
  return index;
}

inline CandidateIndex build_index(CobraModel& model, const corpus::Dataset& catalog,
                                  const quant::CorpusAssignment& assignment) {
  std::vector<encoder::TokenSequence> toks;
  for (const auto& id : assignment.item_ids) toks.push_back(model.tokenize(catalog.item(id)));
  return build_index(assignment, toks, model.item_encoder());
}

struct HistoryItem {
  SparseId id;
  DenseVector dense;
};

inline std::vector<HistoryItem> history_from_index(const CandidateIndex& index,
                                                   const std::vector<std::string>& item_ids) {
  std::vector<HistoryItem> h;
  for (const auto& id : item_ids) {
    const auto& it = index.item(id);
    h.push_back(HistoryItem{it.id, it.raw});
  }
  return h;
}

namespace detail {

struct PackedHistory {
  std::vector<seq::HistoryEntry> entries;
  Matrix dense;
};

inline PackedHistory pack(const std::vector<HistoryItem>& history, int embed_dim) {
  if (history.empty()) throw ValidationError("retrieval needs a non-empty history");
  PackedHistory p;
  p.dense = Matrix::Zero(static_cast<Index>(history.size()), embed_dim);
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (static_cast<int>(history[i].dense.size()) != embed_dim)
      throw ValidationError("history dense vector has the wrong width");
    for (int c = 0; c < embed_dim; ++c) p.dense(static_cast<Index>(i), c) = history[i].dense[c];
    p.entries.push_back(seq::HistoryEntry{history[i].id, static_cast<Index>(i)});
  }
  return p;
}

inline DenseVector unit(const double* v, Index n) {
  double norm = 0.0;
  for (Index i = 0; i < n; ++i) norm += v[i] * v[i];
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw RuntimeError("refined dense vector has zero norm");
  DenseVector out(v, v + n);
  for (double& x : out) x /= norm;
  return out;
}

inline double dot(const DenseVector& a, const DenseVector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Sorted by score descending, then by code sequence ascending.
inline bool beam_before(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id.codes < b.id.codes;
}

inline bool fused_before(const FusedCandidate& a, const FusedCandidate& b) {
  if (a.log_phi != b.log_phi) return a.log_phi > b.log_phi;
  return a.item_id < b.item_id;
}

inline std::vector<double> log_softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out;
  for (double v : z) out.push_back(v - lse);
  return out;
}

}  // namespace detail

// Level-synchronous beam search: every hypothesis is expanded by all codes
// of the next level and the global top M survive. All hypotheses of a
// level share one batched decoder pass.
inline std::vector<BeamHypothesis> beam_search_ids(CobraModel& model,
                                                   const std::vector<HistoryItem>& history,
                                                   int m) {
  auto& dec = model.decoder();
  const auto& cfg = dec.config();
  if (!cfg.uses_ids()) throw ValidationError("beam search needs a model with sparse IDs");
  if (m < 1) throw ValidationError("beam width must be >= 1");
  double reachable = 1.0;
  for (int c : cfg.codebook_sizes) reachable *= c;
  if (static_cast<double>(m) > reachable) {
    spdlog::info("beam width {} exceeds the {} reachable IDs; returning all", m, reachable);
  }
  const auto packed = detail::pack(history, cfg.embed_dim);
  std::vector<BeamHypothesis> beams{BeamHypothesis{}};
  for (int level = 0; level < cfg.levels(); ++level) {
    std::vector<seq::CascadedSequence> seqs;
    for (const auto& b : beams)
      seqs.push_back(seq::build_cascaded_sequence(cfg, packed.entries, b.id.codes));
    const Matrix logp = ad::log_softmax_rows(dec.forward_sparse_batch(seqs, level, packed.dense));
    std::vector<BeamHypothesis> next;
    next.reserve(beams.size() * static_cast<std::size_t>(logp.cols()));
    for (std::size_t b = 0; b < beams.size(); ++b)
      for (Index c = 0; c < logp.cols(); ++c) {
        BeamHypothesis h = beams[b];
        h.id.codes.push_back(static_cast<int>(c));
        h.score += logp(static_cast<Index>(b), c);
        next.push_back(std::move(h));
      }
    const std::size_t keep = std::min<std::size_t>(next.size(), static_cast<std::size_t>(m));
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(),
                      detail::beam_before);
    next.resize(keep);
    beams = std::move(next);
  }
  return beams;
}

// Unit-normalized dense queries, one per complete ID, from one batched pass.
inline std::vector<DenseVector> refine_dense_batch(CobraModel& model,
                                                   const std::vector<HistoryItem>& history,
                                                   const std::vector<SparseId>& ids) {
  auto& dec = model.decoder();
  const auto& cfg = dec.config();
  const auto packed = detail::pack(history, cfg.embed_dim);
  std::vector<seq::CascadedSequence> seqs;
  for (const auto& id : ids) {
    if (cfg.uses_ids() && static_cast<int>(id.codes.size()) != cfg.levels())
      throw ValidationError("refine_dense needs a complete sparse ID");
    seqs.push_back(seq::build_cascaded_sequence(cfg, packed.entries,
                                                cfg.uses_ids() ? id.codes : std::vector<int>{}));
  }
  const Matrix v = dec.forward_dense_batch(seqs, packed.dense);
  std::vector<DenseVector> out;
  for (Index r = 0; r < v.rows(); ++r) out.push_back(detail::unit(v.row(r).data(), v.cols()));
  return out;
}

inline DenseVector refine_dense(CobraModel& model, const std::vector<HistoryItem>& history,
                                const SparseId& id) {
  return refine_dense_batch(model, history, {id}).front();
}

// Exact top-N cosine search inside C(id); ties by item_id.
inline std::vector<Candidate> ann_lookup(const CandidateIndex& index, const SparseId& id,
                                         const DenseVector& query, int n) {
  std::vector<Candidate> out;
  for (std::size_t i : index.partition(id)) {
    const auto& it = index.item(i);
    out.push_back(Candidate{it.item_id, detail::dot(query, it.unit)});
  }
  auto before = [](const Candidate& a, const Candidate& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.item_id < b.item_id;
  };
  const std::size_t keep = std::min<std::size_t>(out.size(), static_cast<std::size_t>(std::max(n, 0)));
  std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(keep), out.end(), before);
  out.resize(keep);
  return out;
}

// Exact top-N cosine search over the whole catalog.
inline std::vector<Candidate> full_scan(const CandidateIndex& index, const DenseVector& query,
                                        int n) {
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < index.size(); ++i)
    out.push_back(Candidate{index.item(i).item_id, detail::dot(query, index.item(i).unit)});
  auto before = [](const Candidate& a, const Candidate& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.item_id < b.item_id;
  };
  const std::size_t keep = std::min<std::size_t>(out.size(), static_cast<std::size_t>(std::max(n, 0)));
  std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(keep), out.end(), before);
  out.resize(keep);
  return out;
}

// BeamFusion. Beams with no candidates still take part in the beam softmax.
inline std::vector<FusedCandidate> beamfusion_scores(
    const std::vector<BeamHypothesis>& hyps,
    const std::vector<std::vector<Candidate>>& candidates, double tau, double psi) {
  if (hyps.size() != candidates.size())
    throw ValidationError("beamfusion: one candidate list per beam required");
  if (hyps.empty()) throw NoCandidatesError();
  std::vector<double> beam_logits;
  for (const auto& h : hyps) beam_logits.push_back(tau * h.score);
  const auto beam_w = detail::log_softmax(beam_logits);
  std::vector<FusedCandidate> out;
  for (std::size_t b = 0; b < hyps.size(); ++b) {
    if (candidates[b].empty()) {
      spdlog::debug("beam {} ({}) has an empty partition", b, hyps[b].id.to_string());
      continue;
    }
    std::vector<double> sims;
    for (const auto& c : candidates[b]) sims.push_back(psi * c.cosine);
    const auto cand_w = detail::log_softmax(sims);
    for (std::size_t i = 0; i < candidates[b].size(); ++i) {
      FusedCandidate f;
      f.item_id = candidates[b][i].item_id;
      f.beam = static_cast<int>(b);
      f.cosine = candidates[b][i].cosine;
      f.log_phi = beam_w[b] + cand_w[i];
      f.phi = std::exp(f.log_phi);
      out.push_back(std::move(f));
    }
  }
  if (out.empty()) throw NoCandidatesError();
  return out;
}

// Sorts, drops repeated items keeping their best score, truncates to k.
inline std::vector<FusedCandidate> top_k(std::vector<FusedCandidate> cands, int k) {
  std::sort(cands.begin(), cands.end(), detail::fused_before);
  std::vector<FusedCandidate> out;
  std::map<std::string, bool> seen;
  for (auto& c : cands) {
    if (static_cast<int>(out.size()) >= k) break;
    if (!seen.emplace(c.item_id, true).second) continue;
    out.push_back(std::move(c));
  }
  return out;
}

// Dispatches on the model variant:
//   full + kNone          beams -> refine -> per-beam scan -> BeamFusion
//   full + kNoBeamFusion  greedy ID -> refine -> nearest neighbours in C(ID)
//   no-id                 dense query -> nearest neighbours over the catalog
// The two single-beam paths rank by cosine; their Phi is the in-beam factor.
//   no-dense              beams in score order, items of each C(ID) by id
inline std::vector<FusedCandidate> retrieve_topk(CobraModel& model, const CandidateIndex& index,
                                                 const std::vector<HistoryItem>& history,
                                                 const FusionConfig& cfg,
                                                 Ablation ablation = Ablation::kNone) {
  cfg.validate();
  const seq::Variant variant = model.variant();
  if (variant == seq::Variant::kNoId) {
    const DenseVector q = refine_dense(model, history, SparseId{});
    return top_k(beamfusion_scores({BeamHypothesis{}}, {full_scan(index, q, cfg.k)}, cfg.tau,
                                   cfg.psi),
                 cfg.k);
  }
  if (variant == seq::Variant::kNoDense) {
    const auto beams = beam_search_ids(model, history, cfg.m);
    std::vector<FusedCandidate> out;
    for (std::size_t b = 0; b < beams.size() && static_cast<int>(out.size()) < cfg.k; ++b) {
      std::vector<std::string> members;
      for (std::size_t i : index.partition(beams[b].id)) members.push_back(index.item(i).item_id);
      std::sort(members.begin(), members.end());
      for (const auto& id : members) {
        if (static_cast<int>(out.size()) >= cfg.k) break;
        out.push_back(FusedCandidate{id, static_cast<int>(b), 0.0, std::exp(beams[b].score),
                                     beams[b].score});
      }
    }
    return out;
  }
  if (ablation == Ablation::kNoBeamFusion) {
    const auto beams = beam_search_ids(model, history, 1);
    const DenseVector q = refine_dense(model, history, beams.front().id);
    return top_k(beamfusion_scores(beams, {ann_lookup(index, beams.front().id, q, cfg.k)},
                                   cfg.tau, cfg.psi),
                 cfg.k);
  }
  const auto beams = beam_search_ids(model, history, cfg.m);
  std::vector<SparseId> ids;
  for (const auto& b : beams) ids.push_back(b.id);
  const auto queries = refine_dense_batch(model, history, ids);
  std::vector<std::vector<Candidate>> per_beam;
  for (std::size_t b = 0; b < beams.size(); ++b)
    per_beam.push_back(ann_lookup(index, beams[b].id, queries[b], cfg.n));
  return top_k(beamfusion_scores(beams, per_beam, cfg.tau, cfg.psi), cfg.k);
}

}  // namespace cobra::retrieval
