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

// Offline metrics over ranked lists with one held-out target per row,
// the tau sweep and the ablation comparison table.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "cobra/corpus.hpp"
#include "cobra/quantizer.hpp"
#include "cobra/retriever.hpp"

namespace cobra::eval {

using Ranking = std::vector<std::string>;

namespace detail {

inline void check_rows(const std::vector<Ranking>& ranked, const std::vector<std::string>& targets,
                       int k) {
  if (ranked.empty()) throw ValidationError("empty test set");
  if (ranked.size() != targets.size())
    throw ValidationError("one target per ranked list required");
  if (k < 1) throw ValidationError("K must be >= 1");
}

// 1-based rank of target within the first k entries, 0 if absent.
inline std::size_t rank_of(const Ranking& r, const std::string& target, int k) {
  const std::size_t n = std::min(r.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i)
    if (r[i] == target) return i + 1;
  return 0;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline double recall_at_k(const std::vector<Ranking>& ranked,
                          const std::vector<std::string>& targets, int k) {
  detail::check_rows(ranked, targets, k);
  double hits = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (detail::rank_of(ranked[i], targets[i], k) > 0) hits += 1.0;
  return hits / static_cast<double>(ranked.size());
}

// Single relevant item per row, so the ideal DCG is 1.
inline double ndcg_at_k(const std::vector<Ranking>& ranked, const std::vector<std::string>& targets,
                        int k) {
  detail::check_rows(ranked, targets, k);
  double sum = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const std::size_t r = detail::rank_of(ranked[i], targets[i], k);
    if (r > 0) sum += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return sum / static_cast<double>(ranked.size());
}

// Mean over rows of the number of distinct sparse IDs in the top k.
inline double diversity(const std::vector<Ranking>& ranked,
                        const std::function<quant::SparseId(const std::string&)>& id_of, int k) {
  if (ranked.empty()) throw ValidationError("empty test set");
  if (k < 1) throw ValidationError("K must be >= 1");
  double sum = 0.0;
  for (const auto& r : ranked) {
    std::set<quant::SparseId> ids;
    const std::size_t n = std::min(r.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i) ids.insert(id_of(r[i]));
    sum += static_cast<double>(ids.size());
  }
  return sum / static_cast<double>(ranked.size());
}

inline double diversity(const std::vector<Ranking>& ranked, const quant::CorpusAssignment& a,
                        int k) {
  return diversity(ranked, [&](const std::string& id) { return a.id_of(id); }, k);
}

// Digest of the test rows; reports are only comparable when it matches.
inline std::string split_fingerprint(const std::vector<corpus::TestCase>& tests) {
  std::uint64_t h = fnv1a64("");
  for (const auto& tc : tests) {
    std::string row = tc.user_id + '\t' + tc.target;
    for (const auto& item : tc.history) row += '\t' + item;
    h = fnv1a64(row + '\n', h);
  }
  return hex64(h);
}

struct EvalReport {
  std::string variant = "full";
  std::map<int, double> recall;
  std::map<int, double> ndcg;
  int diversity_k = 0;
  double diversity = 0.0;
  std::size_t n_test_users = 0;
  std::string config_hash;
  std::string split_fingerprint;
  double runtime_seconds = 0.0;

  // metric,k,value; runtime is excluded so reruns are byte-identical.
  std::string to_csv() const {
    std::ostringstream out;
    out << "metric,k,value\n";
    for (const auto& [k, v] : recall) out << "recall," << k << ',' << detail::fmt(v) << '\n';
    for (const auto& [k, v] : ndcg) out << "ndcg," << k << ',' << detail::fmt(v) << '\n';
    out << "diversity," << diversity_k << ',' << detail::fmt(diversity) << '\n';
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::object(), n = nlohmann::json::object();
    for (const auto& [k, v] : recall) r[std::to_string(k)] = v;
    for (const auto& [k, v] : ndcg) n[std::to_string(k)] = v;
    return {{"variant", variant},
            {"recall", r},
            {"ndcg", n},
            {"diversity", {{"k", diversity_k}, {"value", diversity}}},
            {"n_test_users", n_test_users},
            {"config_hash", config_hash},
            {"split_fingerprint", split_fingerprint},
            {"runtime_seconds", runtime_seconds}};
  }
};

// Beams and per-beam candidates of one request, before fusion. Lets the
// tau sweep re-fuse without re-running the model.
struct CandidateTrace {
  std::vector<retrieval::BeamHypothesis> beams;
  std::vector<std::vector<retrieval::Candidate>> candidates;
};

inline CandidateTrace trace_candidates(CobraModel& model, const retrieval::CandidateIndex& index,
                                       const std::vector<retrieval::HistoryItem>& history,
                                       const retrieval::FusionConfig& cfg) {
  if (model.variant() != seq::Variant::kFull)
    throw ValidationError("candidate traces need the full model variant");
  CandidateTrace t;
  t.beams = retrieval::beam_search_ids(model, history, cfg.m);
  std::vector<quant::SparseId> ids;
  for (const auto& b : t.beams) ids.push_back(b.id);
  const auto queries = retrieval::refine_dense_batch(model, history, ids);
  for (std::size_t b = 0; b < t.beams.size(); ++b)
    t.candidates.push_back(retrieval::ann_lookup(index, t.beams[b].id, queries[b], cfg.n));
  return t;
}

inline std::vector<Ranking> retrieve_all(CobraModel& model, const retrieval::CandidateIndex& index,
                                         const std::vector<corpus::TestCase>& tests,
                                         const retrieval::FusionConfig& cfg,
                                         retrieval::Ablation ablation) {
  std::vector<Ranking> out;
  out.reserve(tests.size());
  std::size_t empty = 0;
  for (const auto& tc : tests) {
    const auto history = retrieval::history_from_index(index, tc.history);
    Ranking r;
    try {
      for (const auto& c : retrieval::retrieve_topk(model, index, history, cfg, ablation))
        r.push_back(c.item_id);
    } catch (const NoCandidatesError&) {
      ++empty;  // scored as a miss
    }
    out.push_back(std::move(r));
  }
  if (empty > 0)
    spdlog::warn("{} of {} test users had no retrievable candidates", empty, tests.size());
  return out;
}

// Retrieves the top max(ks) per test row and scores every K in ks.
// Diversity is measured at the largest K.
inline EvalReport evaluate(CobraModel& model, const retrieval::CandidateIndex& index,
                           const quant::CorpusAssignment& assignment,
                           const std::vector<corpus::TestCase>& tests,
                           retrieval::FusionConfig cfg, const std::vector<int>& ks,
                           retrieval::Ablation ablation = retrieval::Ablation::kNone) {
  if (ks.empty()) throw ValidationError("eval needs at least one K");
  if (tests.empty()) throw ValidationError("empty test set");
  const auto start = std::chrono::steady_clock::now();
  cfg.k = *std::max_element(ks.begin(), ks.end());
  const auto ranked = retrieve_all(model, index, tests, cfg, ablation);
  std::vector<std::string> targets;
  for (const auto& tc : tests) targets.push_back(tc.target);
  EvalReport rep;
  for (int k : ks) {
    rep.recall[k] = recall_at_k(ranked, targets, k);
    rep.ndcg[k] = ndcg_at_k(ranked, targets, k);
  }
  rep.diversity_k = cfg.k;
  rep.diversity = diversity(ranked, assignment, cfg.k);
  rep.n_test_users = tests.size();
  rep.split_fingerprint = split_fingerprint(tests);
  rep.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

struct SweepPoint {
  double tau = 0.0;
  int k = 0;
  double recall = 0.0;
  double diversity = 0.0;
};

inline int default_sweep_k(std::size_t corpus_size) {
  return std::max(1, static_cast<int>(std::min<std::size_t>(2000, corpus_size / 2)));
}

// psi, M and N come from cfg; cfg.k is the recall cutoff.
inline std::vector<SweepPoint> sweep_tau(CobraModel& model, const retrieval::CandidateIndex& index,
                                         const quant::CorpusAssignment& assignment,
                                         const std::vector<corpus::TestCase>& tests,
                                         std::vector<double> grid,
                                         const retrieval::FusionConfig& cfg) {
  cfg.validate();
  if (grid.empty()) throw ValidationError("tau grid is empty");
  if (tests.empty()) throw ValidationError("empty test set");
  std::sort(grid.begin(), grid.end());
  std::vector<CandidateTrace> traces;
  std::vector<std::string> targets;
  for (const auto& tc : tests) {
    traces.push_back(
        trace_candidates(model, index, retrieval::history_from_index(index, tc.history), cfg));
    targets.push_back(tc.target);
  }
  std::vector<SweepPoint> out;
  for (double tau : grid) {
    if (tau < 0.0) throw ValidationError("tau must be >= 0");
    std::vector<Ranking> ranked;
    for (const auto& t : traces) {
      Ranking r;
      try {
        for (const auto& c : retrieval::top_k(
                 retrieval::beamfusion_scores(t.beams, t.candidates, tau, cfg.psi), cfg.k))
          r.push_back(c.item_id);
      } catch (const NoCandidatesError&) {
      }
      ranked.push_back(std::move(r));
    }
    out.push_back(SweepPoint{tau, cfg.k, recall_at_k(ranked, targets, cfg.k),
                             diversity(ranked, assignment, cfg.k)});
  }
  return out;
}

inline std::string sweep_to_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream out;
  out << "tau,k,recall,diversity\n";
  for (const auto& p : points)
    out << detail::fmt(p.tau) << ',' << p.k << ',' << detail::fmt(p.recall) << ','
        << detail::fmt(p.diversity) << '\n';
  return out.str();
}

struct ComparisonRow {
  std::string variant;
  std::string metric;
  int k = 0;
  double value = 0.0;
  double rel_delta = 0.0;  // (value - full) / full; 0 when full is 0

  bool operator==(const ComparisonRow&) const = default;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out << "variant,metric,k,value,rel_delta\n";
    for (const auto& r : rows)
      out << r.variant << ',' << r.metric << ',' << r.k << ',' << detail::fmt(r.value) << ','
          << detail::fmt(r.rel_delta) << '\n';
    return out.str();
  }

  static ComparisonTable from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "variant,metric,k,value,rel_delta")
      throw ValidationError("comparison csv: bad header");
    ComparisonTable t;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      if (f.size() != 5) throw ValidationError("comparison csv: malformed row '" + line + "'");
      t.rows.push_back(ComparisonRow{f[0], f[1], std::stoi(f[2]), std::stod(f[3]), std::stod(f[4])});
    }
    return t;
  }

  const ComparisonRow& find(const std::string& variant, const std::string& metric, int k) const {
    for (const auto& r : rows)
      if (r.variant == variant && r.metric == metric && r.k == k) return r;
    throw ValidationError("no comparison row " + variant + "/" + metric + "@" + std::to_string(k));
  }
};

// Rows follow the order full, no-id, no-dense, no-beamfusion, then any
// other variant by name. "full" is the delta baseline.
inline ComparisonTable compare_ablations(const std::map<std::string, EvalReport>& reports) {
  auto base_it = reports.find("full");
  if (base_it == reports.end()) throw ValidationError("ablation comparison needs a 'full' report");
  const EvalReport& base = base_it->second;
  std::vector<std::string> order;
  for (const char* v : {"full", "no-id", "no-dense", "no-beamfusion"})
    if (reports.count(v)) order.push_back(v);
  for (const auto& [name, r] : reports)
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  auto rel = [](double v, double b) { return b != 0.0 ? (v - b) / b : 0.0; };
  ComparisonTable t;
  for (const auto& name : order) {
    const EvalReport& r = reports.at(name);
    if (r.split_fingerprint != base.split_fingerprint)
      throw ValidationError("variant " + name + " was evaluated on a different test split");
    for (const auto& [k, v] : r.recall)
      t.rows.push_back({name, "recall", k, v, rel(v, base.recall.count(k) ? base.recall.at(k) : 0)});
    for (const auto& [k, v] : r.ndcg)
      t.rows.push_back({name, "ndcg", k, v, rel(v, base.ndcg.count(k) ? base.ndcg.at(k) : 0)});
    t.rows.push_back({name, "diversity", r.diversity_k, r.diversity, rel(r.diversity, base.diversity)});
  }
  return t;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path);
  out << text;
}

}  // namespace cobra::eval
