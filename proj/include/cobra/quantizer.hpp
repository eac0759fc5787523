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

// Residual k-means quantizer producing multi-level semantic IDs.
//
// Level 0 is fit by k-means on the raw embeddings; level l is fit on what
// levels 0..l-1 failed to reconstruct. An item's ID is the chain of
// nearest-centroid indices on its running residual, and C(ID) (the items
// sharing an ID) is the candidate partition the retriever scans. Code 0 of
// every level past the first is pinned at the origin, so a deeper level
// never increases any vector's reconstruction error.

#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/autodiff.hpp"
#include "cobra/common.hpp"

namespace cobra::quant {

using ad::Index;
using ad::Matrix;

struct SparseId {
  std::vector<int> codes;

  auto operator<=>(const SparseId&) const = default;
  bool operator==(const SparseId&) const = default;

  std::size_t levels() const { return codes.size(); }

  // "c0-c1-...-c{L-1}"
  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(codes[i]);
    }
    return s;
  }

  static SparseId parse(const std::string& s) {
    SparseId id;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, '-')) {
      try {
        std::size_t used = 0;
        id.codes.push_back(std::stoi(part, &used));
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ValidationError("malformed sparse id '" + s + "'");
      }
    }
    if (id.codes.empty()) throw ValidationError("empty sparse id");
    return id;
  }
};

struct Codebook {
  int level = 0;
  Matrix centroids;  // codebook_size x embed_dim
};

struct KMeansResult {
  Matrix centroids;
  std::vector<int> assignment;
  std::vector<double> mse_trace;  // mean squared error after each assignment pass
  int reseeded = 0;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, Index dim) {
  double s = 0.0;
  for (Index i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Nearest centroid; ties go to the lowest index.
inline int nearest(const Matrix& centroids, const double* x, double* best_dist = nullptr) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (Index c = 0; c < centroids.rows(); ++c) {
    const double d = sq_dist(centroids.row(c).data(), x, centroids.cols());
    if (d < bd) {
      bd = d;
      best = static_cast<int>(c);
    }
  }
  if (best_dist) *best_dist = bd;
  return best;
}

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Lloyd's k-means with greedy D^2 (k-means++) seeding. An emptied cluster is
// re-seeded at the point currently farthest from its centroid. With
// pin_zero, centroid 0 stays at the origin and is never moved or re-seeded.
inline KMeansResult kmeans(const Matrix& data, int k, int iters, std::uint64_t seed,
                           bool pin_zero = false) {
  const Index n = data.rows(), dim = data.cols();
  if (k < 1) throw ValidationError("codebook size must be positive");
  if (n < k) throw ValidationError("k-means needs at least as many points as centroids");
  std::mt19937_64 rng(seed);
  KMeansResult r;
  r.centroids.resize(k, dim);

  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  // Greedy D^2 seeding: each step draws 2 + ln(k) candidates and keeps the
  // one that lowers the total squared distance most.
  const int trials = 2 + static_cast<int>(std::log(static_cast<double>(k)));
  auto update = [&](std::vector<double>& d, Index centre) {
    for (Index i = 0; i < n; ++i)
      d[i] = std::min(d[i], detail::sq_dist(data.row(i).data(), data.row(centre).data(), dim));
  };
  if (pin_zero) {
    r.centroids.row(0).setZero();
    for (Index i = 0; i < n; ++i) d2[i] = data.row(i).squaredNorm();
  } else {
    const Index first = static_cast<Index>(detail::uniform01(rng) * static_cast<double>(n));
    r.centroids.row(0) = data.row(first);
    update(d2, first);
  }
  std::vector<double> trial(static_cast<std::size_t>(n));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    Index best = -1;
    double best_total = std::numeric_limits<double>::infinity();
    std::vector<double> best_d;
    for (int t = 0; t < trials; ++t) {
      Index pick = static_cast<Index>(detail::uniform01(rng) * static_cast<double>(n));
      if (total > 0.0) {
        const double u = detail::uniform01(rng) * total;
        double acc = 0.0;
        pick = n - 1;
        for (Index i = 0; i < n; ++i) {
          acc += d2[i];
          if (acc > u && d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
      trial = d2;
      update(trial, pick);
      double sum = 0.0;
      for (double v : trial) sum += v;
      if (sum < best_total) {
        best_total = sum;
        best = pick;
        best_d = trial;
      }
    }
    r.centroids.row(c) = data.row(best);
    d2 = std::move(best_d);
  }

  r.assignment.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int it = 0; it < std::max(iters, 1); ++it) {
    bool changed = false;
    double sse = 0.0;
    for (Index i = 0; i < n; ++i) {
      const int a = detail::nearest(r.centroids, data.row(i).data(), &dist[i]);
      changed = changed || a != r.assignment[i];
      r.assignment[i] = a;
      sse += dist[i];
    }
    r.mse_trace.push_back(sse / static_cast<double>(n));
    if (!changed && it > 0) break;

    Matrix sums = Matrix::Zero(k, dim);
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(r.assignment[i]) += data.row(i);
      ++counts[r.assignment[i]];
    }
    for (int c = pin_zero ? 1 : 0; c < k; ++c) {
      if (counts[c] > 0) {
        r.centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
        continue;
      }
      Index far = 0;
      for (Index i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      spdlog::info("k-means: cluster {} emptied, re-seeding at point {}", c, far);
      r.centroids.row(c) = data.row(far);
      dist[far] = 0.0;
      ++r.reseeded;
    }
  }
  return r;
}

struct QuantizerConfig {
  std::vector<int> codebook_sizes{32, 32, 32};
  int iters = 50;
  std::uint64_t seed = 0;
  int restarts = 8;  // k-means runs per level; the lowest final MSE is kept
};

class Quantizer {
 public:
  Quantizer() = default;
  Quantizer(QuantizerConfig config, int embed_dim, std::vector<Codebook> levels,
            std::vector<std::vector<double>> fit_stats)
      : config_(std::move(config)),
        embed_dim_(embed_dim),
        levels_(std::move(levels)),
        fit_stats_(std::move(fit_stats)) {
    if (levels_.empty()) throw ValidationError("quantizer needs at least one level");
    for (const auto& cb : levels_) {
      if (cb.centroids.cols() != embed_dim_)
        throw ValidationError("codebook dimension differs from embed_dim");
      if (!cb.centroids.allFinite()) throw ValidationError("codebook has non-finite centroids");
    }
  }

  int embed_dim() const { return embed_dim_; }
  int levels() const { return static_cast<int>(levels_.size()); }
  const Codebook& codebook(int level) const { return levels_.at(static_cast<std::size_t>(level)); }
  int codebook_size(int level) const {
    return static_cast<int>(codebook(level).centroids.rows());
  }
  std::vector<int> codebook_sizes() const {
    std::vector<int> out;
    for (const auto& cb : levels_) out.push_back(static_cast<int>(cb.centroids.rows()));
    return out;
  }
  const std::vector<std::vector<double>>& fit_stats() const { return fit_stats_; }
  const QuantizerConfig& config() const { return config_; }

  SparseId quantize(std::span<const double> v) const {
    if (static_cast<int>(v.size()) != embed_dim_)
      throw ValidationError("quantize: expected " + std::to_string(embed_dim_) +
                            " components, got " + std::to_string(v.size()));
    std::vector<double> residual(v.begin(), v.end());
    for (double x : residual)
      if (!std::isfinite(x)) throw ValidationError("quantize: non-finite input");
    SparseId id;
    for (const auto& cb : levels_) {
      const int c = detail::nearest(cb.centroids, residual.data());
      id.codes.push_back(c);
      for (int i = 0; i < embed_dim_; ++i) residual[i] -= cb.centroids(c, i);
    }
    return id;
  }

  void validate(const SparseId& id) const {
    if (static_cast<int>(id.codes.size()) != levels())
      throw ValidationError("sparse id " + id.to_string() + " has wrong level count");
    for (int l = 0; l < levels(); ++l)
      if (id.codes[l] < 0 || id.codes[l] >= codebook_size(l))
        throw ValidationError("sparse id " + id.to_string() + ": code out of range at level " +
                              std::to_string(l));
  }

  // Sum of the selected centroids of the first `n_levels` levels.
  DenseVector reconstruct_prefix(const SparseId& id, int n_levels) const {
    validate(id);
    DenseVector out(static_cast<std::size_t>(embed_dim_), 0.0);
    for (int l = 0; l < n_levels; ++l)
      for (int i = 0; i < embed_dim_; ++i) out[i] += levels_[l].centroids(id.codes[l], i);
    return out;
  }

  DenseVector reconstruct(const SparseId& id) const { return reconstruct_prefix(id, levels()); }

  nlohmann::json to_json() const {
    nlohmann::json cbs = nlohmann::json::array();
    for (const auto& cb : levels_) {
      const Matrix& m = cb.centroids;
      cbs.push_back({{"level", cb.level},
                     {"rows", m.rows()},
                     {"cols", m.cols()},
                     {"data", std::vector<double>(m.data(), m.data() + m.size())}});
    }
    return {{"format", "cobra-quantizer"},
            {"version", 1},
            {"embed_dim", embed_dim_},
            {"config",
             {{"codebook_sizes", config_.codebook_sizes},
              {"iters", config_.iters},
              {"seed", config_.seed},
              {"restarts", config_.restarts}}},
            {"codebooks", cbs},
            {"fit_stats", fit_stats_}};
  }

  static Quantizer from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "cobra-quantizer" || j.value("version", 0) != 1)
      throw ValidationError("not a version-1 quantizer artifact");
    QuantizerConfig cfg;
    cfg.codebook_sizes = j.at("config").at("codebook_sizes").get<std::vector<int>>();
    cfg.iters = j.at("config").at("iters").get<int>();
    cfg.seed = j.at("config").at("seed").get<std::uint64_t>();
    cfg.restarts = j.at("config").value("restarts", 1);
    std::vector<Codebook> levels;
    for (const auto& cb : j.at("codebooks")) {
      Codebook c;
      c.level = cb.at("level").get<int>();
      const auto data = cb.at("data").get<std::vector<double>>();
      c.centroids.resize(cb.at("rows").get<Index>(), cb.at("cols").get<Index>());
      if (static_cast<Index>(data.size()) != c.centroids.size())
        throw ValidationError("codebook payload size mismatch");
      std::copy(data.begin(), data.end(), c.centroids.data());
      levels.push_back(std::move(c));
    }
    return Quantizer(cfg, j.at("embed_dim").get<int>(), std::move(levels),
                     j.at("fit_stats").get<std::vector<std::vector<double>>>());
  }

 private:
  QuantizerConfig config_;
  int embed_dim_ = 0;
  std::vector<Codebook> levels_;
  std::vector<std::vector<double>> fit_stats_;
};

// Restart r of level l is seeded with seed + l + 7919 * r.
inline Quantizer fit_quantizer(const Matrix& embeddings, const QuantizerConfig& cfg) {
  if (cfg.codebook_sizes.empty()) throw ValidationError("quantizer needs at least one level");
  if (cfg.restarts < 1) throw ValidationError("quantizer restarts must be >= 1");
  if (embeddings.rows() == 0 || embeddings.cols() == 0)
    throw ValidationError("quantizer needs a non-empty embedding matrix");
  if (!embeddings.allFinite()) throw ValidationError("quantizer input is not finite");
  const int max_c = *std::max_element(cfg.codebook_sizes.begin(), cfg.codebook_sizes.end());
  if (embeddings.rows() < max_c)
    throw ValidationError("quantizer needs n_items >= largest codebook size (" +
                          std::to_string(embeddings.rows()) + " < " + std::to_string(max_c) +
                          ")");
  Matrix residual = embeddings;
  std::vector<Codebook> levels;
  std::vector<std::vector<double>> stats;
  for (std::size_t l = 0; l < cfg.codebook_sizes.size(); ++l) {
    KMeansResult km;
    for (int r = 0; r < cfg.restarts; ++r) {
      KMeansResult run = kmeans(residual, cfg.codebook_sizes[l], cfg.iters,
                                cfg.seed + l + 7919ULL * static_cast<std::uint64_t>(r), l > 0);
      if (r == 0 || run.mse_trace.back() < km.mse_trace.back()) km = std::move(run);
    }
    // Residuals follow quantize(): nearest final centroid, not the last
    // assignment pass, which predates the final centroid update.
    for (Index i = 0; i < residual.rows(); ++i) {
      const int c = detail::nearest(km.centroids, residual.row(i).data());
      residual.row(i) -= km.centroids.row(c);
    }
    levels.push_back(Codebook{static_cast<int>(l), std::move(km.centroids)});
    stats.push_back(std::move(km.mse_trace));
  }
  return Quantizer(cfg, static_cast<int>(embeddings.cols()), std::move(levels),
                   std::move(stats));
}

inline Quantizer fit_quantizer(const Matrix& embeddings, int levels,
                               const std::vector<int>& codebook_sizes, int iters,
                               std::uint64_t seed) {
  if (static_cast<int>(codebook_sizes.size()) != levels)
    throw ValidationError("codebook_sizes must list one size per level");
  return fit_quantizer(embeddings, QuantizerConfig{codebook_sizes, iters, seed});
}

struct CorpusAssignment {
  std::vector<std::string> item_ids;
  std::vector<SparseId> ids;  // parallel to item_ids
  std::map<SparseId, std::vector<std::string>> members;  // C(ID)

  const SparseId& id_of(const std::string& item_id) const {
    auto it = position_.find(item_id);
    if (it == position_.end()) throw ValidationError("item " + item_id + " has no sparse id");
    return ids[it->second];
  }
  bool contains(const std::string& item_id) const { return position_.count(item_id) > 0; }

  // partition size -> number of IDs with that size
  std::map<std::size_t, std::size_t> collision_histogram() const {
    std::map<std::size_t, std::size_t> h;
    for (const auto& [id, items] : members) ++h[items.size()];
    return h;
  }

  void add(const std::string& item_id, SparseId id) {
    if (position_.count(item_id)) throw ValidationError("duplicate item " + item_id);
    position_.emplace(item_id, ids.size());
    item_ids.push_back(item_id);
    members[id].push_back(item_id);
    ids.push_back(std::move(id));
  }

 private:
  std::map<std::string, std::size_t> position_;
};

inline CorpusAssignment assign_corpus(const Quantizer& q,
                                      const std::vector<std::string>& item_ids,
                                      const Matrix& embeddings) {
  if (static_cast<Index>(item_ids.size()) != embeddings.rows())
    throw ValidationError("every item needs exactly one embedding");
  CorpusAssignment out;
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    const auto row = embeddings.row(static_cast<Index>(i));
    out.add(item_ids[i], q.quantize(std::span<const double>(row.data(), row.size())));
  }
  return out;
}

// ids.tsv: item_id <TAB> c0-c1-...
inline void write_ids_tsv(const CorpusAssignment& a, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  for (std::size_t i = 0; i < a.item_ids.size(); ++i)
    out << a.item_ids[i] << '\t' << a.ids[i].to_string() << '\n';
}

inline CorpusAssignment read_ids_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  CorpusAssignment a;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed line");
    a.add(line.substr(0, tab), SparseId::parse(line.substr(tab + 1)));
  }
  return a;
}

}  // namespace cobra::quant
