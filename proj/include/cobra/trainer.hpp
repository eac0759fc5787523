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

// Joint end-to-end training of the item encoder and the cascaded decoder
// under L = L_sparse + L_dense, plus a finite-difference gradient checker.
//
//   L_sparse = sum over predictions and ID levels of -log softmax(z)[code]
//   L_dense  = sum over predictions of
//              -log exp(s cos(v_hat, v+)) / sum_{j in batch} exp(s cos(v_hat, v_j))
//
// where the batch is the set of distinct target items of the step (the
// positive included once) and s is the similarity scale (1 by default).

#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/autodiff.hpp"
#include "cobra/corpus.hpp"
#include "cobra/model.hpp"
#include "cobra/text.hpp"

namespace cobra::train {

using ad::Index;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

struct TrainConfig {
  int batch_size = 32;
  int epochs = 10;
  double learning_rate = 1e-3;
  nn::OptimizerKind optimizer = nn::OptimizerKind::kAdam;
  std::uint64_t seed = 0;
  double sparse_weight = 1.0;
  double dense_weight = 1.0;
  double similarity_scale = 1.0;
  double grad_clip = 0.0;  // 0 disables clipping
  bool freeze_encoder = false;
  int patience = 0;  // epochs without validation improvement before stopping; 0 disables
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"optimizer", c.optimizer == nn::OptimizerKind::kAdam ? "adam" : "sgd"},
          {"seed", c.seed},
          {"sparse_weight", c.sparse_weight},
          {"dense_weight", c.dense_weight},
          {"similarity_scale", c.similarity_scale},
          {"grad_clip", c.grad_clip},
          {"freeze_encoder", c.freeze_encoder},
          {"patience", c.patience}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  const std::string opt = j.value("optimizer", std::string("adam"));
  if (opt == "adam") {
    c.optimizer = nn::OptimizerKind::kAdam;
  } else if (opt == "sgd") {
    c.optimizer = nn::OptimizerKind::kSgd;
  } else {
    throw ValidationError("unknown optimizer '" + opt + "'");
  }
  c.seed = j.value("seed", c.seed);
  c.sparse_weight = j.value("sparse_weight", c.sparse_weight);
  c.dense_weight = j.value("dense_weight", c.dense_weight);
  c.similarity_scale = j.value("similarity_scale", c.similarity_scale);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
  c.patience = j.value("patience", c.patience);
  if (c.batch_size < 1 || c.epochs < 0 || !(c.learning_rate > 0.0) ||
      c.sparse_weight < 0.0 || c.dense_weight < 0.0 || !(c.similarity_scale > 0.0) ||
      c.grad_clip < 0.0 || c.patience < 0)
    throw ValidationError("train config: numeric fields out of range");
  return c;
}

// Sparse ID loss summed over every prediction row and ID level.
inline Var loss_sparse(const std::vector<Var>& level_logits,
                       const std::vector<std::vector<Index>>& level_targets) {
  if (level_logits.empty() || level_logits.size() != level_targets.size())
    throw ValidationError("loss_sparse: one target list per logit level required");
  std::vector<Var> terms;
  for (std::size_t l = 0; l < level_logits.size(); ++l) {
    for (Index tgt : level_targets[l])
      if (tgt < 0 || tgt >= level_logits[l].cols())
        throw ValidationError("loss_sparse: target code " + std::to_string(tgt) +
                              " out of range at level " + std::to_string(l));
    terms.push_back(ad::softmax_cross_entropy(level_logits[l], level_targets[l]));
  }
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

// Dense contrastive loss. `batch_items` holds one row per distinct target
// item of the batch; `positive[i]` is the row of prediction i's target.
inline Var loss_dense(Var predicted, Var batch_items, const std::vector<Index>& positive,
                      double similarity_scale = 1.0) {
  if (predicted.cols() != batch_items.cols())
    throw ValidationError("loss_dense: prediction and item widths differ");
  if (static_cast<Index>(positive.size()) != predicted.rows())
    throw ValidationError("loss_dense: one positive per prediction required");
  Var cos = ad::matmul_nt(ad::l2_normalize_rows(predicted), ad::l2_normalize_rows(batch_items));
  if (similarity_scale != 1.0) cos = ad::scale(cos, similarity_scale);
  return ad::softmax_cross_entropy(cos, positive);
}

// Value-only helpers over plain matrices.
inline double loss_sparse_value(const std::vector<Matrix>& logits,
                                const std::vector<std::vector<Index>>& targets) {
  Tape t(false);
  std::vector<Var> vs;
  for (const auto& m : logits) vs.push_back(t.constant(m));
  return loss_sparse(vs, targets).value()(0, 0);
}

inline double loss_dense_value(const Matrix& predicted, const Matrix& batch_items,
                               const std::vector<Index>& positive, double scale = 1.0) {
  Tape t(false);
  return loss_dense(t.constant(predicted), t.constant(batch_items), positive, scale)
      .value()(0, 0);
}

struct BatchLoss {
  Var objective;  // weighted, averaged over prediction positions
  double sparse_sum = 0.0;
  double dense_sum = 0.0;
  Index positions = 0;
};

namespace detail {

// Keeps the last prediction of every sequence.
inline seq::TrainingOutputs final_predictions(seq::TrainingOutputs out) {
  std::vector<Index> keep;
  for (std::size_t i = 0; i < out.sequence_of.size(); ++i)
    if (i + 1 == out.sequence_of.size() || out.sequence_of[i + 1] != out.sequence_of[i])
      keep.push_back(static_cast<Index>(i));
  seq::TrainingOutputs f;
  for (std::size_t l = 0; l < out.level_logits.size(); ++l) {
    f.level_logits.push_back(ad::gather_rows(out.level_logits[l], keep));
    std::vector<Index> tg;
    for (Index i : keep) tg.push_back(out.level_targets[l][static_cast<std::size_t>(i)]);
    f.level_targets.push_back(std::move(tg));
  }
  if (out.dense_pred.valid()) {
    f.dense_pred = ad::gather_rows(out.dense_pred, keep);
    for (Index i : keep) f.target_dense_rows.push_back(out.target_dense_rows[static_cast<std::size_t>(i)]);
  }
  for (Index i : keep) f.sequence_of.push_back(out.sequence_of[static_cast<std::size_t>(i)]);
  f.positions = static_cast<Index>(keep.size());
  return f;
}

}  // namespace detail

// Encodes the batch's distinct items, runs the teacher-forced decoder pass
// and assembles both losses.
// With final_only, only the last prediction of each sequence is scored.
inline BatchLoss batch_loss(Tape& t, CobraModel& model, const TrainingData& data,
                            const std::vector<int>& rows, const TrainConfig& cfg,
                            bool final_only = false) {
  const seq::Variant variant = model.variant();
  std::map<int, Index> local;  // catalog index -> dense source row
  for (int r : rows)
    for (int item : data.sequences.at(static_cast<std::size_t>(r))) local.emplace(item, 0);
  std::vector<encoder::TokenSequence> toks;
  for (auto& [item, row] : local) {
    row = static_cast<Index>(toks.size());
    toks.push_back(data.tokens[static_cast<std::size_t>(item)]);
  }

  Var dense_source;
  if (variant == seq::Variant::kNoDense) {
    dense_source = t.constant(Matrix::Zero(1, model.item_encoder().embed_dim()));
  } else if (cfg.freeze_encoder) {
    dense_source = t.constant(model.item_encoder().encode_all(toks));
  } else {
    dense_source = model.item_encoder().encode_batch(t, toks);
  }

  std::vector<std::vector<seq::HistoryEntry>> batch;
  for (int r : rows) {
    std::vector<seq::HistoryEntry> entries;
    for (int item : data.sequences[static_cast<std::size_t>(r)])
      entries.push_back(seq::HistoryEntry{data.ids[static_cast<std::size_t>(item)],
                                          local.at(item)});
    batch.push_back(std::move(entries));
  }
  seq::TrainingOutputs out = model.decoder().forward_training_pass(t, batch, dense_source);
  if (final_only) out = detail::final_predictions(std::move(out));

  BatchLoss loss;
  loss.positions = out.positions;
  if (out.positions == 0) throw ValidationError("batch has no prediction targets");
  std::vector<Var> terms;
  if (!out.level_logits.empty()) {
    Var ls = loss_sparse(out.level_logits, out.level_targets);
    loss.sparse_sum = ls.value()(0, 0);
    terms.push_back(ad::scale(ls, cfg.sparse_weight));
  }
  if (out.dense_pred.valid()) {
    std::map<Index, Index> uniq;  // dense source row -> batch item row
    for (Index r : out.target_dense_rows) uniq.emplace(r, 0);
    std::vector<Index> item_rows;
    for (auto& [src, dst] : uniq) {
      dst = static_cast<Index>(item_rows.size());
      item_rows.push_back(src);
    }
    std::vector<Index> positive;
    for (Index r : out.target_dense_rows) positive.push_back(uniq.at(r));
    Var ld = loss_dense(out.dense_pred, ad::gather_rows(dense_source, item_rows), positive,
                        cfg.similarity_scale);
    loss.dense_sum = ld.value()(0, 0);
    terms.push_back(ad::scale(ld, cfg.dense_weight));
  }
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  loss.objective = ad::scale(total, 1.0 / static_cast<double>(out.positions));
  return loss;
}

struct EpochStats {
  int epoch = 0;
  std::optional<double> l_sparse;  // per-prediction mean; absent when the term is off
  std::optional<double> l_dense;
  double total = 0.0;
  double seconds = 0.0;
  std::optional<double> val_total;  // final-position loss on validation sequences
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::uint64_t seed = 0;
  std::string config_hash;
  int best_epoch = 0;  // epoch whose parameters were kept

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,l_sparse,l_dense,total,seconds,val_total\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',';
      if (e.l_sparse) os << *e.l_sparse;
      os << ',';
      if (e.l_dense) os << *e.l_dense;
      os << ',' << e.total << ',' << e.seconds << ',';
      if (e.val_total) os << *e.val_total;
      os << '\n';
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : epochs) {
      nlohmann::json r = {{"epoch", e.epoch}, {"total", e.total}, {"seconds", e.seconds}};
      if (e.l_sparse) r["l_sparse"] = *e.l_sparse;
      if (e.l_dense) r["l_dense"] = *e.l_dense;
      if (e.val_total) r["val_total"] = *e.val_total;
      rows.push_back(r);
    }
    return {{"seed", seed},
            {"config_hash", config_hash},
            {"best_epoch", best_epoch},
            {"epochs", rows},
            {"final_total", epochs.empty() ? 0.0 : epochs.back().total}};
  }
};

namespace detail {

inline void shuffle(std::vector<int>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 *
                                            static_cast<double>(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

// Weighted loss of the last prediction of every sequence, without gradients.
inline double validation_loss(CobraModel& model, const TrainingData& data,
                              const TrainConfig& cfg) {
  const bool has_sparse = model.variant() != seq::Variant::kNoId;
  const bool has_dense = model.variant() != seq::Variant::kNoDense;
  double sum = 0.0;
  Index positions = 0;
  for (std::size_t start = 0; start < data.sequences.size();
       start += static_cast<std::size_t>(cfg.batch_size)) {
    std::vector<int> rows;
    for (std::size_t r = start;
         r < std::min(data.sequences.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++r)
      rows.push_back(static_cast<int>(r));
    Tape tape(false);
    const BatchLoss b = batch_loss(tape, model, data, rows, cfg, true);
    sum += (has_sparse ? cfg.sparse_weight * b.sparse_sum : 0.0) +
           (has_dense ? cfg.dense_weight * b.dense_sum : 0.0);
    positions += b.positions;
  }
  return sum / static_cast<double>(positions);
}

// Mini-batch training; the model is updated in place. Deterministic for a
// fixed seed since everything runs on one thread. With cfg.patience > 0,
// training stops once the validation loss has not improved for that many
// epochs and the best epoch's parameters are restored.
inline TrainReport train(CobraModel& model, const TrainingData& data, const TrainConfig& cfg,
                         const std::function<void(const EpochStats&)>& on_epoch = {},
                         const TrainingData* validation = nullptr) {
  if (data.sequences.empty()) throw ValidationError("no training sequences");
  if (cfg.patience > 0 && (validation == nullptr || validation->sequences.empty()))
    throw ValidationError("early stopping needs validation sequences");
  const bool has_sparse = model.variant() != seq::Variant::kNoId;
  const bool has_dense = model.variant() != seq::Variant::kNoDense;
  std::vector<Parameter*> params;
  for (Parameter* p : model.parameters()) {
    if (cfg.freeze_encoder && p->name.rfind("encoder.", 0) == 0) continue;
    if (!has_dense && p->name.rfind("encoder.", 0) == 0) continue;
    params.push_back(p);
  }
  nn::Optimizer opt(cfg.optimizer, cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed);
  TrainReport report;
  report.seed = cfg.seed;
  report.config_hash = hex64(fnv1a64(to_json(cfg).dump()));

  std::vector<int> order(data.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_values;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    detail::shuffle(order, rng);
    double sparse = 0.0, dense = 0.0;
    Index positions = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(end));
      model.zero_grad();
      Tape tape;
      BatchLoss loss = batch_loss(tape, model, data, rows, cfg);
      ++step;
      const double value = loss.objective.value()(0, 0);
      if (!std::isfinite(value)) {
        std::string users;
        for (int r : rows) users += data.users[static_cast<std::size_t>(r)] + " ";
        throw RuntimeError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + "; batch users: " + users);
      }
      tape.backward(loss.objective);
      nn::clip_grad_norm(params, cfg.grad_clip);
      opt.step(params);
      sparse += loss.sparse_sum;
      dense += loss.dense_sum;
      positions += loss.positions;
    }
    EpochStats s;
    s.epoch = epoch;
    const double p = static_cast<double>(positions);
    if (has_sparse) s.l_sparse = sparse / p;
    if (has_dense) s.l_dense = dense / p;
    s.total = (has_sparse ? cfg.sparse_weight * sparse / p : 0.0) +
              (has_dense ? cfg.dense_weight * dense / p : 0.0);
    if (validation != nullptr) s.val_total = validation_loss(model, *validation, cfg);
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(s);
    if (on_epoch) on_epoch(s);
    if (cfg.patience == 0) {
      report.best_epoch = epoch;
    } else if (*s.val_total < best) {
      best = *s.val_total;
      best_values.clear();
      for (Parameter* p : model.parameters()) best_values.push_back(p->value);
      report.best_epoch = epoch;
    } else if (epoch - report.best_epoch >= cfg.patience) {
      break;
    }
  }
  if (!best_values.empty()) {
    std::size_t i = 0;
    for (Parameter* p : model.parameters()) p->value = best_values[i++];
  }
  return report;
}

struct GradCheckGroup {
  std::string name;
  Index size = 0;
  double rel_error = 0.0;  // |analytic - numeric| / max(|analytic|, |numeric|), L2 over group
  double max_abs_error = 0.0;
  double analytic_norm = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;
  double step = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Central differences on the training objective over the whole fixture as
// one batch, compared per parameter tensor with the analytic gradient.
inline GradCheckReport grad_check(CobraModel& model, const TrainingData& data,
                                  const TrainConfig& cfg, double step = 1e-5,
                                  double tolerance = 1e-4) {
  std::vector<int> rows(data.sequences.size());
  std::iota(rows.begin(), rows.end(), 0);
  model.zero_grad();
  {
    Tape tape;
    BatchLoss loss = batch_loss(tape, model, data, rows, cfg);
    tape.backward(loss.objective);
  }
  auto objective = [&] {
    Tape tape(false);
    return batch_loss(tape, model, data, rows, cfg).objective.value()(0, 0);
  };
  GradCheckReport report;
  report.step = step;
  report.tolerance = tolerance;
  for (Parameter* p : model.parameters()) {
    if (cfg.freeze_encoder && p->name.rfind("encoder.", 0) == 0) continue;
    if (model.variant() == seq::Variant::kNoDense && p->name.rfind("encoder.", 0) == 0) continue;
    GradCheckGroup g;
    g.name = p->name;
    g.size = p->size();
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (Index i = 0; i < p->size(); ++i) {
      double& x = p->value.data()[i];
      const double keep = x;
      x = keep + step;
      const double up = objective();
      x = keep - step;
      const double down = objective();
      x = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p->grad.data()[i];
      diff_sq += (analytic - numeric) * (analytic - numeric);
      a_sq += analytic * analytic;
      n_sq += numeric * numeric;
      g.max_abs_error = std::max(g.max_abs_error, std::abs(analytic - numeric));
    }
    const double denom = std::max(std::sqrt(a_sq), std::sqrt(n_sq));
    g.analytic_norm = std::sqrt(a_sq);
    g.rel_error = denom > 1e-10 ? std::sqrt(diff_sq) / denom : std::sqrt(diff_sq);
    report.max_rel_error = std::max(report.max_rel_error, g.rel_error);
    report.groups.push_back(g);
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

struct GradCheckFixture {
  CobraModel model;
  TrainingData data;
};

// The standard tiny fixture: two items, one ID level with two codes, two
// users who see the items in opposite orders.
inline GradCheckFixture standard_gradcheck_fixture(std::uint64_t seed = 3) {
  std::vector<corpus::Item> items = {
      {"i1", {{"title", "red shoe"}, {"brand", "acme"}}},
      {"i2", {{"title", "blue hat"}, {"brand", "zeta"}}},
  };
  std::vector<corpus::Interaction> inter = {
      {"u1", "i1", 1}, {"u1", "i2", 2}, {"u2", "i2", 1}, {"u2", "i1", 2}};
  const corpus::Dataset ds = corpus::Dataset::from_records(items, inter);
  encoder::EncoderConfig ec;
  ec.embed_dim = 8;
  ec.heads = 2;
  ec.ffn_dim = 12;
  ec.layers = 1;
  ec.max_item_tokens = 12;
  ec.init_scale = 0.5;
  ec.seed = seed;
  seq::DecoderConfig dc;
  dc.model_dim = 8;
  dc.heads = 2;
  dc.ffn_dim = 12;
  dc.layers = 2;
  dc.max_history = 4;
  dc.codebook_sizes = {2};
  dc.init_scale = 0.5;
  dc.seed = seed + 1;
  GradCheckFixture f{CobraModel(encoder::build_vocab(ds, 64), ec, dc), {}};
  Matrix bag(2, 8);
  for (int i = 0; i < 2; ++i) {
    const DenseVector v = text::bag_of_tokens_embedding(ds.items()[i], 8);
    for (int c = 0; c < 8; ++c) bag(i, c) = v[c];
  }
  const quant::Quantizer q = quant::fit_quantizer(bag, quant::QuantizerConfig{{2}, 10, seed});
  const auto assignment = quant::assign_corpus(q, {"i1", "i2"}, bag);
  f.data = make_training_data(f.model, ds, assignment);
  return f;
}

}  // namespace cobra::train
