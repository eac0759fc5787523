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

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "cobra/trainer.hpp"
#include "test_util.hpp"

namespace cobra::train {
namespace {

using testing::random_matrix;

TEST(LossSparse, UniformLogitsGiveLogC) {
  const Matrix z = Matrix::Zero(1, 32);
  EXPECT_NEAR(loss_sparse_value({z}, {{7}}), std::log(32.0), 1e-12);
  EXPECT_NEAR(std::log(32.0), 3.4657, 1e-4);
}

TEST(LossSparse, LargeMarginGivesZero) {
  Matrix z = Matrix::Zero(1, 8);
  z(0, 3) = 100.0;
  EXPECT_NEAR(loss_sparse_value({z}, {{3}}), 0.0, 1e-12);
}

TEST(LossSparse, MatchesHandEvaluation) {
  std::mt19937_64 rng(1);
  const Matrix z0 = random_matrix(3, 5, rng), z1 = random_matrix(3, 4, rng);
  const std::vector<std::vector<Index>> tgt{{0, 4, 2}, {3, 1, 1}};
  double want = 0.0;
  for (const auto& [z, t] : {std::pair{&z0, &tgt[0]}, std::pair{&z1, &tgt[1]}}) {
    for (Index r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (Index c = 0; c < z->cols(); ++c) sum += std::exp((*z)(r, c));
      want -= std::log(std::exp((*z)(r, (*t)[r])) / sum);
    }
  }
  EXPECT_NEAR(loss_sparse_value({z0, z1}, tgt), want, 1e-12);
}

TEST(LossSparse, OutOfRangeTargetRejected) {
  EXPECT_THROW(loss_sparse_value({Matrix::Zero(1, 4)}, {{4}}), ValidationError);
  EXPECT_THROW(loss_sparse_value({Matrix::Zero(1, 4)}, {{-1}}), ValidationError);
  EXPECT_THROW(loss_sparse_value({Matrix::Zero(1, 4)}, {}), ValidationError);
}

TEST(LossDense, ClosedFormTwoTargets) {
  Matrix items(2, 3);
  items << 1, 0, 0, 0, 1, 0;
  const Matrix pred = items.row(0);
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(loss_dense_value(pred, items, {0}), want, 1e-12);
  EXPECT_NEAR(want, 0.3133, 1e-4);
}

TEST(LossDense, DuplicatePositivesCollapseToZero) {
  // Four predictions all targeting the same item: one batch row remains.
  Matrix pred(4, 3);
  pred << 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 0;
  const Matrix items = pred.row(0);
  EXPECT_NEAR(loss_dense_value(pred, items, {0, 0, 0, 0}), 0.0, 1e-12);
}

TEST(LossDense, ScaleInvariant) {
  std::mt19937_64 rng(2);
  const Matrix pred = random_matrix(3, 4, rng), items = random_matrix(5, 4, rng);
  const std::vector<Index> pos{0, 3, 4};
  const double base = loss_dense_value(pred, items, pos);
  Matrix p2 = pred, i2 = items;
  p2.row(1) *= 7.5;
  i2.row(3) *= 0.01;
  EXPECT_NEAR(loss_dense_value(p2, i2, pos), base, 1e-12);
}

TEST(LossDense, ZeroNormRejected) {
  Matrix items(2, 2);
  items << 1, 0, 0, 0;
  EXPECT_THROW(loss_dense_value(Matrix::Ones(1, 2), items, {0}), RuntimeError);
  EXPECT_THROW(loss_dense_value(Matrix::Ones(1, 2), items, {0, 1}), ValidationError);
}

TEST(GradCheck, StandardFixturePasses) {
  auto fx = standard_gradcheck_fixture();
  ASSERT_EQ(fx.data.item_ids.size(), 2u);
  ASSERT_EQ(fx.data.sequences.size(), 2u);
  const auto rep = grad_check(fx.model, fx.data, TrainConfig{}, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed) << "max rel err " << rep.max_rel_error;
  bool saw_encoder = false;
  for (const auto& g : rep.groups) {
    EXPECT_LE(g.rel_error, 1e-4) << g.name;
    saw_encoder = saw_encoder || g.name.rfind("encoder.", 0) == 0;
  }
  EXPECT_TRUE(saw_encoder);
}

TEST(GradCheck, StepSizesAgree) {
  auto a = standard_gradcheck_fixture();
  auto b = standard_gradcheck_fixture();
  const auto coarse = grad_check(a.model, a.data, TrainConfig{}, 1e-5, 1e-4);
  const auto fine = grad_check(b.model, b.data, TrainConfig{}, 1e-6, 1e-4);
  EXPECT_EQ(coarse.passed, fine.passed);
}

TEST(GradCheck, SparseOnlyPathStillReachesEncoder) {
  auto fx = standard_gradcheck_fixture();
  TrainConfig cfg;
  cfg.dense_weight = 0.0;
  const auto rep = grad_check(fx.model, fx.data, cfg);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  for (const auto& g : rep.groups)
    if (g.name == "encoder.token_emb") {
      EXPECT_GT(g.analytic_norm, 0.0);
    }
}

TEST(GradCheck, DensePositivePathReachesEncoder) {
  auto fx = standard_gradcheck_fixture();
  TrainConfig cfg;
  cfg.sparse_weight = 0.0;
  const auto rep = grad_check(fx.model, fx.data, cfg);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  for (const auto& g : rep.groups)
    if (g.name == "encoder.token_emb") {
      EXPECT_GT(g.analytic_norm, 0.0);
    }
}

TEST(GradCheck, DetectsBrokenGradient) {
  auto fx = standard_gradcheck_fixture();
  // A tolerance no real check can meet proves the comparison is live.
  const auto rep = grad_check(fx.model, fx.data, TrainConfig{}, 1e-5, 0.0);
  EXPECT_FALSE(rep.passed);
}

TEST(Train, DeterministicGivenSeed) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 1;
  cfg.seed = 9;
  auto a = standard_gradcheck_fixture();
  auto b = standard_gradcheck_fixture();
  const auto ra = train(a.model, a.data, cfg);
  const auto rb = train(b.model, b.data, cfg);
  ASSERT_EQ(ra.epochs.size(), 5u);
  for (std::size_t e = 0; e < 5; ++e) {
    EXPECT_EQ(ra.epochs[e].total, rb.epochs[e].total);
    EXPECT_EQ(ra.epochs[e].l_sparse, rb.epochs[e].l_sparse);
    EXPECT_EQ(ra.epochs[e].l_dense, rb.epochs[e].l_dense);
  }
  EXPECT_EQ(ra.config_hash, rb.config_hash);
}

TEST(Train, LossFallsOnTinyFixture) {
  auto fx = standard_gradcheck_fixture();
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 1e-2;
  const auto rep = train(fx.model, fx.data, cfg);
  EXPECT_LT(rep.epochs.back().total, 0.5 * rep.epochs.front().total);
  for (const auto& e : rep.epochs) {
    EXPECT_TRUE(std::isfinite(e.total));
    EXPECT_GE(*e.l_sparse, 0.0);
  }
}

TEST(Train, NoDenseReportsOnlySparse) {
  auto fx = standard_gradcheck_fixture();
  auto dc = fx.model.decoder().config();
  dc.variant = seq::Variant::kNoDense;
  CobraModel m(fx.model.vocab(), fx.model.item_encoder().config(), dc);
  TrainConfig cfg;
  cfg.epochs = 2;
  const auto rep = train(m, fx.data, cfg);
  for (const auto& e : rep.epochs) {
    EXPECT_TRUE(e.l_sparse.has_value());
    EXPECT_FALSE(e.l_dense.has_value());
    EXPECT_DOUBLE_EQ(e.total, *e.l_sparse);
  }
  EXPECT_NE(rep.to_csv().find("\n1,"), std::string::npos);
  EXPECT_FALSE(rep.to_json()["epochs"][0].contains("l_dense"));
}

TEST(Train, NoIdReportsOnlyDense) {
  auto fx = standard_gradcheck_fixture();
  auto dc = fx.model.decoder().config();
  dc.variant = seq::Variant::kNoId;
  CobraModel m(fx.model.vocab(), fx.model.item_encoder().config(), dc);
  TrainConfig cfg;
  cfg.epochs = 2;
  const auto rep = train(m, fx.data, cfg);
  for (const auto& e : rep.epochs) {
    EXPECT_FALSE(e.l_sparse.has_value());
    EXPECT_TRUE(e.l_dense.has_value());
  }
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  auto fx = standard_gradcheck_fixture();
  for (Parameter* p : fx.model.parameters())
    if (p->name == "decoder.sparse_head0.weight" || p->name == "decoder.type_emb")
      p->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(fx.model, fx.data, cfg);
    FAIL() << "expected abort";
  } catch (const RuntimeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch users"), std::string::npos) << msg;
  }
}

TEST(Train, FrozenEncoderLeavesEncoderUntouched) {
  auto fx = standard_gradcheck_fixture();
  const Matrix before = fx.model.item_encoder().encode_all(fx.data.tokens);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.freeze_encoder = true;
  train(fx.model, fx.data, cfg);
  EXPECT_EQ(fx.model.item_encoder().encode_all(fx.data.tokens), before);
  cfg.freeze_encoder = false;
  train(fx.model, fx.data, cfg);
  EXPECT_NE(fx.model.item_encoder().encode_all(fx.data.tokens), before);
}

TEST(Train, EarlyStoppingRestoresBestEpoch) {
  auto fx = standard_gradcheck_fixture();
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.learning_rate = 0.05;
  cfg.patience = 2;
  const auto rep = train(fx.model, fx.data, cfg, {}, &fx.data);
  ASSERT_GE(rep.best_epoch, 1);
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& e : rep.epochs) {
    ASSERT_TRUE(e.val_total.has_value());
    lowest = std::min(lowest, *e.val_total);
  }
  const auto& best = rep.epochs[static_cast<std::size_t>(rep.best_epoch - 1)];
  EXPECT_EQ(*best.val_total, lowest);
  if (static_cast<int>(rep.epochs.size()) < cfg.epochs) {
    EXPECT_EQ(static_cast<int>(rep.epochs.size()), rep.best_epoch + cfg.patience);
  }
  EXPECT_EQ(validation_loss(fx.model, fx.data, cfg), *best.val_total);
  EXPECT_NE(rep.to_csv().find("val_total"), std::string::npos);
  EXPECT_EQ(rep.to_json()["best_epoch"], rep.best_epoch);
}

TEST(Train, PatienceNeedsValidation) {
  auto fx = standard_gradcheck_fixture();
  TrainConfig cfg;
  cfg.patience = 1;
  EXPECT_THROW(train(fx.model, fx.data, cfg), ValidationError);
}

TEST(Train, HoldoutDataAppendsTargetAndTruncates) {
  auto fx = standard_gradcheck_fixture();
  const auto& ids = fx.data.item_ids;
  ASSERT_GE(ids.size(), 2u);
  const std::vector<corpus::TestCase> rows{{"a", {ids[0], ids[1], ids[0]}, ids[1]},
                                           {"b", {ids[1]}, ids[0]}};
  const TrainingData d = holdout_data(fx.data, rows, 2);
  EXPECT_EQ(d.item_ids, fx.data.item_ids);
  EXPECT_EQ(d.users, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(d.sequences.size(), 2u);
  EXPECT_EQ(d.sequences[0], (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(d.sequences[1], (std::vector<int>{1, 0}));
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.epochs = 7;
  c.optimizer = nn::OptimizerKind::kSgd;
  c.similarity_scale = 10.0;
  c.patience = 4;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"optimizer", "lbfgs"}}), ValidationError);
  EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), ValidationError);
  EXPECT_THROW(train_config_from_json({{"learning_rate", -1.0}}), ValidationError);
  EXPECT_THROW(train_config_from_json({{"patience", -1}}), ValidationError);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  auto fx = standard_gradcheck_fixture();
  const auto dir = testing::temp_dir("ckpt");
  const std::string path = (dir / "checkpoint.json").string();
  fx.model.save(path, {{"note", "x"}});
  CobraModel back = CobraModel::load(path);
  EXPECT_EQ(back.item_encoder().encode_all(fx.data.tokens),
            fx.model.item_encoder().encode_all(fx.data.tokens));
  EXPECT_EQ(back.to_json(), fx.model.to_json());
  auto j = fx.model.to_json();
  j["float_bits"] = 32;
  EXPECT_THROW(CobraModel::from_json(j), ValidationError);
}

}  // namespace
}  // namespace cobra::train
