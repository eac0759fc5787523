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

// The trainable model bundle (vocabulary + item encoder + cascaded decoder),
// its checkpoint format, and the index-form training corpus it consumes.

#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/corpus.hpp"
#include "cobra/item_encoder.hpp"
#include "cobra/quantizer.hpp"
#include "cobra/seq_model.hpp"

namespace cobra {

inline constexpr int kCheckpointVersion = 1;

class CobraModel {
 public:
  CobraModel() = default;
  CobraModel(encoder::Vocabulary vocab, const encoder::EncoderConfig& enc_cfg,
             seq::DecoderConfig dec_cfg)
      : vocab_(std::move(vocab)) {
    dec_cfg.embed_dim = enc_cfg.embed_dim;
    encoder_ = encoder::ItemEncoder(enc_cfg, vocab_.size());
    decoder_ = seq::CascadedDecoder(dec_cfg);
  }

  const encoder::Vocabulary& vocab() const { return vocab_; }
  encoder::ItemEncoder& item_encoder() { return encoder_; }
  const encoder::ItemEncoder& item_encoder() const { return encoder_; }
  seq::CascadedDecoder& decoder() { return decoder_; }
  const seq::CascadedDecoder& decoder() const { return decoder_; }
  seq::Variant variant() const { return decoder_.config().variant; }

  encoder::TokenSequence tokenize(const corpus::Item& item) const {
    return encoder::tokenize_item(item, vocab_, encoder_.config().max_item_tokens);
  }

  template <typename F>
  void visit(F&& f) {
    encoder_.visit(f);
    decoder_.visit(f);
  }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    visit([&](ad::Parameter& p) { out.push_back(&p); });
    return out;
  }

  void zero_grad() {
    visit([](ad::Parameter& p) { p.zero_grad(); });
  }

  nlohmann::json to_json(const nlohmann::json& extra = nlohmann::json::object()) {
    return {{"format", "cobra-checkpoint"},
            {"version", kCheckpointVersion},
            {"float_bits", 64},
            {"config",
             {{"encoder", encoder::to_json(encoder_.config())},
              {"decoder", seq::to_json(decoder_.config())}}},
            {"vocab", vocab_.to_json()},
            {"encoder_params", nn::params_to_json(encoder_)},
            {"decoder_params", nn::params_to_json(decoder_)},
            {"extra", extra}};
  }

  static CobraModel from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "cobra-checkpoint")
      throw ValidationError("not a checkpoint artifact");
    if (j.value("version", 0) != kCheckpointVersion)
      throw ValidationError("unsupported checkpoint version " +
                            std::to_string(j.value("version", 0)));
    if (j.value("float_bits", 0) != 64)
      throw ValidationError("checkpoint float width is not 64 bits");
    CobraModel m(encoder::Vocabulary::from_json(j.at("vocab")),
                 encoder::encoder_config_from_json(j.at("config").at("encoder")),
                 seq::decoder_config_from_json(j.at("config").at("decoder")));
    nn::params_from_json(m.encoder_, j.at("encoder_params"));
    nn::params_from_json(m.decoder_, j.at("decoder_params"));
    return m;
  }

  void save(const std::string& path, const nlohmann::json& extra = nlohmann::json::object()) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path);
    out << to_json(extra).dump();
  }

  static CobraModel load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path);
    return from_json(nlohmann::json::parse(in));
  }

 private:
  encoder::Vocabulary vocab_;
  encoder::ItemEncoder encoder_;
  seq::CascadedDecoder decoder_;
};

// Catalog and user sequences in index form, ready for batching.
struct TrainingData {
  std::vector<std::string> item_ids;
  std::vector<encoder::TokenSequence> tokens;  // parallel to item_ids
  std::vector<quant::SparseId> ids;            // parallel to item_ids
  std::vector<std::string> users;
  std::vector<std::vector<int>> sequences;     // item indices, oldest first
};

// Sequences longer than max_history + 1 keep their most recent items;
// single-item sequences carry no prediction target and are dropped.
inline TrainingData make_training_data(const CobraModel& model, const corpus::Dataset& train,
                                       const quant::CorpusAssignment& assignment) {
  TrainingData d;
  for (const auto& item : train.items()) {
    d.item_ids.push_back(item.item_id);
    d.tokens.push_back(model.tokenize(item));
    d.ids.push_back(assignment.id_of(item.item_id));
  }
  const std::size_t window =
      static_cast<std::size_t>(model.decoder().config().max_history) + 1;
  std::size_t truncated = 0;
  for (const auto& seq : train.sequences()) {
    if (seq.events.size() < 2) continue;
    std::vector<int> idx;
    for (const auto& e : seq.events) idx.push_back(static_cast<int>(train.item_position(e.item_id)));
    if (idx.size() > window) {
      idx.erase(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(window));
      ++truncated;
    }
    d.users.push_back(seq.user_id);
    d.sequences.push_back(std::move(idx));
  }
  if (truncated > 0)
    spdlog::info("training data: {} sequences truncated to their last {} items", truncated,
                 window);
  return d;
}

// Catalog of `base` with one sequence per row: its history, then its target.
inline TrainingData holdout_data(const TrainingData& base,
                                 const std::vector<corpus::TestCase>& rows, int max_history) {
  TrainingData d = base;
  d.users.clear();
  d.sequences.clear();
  std::map<std::string, int> position;
  for (std::size_t i = 0; i < base.item_ids.size(); ++i)
    position.emplace(base.item_ids[i], static_cast<int>(i));
  const std::size_t window = static_cast<std::size_t>(max_history) + 1;
  for (const auto& row : rows) {
    std::vector<int> idx;
    for (const auto& id : row.history) idx.push_back(position.at(id));
    idx.push_back(position.at(row.target));
    if (idx.size() > window) idx.erase(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(window));
    d.users.push_back(row.user_id);
    d.sequences.push_back(std::move(idx));
  }
  return d;
}

}  // namespace cobra
