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

// End-to-end run orchestration from one declarative config document.
//
// A run lives in <output root>/<config hash>/ and is built by five stages:
//
//   data      corpus load or synthesis, k-core filter, split
//   quantize  text embeddings -> residual k-means -> ids.tsv
//   train     vocabulary, model, optimisation -> checkpoint.json
//   index     encoder embeddings of the catalog -> embeddings.tsv
//   eval      metrics.csv, sweep.csv, ablations.csv
//
// Each finished stage leaves <stage>.done; a failed one leaves
// <stage>.failed next to whatever it had written.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/corpus.hpp"
#include "cobra/evalkit.hpp"
#include "cobra/item_encoder.hpp"
#include "cobra/model.hpp"
#include "cobra/quantizer.hpp"
#include "cobra/retriever.hpp"
#include "cobra/seq_model.hpp"
#include "cobra/text.hpp"
#include "cobra/trainer.hpp"

namespace cobra::pipeline {

namespace fs = std::filesystem;
using ad::Index;
using ad::Matrix;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "COBRA_OUTPUT_ROOT";

inline std::string output_root(const std::string& override_root = "") {
  if (!override_root.empty()) return override_root;
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  return "runs";
}

struct DataConfig {
  std::optional<corpus::SyntheticConfig> synthetic;
  std::string items_path;         // as written in the config
  std::string interactions_path;
  std::string items_resolved;     // relative to the config file
  std::string interactions_resolved;
  int k_core = 1;
  corpus::SplitSpec split;
};

struct QuantizeConfig {
  std::vector<int> codebook_sizes{8, 4};
  int iters = 50;
  int input_dim = 64;  // hashed bag-of-tokens width; 0 in a config means encoder embed_dim
  std::uint64_t seed = 0;
  int restarts = 8;
};

struct SweepConfig {
  bool enabled = false;
  std::vector<double> taus{0.0, 0.3, 0.6, 0.9, 1.2};
  int k = 0;  // 0: min(2000, catalog size / 2)
  int m = 0;  // 0: fusion.m
  int n = 0;  // 0: fusion.n
};

struct AblationSpec {
  std::string name;  // no-id, no-dense or no-beamfusion
  std::vector<int> codebook_sizes;  // no-dense only; empty reuses the main IDs
};

struct RunConfig {
  json document;  // fully resolved, canonical
  std::string hash;
  std::string base_dir;
  std::uint64_t seed = 0;
  DataConfig data;
  QuantizeConfig quantize;
  int vocab_size = 4096;
  encoder::EncoderConfig encoder;
  seq::DecoderConfig decoder;
  train::TrainConfig train;
  retrieval::FusionConfig fusion;
  std::vector<int> ks{1, 5, 10, 50, 100};
  SweepConfig sweep;
  std::vector<AblationSpec> ablations;
};

inline std::string config_hash(const json& doc) { return hex64(fnv1a64(doc.dump())); }

namespace detail {

inline void reject_unknown(const json& j, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ValidationError("unknown config key '" + where + "." + key + "'");
  }
}

inline corpus::SyntheticConfig synthetic_from_json(const json& j, std::uint64_t seed) {
  reject_unknown(j, "data.synthetic",
                 {"n_users", "n_items", "n_categories", "n_subcategories", "min_seq_len",
                  "max_seq_len", "vocab_size", "within_category_prob", "successor_skew", "seed"});
  corpus::SyntheticConfig c;
  c.n_users = j.value("n_users", c.n_users);
  c.n_items = j.value("n_items", c.n_items);
  c.n_categories = j.value("n_categories", c.n_categories);
  c.n_subcategories = j.value("n_subcategories", c.n_subcategories);
  c.min_seq_len = j.value("min_seq_len", c.min_seq_len);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.within_category_prob = j.value("within_category_prob", c.within_category_prob);
  c.successor_skew = j.value("successor_skew", c.successor_skew);
  c.seed = j.value("seed", seed);
  corpus::validate(c);
  return c;
}

inline json synthetic_to_json(const corpus::SyntheticConfig& c) {
  return {{"n_users", c.n_users},
          {"n_items", c.n_items},
          {"n_categories", c.n_categories},
          {"n_subcategories", c.n_subcategories},
          {"min_seq_len", c.min_seq_len},
          {"max_seq_len", c.max_seq_len},
          {"vocab_size", c.vocab_size},
          {"within_category_prob", c.within_category_prob},
          {"successor_skew", c.successor_skew},
          {"seed", c.seed}};
}

inline json fusion_to_json(const retrieval::FusionConfig& f) {
  return {{"m", f.m}, {"n", f.n}, {"tau", f.tau}, {"psi", f.psi}};
}

}  // namespace detail

// Fills defaults, validates, and derives per-component seeds from "seed"
// where a component does not set its own.
inline RunConfig parse_run_config(const json& j, const std::string& base_dir = ".") {
  detail::reject_unknown(j, "config",
                         {"seed", "data", "quantizer", "vocab_size", "encoder", "decoder",
                          "train", "fusion", "eval", "sweep", "ablations"});
  RunConfig rc;
  rc.base_dir = base_dir;
  rc.seed = j.value("seed", std::uint64_t{0});

  const json data = j.value("data", json::object());
  detail::reject_unknown(data, "data",
                         {"synthetic", "items", "interactions", "k_core", "split", "cutoff"});
  if (data.contains("synthetic")) {
    if (data.contains("items") || data.contains("interactions"))
      throw ValidationError("data: give either synthetic or items/interactions, not both");
    rc.data.synthetic = detail::synthetic_from_json(data.at("synthetic"), rc.seed);
  } else {
    if (!data.contains("items") || !data.contains("interactions"))
      throw ValidationError("data: items and interactions paths are required");
    rc.data.items_path = data.at("items").get<std::string>();
    rc.data.interactions_path = data.at("interactions").get<std::string>();
    auto resolve = [&](const std::string& p) {
      return fs::path(p).is_absolute() ? p : (fs::path(base_dir) / p).string();
    };
    rc.data.items_resolved = resolve(rc.data.items_path);
    rc.data.interactions_resolved = resolve(rc.data.interactions_path);
    if (!fs::exists(rc.data.items_resolved))
      throw ValidationError("items file not found: " + rc.data.items_resolved);
    if (!fs::exists(rc.data.interactions_resolved))
      throw ValidationError("interactions file not found: " + rc.data.interactions_resolved);
  }
  rc.data.k_core = data.value("k_core", 1);
  if (rc.data.k_core < 1) throw ValidationError("data.k_core must be >= 1");
  const std::string scheme = data.value("split", std::string("leave-one-out"));
  if (scheme == "leave-one-out") {
    rc.data.split.scheme = corpus::SplitScheme::kLeaveOneOut;
  } else if (scheme == "temporal") {
    rc.data.split.scheme = corpus::SplitScheme::kTemporalCutoff;
    if (!data.contains("cutoff")) throw ValidationError("data.cutoff required for temporal split");
    rc.data.split.cutoff = data.at("cutoff").get<std::int64_t>();
  } else {
    throw ValidationError("data.split must be leave-one-out or temporal");
  }

  const json q = j.value("quantizer", json::object());
  detail::reject_unknown(q, "quantizer", {"codebook_sizes", "iters", "input_dim", "seed", "restarts"});
  rc.quantize.codebook_sizes = q.value("codebook_sizes", rc.quantize.codebook_sizes);
  rc.quantize.iters = q.value("iters", rc.quantize.iters);
  rc.quantize.input_dim = q.value("input_dim", 0);
  rc.quantize.seed = q.value("seed", rc.seed);
  rc.quantize.restarts = q.value("restarts", rc.quantize.restarts);
  if (rc.quantize.codebook_sizes.empty()) throw ValidationError("quantizer needs >= 1 level");
  for (int c : rc.quantize.codebook_sizes)
    if (c < 1) throw ValidationError("quantizer codebook sizes must be >= 1");
  if (rc.quantize.iters < 1 || rc.quantize.input_dim < 0 || rc.quantize.restarts < 1)
    throw ValidationError("quantizer iters and restarts must be >= 1 and input_dim >= 0");

  rc.vocab_size = j.value("vocab_size", rc.vocab_size);
  if (rc.vocab_size <= encoder::Vocabulary::kSpecials)
    throw ValidationError("vocab_size must exceed 4");

  json enc = j.value("encoder", json::object());
  detail::reject_unknown(enc, "encoder",
                         {"embed_dim", "layers", "heads", "ffn_dim", "max_item_tokens",
                          "init_scale", "seed"});
  if (!enc.contains("seed")) enc["seed"] = rc.seed + 1;
  rc.encoder = encoder::encoder_config_from_json(enc);
  if (rc.quantize.input_dim == 0) rc.quantize.input_dim = rc.encoder.embed_dim;
  if (rc.encoder.embed_dim < 1 || rc.encoder.heads < 1 ||
      rc.encoder.embed_dim % rc.encoder.heads != 0 || rc.encoder.layers < 0 ||
      rc.encoder.ffn_dim < 1 || rc.encoder.max_item_tokens < 2)
    throw ValidationError("encoder: invalid dimensions");

  json dec = j.value("decoder", json::object());
  detail::reject_unknown(dec, "decoder",
                         {"model_dim", "layers", "heads", "ffn_dim", "max_history", "init_scale",
                          "seed"});
  if (!dec.contains("seed")) dec["seed"] = rc.seed + 2;
  rc.decoder = seq::decoder_config_from_json(dec);
  rc.decoder.embed_dim = rc.encoder.embed_dim;
  rc.decoder.codebook_sizes = rc.quantize.codebook_sizes;
  rc.decoder.variant = seq::Variant::kFull;
  if (rc.decoder.model_dim < 1 || rc.decoder.heads < 1 ||
      rc.decoder.model_dim % rc.decoder.heads != 0 || rc.decoder.layers < 0 ||
      rc.decoder.ffn_dim < 1 || rc.decoder.max_history < 1)
    throw ValidationError("decoder: invalid dimensions");

  json tr = j.value("train", json::object());
  detail::reject_unknown(tr, "train",
                         {"batch_size", "epochs", "learning_rate", "optimizer", "seed",
                          "sparse_weight", "dense_weight", "similarity_scale", "grad_clip",
                          "freeze_encoder", "patience"});
  if (!tr.contains("seed")) tr["seed"] = rc.seed + 3;
  rc.train = train::train_config_from_json(tr);

  const json fu = j.value("fusion", json::object());
  detail::reject_unknown(fu, "fusion", {"m", "n", "tau", "psi"});
  rc.fusion.m = fu.value("m", rc.fusion.m);
  rc.fusion.n = fu.value("n", rc.fusion.n);
  rc.fusion.tau = fu.value("tau", rc.fusion.tau);
  rc.fusion.psi = fu.value("psi", rc.fusion.psi);
  rc.fusion.validate();

  const json ev = j.value("eval", json::object());
  detail::reject_unknown(ev, "eval", {"ks"});
  rc.ks = ev.value("ks", rc.ks);
  if (rc.ks.empty()) throw ValidationError("eval.ks must not be empty");
  for (int k : rc.ks)
    if (k < 1) throw ValidationError("eval.ks entries must be >= 1");
  std::sort(rc.ks.begin(), rc.ks.end());
  rc.ks.erase(std::unique(rc.ks.begin(), rc.ks.end()), rc.ks.end());

  if (j.contains("sweep")) {
    const json& sw = j.at("sweep");
    detail::reject_unknown(sw, "sweep", {"taus", "k", "m", "n"});
    rc.sweep.enabled = true;
    rc.sweep.taus = sw.value("taus", rc.sweep.taus);
    rc.sweep.k = sw.value("k", 0);
    rc.sweep.m = sw.value("m", 0);
    rc.sweep.n = sw.value("n", 0);
    if (rc.sweep.taus.empty()) throw ValidationError("sweep.taus must not be empty");
    for (double t : rc.sweep.taus)
      if (t < 0.0) throw ValidationError("sweep.taus entries must be >= 0");
    if (rc.sweep.k < 0 || rc.sweep.m < 0 || rc.sweep.n < 0)
      throw ValidationError("sweep k, m, n must be >= 0");
  }

  for (const auto& a : j.value("ablations", json::array())) {
    AblationSpec spec;
    if (a.is_string()) {
      spec.name = a.get<std::string>();
    } else {
      detail::reject_unknown(a, "ablations[]", {"name", "codebook_sizes"});
      spec.name = a.at("name").get<std::string>();
      spec.codebook_sizes = a.value("codebook_sizes", std::vector<int>{});
    }
    if (spec.name != "no-id" && spec.name != "no-dense" && spec.name != "no-beamfusion")
      throw ValidationError("unknown ablation '" + spec.name + "'");
    if (!spec.codebook_sizes.empty() && spec.name != "no-dense")
      throw ValidationError("only the no-dense ablation takes codebook_sizes");
    for (int c : spec.codebook_sizes)
      if (c < 1) throw ValidationError("ablation codebook sizes must be >= 1");
    for (const auto& prev : rc.ablations)
      if (prev.name == spec.name) throw ValidationError("duplicate ablation " + spec.name);
    rc.ablations.push_back(std::move(spec));
  }

  json doc;
  doc["seed"] = rc.seed;
  if (rc.data.synthetic) {
    doc["data"]["synthetic"] = detail::synthetic_to_json(*rc.data.synthetic);
  } else {
    doc["data"]["items"] = rc.data.items_path;
    doc["data"]["interactions"] = rc.data.interactions_path;
  }
  doc["data"]["k_core"] = rc.data.k_core;
  doc["data"]["split"] = scheme;
  if (scheme == "temporal") doc["data"]["cutoff"] = rc.data.split.cutoff;
  doc["quantizer"] = {{"codebook_sizes", rc.quantize.codebook_sizes},
                      {"iters", rc.quantize.iters},
                      {"input_dim", rc.quantize.input_dim},
                      {"seed", rc.quantize.seed},
                      {"restarts", rc.quantize.restarts}};
  doc["vocab_size"] = rc.vocab_size;
  doc["encoder"] = encoder::to_json(rc.encoder);
  json dj = seq::to_json(rc.decoder);
  for (const char* k : {"embed_dim", "codebook_sizes", "variant"}) dj.erase(k);
  doc["decoder"] = dj;
  doc["train"] = train::to_json(rc.train);
  doc["fusion"] = detail::fusion_to_json(rc.fusion);
  doc["eval"] = {{"ks", rc.ks}};
  if (rc.sweep.enabled)
    doc["sweep"] = {{"taus", rc.sweep.taus}, {"k", rc.sweep.k}, {"m", rc.sweep.m},
                    {"n", rc.sweep.n}};
  json abl = json::array();
  for (const auto& a : rc.ablations) {
    json x = {{"name", a.name}};
    if (!a.codebook_sizes.empty()) x["codebook_sizes"] = a.codebook_sizes;
    abl.push_back(x);
  }
  if (!abl.empty()) doc["ablations"] = abl;
  rc.document = doc;
  rc.hash = config_hash(doc);
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config file not found: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
  try {
    return parse_run_config(j, fs::absolute(path).parent_path().string());
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

enum class Stage { kData = 0, kQuantize, kTrain, kIndex, kEval };
inline constexpr const char* kStageNames[] = {"data", "quantize", "train", "index", "eval"};

inline const char* stage_name(Stage s) { return kStageNames[static_cast<int>(s)]; }

// Test rows as JSON lines: {"user_id", "history", "target"}.
inline void save_tests(const std::vector<corpus::TestCase>& tests, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path);
  for (const auto& t : tests)
    out << json{{"user_id", t.user_id}, {"history", t.history}, {"target", t.target}}.dump()
        << '\n';
}

inline std::vector<corpus::TestCase> load_tests(const std::string& path) {
  std::vector<corpus::TestCase> out;
  for (const auto& row : corpus::detail::read_jsonl(path))
    out.push_back(corpus::TestCase{row.at("user_id").get<std::string>(),
                                   row.at("history").get<std::vector<std::string>>(),
                                   row.at("target").get<std::string>()});
  return out;
}

inline retrieval::CandidateIndex load_index(const quant::CorpusAssignment& assignment,
                                            const std::string& embeddings_path) {
  std::ifstream in(embeddings_path);
  if (!in) throw ValidationError("cannot open " + embeddings_path);
  retrieval::CandidateIndex index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    retrieval::IndexedItem it;
    std::string cell;
    std::getline(ss, it.item_id, '\t');
    while (std::getline(ss, cell, '\t')) it.raw.push_back(std::strtod(cell.c_str(), nullptr));
    if (it.raw.empty())
      throw ValidationError(embeddings_path + ":" + std::to_string(lineno) + ": malformed line");
    it.id = assignment.id_of(it.item_id);
    double norm = 0.0;
    for (double x : it.raw) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw RuntimeError("item " + it.item_id + " has a zero-norm embedding");
    it.unit = it.raw;
    for (double& x : it.unit) x /= norm;
    index.add(std::move(it));
  }
  return index;
}

inline Matrix text_embeddings(const corpus::Dataset& d, int dim) {
  Matrix m(static_cast<Index>(d.items().size()), dim);
  for (std::size_t i = 0; i < d.items().size(); ++i) {
    const auto v = text::bag_of_tokens_embedding(d.items()[i], dim);
    for (int c = 0; c < dim; ++c) m(static_cast<Index>(i), c) = v[static_cast<std::size_t>(c)];
  }
  return m;
}

inline quant::CorpusAssignment quantize_catalog(const corpus::Dataset& d,
                                                const QuantizeConfig& qc,
                                                const std::vector<int>& sizes,
                                                quant::Quantizer* fitted = nullptr) {
  for (int c : sizes)
    if (static_cast<std::size_t>(c) > d.items().size())
      throw ValidationError("codebook size " + std::to_string(c) + " exceeds the " +
                            std::to_string(d.items().size()) + "-item catalog");
  const Matrix emb = text_embeddings(d, qc.input_dim);
  quant::Quantizer q = quant::fit_quantizer(emb, quant::QuantizerConfig{sizes, qc.iters, qc.seed, qc.restarts});
  std::vector<std::string> ids;
  for (const auto& item : d.items()) ids.push_back(item.item_id);
  auto a = quant::assign_corpus(q, ids, emb);
  if (fitted) *fitted = std::move(q);
  return a;
}

// Artifacts of one run directory plus stage bookkeeping.
class Run {
 public:
  Run(RunConfig cfg, const std::string& root, bool force)
      : cfg_(std::move(cfg)), dir_(fs::path(root) / cfg_.hash), force_(force) {}

  const RunConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  bool done(Stage s) const { return fs::exists(marker(s, ".done")); }

  // Runs every stage up to and including `last`. Finished stages are
  // skipped unless force is set; rerunning a stage invalidates later ones.
  // Returns the names of the stages that ran.
  std::vector<std::string> run_until(Stage last) {
    fs::create_directories(dir_);
    write_file(path("config.json"), cfg_.document.dump(2) + "\n");
    std::vector<std::string> ran;
    bool upstream_ran = false;
    for (int i = 0; i <= static_cast<int>(last); ++i) {
      const Stage s = static_cast<Stage>(i);
      if (!force_ && !upstream_ran && done(s)) {
        spdlog::info("stage {}: done, skipped", stage_name(s));
        continue;
      }
      for (int j = i; j < 5; ++j) fs::remove(marker(static_cast<Stage>(j), ".done"));
      fs::remove(marker(s, ".failed"));
      resume_ablations_ = !force_ && !upstream_ran;
      spdlog::info("stage {}: running", stage_name(s));
      try {
        run_stage(s);
      } catch (const std::exception& e) {
        write_file(marker(s, ".failed"), std::string(e.what()) + "\n");
        throw;
      }
      write_file(marker(s, ".done"), std::string(stage_name(s)) + "\n");
      ran.push_back(stage_name(s));
      upstream_ran = true;
    }
    return ran;
  }

  void require(Stage s) const {
    if (!done(s))
      throw ValidationError(std::string("stage ") + stage_name(s) + " has not completed in " +
                            dir_.string());
  }

  corpus::Dataset full_data() const {
    return corpus::load_dataset(path("data/items.jsonl").string(),
                                path("data/interactions.jsonl").string());
  }
  corpus::Dataset train_data() const {
    return corpus::load_dataset(path("data/items.jsonl").string(),
                                path("data/train.jsonl").string());
  }
  std::vector<corpus::TestCase> tests() const { return load_tests(path("data/test.jsonl").string()); }
  quant::CorpusAssignment assignment() const { return quant::read_ids_tsv(path("ids.tsv").string()); }
  CobraModel model() const { return CobraModel::load(path("checkpoint.json").string()); }
  retrieval::CandidateIndex index() const {
    return load_index(assignment(), path("embeddings.tsv").string());
  }

  retrieval::FusionConfig sweep_fusion(std::size_t catalog_size) const {
    retrieval::FusionConfig f = cfg_.fusion;
    if (cfg_.sweep.m > 0) f.m = cfg_.sweep.m;
    if (cfg_.sweep.n > 0) f.n = cfg_.sweep.n;
    f.k = cfg_.sweep.k > 0 ? cfg_.sweep.k : eval::default_sweep_k(catalog_size);
    return f;
  }

  std::vector<eval::SweepPoint> sweep(const std::vector<double>& taus,
                                      const retrieval::FusionConfig& f) const {
    CobraModel m = model();
    return eval::sweep_tau(m, index(), assignment(), tests(), taus, f);
  }

 private:
  fs::path marker(Stage s, const char* ext) const {
    return dir_ / (std::string(stage_name(s)) + ext);
  }

  static void write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    eval::write_text(p.string(), text);
  }

  void run_stage(Stage s) {
    switch (s) {
      case Stage::kData: return stage_data();
      case Stage::kQuantize: return stage_quantize();
      case Stage::kTrain: return stage_train();
      case Stage::kIndex: return stage_index();
      case Stage::kEval: return stage_eval();
    }
  }

  void stage_data() {
    corpus::Dataset d = cfg_.data.synthetic
                            ? corpus::generate_synthetic(*cfg_.data.synthetic)
                            : corpus::load_dataset(cfg_.data.items_resolved,
                                                   cfg_.data.interactions_resolved);
    d = corpus::filter_k_core(d, cfg_.data.k_core);
    const auto sp = corpus::split(d, cfg_.data.split);
    if (sp.test.empty()) throw ValidationError("split produced no test users");
    fs::create_directories(path("data"));
    corpus::save_dataset(d, path("data/items.jsonl").string(),
                         path("data/interactions.jsonl").string());
    corpus::save_dataset(sp.train, path("data/items.jsonl").string(),
                         path("data/train.jsonl").string());
    save_tests(sp.test, path("data/test.jsonl").string());
    const auto st = d.stats();
    json stats = {{"users", st.n_users},
                  {"items", st.n_items},
                  {"interactions", st.n_interactions},
                  {"test_users", sp.test.size()}};
    write_file(path("data/stats.json"), stats.dump(2) + "\n");
    spdlog::info("data: {} users, {} items, {} interactions, {} test rows", st.n_users,
                 st.n_items, st.n_interactions, sp.test.size());
  }

  void stage_quantize() {
    const auto d = train_data();
    quant::Quantizer q;
    const auto a = quantize_catalog(d, cfg_.quantize, cfg_.quantize.codebook_sizes, &q);
    write_file(path("quantizer.json"), q.to_json().dump() + "\n");
    quant::write_ids_tsv(a, path("ids.tsv").string());
    json hist = json::object();
    for (const auto& [size, count] : a.collision_histogram()) hist[std::to_string(size)] = count;
    write_file(path("collisions.json"), hist.dump(2) + "\n");
    spdlog::info("quantize: {} items over {} distinct IDs", a.item_ids.size(), a.members.size());
  }

  CobraModel train_variant(const corpus::Dataset& d, const quant::CorpusAssignment& a,
                           seq::Variant variant, const std::vector<int>& sizes,
                           const fs::path& out_dir) {
    seq::DecoderConfig dc = cfg_.decoder;
    dc.variant = variant;
    dc.codebook_sizes = sizes;
    CobraModel model(encoder::build_vocab(d, cfg_.vocab_size), cfg_.encoder, dc);
    // Early stopping holds out each user's last training item.
    TrainingData data, validation;
    if (cfg_.train.patience > 0) {
      const auto held = corpus::split(d, corpus::SplitSpec{});
      data = make_training_data(model, held.train, a);
      validation = holdout_data(data, held.test, dc.max_history);
    } else {
      data = make_training_data(model, d, a);
    }
    auto report = train::train(
        model, data, cfg_.train,
        [&](const train::EpochStats& s) {
          spdlog::info("train[{}] epoch {}: total {:.6f}{} ({:.2f}s)", seq::to_string(variant),
                       s.epoch, s.total,
                       s.val_total ? fmt::format(", validation {:.6f}", *s.val_total) : "",
                       s.seconds);
        },
        cfg_.train.patience > 0 ? &validation : nullptr);
    if (cfg_.train.patience > 0)
      spdlog::info("train[{}]: kept epoch {}", seq::to_string(variant), report.best_epoch);
    report.config_hash = cfg_.hash;
    write_file(out_dir / "train_log.csv", report.to_csv());
    write_file(out_dir / "train_report.json", report.to_json().dump(2) + "\n");
    model.save((out_dir / "checkpoint.json").string(),
               {{"config_hash", cfg_.hash}, {"seed", cfg_.seed}});
    return model;
  }

  void stage_train() {
    train_variant(train_data(), assignment(), seq::Variant::kFull,
                  cfg_.quantize.codebook_sizes, dir_);
  }

  void stage_index() {
    CobraModel m = model();
    const auto d = train_data();
    const auto a = assignment();
    const auto idx = retrieval::build_index(m, d, a);
    Matrix emb(static_cast<Index>(idx.size()), m.item_encoder().embed_dim());
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ids.push_back(idx.item(i).item_id);
      for (Index c = 0; c < emb.cols(); ++c) emb(static_cast<Index>(i), c) = idx.item(i).raw[c];
    }
    encoder::write_embeddings_tsv(ids, emb, path("embeddings.tsv").string());
  }

  void stage_eval() {
    CobraModel m = model();
    const auto a = assignment();
    const auto idx = index();
    const auto tests = this->tests();
    std::map<std::string, eval::EvalReport> reports;
    auto rep = eval::evaluate(m, idx, a, tests, cfg_.fusion, cfg_.ks);
    rep.config_hash = cfg_.hash;
    write_file(path("metrics.csv"), rep.to_csv());
    write_file(path("metrics.json"), rep.to_json().dump(2) + "\n");
    spdlog::info("eval: recall@{} = {:.4f}", cfg_.ks.back(), rep.recall.at(cfg_.ks.back()));
    reports["full"] = rep;

    if (cfg_.sweep.enabled) {
      const auto f = sweep_fusion(idx.size());
      const auto points = eval::sweep_tau(m, idx, a, tests, cfg_.sweep.taus, f);
      write_file(path("sweep.csv"), eval::sweep_to_csv(points));
    }

    for (const auto& ab : cfg_.ablations) {
      const fs::path out = dir_ / "ablations" / ab.name;
      fs::create_directories(out);
      eval::EvalReport r;
      if (resume_ablations_ && fs::exists(out / "metrics.json") && fs::exists(out / "done")) {
        r = report_from_json(json::parse(std::ifstream(out / "metrics.json")));
      } else {
        r = run_ablation(ab, out, a, tests);
        r.config_hash = cfg_.hash;
        write_file(out / "metrics.csv", r.to_csv());
        write_file(out / "metrics.json", r.to_json().dump(2) + "\n");
        write_file(out / "done", ab.name + "\n");
      }
      reports[ab.name] = r;
    }
    if (!cfg_.ablations.empty())
      write_file(path("ablations.csv"), eval::compare_ablations(reports).to_csv());
  }

  eval::EvalReport run_ablation(const AblationSpec& ab, const fs::path& out,
                                const quant::CorpusAssignment& a,
                                const std::vector<corpus::TestCase>& tests) {
    spdlog::info("ablation {}: running", ab.name);
    eval::EvalReport r;
    if (ab.name == "no-beamfusion") {
      CobraModel m = model();
      r = eval::evaluate(m, index(), a, tests, cfg_.fusion, cfg_.ks,
                         retrieval::Ablation::kNoBeamFusion);
    } else if (ab.name == "no-id") {
      const auto d = train_data();
      CobraModel m = train_variant(d, a, seq::Variant::kNoId, cfg_.quantize.codebook_sizes, out);
      r = eval::evaluate(m, retrieval::build_index(m, d, a), a, tests, cfg_.fusion, cfg_.ks);
    } else {
      const auto d = train_data();
      const auto sizes = ab.codebook_sizes.empty() ? cfg_.quantize.codebook_sizes : ab.codebook_sizes;
      quant::Quantizer q;
      const auto own = quantize_catalog(d, cfg_.quantize, sizes, &q);
      quant::write_ids_tsv(own, (out / "ids.tsv").string());
      CobraModel m = train_variant(d, own, seq::Variant::kNoDense, sizes, out);
      r = eval::evaluate(m, retrieval::build_index(m, d, own), own, tests, cfg_.fusion, cfg_.ks);
    }
    r.variant = ab.name;
    return r;
  }

  static eval::EvalReport report_from_json(const json& j) {
    eval::EvalReport r;
    r.variant = j.at("variant").get<std::string>();
    for (const auto& [k, v] : j.at("recall").items()) r.recall[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("ndcg").items()) r.ndcg[std::stoi(k)] = v.get<double>();
    r.diversity_k = j.at("diversity").at("k").get<int>();
    r.diversity = j.at("diversity").at("value").get<double>();
    r.n_test_users = j.at("n_test_users").get<std::size_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.split_fingerprint = j.at("split_fingerprint").get<std::string>();
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    return r;
  }

  RunConfig cfg_;
  fs::path dir_;
  bool force_ = false;
  bool resume_ablations_ = false;  // a retried eval reuses finished ablations
};

}  // namespace cobra::pipeline
