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

// cobra: command-line front end.
//
// Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.
// Output root: --output-root, else $COBRA_OUTPUT_ROOT, else ./runs.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "cobra/pipeline.hpp"

namespace {

using cobra::RuntimeError;
using cobra::ValidationError;
namespace pl = cobra::pipeline;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string config;
  std::string output_root;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_force = true) {
  cmd->add_option("-c,--config", c.config, "run config (JSON)")->required();
  cmd->add_option("--output-root", c.output_root,
                  std::string("output root; defaults to $") + pl::kOutputRootEnv + " or ./runs");
  if (with_force) cmd->add_flag("--force", c.force, "rerun stages that already completed");
}

pl::Run open_run(const Common& c) {
  auto cfg = pl::load_run_config(c.config);
  std::cerr << "config: " << cfg.document.dump() << "\n"
            << "config_hash: " << cfg.hash << "\n"
            << "seed: " << cfg.seed << "\n";
  return pl::Run(std::move(cfg), pl::output_root(c.output_root), c.force);
}

void report_stages(const pl::Run& run, const std::vector<std::string>& ran) {
  std::cout << "run_dir\t" << run.dir().string() << "\n";
  if (ran.empty()) {
    std::cout << "stages\tall skipped\n";
  } else {
    std::string s;
    for (const auto& r : ran) s += (s.empty() ? "" : ",") + r;
    std::cout << "stages\t" << s << "\n";
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_history_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("history file not found: " + path);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  if (out.empty()) throw ValidationError("history file " + path + " lists no items");
  return out;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ValidationError("not a number: '" + cell + "'");
    }
  }
  return out;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_logger_mt("cobra"));
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"COBRA-lite: cascaded sparse-dense generative retrieval"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  Common common;

  auto* pipeline = app.add_subcommand("pipeline", "run data, quantize, train, index and eval");
  add_common(pipeline, common);
  auto* quantize = app.add_subcommand("quantize", "run stages up to quantize (ids.tsv)");
  add_common(quantize, common);
  auto* train = app.add_subcommand("train", "run stages up to train (checkpoint.json)");
  add_common(train, common);
  auto* index = app.add_subcommand("index", "run stages up to index (embeddings.tsv)");
  add_common(index, common);
  auto* eval = app.add_subcommand("eval", "run stages up to eval and print metrics.csv");
  add_common(eval, common);

  auto* retrieve = app.add_subcommand("retrieve", "top-K items for one history (TSV)");
  add_common(retrieve, common, false);
  std::string user, history_file, ablation = "none";
  int m = 0, n = 0, k = 10;
  double tau = -1.0, psi = -1.0;
  auto* user_opt = retrieve->add_option("--user", user, "user whose full sequence is the history");
  auto* hist_opt =
      retrieve->add_option("--history-file", history_file, "whitespace-separated item ids");
  user_opt->excludes(hist_opt);
  retrieve->add_option("--m", m, "beams (default: config)");
  retrieve->add_option("--n", n, "candidates per beam (default: config)");
  retrieve->add_option("--k", k, "final list length")->capture_default_str();
  retrieve->add_option("--tau", tau, "beam-score coefficient (default: config)");
  retrieve->add_option("--psi", psi, "similarity coefficient (default: config)");
  retrieve->add_option("--ablation", ablation, "none or no-beamfusion")
      ->check(CLI::IsMember({"none", "no-beamfusion"}))
      ->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "recall and diversity across a tau grid (sweep.csv)");
  add_common(sweep, common, false);
  std::string taus;
  int sweep_k = 0, sweep_m = 0, sweep_n = 0;
  double sweep_psi = -1.0;
  sweep->add_option("--taus", taus, "comma-separated tau grid (default: config)");
  sweep->add_option("--k", sweep_k, "recall cutoff (default: config or min(2000, items/2))");
  sweep->add_option("--m", sweep_m, "beams (default: config)");
  sweep->add_option("--n", sweep_n, "candidates per beam (default: config)");
  sweep->add_option("--psi", sweep_psi, "similarity coefficient (default: config)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check on the 2-item fixture");
  std::uint64_t gc_seed = 3;
  double gc_step = 1e-5, gc_tol = 1e-4;
  gradcheck->add_option("--seed", gc_seed, "fixture seed")->capture_default_str();
  gradcheck->add_option("--step", gc_step, "central difference step")->capture_default_str();
  gradcheck->add_option("--tol", gc_tol, "relative error tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    auto run_stage_cmd = [&](pl::Stage last) {
      pl::Run run = open_run(common);
      report_stages(run, run.run_until(last));
      return run;
    };

    if (pipeline->parsed()) {
      run_stage_cmd(pl::Stage::kEval);
    } else if (quantize->parsed()) {
      run_stage_cmd(pl::Stage::kQuantize);
    } else if (train->parsed()) {
      run_stage_cmd(pl::Stage::kTrain);
    } else if (index->parsed()) {
      run_stage_cmd(pl::Stage::kIndex);
    } else if (eval->parsed()) {
      const pl::Run run = run_stage_cmd(pl::Stage::kEval);
      std::cout << read_file(run.path("metrics.csv").string());
    } else if (retrieve->parsed()) {
      if (user.empty() && history_file.empty())
        throw ValidationError("retrieve needs --user or --history-file");
      pl::Run run = open_run(common);
      run.run_until(pl::Stage::kIndex);
      cobra::retrieval::FusionConfig f = run.config().fusion;
      if (m > 0) f.m = m;
      if (n > 0) f.n = n;
      f.k = k;
      if (tau >= 0.0) f.tau = tau;
      if (psi >= 0.0) f.psi = psi;
      f.validate();
      std::cerr << "fusion: m=" << f.m << " n=" << f.n << " k=" << f.k << " tau=" << f.tau
                << " psi=" << f.psi << " ablation=" << ablation << "\n";
      std::vector<std::string> history;
      if (!user.empty()) {
        const auto data = run.full_data();
        const auto* seq = data.find_user(user);
        if (seq == nullptr) throw ValidationError("unknown user " + user);
        history = seq->item_ids();
      } else {
        history = read_history_file(history_file);
      }
      auto model = run.model();
      const auto idx = run.index();
      const auto hist = cobra::retrieval::history_from_index(idx, history);
      const auto out = cobra::retrieval::retrieve_topk(
          model, idx, hist, f, cobra::retrieval::ablation_from_string(ablation));
      std::cout << "rank\titem_id\tphi\tbeam_id\tcosine\n";
      for (std::size_t i = 0; i < out.size(); ++i)
        std::cout << i + 1 << '\t' << out[i].item_id << '\t' << fmt17(out[i].phi) << '\t'
                  << out[i].beam << '\t' << fmt17(out[i].cosine) << '\n';
    } else if (sweep->parsed()) {
      pl::Run run = open_run(common);
      run.run_until(pl::Stage::kIndex);
      const auto idx = run.index();
      cobra::retrieval::FusionConfig f = run.sweep_fusion(idx.size());
      if (sweep_k > 0) f.k = sweep_k;
      if (sweep_m > 0) f.m = sweep_m;
      if (sweep_n > 0) f.n = sweep_n;
      if (sweep_psi >= 0.0) f.psi = sweep_psi;
      const auto grid = taus.empty() ? run.config().sweep.taus : parse_doubles(taus);
      std::cerr << "sweep: m=" << f.m << " n=" << f.n << " k=" << f.k << " psi=" << f.psi << "\n";
      const std::string csv = cobra::eval::sweep_to_csv(run.sweep(grid, f));
      cobra::eval::write_text(run.path("sweep.csv").string(), csv);
      std::cout << csv;
    } else if (gradcheck->parsed()) {
      auto fx = cobra::train::standard_gradcheck_fixture(gc_seed);
      cobra::train::TrainConfig tc;
      std::cerr << "config: " << cobra::train::to_json(tc).dump() << "\n"
                << "seed: " << gc_seed << "\n";
      const auto rep = cobra::train::grad_check(fx.model, fx.data, tc, gc_step, gc_tol);
      for (const auto& g : rep.groups)
        std::cout << "group\t" << g.name << "\t" << g.size << "\trel_err\t" << fmt17(g.rel_error)
                  << "\n";
      std::cout << "max-rel-err " << fmt17(rep.max_rel_error) << " tol " << fmt17(rep.tolerance)
                << (rep.passed ? " PASS" : " FAIL") << "\n";
      return rep.passed ? kExitOk : kExitRuntime;
    }
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
