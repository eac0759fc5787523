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

// Layers shared by the item encoder and the sequence decoder, parameter
// (de)serialization and the optimizers.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobra/autodiff.hpp"

namespace cobra::nn {

using ad::Index;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

inline Matrix random_normal(Index rows, Index cols, double stddev,
                            std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out; unused when has_bias is false
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, Index in, Index out, std::mt19937_64& rng,
         bool with_bias = true)
      : weight(name + ".weight",
               random_normal(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
        bias(name + ".bias", Matrix::Zero(1, out)),
        has_bias(with_bias) {}

  Var operator()(Tape& t, Var x) {
    Var y = ad::matmul(x, t.param(weight));
    return has_bias ? ad::add_bias(y, t.param(bias)) : y;
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    if (has_bias) f(bias);
  }
};

struct LayerNorm {
  Parameter gain;
  Parameter shift;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index dim)
      : gain(name + ".gain", Matrix::Ones(1, dim)),
        shift(name + ".shift", Matrix::Zero(1, dim)) {}

  Var operator()(Tape& t, Var x) {
    return ad::layer_norm(x, t.param(gain), t.param(shift));
  }

  template <typename F>
  void visit(F&& f) {
    f(gain);
    f(shift);
  }
};

// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
// The key projection has no bias: it shifts every score of a query row
// equally and cancels in the softmax.
struct TransformerBlock {
  LayerNorm ln_attn;
  Linear query, key, value, proj;
  LayerNorm ln_ffn;
  Linear ffn_in, ffn_out;
  int heads = 1;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, Index dim, Index ffn_dim, int n_heads,
                   std::mt19937_64& rng)
      : ln_attn(name + ".ln_attn", dim),
        query(name + ".query", dim, dim, rng),
        key(name + ".key", dim, dim, rng, false),
        value(name + ".value", dim, dim, rng),
        proj(name + ".proj", dim, dim, rng),
        ln_ffn(name + ".ln_ffn", dim),
        ffn_in(name + ".ffn_in", dim, ffn_dim, rng),
        ffn_out(name + ".ffn_out", ffn_dim, dim, rng),
        heads(n_heads) {}

  Var operator()(Tape& t, Var x, const ad::AttentionLayout& layout) {
    Var h = ln_attn(t, x);
    Var a = ad::attention(query(t, h), key(t, h), value(t, h), layout, heads);
    x = ad::add(x, proj(t, a));
    Var f = ffn_out(t, ad::gelu(ffn_in(t, ln_ffn(t, x))));
    return ad::add(x, f);
  }

  template <typename F>
  void visit(F&& f) {
    ln_attn.visit(f);
    query.visit(f);
    key.visit(f);
    value.visit(f);
    proj.visit(f);
    ln_ffn.visit(f);
    ffn_in.visit(f);
    ffn_out.visit(f);
  }
};

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != rows * cols)
    throw ValidationError("matrix payload size does not match its shape");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

// Serializes every parameter reachable through `module.visit` keyed by name.
template <typename Module>
nlohmann::json params_to_json(Module& module) {
  nlohmann::json j = nlohmann::json::object();
  module.visit([&](Parameter& p) { j[p.name] = matrix_to_json(p.value); });
  return j;
}

// Loads values into an already-shaped module; shapes must agree.
template <typename Module>
void params_from_json(Module& module, const nlohmann::json& j) {
  module.visit([&](Parameter& p) {
    if (!j.contains(p.name)) throw ValidationError("checkpoint lacks parameter " + p.name);
    Matrix m = matrix_from_json(j.at(p.name));
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw ValidationError("checkpoint shape mismatch for " + p.name);
    p.value = std::move(m);
    p.zero_grad();
  });
}

enum class OptimizerKind { kSgd, kAdam };

// Plain SGD or Adam over a fixed, ordered parameter list. Moment buffers are
// matched to parameters by position, so the list order must not change
// between steps.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter*>& params) {
    if (kind_ == OptimizerKind::kSgd) {
      for (Parameter* p : params) p->value -= lr_ * p->grad;
      return;
    }
    if (first_.empty()) {
      for (Parameter* p : params) {
        first_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        second_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (first_.size() != params.size())
      throw RuntimeError("optimizer parameter list changed between steps");
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      first_[i] = beta1_ * first_[i] + (1.0 - beta1_) * p.grad;
      second_[i] = beta2_ * second_[i] + (1.0 - beta2_) * p.grad.cwiseAbs2();
      p.value.array() -= lr_ * (first_[i].array() / c1) /
                         ((second_[i].array() / c2).sqrt() + eps_);
    }
  }

  long steps() const { return steps_; }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
  std::vector<Matrix> first_, second_;
};

// Rescales gradients so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
inline double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace cobra::nn
