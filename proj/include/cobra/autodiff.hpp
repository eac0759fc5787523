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

// Minimal reverse-mode automatic differentiation over row-major double
// matrices. A Tape records every operation; Tape::backward walks it in
// reverse and accumulates gradients into the Parameters that were read.
//
// The op set is exactly what the item encoder, the cascaded decoder and
// the two training losses need: dense products, broadcasts, row gathers,
// layer norm, GELU, packed multi-head attention, row normalization and
// softmax cross-entropy.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cobra/common.hpp"

namespace cobra::ad {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  // A non-recording tape evaluates values only; no closures or gradient
  // buffers are kept.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix m) {
    nodes_.push_back(Node{std::move(m), {}, false, {}, nullptr});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var param(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, record_, {}, &p});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var push(Matrix value, bool requires_grad, Backward backward) {
    const bool rg = record_ && requires_grad;
    nodes_.push_back(
        Node{std::move(value), {}, rg, rg ? std::move(backward) : Backward{},
             nullptr});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of node `id`, allocated on first touch.
  Matrix& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root) {
    if (!record_) throw RuntimeError("backward on a non-recording tape");
    if (root.tape() != this || root.rows() != 1 || root.cols() != 1)
      throw RuntimeError("backward root must be a 1x1 value on this tape");
    grad(root.id())(0, 0) += 1.0;
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  bool record_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw RuntimeError("operands on different tapes");
  return *a.tape();
}

inline void check_shape(bool ok, const char* op) {
  if (!ok) throw RuntimeError(std::string("shape mismatch in ") + op);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::check_shape(a.cols() == b.rows(), "matmul");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  if (t.requires_grad(ia))
                    t.grad(ia).noalias() += g * t.value(ib).transpose();
                  if (t.requires_grad(ib))
                    t.grad(ib).noalias() += t.value(ia).transpose() * g;
                });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::check_shape(a.cols() == b.cols(), "matmul_nt");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
                  if (t.requires_grad(ib))
                    t.grad(ib).noalias() += g.transpose() * t.value(ia);
                });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() + b.value();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  if (t.requires_grad(ia)) t.grad(ia) += g;
                  if (t.requires_grad(ib)) t.grad(ib) += g;
                });
}

// a (n x c) + broadcast row b (1 x c)
inline Var add_bias(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::check_shape(b.rows() == 1 && a.cols() == b.cols(), "add_bias");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  if (t.requires_grad(ia)) t.grad(ia) += g;
                  if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
                });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out = a.value() * s;
  return t.push(std::move(out), t.requires_grad(ia), [ia, s](Tape& t, int self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

// out.row(i) = a.row(rows[i])
inline Var gather_rows(Var a, std::vector<Index> rows) {
  Tape& t = *a.tape();
  const int ia = a.id();
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= av.rows())
      throw RuntimeError("gather_rows index out of range");
    out.row(static_cast<Index>(i)) = av.row(rows[i]);
  }
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, rows = std::move(rows)](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  Matrix& ga = t.grad(ia);
                  for (std::size_t i = 0; i < rows.size(); ++i)
                    ga.row(rows[i]) += g.row(static_cast<Index>(i));
                });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw RuntimeError("concat_rows of nothing");
  Tape& t = *parts.front().tape();
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool rg = false;
  std::vector<int> ids;
  for (const Var& p : parts) {
    detail::check_shape(p.tape() == &t && p.cols() == cols, "concat_rows");
    rows += p.rows();
    rg = rg || t.requires_grad(p.id());
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), rg, [ids = std::move(ids)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Index r = 0;
    for (int id : ids) {
      const Index n = t.value(id).rows();
      if (t.requires_grad(id)) t.grad(id) += g.middleRows(r, n);
      r += n;
    }
  });
}

// Per-row layer normalization with learned gain/shift (both 1 x c).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gamma);
  detail::check_shape(gamma.cols() == x.cols() && beta.cols() == x.cols(),
                      "layer_norm");
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  const Matrix& xv = x.value();
  const Index n = xv.rows(), c = xv.cols();
  Matrix xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mean = xv.row(i).mean();
    const double var = (xv.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const bool rg = t.requires_grad(ix) || t.requires_grad(ig) || t.requires_grad(ib);
  return t.push(std::move(out), rg,
                [ix, ig, ib, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  if (t.requires_grad(ig))
                    t.grad(ig) += (g.array() * xhat.array()).colwise().sum().matrix();
                  if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
                  if (!t.requires_grad(ix)) return;
                  Matrix dxhat = g;
                  dxhat.array().rowwise() *= t.value(ig).row(0).array();
                  Matrix& gx = t.grad(ix);
                  const double c = static_cast<double>(dxhat.cols());
                  for (Index i = 0; i < dxhat.rows(); ++i) {
                    const double m1 = dxhat.row(i).sum() / c;
                    const double m2 = dxhat.row(i).dot(xhat.row(i)) / c;
                    gx.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 -
                                                       xhat.row(i).array() * m2);
                  }
                });
}

// tanh-approximated GELU
inline Var gelu(Var x) {
  Tape& t = *x.tape();
  const int ix = x.id();
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  Matrix deriv(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.size(); ++i) {
    const double v = xv.data()[i];
    const double th = std::tanh(k * (v + a * v * v * v));
    out.data()[i] = 0.5 * v * (1.0 + th);
    deriv.data()[i] =
        0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * a * v * v);
  }
  return t.push(std::move(out), t.requires_grad(ix),
                [ix, deriv = std::move(deriv)](Tape& t, int self) {
                  t.grad(ix).array() += t.grad(self).array() * deriv.array();
                });
}

// Rows [offset, offset + length) of a packed batch form one sequence; only
// the first `valid` of them are real, the rest are padding. Padding rows
// never act as keys and produce zero output as queries.
struct Segment {
  Index offset = 0;
  Index length = 0;
  Index valid = 0;
};

struct AttentionLayout {
  std::vector<Segment> segments;
  bool causal = false;

  Index total_rows() const {
    Index n = 0;
    for (const auto& s : segments) n = std::max(n, s.offset + s.length);
    return n;
  }
};

// Scaled dot-product multi-head attention over a packed batch.
inline Var attention(Var q, Var k, Var v, const AttentionLayout& layout,
                     int heads) {
  Tape& t = detail::same_tape(q, k);
  detail::check_shape(&t == v.tape() && q.rows() == k.rows() &&
                          q.rows() == v.rows() && q.cols() == k.cols() &&
                          q.cols() == v.cols() && q.cols() % heads == 0,
                      "attention");
  const Index dh = q.cols() / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  Matrix out = Matrix::Zero(qv.rows(), qv.cols());
  // probs[s * heads + h] holds the valid x valid attention matrix
  std::vector<Matrix> probs(layout.segments.size() * heads);
  for (std::size_t s = 0; s < layout.segments.size(); ++s) {
    const Segment& seg = layout.segments[s];
    if (seg.valid <= 0) continue;
    for (int h = 0; h < heads; ++h) {
      auto qs = qv.block(seg.offset, h * dh, seg.valid, dh);
      auto ks = kv.block(seg.offset, h * dh, seg.valid, dh);
      auto vs = vv.block(seg.offset, h * dh, seg.valid, dh);
      Matrix p = (qs * ks.transpose()) * sc;
      for (Index i = 0; i < seg.valid; ++i) {
        if (layout.causal)
          for (Index j = i + 1; j < seg.valid; ++j)
            p(i, j) = -std::numeric_limits<double>::infinity();
        const double mx = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
      }
      out.block(seg.offset, h * dh, seg.valid, dh).noalias() = p * vs;
      probs[s * heads + h] = std::move(p);
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  const bool rg = t.requires_grad(iq) || t.requires_grad(ik) || t.requires_grad(iv);
  return t.push(
      std::move(out), rg,
      [iq, ik, iv, heads, dh, sc, layout, probs = std::move(probs)](Tape& t,
                                                                   int self) {
        const Matrix& g = t.grad(self);
        Matrix& gq = t.grad(iq);
        Matrix& gk = t.grad(ik);
        Matrix& gv = t.grad(iv);
        const Matrix& qv = t.value(iq);
        const Matrix& kv = t.value(ik);
        const Matrix& vv = t.value(iv);
        for (std::size_t s = 0; s < layout.segments.size(); ++s) {
          const Segment& seg = layout.segments[s];
          if (seg.valid <= 0) continue;
          for (int h = 0; h < heads; ++h) {
            const Matrix& p = probs[s * heads + h];
            auto go = g.block(seg.offset, h * dh, seg.valid, dh);
            auto qs = qv.block(seg.offset, h * dh, seg.valid, dh);
            auto ks = kv.block(seg.offset, h * dh, seg.valid, dh);
            auto vs = vv.block(seg.offset, h * dh, seg.valid, dh);
            gv.block(seg.offset, h * dh, seg.valid, dh).noalias() +=
                p.transpose() * go;
            Matrix dp = go * vs.transpose();
            Matrix ds = p.cwiseProduct(dp);
            for (Index i = 0; i < ds.rows(); ++i) {
              const double rs = ds.row(i).sum();
              ds.row(i) -= p.row(i) * rs;
            }
            gq.block(seg.offset, h * dh, seg.valid, dh).noalias() += (ds * ks) * sc;
            gk.block(seg.offset, h * dh, seg.valid, dh).noalias() +=
                (ds.transpose() * qs) * sc;
          }
        }
      });
}

// Unit-normalize every row. A zero row has no direction and is an error.
inline Var l2_normalize_rows(Var x) {
  Tape& t = *x.tape();
  const int ix = x.id();
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  Eigen::VectorXd norms(xv.rows());
  for (Index i = 0; i < xv.rows(); ++i) {
    norms(i) = xv.row(i).norm();
    if (norms(i) == 0.0) throw RuntimeError("cannot normalize a zero-norm vector");
    out.row(i) = xv.row(i) / norms(i);
  }
  Matrix y = out;
  return t.push(std::move(out), t.requires_grad(ix),
                [ix, y = std::move(y), norms = std::move(norms)](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  Matrix& gx = t.grad(ix);
                  for (Index i = 0; i < g.rows(); ++i) {
                    const double d = y.row(i).dot(g.row(i));
                    gx.row(i) += (g.row(i) - y.row(i) * d) / norms(i);
                  }
                });
}

// Sum over rows of -log softmax(logits.row(i))[targets[i]]. Rows whose
// target is negative are skipped. Returns a 1x1 value.
inline Var softmax_cross_entropy(Var logits, std::vector<Index> targets) {
  Tape& t = *logits.tape();
  const int il = logits.id();
  const Matrix& z = logits.value();
  detail::check_shape(static_cast<Index>(targets.size()) == z.rows(),
                      "softmax_cross_entropy");
  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const Index tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0) {
      probs.row(i).setZero();
      continue;
    }
    if (tgt >= z.cols()) throw ValidationError("cross-entropy target out of range");
    const double mx = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - mx).exp();
    const double denom = probs.row(i).sum();
    probs.row(i) /= denom;
    loss += (mx + std::log(denom)) - z(i, tgt);
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  return t.push(std::move(out), t.requires_grad(il),
                [il, probs = std::move(probs), targets = std::move(targets)](
                    Tape& t, int self) {
                  const double g = t.grad(self)(0, 0);
                  Matrix& gl = t.grad(il);
                  for (Index i = 0; i < probs.rows(); ++i) {
                    const Index tgt = targets[static_cast<std::size_t>(i)];
                    if (tgt < 0) continue;
                    gl.row(i) += probs.row(i) * g;
                    gl(i, tgt) -= g;
                  }
                });
}

// Row-wise log-softmax of a plain matrix (inference helper, no tape).
inline Matrix log_softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    out.row(i) = z.row(i).array() - lse;
  }
  return out;
}

}  // namespace cobra::ad
