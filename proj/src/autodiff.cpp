/*
 * Copyright 2026 The TPB Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "tpb/autodiff.hpp"

#include <cmath>
#include <numeric>

#include "tpb/errors.hpp"

namespace tpb::ad {

std::size_t ParameterStore::add(const std::string& name, Matrix init) {
  if (index_.count(name) != 0) {
    throw Error("duplicate parameter name: " + name);
  }
  Parameter p;
  p.name = name;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  index_[name] = params_.size() - 1;
  return params_.size() - 1;
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw Error("unknown parameter: " + name);
  }
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    p.grad.setZero(p.value.rows(), p.value.cols());
  }
}

void ParameterStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : params_) {
    if (p.name.compare(0, prefix.size(), prefix) == 0) {
      p.trainable = trainable;
    }
  }
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

Var Graph::constant(Matrix value) {
  auto node = std::make_unique<Node>();
  node->own = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.back().get()};
}

Var Graph::constant_ref(const Matrix& value) {
  auto node = std::make_unique<Node>();
  node->ref = &value;
  nodes_.push_back(std::move(node));
  return {this, nodes_.back().get()};
}

Var Graph::param(Parameter& p) {
  if (!grad_enabled_ || !p.trainable) {
    return param(static_cast<const Parameter&>(p));
  }
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) {
    return {this, it->second};
  }
  auto node = std::make_unique<Node>();
  node->ref = &p.value;
  node->param = &p;
  node->needs_grad = true;
  nodes_.push_back(std::move(node));
  param_nodes_[&p] = nodes_.back().get();
  return {this, nodes_.back().get()};
}

Var Graph::param(const Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) {
    return {this, it->second};
  }
  Var v = constant_ref(p.value);
  param_nodes_[&p] = v.node;
  return v;
}

Var Graph::make(Matrix value, std::initializer_list<Var> parents,
                std::function<void(Node&)> backward) {
  return make(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
              std::move(backward));
}

Var Graph::make(Matrix value, std::span<const Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_unique<Node>();
  node->own = std::move(value);
  bool needs = false;
  if (grad_enabled_) {
    for (const auto& p : parents) {
      needs = needs || p.node->needs_grad;
    }
  }
  node->needs_grad = needs;
  if (needs) {
    Node* self = node.get();
    node->backward = [fn = std::move(backward), self]() { fn(*self); };
  }
  nodes_.push_back(std::move(node));
  return {this, nodes_.back().get()};
}

void Graph::backward(Var loss) {
  if (loss.graph != this) {
    throw Error("backward: loss belongs to a different graph");
  }
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar");
  }
  if (!loss.node->needs_grad) {
    return;
  }
  loss.node->grad = Matrix::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.grad.size() != 0) {
      n.backward();
    }
  }
  for (auto& node : nodes_) {
    if (node->param != nullptr && node->grad.size() != 0) {
      Parameter& p = *node->param;
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
        p.grad.setZero(p.value.rows(), p.value.cols());
      }
      p.grad += node->grad;
    }
  }
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) {
    throw ShapeError(what);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix v = a.value() * b.value();
  return a.graph->make(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad * b.value().transpose());
    if (b.needs_grad()) b.node->accumulate(a.value().transpose() * self.grad);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Matrix v = a.value() * b.value().transpose();
  return a.graph->make(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad * b.value());
    if (b.needs_grad()) b.node->accumulate(self.grad.transpose() * a.value());
  });
}

namespace {

// Out of line so the caller's loops cannot be vectorized across entries.
[[gnu::noinline]] double ordered_dot(const double* a, const double* b, Eigen::Index n) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

Var matmul_nt_exact(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt_exact: inner dimension mismatch");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  Matrix v(x.rows(), y.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.rows(); ++j) v(i, j) = ordered_dot(&x(i, 0), &y(j, 0), x.cols());
  }
  return a.graph->make(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad * b.value());
    if (b.needs_grad()) b.node->accumulate(self.grad.transpose() * a.value());
  });
}

Var linear(Var x, Var weight, Var bias) {
  require(x.cols() == weight.cols(), "linear: input width mismatch");
  require(bias.rows() == 1 && bias.cols() == weight.rows(), "linear: bias shape mismatch");
  Matrix v = x.value() * weight.value().transpose();
  v.rowwise() += bias.value().row(0);
  return x.graph->make(std::move(v), {x, weight, bias}, [x, weight, bias](Node& self) {
    if (x.needs_grad()) x.node->accumulate(self.grad * weight.value());
    if (weight.needs_grad()) weight.node->accumulate(self.grad.transpose() * x.value());
    if (bias.needs_grad()) bias.node->accumulate(self.grad.colwise().sum());
  });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix v = a.value() + b.value();
  return a.graph->make(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad);
    if (b.needs_grad()) b.node->accumulate(self.grad);
  });
}

Var sub(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix v = a.value() - b.value();
  return a.graph->make(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad);
    if (b.needs_grad()) b.node->accumulate(-self.grad);
  });
}

Var mul(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix v = a.value().cwiseProduct(b.value());
  return a.graph->make(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad.cwiseProduct(b.value()));
    if (b.needs_grad()) b.node->accumulate(self.grad.cwiseProduct(a.value()));
  });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  return a.graph->make(std::move(v), {a, row}, [a, row](Node& self) {
    if (a.needs_grad()) a.node->accumulate(self.grad);
    if (row.needs_grad()) row.node->accumulate(self.grad.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Matrix v = a.value() * s;
  return a.graph->make(std::move(v), {a}, [a, s](Node& self) { a.node->accumulate(self.grad * s); });
}

Var add_const(Var a, const Matrix& c) {
  require(a.rows() == c.rows() && a.cols() == c.cols(), "add_const: shape mismatch");
  Matrix v = a.value() + c;
  return a.graph->make(std::move(v), {a}, [a](Node& self) { a.node->accumulate(self.grad); });
}

Var mul_const(Var a, const Matrix& c) {
  require(a.rows() == c.rows() && a.cols() == c.cols(), "mul_const: shape mismatch");
  Matrix v = a.value().cwiseProduct(c);
  return a.graph->make(std::move(v), {a}, [a, c](Node& self) {
    a.node->accumulate(self.grad.cwiseProduct(c));
  });
}

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix t = (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh().matrix();
  Matrix v = (0.5 * x.array() * (1.0 + t.array())).matrix();
  return a.graph->make(std::move(v), {a}, [a, t = std::move(t)](Node& self) {
    const auto x = a.value().array();
    auto d = 0.5 * (1.0 + t.array()) +
             0.5 * x * (1.0 - t.array().square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square());
    a.node->accumulate((self.grad.array() * d).matrix());
  });
}

Var tanh(Var a) {
  Matrix v = a.value().array().tanh().matrix();
  return a.graph->make(std::move(v), {a}, [a](Node& self) {
    a.node->accumulate((self.grad.array() * (1.0 - self.own.array().square())).matrix());
  });
}

Var sigmoid(Var a) {
  Matrix v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.graph->make(std::move(v), {a}, [a](Node& self) {
    a.node->accumulate((self.grad.array() * self.own.array() * (1.0 - self.own.array())).matrix());
  });
}

Var softmax_rows(Var a) {
  Matrix v = a.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    auto row = v.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return a.graph->make(std::move(v), {a}, [a](Node& self) {
    const Matrix& y = self.own;
    Eigen::VectorXd dots = (self.grad.cwiseProduct(y)).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dots;
    a.node->accumulate(g.cwiseProduct(y));
  });
}

Var grouped_attention(Var q, Var k, Var v, int group, double scale) {
  require(group > 0, "grouped_attention: group length must be positive");
  require(k.rows() == q.rows() * group && v.rows() == k.rows(), "grouped_attention: row mismatch");
  require(k.cols() == q.cols() && v.cols() == q.cols(), "grouped_attention: width mismatch");
  const Eigen::Index s_count = q.rows();
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  // Attention weights [S x group].
  Matrix w(s_count, group);
  Matrix out = Matrix::Zero(s_count, q.cols());
  for (Eigen::Index s = 0; s < s_count; ++s) {
    w.row(s) = (kv.middleRows(s * group, group) * qv.row(s).transpose()).transpose() * scale;
    w.row(s).array() -= w.row(s).maxCoeff();
    w.row(s) = w.row(s).array().exp().matrix();
    w.row(s) /= w.row(s).sum();
    out.row(s) = w.row(s) * vv.middleRows(s * group, group);
  }
  return q.graph->make(std::move(out), {q, k, v}, [q, k, v, w, group, scale](Node& self) {
    const Eigen::Index s_count = q.rows();
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
    for (Eigen::Index s = 0; s < s_count; ++s) {
      const auto rows = Eigen::seqN(s * group, group);
      const RowVector g_out = self.grad.row(s);
      dv(rows, Eigen::placeholders::all) = w.row(s).transpose() * g_out;
      const RowVector dw = (vv(rows, Eigen::placeholders::all) * g_out.transpose()).transpose();
      const RowVector ds = w.row(s).cwiseProduct((dw.array() - dw.dot(w.row(s))).matrix()) * scale;
      dq.row(s) = ds * kv(rows, Eigen::placeholders::all);
      dk(rows, Eigen::placeholders::all) = ds.transpose() * qv.row(s);
    }
    q.node->accumulate(dq);
    k.node->accumulate(dk);
    v.node->accumulate(dv);
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm: gamma shape mismatch");
  require(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm: beta shape mismatch");
  const Matrix& in = x.value();
  const auto n = static_cast<double>(in.cols());
  Matrix xhat = in;
  Eigen::VectorXd inv_std(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const double mu = in.row(r).mean();
    xhat.row(r).array() -= mu;
    const double var = xhat.row(r).squaredNorm() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) *= inv_std(r);
  }
  Matrix v = xhat.array().rowwise() * gamma.value().row(0).array();
  v.rowwise() += beta.value().row(0);
  return x.graph->make(std::move(v), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std, n](Node& self) {
    const Matrix& g = self.grad;
    if (gamma.needs_grad()) gamma.node->accumulate(g.cwiseProduct(xhat).colwise().sum());
    if (beta.needs_grad()) beta.node->accumulate(g.colwise().sum());
    if (x.needs_grad()) {
      Matrix gx = g.array().rowwise() * gamma.value().row(0).array();
      Eigen::VectorXd mean_g = gx.rowwise().sum() / n;
      Eigen::VectorXd mean_gx = gx.cwiseProduct(xhat).rowwise().sum() / n;
      for (Eigen::Index r = 0; r < gx.rows(); ++r) {
        gx.row(r) = inv_std(r) * (gx.row(r).array() - mean_g(r) - xhat.row(r).array() * mean_gx(r)).matrix();
      }
      x.node->accumulate(gx);
    }
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), "reshape: size mismatch");
  const Eigen::Index in_rows = a.rows();
  const Eigen::Index in_cols = a.cols();
  Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.graph->make(std::move(v), {a}, [a, in_rows, in_cols](Node& self) {
    a.node->accumulate(Eigen::Map<const Matrix>(self.grad.data(), in_rows, in_cols));
  });
}

Var gather_rows(Var a, std::vector<int> rows) {
  const Matrix& in = a.value();
  Matrix v(static_cast<Eigen::Index>(rows.size()), in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < in.rows(), "gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = in.row(rows[i]);
  }
  return a.graph->make(std::move(v), {a}, [a, rows = std::move(rows)](Node& self) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      g.row(rows[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
    a.node->accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: width mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> copy(parts.begin(), parts.end());
  return parts.front().graph->make(std::move(v), parts, [copy](Node& self) {
    Eigen::Index at = 0;
    for (const auto& p : copy) {
      if (p.needs_grad()) p.node->accumulate(self.grad.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: height mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> copy(parts.begin(), parts.end());
  return parts.front().graph->make(std::move(v), parts, [copy](Node& self) {
    Eigen::Index at = 0;
    for (const auto& p : copy) {
      if (p.needs_grad()) p.node->accumulate(self.grad.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index width) {
  require(begin >= 0 && width >= 0 && begin + width <= a.cols(), "slice_cols: out of range");
  Matrix v = a.value().middleCols(begin, width);
  return a.graph->make(std::move(v), {a}, [a, begin, width](Node& self) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    g.middleCols(begin, width) = self.grad;
    a.node->accumulate(g);
  });
}

Var sum(Var a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return a.graph->make(std::move(v), {a}, [a](Node& self) {
    a.node->accumulate(Matrix::Constant(a.rows(), a.cols(), self.grad(0, 0)));
  });
}

Var mse(Var a, const Matrix& target) {
  require(a.rows() == target.rows() && a.cols() == target.cols(), "mse: shape mismatch");
  const double count = static_cast<double>(target.size());
  require(count > 0, "mse: empty input");
  Matrix diff = a.value() - target;
  Matrix v(1, 1);
  v(0, 0) = diff.squaredNorm() / count;
  return a.graph->make(std::move(v), {a}, [a, diff = std::move(diff), count](Node& self) {
    a.node->accumulate(diff * (2.0 * self.grad(0, 0) / count));
  });
}

Var row_weighted_mse(Var a, const Matrix& target, std::span<const double> row_weights) {
  require(a.rows() == target.rows() && a.cols() == target.cols(), "row_weighted_mse: shape mismatch");
  require(static_cast<Eigen::Index>(row_weights.size()) == a.rows(), "row_weighted_mse: weight count");
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(row_weights.data(), a.rows());
  const double denom = w.sum() * static_cast<double>(a.cols());
  require(denom > 0, "row_weighted_mse: no weighted entries");
  Matrix diff = a.value() - target;
  diff.array().colwise() *= w.array().sqrt();
  Matrix v(1, 1);
  v(0, 0) = diff.squaredNorm() / denom;
  diff.array().colwise() *= w.array().sqrt();
  return a.graph->make(std::move(v), {a}, [a, diff = std::move(diff), denom](Node& self) {
    a.node->accumulate(diff * (2.0 * self.grad(0, 0) / denom));
  });
}

}  // namespace tpb::ad
