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

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tpb/tensor.hpp"

namespace tpb::ad {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
};

// Owns a flat, ordered list of named parameters. Modules refer to entries by
// index so that copying a store (e.g. the Reptile task clone) copies weights
// without invalidating any handle.
class ParameterStore {
 public:
  std::size_t add(const std::string& name, Matrix init);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::vector<Parameter>::iterator begin() { return params_.begin(); }
  std::vector<Parameter>::iterator end() { return params_.end(); }
  std::vector<Parameter>::const_iterator begin() const { return params_.begin(); }
  std::vector<Parameter>::const_iterator end() const { return params_.end(); }

  void zero_grad();
  // Marks every parameter whose name starts with `prefix` (empty = all).
  void set_trainable(const std::string& prefix, bool trainable);
  std::size_t scalar_count() const;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct Node {
  Matrix own;
  const Matrix* ref = nullptr;
  Matrix grad;
  bool needs_grad = false;
  Parameter* param = nullptr;
  std::function<void()> backward;

  const Matrix& value() const { return ref != nullptr ? *ref : own; }

  template <class Expr>
  void accumulate(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Graph;

// Lightweight handle to a node owned by a Graph.
struct Var {
  Graph* graph = nullptr;
  Node* node = nullptr;

  const Matrix& value() const { return node->value(); }
  Eigen::Index rows() const { return node->value().rows(); }
  Eigen::Index cols() const { return node->value().cols(); }
  bool needs_grad() const { return node->needs_grad; }
};

// Dynamic reverse-mode tape. Nodes are appended in creation order, which is a
// topological order, so backward is a single reverse sweep.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  // The referenced matrix must outlive the graph.
  Var constant_ref(const Matrix& value);
  Var param(Parameter& p);
  Var param(const Parameter& p);

  // Creates a node from an already computed value. `parents` decide whether
  // the node participates in backward; `backward` is only kept when it does.
  Var make(Matrix value, std::initializer_list<Var> parents, std::function<void(Node&)> backward);
  Var make(Matrix value, std::span<const Var> parents, std::function<void(Node&)> backward);

  // Seeds d(loss)/d(loss) = 1, sweeps the tape and adds leaf gradients into
  // Parameter::grad of every trainable parameter.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  bool grad_enabled_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<const Parameter*, Node*> param_nodes_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
// a * b^T with every entry summed in a fixed order, so equal rows of a (or
// of b) give bitwise-equal outputs wherever they sit. Slower than matmul_nt.
Var matmul_nt_exact(Var a, Var b);
// x * W^T + bias (bias is [1 x out]).
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Adds a [1 x cols] row to every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
// Elementwise a + c for a constant matrix c.
Var add_const(Var a, const Matrix& c);
// Elementwise a * c for a constant matrix c.
Var mul_const(Var a, const Matrix& c);
Var gelu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
// Attention of one query per group over that group's `group` consecutive
// key/value rows: q [S x h], k and v [S*group x h] -> [S x h].
Var grouped_attention(Var q, Var k, Var v, int group, double scale);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
// Row-major reinterpretation; rows*cols must equal the input size.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var gather_rows(Var a, std::vector<int> rows);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index width);
Var sum(Var a);
// Mean of (a - target)^2 over every entry.
Var mse(Var a, const Matrix& target);
// Sum_r w_r * sum_c (a - target)^2 / (cols * sum_r w_r).
Var row_weighted_mse(Var a, const Matrix& target, std::span<const double> row_weights);

}  // namespace tpb::ad
