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

#include "tpb/nn.hpp"

#include <cmath>

#include "tpb/errors.hpp"

namespace tpb::nn {

namespace {

constexpr double kBlocked = -1e30;

}  // namespace

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = dist(rng);
  }
  return m;
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = dist(rng);
  }
  return m;
}

Linear make_linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", uniform_matrix(out, in, -limit, limit, rng));
  l.bias = store.add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

LayerNorm make_layer_norm(ParameterStore& store, const std::string& name, int width) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Matrix::Ones(1, width));
  ln.beta = store.add(name + ".beta", Matrix::Zero(1, width));
  return ln;
}

TransformerBlock make_transformer_block(ParameterStore& store, const std::string& name, int width,
                                       int heads, int ff_width, Rng& rng, double branch_scale) {
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("transformer width must be divisible by the head count");
  }
  TransformerBlock b;
  b.heads = heads;
  b.width = width;
  b.ln_attn = make_layer_norm(store, name + ".ln_attn", width);
  b.query = make_linear(store, name + ".query", width, width, rng);
  b.key = make_linear(store, name + ".key", width, width, rng);
  b.value = make_linear(store, name + ".value", width, width, rng);
  b.attn_out = make_linear(store, name + ".attn_out", width, width, rng);
  b.ln_ff = make_layer_norm(store, name + ".ln_ff", width);
  b.ff_in = make_linear(store, name + ".ff_in", width, ff_width, rng);
  b.ff_out = make_linear(store, name + ".ff_out", ff_width, width, rng);
  store[b.attn_out.weight].value *= branch_scale;
  store[b.ff_out.weight].value *= branch_scale;
  return b;
}

namespace {

template <class Store>
Var apply_linear(Graph& g, Store& store, const Linear& layer, Var x) {
  return ad::linear(x, g.param(store[layer.weight]), g.param(store[layer.bias]));
}

template <class Store>
Var apply_norm(Graph& g, Store& store, const LayerNorm& layer, Var x) {
  return ad::layer_norm_rows(x, g.param(store[layer.gamma]), g.param(store[layer.beta]));
}

}  // namespace

Var apply(Graph& g, const ParameterStore& store, const Linear& layer, Var x) {
  return apply_linear(g, store, layer, x);
}
Var apply(Graph& g, ParameterStore& store, const Linear& layer, Var x) {
  return apply_linear(g, store, layer, x);
}
Var apply(Graph& g, const ParameterStore& store, const LayerNorm& layer, Var x) {
  return apply_norm(g, store, layer, x);
}
Var apply(Graph& g, ParameterStore& store, const LayerNorm& layer, Var x) {
  return apply_norm(g, store, layer, x);
}

namespace {

// Output projection with residual, then the feed-forward sublayer.
template <class Store>
Var attention_tail(Graph& g, Store& store, const TransformerBlock& block, Var residual, Var attended) {
  Var h1 = ad::add(residual, apply(g, store, block.attn_out, attended));
  Var ff = apply(g, store, block.ff_out, ad::gelu(apply(g, store, block.ff_in, apply(g, store, block.ln_ff, h1))));
  return ad::add(h1, ff);
}

}  // namespace

template <class Store>
Var transformer_block(Graph& g, Store& store, const TransformerBlock& block, Var x,
                      const Matrix* attn_bias, const std::vector<int>* query_rows) {
  if (x.cols() != block.width) {
    throw ShapeError("transformer_block: input width does not match block width");
  }
  Var normed = apply(g, store, block.ln_attn, x);
  Var residual = x;
  Var query_src = normed;
  if (query_rows != nullptr) {
    residual = ad::gather_rows(x, *query_rows);
    query_src = ad::gather_rows(normed, *query_rows);
  }
  if (attn_bias != nullptr &&
      (attn_bias->rows() != query_src.rows() || attn_bias->cols() != normed.rows())) {
    throw ShapeError("transformer_block: attention bias shape mismatch");
  }
  Var q = apply(g, store, block.query, query_src);
  Var k = apply(g, store, block.key, normed);
  Var v = apply(g, store, block.value, normed);
  const int head_width = block.width / block.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_width));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(block.heads));
  for (int h = 0; h < block.heads; ++h) {
    Var qh = ad::slice_cols(q, h * head_width, head_width);
    Var kh = ad::slice_cols(k, h * head_width, head_width);
    Var vh = ad::slice_cols(v, h * head_width, head_width);
    Var scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
    if (attn_bias != nullptr) {
      scores = ad::add_const(scores, *attn_bias);
    }
    heads.push_back(ad::matmul(ad::softmax_rows(scores), vh));
  }
  Var attended = block.heads == 1 ? heads.front() : ad::concat_cols(heads);
  return attention_tail(g, store, block, residual, attended);
}

template <class Store>
Var transformer_block_last(Graph& g, Store& store, const TransformerBlock& block, Var x, int group) {
  if (x.cols() != block.width) {
    throw ShapeError("transformer_block_last: input width does not match block width");
  }
  if (group <= 0 || x.rows() % group != 0) {
    throw ShapeError("transformer_block_last: rows are not a multiple of the group length");
  }
  std::vector<int> last(static_cast<std::size_t>(x.rows() / group));
  for (std::size_t s = 0; s < last.size(); ++s) last[s] = static_cast<int>((s + 1) * group - 1);
  Var normed = apply(g, store, block.ln_attn, x);
  Var residual = ad::gather_rows(x, last);
  Var q = apply(g, store, block.query, ad::gather_rows(normed, last));
  Var k = apply(g, store, block.key, normed);
  Var v = apply(g, store, block.value, normed);
  const int head_width = block.width / block.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_width));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(block.heads));
  for (int h = 0; h < block.heads; ++h) {
    heads.push_back(ad::grouped_attention(ad::slice_cols(q, h * head_width, head_width),
                                          ad::slice_cols(k, h * head_width, head_width),
                                          ad::slice_cols(v, h * head_width, head_width), group, inv_sqrt));
  }
  Var attended = block.heads == 1 ? heads.front() : ad::concat_cols(heads);
  return attention_tail(g, store, block, residual, attended);
}

template Var transformer_block_last<ParameterStore>(Graph&, ParameterStore&, const TransformerBlock&, Var, int);
template Var transformer_block_last<const ParameterStore>(Graph&, const ParameterStore&, const TransformerBlock&,
                                                          Var, int);

template Var transformer_block<ParameterStore>(Graph&, ParameterStore&, const TransformerBlock&, Var,
                                               const Matrix*, const std::vector<int>*);
template Var transformer_block<const ParameterStore>(Graph&, const ParameterStore&,
                                                     const TransformerBlock&, Var, const Matrix*,
                                                     const std::vector<int>*);

Matrix segment_attention_bias(const std::vector<int>& segment_lengths,
                              const std::vector<int>* query_rows) {
  std::vector<int> segment_of;
  for (std::size_t s = 0; s < segment_lengths.size(); ++s) {
    segment_of.insert(segment_of.end(), static_cast<std::size_t>(segment_lengths[s]), static_cast<int>(s));
  }
  const auto keys = static_cast<Eigen::Index>(segment_of.size());
  std::vector<int> rows;
  if (query_rows != nullptr) {
    rows = *query_rows;
  } else {
    rows.resize(segment_of.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  }
  Matrix bias(static_cast<Eigen::Index>(rows.size()), keys);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int seg = segment_of.at(static_cast<std::size_t>(rows[r]));
    for (Eigen::Index c = 0; c < keys; ++c) {
      bias(static_cast<Eigen::Index>(r), c) = segment_of[static_cast<std::size_t>(c)] == seg ? 0.0 : kBlocked;
    }
  }
  return bias;
}

}  // namespace tpb::nn
