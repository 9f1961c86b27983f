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

#include <optional>
#include <string>
#include <vector>

#include "tpb/autodiff.hpp"

namespace tpb::nn {

using ad::Graph;
using ad::ParameterStore;
using ad::Var;

struct Linear {
  std::size_t weight = 0;  // [out x in]
  std::size_t bias = 0;    // [1 x out]
  int in = 0;
  int out = 0;
};

struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;
};

// Pre-norm block: x + Attn(LN(x)), then x + FF(LN(x)) with a GELU feed-forward.
// No final normalization, so zeroing the attention and feed-forward output
// projections turns the block into the identity.
struct TransformerBlock {
  LayerNorm ln_attn;
  Linear query;
  Linear key;
  Linear value;
  Linear attn_out;
  LayerNorm ln_ff;
  Linear ff_in;
  Linear ff_out;
  int heads = 4;
  int width = 0;
};

// Xavier-uniform weight, zero bias.
Linear make_linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng);
LayerNorm make_layer_norm(ParameterStore& store, const std::string& name, int width);
// `branch_scale` multiplies the initial output projections of both residual
// branches (attention and feed-forward).
TransformerBlock make_transformer_block(ParameterStore& store, const std::string& name, int width,
                                       int heads, int ff_width, Rng& rng, double branch_scale = 1.0);

Var apply(Graph& g, const ParameterStore& store, const Linear& layer, Var x);
Var apply(Graph& g, ParameterStore& store, const Linear& layer, Var x);
Var apply(Graph& g, const ParameterStore& store, const LayerNorm& layer, Var x);
Var apply(Graph& g, ParameterStore& store, const LayerNorm& layer, Var x);

// `attn_bias` is an additive [queries x keys] matrix (0 = attend, large
// negative = blocked); pass nullptr for full attention. When `query_rows` is
// given only those rows are produced, which is exact for a single block
// because every row's output depends on the other rows only through keys and
// values.
template <class Store>
Var transformer_block(Graph& g, Store& store, const TransformerBlock& block, Var x,
                      const Matrix* attn_bias = nullptr,
                      const std::vector<int>* query_rows = nullptr);

// Additive attention bias that confines attention to contiguous segments of
// the given lengths. Query rows may be restricted to a subset.
// Same block evaluated only at the last row of each run of `group` rows,
// with attention confined to that run: [S*group x w] -> [S x w].
template <class Store>
Var transformer_block_last(Graph& g, Store& store, const TransformerBlock& block, Var x, int group);

Matrix segment_attention_bias(const std::vector<int>& segment_lengths,
                              const std::vector<int>* query_rows = nullptr);

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng);
Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

}  // namespace tpb::nn
