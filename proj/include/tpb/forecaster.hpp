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

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpb/autodiff.hpp"
#include "tpb/data_synth.hpp"
#include "tpb/nn.hpp"
#include "tpb/pattern_bank.hpp"

namespace tpb::fc {

enum class Variant { full, no_meta, no_adj, no_clu };

Variant parse_variant(std::string_view name);
std::string to_string(Variant v);

struct ForecasterConfig {
  int width = 128;        // d, equal to the bank width
  int query_width = 128;  // d_q
  int patch_length = 12;
  int patch_count = 24;
  int channels = 1;
  int horizon = 6;
  int heads = 4;
  int ff_multiplier = 4;
  int aggregator_layers = 1;
  double epsilon = 1.0;
  // Use the raw dot-product scores as pattern weights instead of their softmax.
  bool raw_weights = false;
  // "gaussian" or "bank" (Key rows start as a random projection of the bank).
  std::string key_init = "gaussian";
  Variant variant = Variant::full;
  // Node count of the learnable graph used by no_meta.
  int graph_nodes = 0;
  std::uint64_t seed = 0;

  int patch_width() const { return patch_length * channels; }
  void validate() const;
};

// One forecasting instance of a city: P patches of history for every node
// and the following T' steps.
struct ForecastSample {
  Matrix history;  // [N x P*T0*C], normalized
  Matrix target;   // [N x T'*C], normalized
  std::vector<int> hour_of_week;  // per patch
  std::shared_ptr<const Matrix> prior_graph;
  int city = 0;
  int target_step = 0;

  int node_count() const { return static_cast<int>(history.rows()); }
};

// Samples whose first target step t satisfies t >= max(P*T0, first_target_step),
// t + T' <= steps, stepping by `stride`.
std::vector<ForecastSample> make_samples(const data::TrafficSeries& series, const data::Scaler& scaler,
                                         int patch_length, int patch_count, int horizon, int stride,
                                         int first_target_step = 0, int city = 0);

struct QueryParams {
  std::size_t key = 0;  // [K x d_q]
  nn::Linear projection;
};

struct AggregatorParams {
  std::size_t positional = 0;
  std::vector<nn::TransformerBlock> layers;
};

struct GraphParams {
  nn::Linear query;
  nn::Linear key;
  std::size_t logits = 0;  // no_meta only
};

// Gated causal convolution, kernel 2: tanh(F x_t + F' x_{t-dil}) * sigmoid(G x_t + G' x_{t-dil}).
struct GatedConv {
  nn::Linear filter;
  nn::Linear gate;
  std::size_t filter_prev = 0;
  std::size_t gate_prev = 0;
  int dilation = 1;
};

struct BackendParams {
  nn::Linear input;
  std::vector<GatedConv> blocks;
};

struct HeadParams {
  nn::Linear hidden;
  nn::Linear output;
};

class ForecastModel {
 public:
  ForecastModel(ForecasterConfig cfg, std::shared_ptr<const bank::PatternBank> bank);

  const ForecasterConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const std::shared_ptr<const bank::PatternBank>& bank() const { return bank_; }
  const QueryParams& query() const { return query_; }
  const AggregatorParams& aggregator() const { return agg_; }
  const GraphParams& graph() const { return graph_; }
  const BackendParams& backend() const { return backend_; }
  const HeadParams& head() const { return head_; }
  const data::Scaler& scaler() const { return scaler_; }
  void set_scaler(data::Scaler s) { scaler_ = s; }

  // Graph-level stages. `Store` is this model's parameter store or a copy of it.
  template <class Store>
  ad::Var query_patterns(ad::Graph& g, Store& store, ad::Var patches) const;
  template <class Store>
  ad::Var aggregate_metaknowledge(ad::Graph& g, Store& store, ad::Var patterns,
                                  const std::vector<int>& hours) const;
  template <class Store>
  ad::Var reconstruct_graph(ad::Graph& g, Store& store, ad::Var metaknowledge) const;
  template <class Store>
  ad::Var run_backend(ad::Graph& g, Store& store, ad::Var recent, std::span<const ad::Var> adjacency,
                      std::span<const int> node_counts) const;
  template <class Store>
  ad::Var forecast(ad::Graph& g, Store& store, ad::Var recent, ad::Var metaknowledge,
                   std::span<const ad::Var> adjacency, std::span<const int> node_counts) const;
  // Stacked predictions [sum N x T'*C] for a batch.
  template <class Store>
  ad::Var forward(ad::Graph& g, Store& store, std::span<const ForecastSample> batch) const;

  // Evaluation helpers on the model's own parameters.
  Matrix query_patterns(const Matrix& patches) const;
  Matrix aggregate_metaknowledge(const Matrix& patterns, const std::vector<int>& hours) const;
  Matrix reconstruct_graph(const Matrix& metaknowledge) const;
  Matrix forecast(const Matrix& recent, const Matrix& metaknowledge, const Matrix& adjacency) const;
  Matrix predict(std::span<const ForecastSample> batch) const;

  // The bank file is referenced by path and content hash.
  void save(const std::filesystem::path& path, const std::filesystem::path& bank_path) const;
  // Loads the bank from `bank_path` (or the recorded path when empty) and
  // verifies its hash against the one recorded at save time.
  static ForecastModel load(const std::filesystem::path& path, const std::filesystem::path& bank_path = {});
  // Bank file recorded in a checkpoint, resolved against the checkpoint's
  // directory; empty for variants without a bank.
  static std::filesystem::path recorded_bank_path(const std::filesystem::path& path);

 private:
  ForecasterConfig cfg_;
  std::shared_ptr<const bank::PatternBank> bank_;
  ad::ParameterStore params_;
  QueryParams query_;
  AggregatorParams agg_;
  GraphParams graph_;
  BackendParams backend_;
  HeadParams head_;
  data::Scaler scaler_;
};

ad::Var forecast_loss(ad::Var prediction, const Matrix& target);
double forecast_loss(const Matrix& prediction, const Matrix& target);
// Targets of a batch stacked like the predictions.
Matrix stacked_targets(std::span<const ForecastSample> batch);

}  // namespace tpb::fc
