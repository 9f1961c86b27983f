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

#include "tpb/forecaster.hpp"

#include <cmath>

#include "tpb/archive.hpp"
#include "tpb/errors.hpp"

namespace tpb::fc {

namespace {

constexpr std::string_view kModelMagic = "TPBFCST1";

bool uses_bank(Variant v) { return v != Variant::no_meta; }
bool learns_graph(Variant v) { return v == Variant::full || v == Variant::no_clu; }

Matrix stack_rows(std::span<const ForecastSample> batch, const Matrix ForecastSample::*field) {
  Eigen::Index rows = 0;
  for (const auto& s : batch) rows += (s.*field).rows();
  Matrix out(rows, (batch.front().*field).cols());
  Eigen::Index r = 0;
  for (const auto& s : batch) {
    out.middleRows(r, (s.*field).rows()) = s.*field;
    r += (s.*field).rows();
  }
  return out;
}

}  // namespace

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::full;
  if (name == "no_meta") return Variant::no_meta;
  if (name == "no_adj") return Variant::no_adj;
  if (name == "no_clu") return Variant::no_clu;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected full, no_meta, no_adj or no_clu)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_meta: return "no_meta";
    case Variant::no_adj: return "no_adj";
    case Variant::no_clu: return "no_clu";
  }
  return "full";
}

void ForecasterConfig::validate() const {
  if (width <= 0 || query_width <= 0 || heads <= 0 || ff_multiplier <= 0 || aggregator_layers <= 0) {
    throw ConfigError("forecaster dimensions must be positive");
  }
  if (width % heads != 0) throw ConfigError("forecaster width must be divisible by heads");
  if (patch_length < 1 || patch_count < 1 || channels < 1 || horizon < 1) {
    throw ConfigError("patch_length, patch_count, channels and horizon must be positive");
  }
  if (!(epsilon > 0.0)) throw ConfigError("graph temperature epsilon must be positive");
  if (key_init != "gaussian" && key_init != "bank") throw ConfigError("key_init must be 'gaussian' or 'bank'");
  if (variant == Variant::no_meta && graph_nodes < 2) {
    throw ConfigError("no_meta needs graph_nodes >= 2 for its learnable graph");
  }
}

std::vector<ForecastSample> make_samples(const data::TrafficSeries& series, const data::Scaler& scaler,
                                         int patch_length, int patch_count, int horizon, int stride,
                                         int first_target_step, int city) {
  if (patch_length < 1 || patch_count < 1 || horizon < 1 || stride < 1) {
    throw ConfigError("make_samples: lengths and stride must be positive");
  }
  const int span = patch_length * patch_count;
  const int c = series.channels;
  std::shared_ptr<const Matrix> prior;
  if (series.prior_graph) prior = std::make_shared<const Matrix>(*series.prior_graph);
  std::vector<ForecastSample> out;
  for (int t = std::max(span, first_target_step); t + horizon <= series.step_count; t += stride) {
    ForecastSample s;
    s.history.resize(series.node_count, static_cast<Eigen::Index>(span) * c);
    s.target.resize(series.node_count, static_cast<Eigen::Index>(horizon) * c);
    for (int n = 0; n < series.node_count; ++n) {
      for (int k = 0; k < span; ++k) {
        for (int ch = 0; ch < c; ++ch) s.history(n, k * c + ch) = scaler.forward(series.at(n, t - span + k, ch));
      }
      for (int k = 0; k < horizon; ++k) {
        for (int ch = 0; ch < c; ++ch) s.target(n, k * c + ch) = scaler.forward(series.at(n, t + k, ch));
      }
    }
    for (int j = 0; j < patch_count; ++j) s.hour_of_week.push_back(series.hour_of_week(t - span + j * patch_length));
    s.prior_graph = prior;
    s.city = city;
    s.target_step = t;
    out.push_back(std::move(s));
  }
  return out;
}

ForecastModel::ForecastModel(ForecasterConfig cfg, std::shared_ptr<const bank::PatternBank> bank)
    : cfg_(std::move(cfg)), bank_(std::move(bank)) {
  cfg_.validate();
  const int d = cfg_.width;
  if (uses_bank(cfg_.variant)) {
    if (!bank_) throw DependencyError("variant " + to_string(cfg_.variant) + " needs a pattern bank");
    if (bank_->width() != d) throw ShapeError("pattern bank width does not match the forecaster width");
    const std::string& method = bank_->provenance().method;
    if (cfg_.variant == Variant::no_clu && method != "random") {
      throw DependencyError("no_clu needs a random-patch bank, got a '" + method + "' bank");
    }
    if (cfg_.variant != Variant::no_clu && method != "kmeans") {
      throw DependencyError(to_string(cfg_.variant) + " needs a clustered bank, got a '" + method + "' bank");
    }
  } else {
    bank_.reset();
  }

  Rng rng = make_rng(cfg_.seed, 0x666373ULL);
  if (uses_bank(cfg_.variant)) {
    const int k = bank_->k();
    Matrix key;
    if (cfg_.key_init == "bank") {
      key = bank_->matrix() * nn::normal_matrix(cfg_.query_width, d, 1.0, rng).transpose();
    } else {
      key = nn::normal_matrix(k, cfg_.query_width, 1.0 / std::sqrt(static_cast<double>(cfg_.query_width)), rng);
    }
    query_.key = params_.add("query.key", std::move(key));
    query_.projection = nn::make_linear(params_, "query.projection", cfg_.patch_width(), cfg_.query_width, rng);
    agg_.positional =
        params_.add("aggregator.positional", nn::uniform_matrix(data::kHoursPerWeek, d, -0.02, 0.02, rng));
    const double branch = 1.0 / std::sqrt(2.0 * cfg_.aggregator_layers);
    for (int l = 0; l < cfg_.aggregator_layers; ++l) {
      agg_.layers.push_back(nn::make_transformer_block(params_, "aggregator.layer" + std::to_string(l), d,
                                                       cfg_.heads, cfg_.ff_multiplier * d, rng, branch));
    }
  }
  if (learns_graph(cfg_.variant)) {
    graph_.query = nn::make_linear(params_, "graph.query", d, d, rng);
    graph_.key = nn::make_linear(params_, "graph.key", d, d, rng);
  } else if (cfg_.variant == Variant::no_meta) {
    graph_.logits = params_.add("graph.logits", Matrix::Zero(cfg_.graph_nodes, cfg_.graph_nodes));
  }
  backend_.input = nn::make_linear(params_, "backend.input", cfg_.channels, d, rng);
  const double limit = std::sqrt(6.0 / (2.0 * d));
  for (int b = 0; b < 2; ++b) {
    const std::string name = "backend.block" + std::to_string(b);
    GatedConv conv;
    conv.dilation = 1 << b;
    conv.filter = nn::make_linear(params_, name + ".filter", d, d, rng);
    conv.filter_prev = params_.add(name + ".filter_prev", nn::uniform_matrix(d, d, -limit, limit, rng));
    conv.gate = nn::make_linear(params_, name + ".gate", d, d, rng);
    conv.gate_prev = params_.add(name + ".gate_prev", nn::uniform_matrix(d, d, -limit, limit, rng));
    backend_.blocks.push_back(conv);
  }
  head_.hidden = nn::make_linear(params_, "head.hidden", 2 * d, 2 * d, rng);
  head_.output = nn::make_linear(params_, "head.output", 2 * d, cfg_.horizon * cfg_.channels, rng);
}

template <class Store>
ad::Var ForecastModel::query_patterns(ad::Graph& g, Store& store, ad::Var patches) const {
  if (!bank_) throw DependencyError("query_patterns: variant " + to_string(cfg_.variant) + " has no bank");
  if (patches.cols() != cfg_.patch_width()) throw ShapeError("query_patterns: patch width does not match T0*C");
  if (store[query_.key].value.rows() != bank_->k()) {
    throw ShapeError("query_patterns: Key rows do not match the bank size");
  }
  ad::Var q = nn::apply(g, store, query_.projection, patches);
  ad::Var scores = ad::matmul_nt(q, g.param(store[query_.key]));
  ad::Var weights = cfg_.raw_weights ? scores : ad::softmax_rows(scores);
  return ad::matmul(weights, g.constant_ref(bank_->matrix()));
}

template <class Store>
ad::Var ForecastModel::aggregate_metaknowledge(ad::Graph& g, Store& store, ad::Var patterns,
                                               const std::vector<int>& hours) const {
  const int p = cfg_.patch_count;
  if (patterns.rows() == 0) throw ShapeError("aggregate_metaknowledge: empty pattern series");
  if (patterns.cols() != cfg_.width || patterns.rows() % p != 0) {
    throw ShapeError("aggregate_metaknowledge: expected [S*P x d] patterns");
  }
  if (static_cast<Eigen::Index>(hours.size()) != patterns.rows()) {
    throw ShapeError("aggregate_metaknowledge: one hour index per pattern row expected");
  }
  ad::Var x = ad::add(patterns, ad::gather_rows(g.param(store[agg_.positional]), hours));
  const auto segments = static_cast<std::size_t>(patterns.rows() / p);
  for (std::size_t l = 0; l + 1 < agg_.layers.size(); ++l) {
    const Matrix bias = nn::segment_attention_bias(std::vector<int>(segments, p));
    x = nn::transformer_block(g, store, agg_.layers[l], x, segments > 1 ? &bias : nullptr);
  }
  return nn::transformer_block_last(g, store, agg_.layers.back(), x, p);
}

template <class Store>
ad::Var ForecastModel::reconstruct_graph(ad::Graph& g, Store& store, ad::Var metaknowledge) const {
  if (!learns_graph(cfg_.variant)) {
    throw ConfigError("reconstruct_graph: variant " + to_string(cfg_.variant) + " has no graph projections");
  }
  if (metaknowledge.rows() < 2) throw ShapeError("reconstruct_graph: need at least two nodes");
  // Fixed-order products: identical node rows must score identically.
  auto project = [&](const nn::Linear& l) {
    return ad::add_row(ad::matmul_nt_exact(metaknowledge, g.param(store[l.weight])), g.param(store[l.bias]));
  };
  ad::Var q = project(graph_.query);
  ad::Var k = project(graph_.key);
  return ad::softmax_rows(ad::scale(ad::matmul_nt_exact(q, k), 1.0 / cfg_.epsilon));
}

template <class Store>
ad::Var ForecastModel::run_backend(ad::Graph& g, Store& store, ad::Var recent, std::span<const ad::Var> adjacency,
                                   std::span<const int> node_counts) const {
  const int t0 = cfg_.patch_length;
  const int d = cfg_.width;
  if (recent.cols() != cfg_.patch_width()) throw ShapeError("backend: recent patch width does not match T0*C");
  if (adjacency.size() != node_counts.size()) throw ShapeError("backend: one adjacency per sample expected");
  Eigen::Index total = 0;
  for (std::size_t s = 0; s < node_counts.size(); ++s) {
    if (adjacency[s].rows() != node_counts[s] || adjacency[s].cols() != node_counts[s]) {
      throw ShapeError("backend: adjacency shape does not match the node count");
    }
    total += node_counts[s];
  }
  if (total != recent.rows()) throw ShapeError("backend: node counts do not add up to the input rows");
  const Eigen::Index steps = total * t0;

  ad::Var h = nn::apply(g, store, backend_.input, ad::reshape(recent, steps, cfg_.channels));
  const ad::Var zero_row = g.constant(Matrix::Zero(1, d));
  for (const auto& conv : backend_.blocks) {
    std::vector<int> prev(static_cast<std::size_t>(steps));
    for (Eigen::Index r = 0; r < steps; ++r) {
      prev[r] = r % t0 >= conv.dilation ? static_cast<int>(r - conv.dilation) : static_cast<int>(steps);
    }
    const std::vector<ad::Var> padded_parts{h, zero_row};
    ad::Var shifted = ad::gather_rows(ad::concat_rows(padded_parts), std::move(prev));
    ad::Var filter = ad::tanh(
        ad::add(nn::apply(g, store, conv.filter, h), ad::matmul_nt(shifted, g.param(store[conv.filter_prev]))));
    ad::Var gate = ad::sigmoid(
        ad::add(nn::apply(g, store, conv.gate, h), ad::matmul_nt(shifted, g.param(store[conv.gate_prev]))));
    h = ad::add(h, ad::mul(filter, gate));

    // One-hop graph mixing per sample on the [N x T0*d] view.
    ad::Var wide = ad::reshape(h, total, static_cast<Eigen::Index>(t0) * d);
    ad::Var mixed;
    if (node_counts.size() == 1) {
      mixed = ad::matmul(adjacency[0], wide);
    } else {
      std::vector<ad::Var> parts;
      int offset = 0;
      for (std::size_t s = 0; s < node_counts.size(); ++s) {
        std::vector<int> rows(static_cast<std::size_t>(node_counts[s]));
        for (int i = 0; i < node_counts[s]; ++i) rows[static_cast<std::size_t>(i)] = offset + i;
        parts.push_back(ad::matmul(adjacency[s], ad::gather_rows(wide, std::move(rows))));
        offset += node_counts[s];
      }
      mixed = ad::concat_rows(parts);
    }
    h = ad::reshape(ad::add(wide, mixed), steps, d);
  }
  std::vector<int> last(static_cast<std::size_t>(total));
  for (Eigen::Index n = 0; n < total; ++n) last[n] = static_cast<int>(n * t0 + t0 - 1);
  return ad::gather_rows(h, std::move(last));
}

template <class Store>
ad::Var ForecastModel::forecast(ad::Graph& g, Store& store, ad::Var recent, ad::Var metaknowledge,
                                std::span<const ad::Var> adjacency, std::span<const int> node_counts) const {
  if (metaknowledge.rows() != recent.rows() || metaknowledge.cols() != cfg_.width) {
    throw ShapeError("forecast: metaknowledge must be [N x d]");
  }
  ad::Var r = run_backend(g, store, recent, adjacency, node_counts);
  const std::vector<ad::Var> both{metaknowledge, r};
  ad::Var hidden = ad::gelu(nn::apply(g, store, head_.hidden, ad::concat_cols(both)));
  return nn::apply(g, store, head_.output, hidden);
}

template <class Store>
ad::Var ForecastModel::forward(ad::Graph& g, Store& store, std::span<const ForecastSample> batch) const {
  if (batch.empty()) throw ShapeError("forward: empty batch");
  const int p = cfg_.patch_count;
  const int pw = cfg_.patch_width();
  std::vector<int> node_counts;
  Eigen::Index total = 0;
  for (const auto& s : batch) {
    if (s.history.cols() != static_cast<Eigen::Index>(p) * pw || static_cast<int>(s.hour_of_week.size()) != p) {
      throw ShapeError("forward: sample history does not hold P patches of T0*C values");
    }
    node_counts.push_back(s.node_count());
    total += s.node_count();
  }
  Matrix recent(total, pw);
  {
    Eigen::Index r = 0;
    for (const auto& s : batch) {
      recent.middleRows(r, s.node_count()) = s.history.rightCols(pw);
      r += s.node_count();
    }
  }

  ad::Var metaknowledge;
  std::vector<ad::Var> adjacency;
  if (cfg_.variant == Variant::no_meta) {
    metaknowledge = g.constant(Matrix::Zero(total, cfg_.width));
    ad::Var a = ad::softmax_rows(g.param(store[graph_.logits]));
    for (int n : node_counts) {
      if (n != cfg_.graph_nodes) throw ShapeError("no_meta: sample node count differs from graph_nodes");
      adjacency.push_back(a);
    }
  } else {
    Matrix patches(total * p, pw);
    std::vector<int> hours;
    hours.reserve(static_cast<std::size_t>(total * p));
    Eigen::Index r = 0;
    for (const auto& s : batch) {
      for (int n = 0; n < s.node_count(); ++n) {
        for (int j = 0; j < p; ++j) {
          patches.row(r++) = s.history.block(n, static_cast<Eigen::Index>(j) * pw, 1, pw);
          hours.push_back(s.hour_of_week[static_cast<std::size_t>(j)]);
        }
      }
    }
    ad::Var z = query_patterns(g, store, g.constant(std::move(patches)));
    metaknowledge = aggregate_metaknowledge(g, store, z, hours);
    int offset = 0;
    for (const auto& s : batch) {
      if (cfg_.variant == Variant::no_adj) {
        if (!s.prior_graph) throw DependencyError("no_adj: sample has no prior graph");
        adjacency.push_back(g.constant_ref(*s.prior_graph));
      } else if (batch.size() == 1) {
        adjacency.push_back(reconstruct_graph(g, store, metaknowledge));
      } else {
        std::vector<int> rows(static_cast<std::size_t>(s.node_count()));
        for (int i = 0; i < s.node_count(); ++i) rows[static_cast<std::size_t>(i)] = offset + i;
        adjacency.push_back(reconstruct_graph(g, store, ad::gather_rows(metaknowledge, std::move(rows))));
      }
      offset += s.node_count();
    }
  }
  return forecast(g, store, g.constant(std::move(recent)), metaknowledge, adjacency, node_counts);
}

#define TPB_INSTANTIATE(Store)                                                                                  \
  template ad::Var ForecastModel::query_patterns<Store>(ad::Graph&, Store&, ad::Var) const;                    \
  template ad::Var ForecastModel::aggregate_metaknowledge<Store>(ad::Graph&, Store&, ad::Var,                  \
                                                                 const std::vector<int>&) const;               \
  template ad::Var ForecastModel::reconstruct_graph<Store>(ad::Graph&, Store&, ad::Var) const;                 \
  template ad::Var ForecastModel::run_backend<Store>(ad::Graph&, Store&, ad::Var, std::span<const ad::Var>,    \
                                                     std::span<const int>) const;                              \
  template ad::Var ForecastModel::forecast<Store>(ad::Graph&, Store&, ad::Var, ad::Var,                        \
                                                  std::span<const ad::Var>, std::span<const int>) const;       \
  template ad::Var ForecastModel::forward<Store>(ad::Graph&, Store&, std::span<const ForecastSample>) const;
TPB_INSTANTIATE(ad::ParameterStore)
TPB_INSTANTIATE(const ad::ParameterStore)
#undef TPB_INSTANTIATE

Matrix ForecastModel::query_patterns(const Matrix& patches) const {
  ad::Graph g(false);
  return query_patterns(g, params_, g.constant(patches)).value();
}

Matrix ForecastModel::aggregate_metaknowledge(const Matrix& patterns, const std::vector<int>& hours) const {
  ad::Graph g(false);
  return aggregate_metaknowledge(g, params_, g.constant(patterns), hours).value();
}

Matrix ForecastModel::reconstruct_graph(const Matrix& metaknowledge) const {
  ad::Graph g(false);
  return reconstruct_graph(g, params_, g.constant(metaknowledge)).value();
}

Matrix ForecastModel::forecast(const Matrix& recent, const Matrix& metaknowledge, const Matrix& adjacency) const {
  ad::Graph g(false);
  const std::vector<ad::Var> a{g.constant(adjacency)};
  const std::vector<int> n{static_cast<int>(recent.rows())};
  return forecast(g, params_, g.constant(recent), g.constant(metaknowledge), a, n).value();
}

Matrix ForecastModel::predict(std::span<const ForecastSample> batch) const {
  ad::Graph g(false);
  return forward(g, params_, batch).value();
}

void ForecastModel::save(const std::filesystem::path& path, const std::filesystem::path& bank_path) const {
  io::Archive a;
  auto& m = a.meta();
  m["K"] = bank_ ? bank_->k() : 0;
  m["d"] = cfg_.width;
  m["d_q"] = cfg_.query_width;
  m["T0"] = cfg_.patch_length;
  m["P"] = cfg_.patch_count;
  m["C"] = cfg_.channels;
  m["T_prime"] = cfg_.horizon;
  m["heads"] = cfg_.heads;
  m["ff_multiplier"] = cfg_.ff_multiplier;
  m["aggregator_layers"] = cfg_.aggregator_layers;
  m["epsilon"] = cfg_.epsilon;
  m["raw_weights"] = cfg_.raw_weights;
  m["key_init"] = cfg_.key_init;
  m["variant"] = to_string(cfg_.variant);
  m["graph_nodes"] = cfg_.graph_nodes;
  m["seed"] = cfg_.seed;
  m["scaler_mean"] = scaler_.mean;
  m["scaler_std"] = scaler_.stddev;
  // Recorded relative to the model file so that a directory of artifacts can move as a whole.
  std::string recorded;
  if (bank_ && !bank_path.empty()) {
    const auto base = std::filesystem::absolute(path).parent_path();
    recorded = std::filesystem::absolute(bank_path).lexically_normal().lexically_relative(base.lexically_normal())
                   .generic_string();
  }
  m["bank_path"] = recorded;
  m["bank_hash"] = bank_ ? bank_->content_hash() : std::string();
  for (const auto& p : params_) a.put(p.name, p.value, io::Archive::DType::f64);
  a.save(path, kModelMagic);
}

ForecastModel ForecastModel::load(const std::filesystem::path& path, const std::filesystem::path& bank_path) {
  const io::Archive a = io::Archive::load(path, kModelMagic);
  ForecasterConfig cfg;
  std::string recorded_bank;
  std::string recorded_hash;
  data::Scaler scaler;
  try {
    const auto& m = a.meta();
    cfg.width = m.at("d").get<int>();
    cfg.query_width = m.at("d_q").get<int>();
    cfg.patch_length = m.at("T0").get<int>();
    cfg.patch_count = m.at("P").get<int>();
    cfg.channels = m.at("C").get<int>();
    cfg.horizon = m.at("T_prime").get<int>();
    cfg.heads = m.at("heads").get<int>();
    cfg.ff_multiplier = m.at("ff_multiplier").get<int>();
    cfg.aggregator_layers = m.at("aggregator_layers").get<int>();
    cfg.epsilon = m.at("epsilon").get<double>();
    cfg.raw_weights = m.at("raw_weights").get<bool>();
    cfg.key_init = m.at("key_init").get<std::string>();
    cfg.variant = parse_variant(m.at("variant").get<std::string>());
    cfg.graph_nodes = m.at("graph_nodes").get<int>();
    cfg.seed = m.at("seed").get<std::uint64_t>();
    scaler.mean = m.at("scaler_mean").get<double>();
    scaler.stddev = m.at("scaler_std").get<double>();
    recorded_bank = m.at("bank_path").get<std::string>();
    recorded_hash = m.at("bank_hash").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptFileError(std::string("forecaster checkpoint header: ") + ex.what());
  }
  std::shared_ptr<const bank::PatternBank> bank;
  if (uses_bank(cfg.variant)) {
    std::filesystem::path where = bank_path;
    if (where.empty()) {
      if (recorded_bank.empty()) throw DependencyError("model " + path.string() + " records no pattern bank path");
      where = std::filesystem::path(recorded_bank);
      if (where.is_relative()) where = std::filesystem::absolute(path).parent_path() / where;
    }
    bank = std::make_shared<const bank::PatternBank>(bank::load_bank(where));
    if (bank->content_hash() != recorded_hash) {
      throw DependencyError("pattern bank " + where.string() + " does not match the bank the model was trained with");
    }
  }
  ForecastModel model(cfg, bank);
  for (auto& p : model.params_) {
    if (!a.has(p.name)) throw CorruptFileError("forecaster checkpoint lacks parameter " + p.name);
    Matrix v = a.matrix(p.name);
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw CorruptFileError("forecaster checkpoint parameter " + p.name + " has the wrong shape");
    }
    p.value = std::move(v);
  }
  model.set_scaler(scaler);
  return model;
}

std::filesystem::path ForecastModel::recorded_bank_path(const std::filesystem::path& path) {
  const io::Archive a = io::Archive::load(path, kModelMagic);
  const std::string recorded = a.meta().value("bank_path", std::string());
  if (recorded.empty()) return {};
  std::filesystem::path where(recorded);
  if (where.is_relative()) where = std::filesystem::absolute(path).parent_path() / where;
  return where.lexically_normal();
}

ad::Var forecast_loss(ad::Var prediction, const Matrix& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols()) {
    throw ShapeError("forecast_loss: prediction and target shapes differ");
  }
  return ad::mse(prediction, target);
}

double forecast_loss(const Matrix& prediction, const Matrix& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols() || target.size() == 0) {
    throw ShapeError("forecast_loss: prediction and target shapes differ");
  }
  return (prediction - target).squaredNorm() / static_cast<double>(target.size());
}

Matrix stacked_targets(std::span<const ForecastSample> batch) {
  if (batch.empty()) throw ShapeError("stacked_targets: empty batch");
  return stack_rows(batch, &ForecastSample::target);
}

}  // namespace tpb::fc
