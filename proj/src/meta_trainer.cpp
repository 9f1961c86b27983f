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

#include "tpb/meta_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tpb/errors.hpp"
#include "tpb/optim.hpp"

namespace tpb::meta {

namespace {

// Accumulates the gradient of the batch loss into `store` and returns the loss.
double batch_gradient(const fc::ForecastModel& model, ad::ParameterStore& store,
                      std::span<const fc::ForecastSample> batch) {
  ad::Graph g(true);
  ad::Var loss = fc::forecast_loss(model.forward(g, store, batch), fc::stacked_targets(batch));
  g.backward(loss);
  return loss.value()(0, 0);
}

void require_finite(const ad::ParameterStore& store, double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError("non-finite loss in " + where);
  for (const auto& p : store) {
    if (p.trainable && !p.grad.allFinite()) {
      throw NumericError("non-finite gradient for " + p.name + " in " + where);
    }
  }
}

std::vector<fc::ForecastSample> draw(const std::vector<fc::ForecastSample>& samples, std::size_t lo,
                                     std::size_t hi, int count, Rng& rng) {
  std::vector<std::size_t> idx(hi - lo);
  std::iota(idx.begin(), idx.end(), lo);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  std::vector<fc::ForecastSample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(samples[i]);
  return out;
}

}  // namespace

void MetaConfig::validate() const {
  if (meta_batch < 1 || batch_size < 1 || meta_epochs < 0) {
    throw ConfigError("meta config: meta_batch and batch_size must be positive, meta_epochs non-negative");
  }
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ConfigError("meta config: alpha and beta must be positive");
  if (update_step < 1) throw ConfigError("meta config: update_step must be at least 1");
}

void FinetuneConfig::validate() const {
  if (batch_size < 1 || epochs < 0) {
    throw ConfigError("fine-tune config: batch_size must be positive, epochs non-negative");
  }
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("fine-tune config: negative rate");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("fine-tune config: moment coefficients must lie in [0, 1)");
  }
}

SourcePool make_source_pool(const data::CityCorpus& corpus, const data::Scaler& scaler,
                            const fc::ForecasterConfig& cfg, int stride) {
  SourcePool pool;
  pool.history_steps = cfg.patch_length * cfg.patch_count;
  pool.horizon = cfg.horizon;
  for (std::size_t c = 0; c < corpus.cities.size(); ++c) {
    const auto& series = corpus.cities[c];
    pool.city_ids.push_back(series.city_id);
    pool.cities.push_back(fc::make_samples(series, scaler, cfg.patch_length, cfg.patch_count, cfg.horizon,
                                           stride, 0, static_cast<int>(c)));
  }
  return pool;
}

Task sample_task(const SourcePool& pool, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("sample_task: batch_size must be positive");
  if (pool.cities.empty()) throw ConfigError("sample_task: no source cities");
  std::uniform_int_distribution<std::size_t> pick_city(0, pool.cities.size() - 1);
  const std::size_t city = pick_city(rng);
  const auto& samples = pool.cities[city];

  // A sample spans [t - history, t + horizon). Support samples end at or
  // before the cut, query samples start at or after it. Samples are ordered
  // by t, so both sides are contiguous index ranges.
  std::vector<int> cuts;
  std::vector<std::size_t> support_end;
  std::vector<std::size_t> query_begin;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int cut = samples[i].target_step + pool.horizon;
    const std::size_t q = static_cast<std::size_t>(
        std::lower_bound(samples.begin(), samples.end(), cut + pool.history_steps,
                         [](const fc::ForecastSample& s, int t) { return s.target_step < t; }) -
        samples.begin());
    if (i + 1 >= static_cast<std::size_t>(batch_size) && samples.size() - q >= static_cast<std::size_t>(batch_size)) {
      cuts.push_back(cut);
      support_end.push_back(i + 1);
      query_begin.push_back(q);
    }
  }
  if (cuts.empty()) {
    throw ConfigError("sample_task: city " + pool.city_ids[city] + " has too few windows for two disjoint batches of " +
                      std::to_string(batch_size));
  }
  std::uniform_int_distribution<std::size_t> pick_cut(0, cuts.size() - 1);
  const std::size_t c = pick_cut(rng);
  Task task;
  task.city = static_cast<int>(city);
  task.city_id = pool.city_ids[city];
  task.support = draw(samples, 0, support_end[c], batch_size, rng);
  task.query = draw(samples, query_begin[c], samples.size(), batch_size, rng);
  return task;
}

ReptileTrace reptile_step(ad::ParameterStore& theta, std::size_t task_count, const TaskGradient& gradient,
                          double alpha, double beta, int update_step) {
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ConfigError("reptile: alpha and beta must be positive");
  if (update_step < 1) throw ConfigError("reptile: update_step must be at least 1");
  ReptileTrace trace;
  trace.stored.resize(task_count);
  const optim::Sgd support_step(alpha);
  for (std::size_t t = 0; t < task_count; ++t) {
    ad::ParameterStore local = theta;
    for (int i = 0; i < update_step; ++i) {
      local.zero_grad();
      const double s = gradient(local, t, false);
      require_finite(local, s, "support step of task " + std::to_string(t));
      support_step.step(local);
      trace.support_loss.push_back(s);

      local.zero_grad();
      const double q = gradient(local, t, true);
      require_finite(local, q, "query step of task " + std::to_string(t));
      trace.query_loss.push_back(q);
      std::vector<Matrix> snapshot;
      snapshot.reserve(local.size());
      for (const auto& p : local) snapshot.push_back(p.grad);
      trace.stored[t].push_back(std::move(snapshot));
    }
  }
  // Sum first, then apply once, in fixed task/step order.
  const double rate = beta / static_cast<double>(update_step);
  for (std::size_t j = 0; j < theta.size(); ++j) {
    auto& p = theta[j];
    if (!p.trainable) continue;
    Matrix total = Matrix::Zero(p.value.rows(), p.value.cols());
    for (const auto& task : trace.stored) {
      for (const auto& snap : task) total += snap[j];
    }
    p.value -= rate * total;
  }
  theta.zero_grad();
  return trace;
}

MetaHistory reptile_meta_train(fc::ForecastModel& model, const SourcePool& pool, const MetaConfig& cfg,
                               const std::function<void(const std::string&)>& log) {
  cfg.validate();
  if (!model.bank() && model.config().variant != fc::Variant::no_meta) {
    throw DependencyError("meta-training requires an attached pattern bank");
  }
  Rng rng = make_rng(cfg.seed, 0x4d455441);
  MetaHistory history;
  for (int epoch = 0; epoch < cfg.meta_epochs; ++epoch) {
    std::vector<Task> tasks;
    for (int t = 0; t < cfg.meta_batch; ++t) tasks.push_back(sample_task(pool, cfg.batch_size, rng));
    auto grad = [&](ad::ParameterStore& store, std::size_t t, bool query) {
      const auto& batch = query ? tasks[t].query : tasks[t].support;
      return batch_gradient(model, store, batch);
    };
    const ReptileTrace trace = reptile_step(model.params(), tasks.size(), grad, cfg.alpha, cfg.beta, cfg.update_step);
    const double mean =
        std::accumulate(trace.query_loss.begin(), trace.query_loss.end(), 0.0) / static_cast<double>(trace.query_loss.size());
    history.query_loss.push_back(mean);
    if (log) {
      std::ostringstream os;
      os << "meta epoch " << epoch << " query_loss " << mean;
      log(os.str());
    }
  }
  return history;
}

FinetuneHistory fine_tune(fc::ForecastModel& model, std::span<const fc::ForecastSample> samples,
                          const FinetuneConfig& cfg, const std::function<void(const std::string&)>& log) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("fine_tune: the target span yields no samples");
  optim::Adam adam({.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2, .weight_decay = cfg.weight_decay});
  Rng rng = make_rng(cfg.seed, 0x46494e45);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  FinetuneHistory history;
  auto& store = model.params();
  std::vector<bool> trainable;
  for (const auto& p : store) trainable.push_back(p.trainable);
  for (const auto& prefix : cfg.frozen) store.set_trainable(prefix, false);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<fc::ForecastSample> batch;
      for (std::size_t i = b; i < e; ++i) batch.push_back(samples[order[i]]);
      store.zero_grad();
      const double loss = batch_gradient(model, store, batch);
      try {
        require_finite(store, loss, "fine-tuning epoch " + std::to_string(epoch));
      } catch (...) {
        for (std::size_t j = 0; j < store.size(); ++j) store[j].trainable = trainable[j];
        throw;
      }
      adam.step(store);
      total += loss;
      ++batches;
    }
    store.zero_grad();
    history.train_loss.push_back(total / static_cast<double>(batches));
    if (log) {
      std::ostringstream os;
      os << "fine-tune epoch " << epoch << " train_loss " << history.train_loss.back();
      log(os.str());
    }
  }
  for (std::size_t j = 0; j < store.size(); ++j) store[j].trainable = trainable[j];
  return history;
}

double evaluate_loss(const fc::ForecastModel& model, std::span<const fc::ForecastSample> samples, int batch_size) {
  if (samples.empty()) throw ConfigError("evaluate_loss: no samples");
  if (batch_size < 1) throw ConfigError("evaluate_loss: batch_size must be positive");
  double weighted = 0.0;
  double count = 0.0;
  for (std::size_t b = 0; b < samples.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto batch = samples.subspan(b, std::min<std::size_t>(batch_size, samples.size() - b));
    const Matrix target = fc::stacked_targets(batch);
    weighted += fc::forecast_loss(model.predict(batch), target) * static_cast<double>(target.size());
    count += static_cast<double>(target.size());
  }
  return weighted / count;
}

}  // namespace tpb::meta
