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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tpb/autodiff.hpp"
#include "tpb/data_synth.hpp"
#include "tpb/forecaster.hpp"

namespace tpb::meta {

struct MetaConfig {
  int meta_batch = 2;
  int batch_size = 16;
  double alpha = 5e-4;  // support (inner) learning rate
  double beta = 5e-4;   // query (outer) learning rate
  int update_step = 2;
  int meta_epochs = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FinetuneConfig {
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  int epochs = 200;
  std::uint64_t seed = 0;
  // Parameter name prefixes held fixed during fine-tuning. Hour-of-week
  // slots of the test span never occur in a short few-shot span, so training
  // their embeddings there only fits slot identity.
  std::vector<std::string> frozen = {"aggregator.positional"};

  void validate() const;
};

// Forecasting samples of every source city, ordered by target step.
struct SourcePool {
  std::vector<std::string> city_ids;
  std::vector<std::vector<fc::ForecastSample>> cities;
  int history_steps = 0;  // P * T0
  int horizon = 0;        // T'
};

SourcePool make_source_pool(const data::CityCorpus& corpus, const data::Scaler& scaler,
                            const fc::ForecasterConfig& cfg, int stride);

struct Task {
  int city = 0;
  std::string city_id;
  std::vector<fc::ForecastSample> support;
  std::vector<fc::ForecastSample> query;
};

// Picks a city uniformly, then a cut time with at least `batch_size` samples
// entirely before it and entirely after it, and draws each half from one side.
Task sample_task(const SourcePool& pool, int batch_size, Rng& rng);

// Loss of `store` on the support (query = false) or query half of task
// `task`; gradients are accumulated into the store.
using TaskGradient = std::function<double(ad::ParameterStore& store, std::size_t task, bool query)>;

struct ReptileTrace {
  // stored[task][step][parameter]: query gradient after each support step.
  std::vector<std::vector<std::vector<Matrix>>> stored;
  std::vector<double> support_loss;
  std::vector<double> query_loss;
};

// One outer iteration: each task adapts a copy of theta with `update_step`
// SGD steps at rate alpha on its support half, storing the query gradient
// after every step; theta then moves by -beta/update_step times the sum of
// all stored gradients. Non-trainable parameters are left alone.
ReptileTrace reptile_step(ad::ParameterStore& theta, std::size_t task_count, const TaskGradient& gradient,
                          double alpha, double beta, int update_step);

struct MetaHistory {
  std::vector<double> query_loss;  // mean over tasks and steps, per epoch
};

MetaHistory reptile_meta_train(fc::ForecastModel& model, const SourcePool& pool, const MetaConfig& cfg,
                               const std::function<void(const std::string&)>& log = {});

struct FinetuneHistory {
  std::vector<double> train_loss;  // mean mini-batch loss per epoch
};

FinetuneHistory fine_tune(fc::ForecastModel& model, std::span<const fc::ForecastSample> samples,
                          const FinetuneConfig& cfg, const std::function<void(const std::string&)>& log = {});

// Mean forecast loss of a model over samples, in normalized units.
double evaluate_loss(const fc::ForecastModel& model, std::span<const fc::ForecastSample> samples,
                     int batch_size = 16);

}  // namespace tpb::meta
