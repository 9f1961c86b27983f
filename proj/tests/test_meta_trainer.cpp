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

#include <doctest.h>

#include <cstring>

#include "tpb/errors.hpp"
#include "tpb/meta_trainer.hpp"

using namespace tpb;
using namespace tpb::meta;

namespace {

std::shared_ptr<const bank::PatternBank> make_bank(int k, int d, Rng& rng) {
  return std::make_shared<const bank::PatternBank>(bank::normalize_rows(nn::normal_matrix(k, d, 1.0, rng)), true,
                                                   bank::Provenance{});
}

fc::ForecasterConfig tiny_config(fc::Variant v = fc::Variant::full) {
  fc::ForecasterConfig c;
  c.width = 8;
  c.query_width = 8;
  c.patch_length = 3;
  c.patch_count = 3;
  c.horizon = 2;
  c.heads = 2;
  c.variant = v;
  c.graph_nodes = 4;
  c.seed = 3;
  return c;
}

data::TrafficSeries smooth_series(const std::string& id, int steps, double phase) {
  data::TrafficSeries s;
  s.city_id = id;
  s.node_count = 4;
  s.step_count = steps;
  s.values.resize(static_cast<std::size_t>(4 * steps));
  for (int n = 0; n < 4; ++n) {
    for (int t = 0; t < steps; ++t) {
      s.at(n, t) = static_cast<float>(std::sin(0.3 * t + phase + n) + 0.1 * n);
    }
  }
  s.prior_graph = Matrix::Constant(4, 4, 0.25);
  return s;
}

data::CityCorpus two_cities() {
  data::CityCorpus c;
  c.cities.push_back(smooth_series("a", 200, 0.0));
  c.cities.push_back(smooth_series("b", 200, 1.0));
  return c;
}

// Quadratic toy: support loss 0.5|theta - a_t|^2, query loss 0.5|theta - b_t|^2.
struct Quadratic {
  std::vector<Matrix> a;
  std::vector<Matrix> b;

  double operator()(ad::ParameterStore& s, std::size_t t, bool query) const {
    const Matrix& centre = query ? b[t] : a[t];
    const Matrix r = s[0].value - centre;
    s[0].grad += r;
    return 0.5 * r.squaredNorm();
  }
};

bool bitwise_equal(const Matrix& x, const Matrix& y) {
  return x.rows() == y.rows() && x.cols() == y.cols() &&
         std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0;
}

}  // namespace

TEST_CASE("stored gradients follow the closed-form quadratic trajectory") {
  Rng rng = make_rng(5);
  ad::ParameterStore theta;
  theta.add("w", nn::normal_matrix(1, 3, 1.0, rng));
  Quadratic q;
  for (int t = 0; t < 3; ++t) {
    q.a.push_back(nn::normal_matrix(1, 3, 1.0, rng));
    q.b.push_back(nn::normal_matrix(1, 3, 1.0, rng));
  }
  const double alpha = 0.3;
  const double beta = 0.2;
  const int steps = 4;
  const Matrix start = theta[0].value;
  const ReptileTrace trace = reptile_step(theta, 3, std::cref(q), alpha, beta, steps);

  Matrix total = Matrix::Zero(1, 3);
  for (int t = 0; t < 3; ++t) {
    Matrix w = start;
    for (int i = 0; i < steps; ++i) {
      w = w - alpha * (w - q.a[t]);
      const Matrix expected = w - q.b[t];
      CHECK((trace.stored[t][i][0] - expected).cwiseAbs().maxCoeff() < 1e-10);
      total += expected;
    }
  }
  CHECK((theta[0].value - (start - beta / steps * total)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(trace.query_loss.size() == 12);
}

TEST_CASE("with support equal to query the stored gradients are the plain SGD trajectory") {
  Rng rng = make_rng(6);
  ad::ParameterStore theta;
  theta.add("w", nn::normal_matrix(2, 2, 1.0, rng));
  Quadratic q;
  q.a.push_back(nn::normal_matrix(2, 2, 1.0, rng));
  q.b = q.a;
  const Matrix start = theta[0].value;
  const ReptileTrace trace = reptile_step(theta, 1, std::cref(q), 0.1, 0.1, 3);
  Matrix w = start;
  for (int i = 0; i < 3; ++i) {
    w -= 0.1 * (w - q.a[0]);
    CHECK((trace.stored[0][i][0] - (w - q.a[0])).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("zero query gradients leave theta bitwise unchanged") {
  Rng rng = make_rng(7);
  ad::ParameterStore theta;
  theta.add("w", nn::normal_matrix(3, 3, 1.0, rng));
  theta.add("v", nn::normal_matrix(1, 4, 1.0, rng));
  const ad::ParameterStore before = theta;
  auto grad = [&](ad::ParameterStore& s, std::size_t, bool query) {
    if (!query) {
      s[0].grad.setConstant(1.0);
      s[1].grad.setConstant(-2.0);
    }
    return 1.0;
  };
  reptile_step(theta, 2, grad, 5e-4, 5e-4, 3);
  for (std::size_t j = 0; j < theta.size(); ++j) CHECK(bitwise_equal(theta[j].value, before[j].value));
}

TEST_CASE("one update step is a single query step of size beta after one support step") {
  ad::ParameterStore theta;
  theta.add("w", Matrix::Constant(1, 2, 1.0));
  Quadratic q;
  q.a.push_back(Matrix::Constant(1, 2, 3.0));
  q.b.push_back(Matrix::Constant(1, 2, -1.0));
  reptile_step(theta, 1, std::cref(q), 0.5, 0.25, 1);
  // Support step: 1 - 0.5 * (1 - 3) = 2; query gradient 2 - (-1) = 3.
  CHECK(theta[0].value(0, 0) == doctest::Approx(1.0 - 0.25 * 3.0).epsilon(1e-15));
}

TEST_CASE("reptile leaves frozen parameters alone and rejects bad input") {
  ad::ParameterStore theta;
  theta.add("w", Matrix::Constant(1, 2, 1.0));
  theta.add("frozen", Matrix::Constant(1, 2, 4.0));
  theta.set_trainable("frozen", false);
  auto grad = [](ad::ParameterStore& s, std::size_t, bool) {
    s[0].grad.setConstant(1.0);
    s[1].grad.setConstant(1.0);
    return 0.0;
  };
  reptile_step(theta, 2, grad, 0.1, 0.1, 2);
  CHECK(theta[1].value == Matrix::Constant(1, 2, 4.0));
  CHECK(theta[0].value(0, 0) < 1.0);

  CHECK_THROWS_AS(reptile_step(theta, 1, grad, 0.0, 0.1, 1), ConfigError);
  CHECK_THROWS_AS(reptile_step(theta, 1, grad, 0.1, 0.1, 0), ConfigError);
  auto nan_grad = [](ad::ParameterStore& s, std::size_t, bool query) {
    if (query) s[0].grad(0, 1) = std::nan("");
    return 0.0;
  };
  const Matrix before = theta[0].value;
  CHECK_THROWS_AS(reptile_step(theta, 1, nan_grad, 0.1, 0.1, 1), NumericError);
  CHECK(theta[0].value == before);
}

TEST_CASE("config validation") {
  MetaConfig m;
  CHECK_NOTHROW(m.validate());
  m.beta = 0.0;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  m = MetaConfig{};
  m.update_step = 0;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  FinetuneConfig f;
  CHECK_NOTHROW(f.validate());
  f.beta2 = 1.0;
  CHECK_THROWS_AS(f.validate(), ConfigError);
}

TEST_CASE("tasks come from one city with disjoint support and query time ranges") {
  const auto cfg = tiny_config();
  const SourcePool pool = make_source_pool(two_cities(), data::Scaler{}, cfg, 1);
  CHECK(pool.history_steps == 9);
  Rng rng = make_rng(11);
  bool seen[2] = {false, false};
  for (int trial = 0; trial < 50; ++trial) {
    const Task task = sample_task(pool, 8, rng);
    REQUIRE(task.support.size() == 8);
    REQUIRE(task.query.size() == 8);
    seen[task.city] = true;
    CHECK(task.city_id == pool.city_ids[static_cast<std::size_t>(task.city)]);
    int support_end = 0;
    int query_start = 1 << 30;
    for (const auto& s : task.support) {
      CHECK(s.city == task.city);
      support_end = std::max(support_end, s.target_step + pool.horizon);
    }
    for (const auto& s : task.query) {
      CHECK(s.city == task.city);
      query_start = std::min(query_start, s.target_step - pool.history_steps);
    }
    CHECK(support_end <= query_start);
  }
  CHECK(seen[0]);
  CHECK(seen[1]);

  Rng r1 = make_rng(4);
  Rng r2 = make_rng(4);
  const Task t1 = sample_task(pool, 8, r1);
  const Task t2 = sample_task(pool, 8, r2);
  CHECK(t1.city == t2.city);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(t1.support[i].target_step == t2.support[i].target_step);
    CHECK(t1.query[i].target_step == t2.query[i].target_step);
  }

  CHECK_THROWS_AS(sample_task(pool, 100, r1), ConfigError);
  CHECK_THROWS_AS(sample_task(SourcePool{}, 8, r1), ConfigError);
}

TEST_CASE("meta-training plus fine-tuning leaves the bank bitwise unchanged and is deterministic") {
  Rng rng = make_rng(12);
  auto b = make_bank(4, 8, rng);
  const Matrix bank_before = b->matrix();
  const auto cfg = tiny_config();
  const auto corpus = two_cities();
  const SourcePool pool = make_source_pool(corpus, data::Scaler{}, cfg, 2);
  MetaConfig mc;
  mc.batch_size = 4;
  mc.meta_epochs = 3;
  mc.alpha = 1e-2;
  mc.beta = 1e-2;
  mc.seed = 9;

  fc::ForecastModel m1(cfg, b);
  fc::ForecastModel m2(cfg, b);
  const ad::ParameterStore init = m1.params();
  const auto h1 = reptile_meta_train(m1, pool, mc);
  reptile_meta_train(m2, pool, mc);
  CHECK(h1.query_loss.size() == 3);
  bool moved = false;
  for (std::size_t j = 0; j < init.size(); ++j) {
    CHECK(bitwise_equal(m1.params()[j].value, m2.params()[j].value));
    moved = moved || !(m1.params()[j].value == init[j].value);
  }
  CHECK(moved);

  const auto target = fc::make_samples(smooth_series("t", 60, 2.0), data::Scaler{}, 3, 3, 2, 3);
  FinetuneConfig fcfg;
  fcfg.batch_size = 4;
  fcfg.epochs = 3;
  const auto ft = fine_tune(m1, target, fcfg);
  CHECK(ft.train_loss.size() == 3);
  CHECK(bitwise_equal(b->matrix(), bank_before));
  CHECK(m1.bank().get() == b.get());
}

TEST_CASE("fine-tuning with zero learning rate leaves parameters unchanged") {
  Rng rng = make_rng(13);
  fc::ForecastModel model(tiny_config(), make_bank(4, 8, rng));
  const ad::ParameterStore before = model.params();
  const auto target = fc::make_samples(smooth_series("t", 60, 2.0), data::Scaler{}, 3, 3, 2, 3);
  FinetuneConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 2;
  fine_tune(model, target, cfg);
  for (std::size_t j = 0; j < before.size(); ++j) CHECK(bitwise_equal(model.params()[j].value, before[j].value));
  CHECK_THROWS_AS(fine_tune(model, std::span<const fc::ForecastSample>{}, cfg), ConfigError);
}

TEST_CASE("fine-tuning only the output layer decreases the training loss monotonically") {
  Rng rng = make_rng(14);
  fc::ForecastModel model(tiny_config(), make_bank(4, 8, rng));
  auto& ps = model.params();
  ps.set_trainable("", false);
  ps[model.head().output.weight].trainable = true;
  ps[model.head().output.bias].trainable = true;
  const auto target = fc::make_samples(smooth_series("t", 60, 2.0), data::Scaler{}, 3, 3, 2, 3);
  FinetuneConfig cfg;
  cfg.batch_size = static_cast<int>(target.size());
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  cfg.epochs = 40;
  const auto h = fine_tune(model, target, cfg);
  for (std::size_t e = 1; e < h.train_loss.size(); ++e) CHECK(h.train_loss[e] <= h.train_loss[e - 1] + 1e-8);
  CHECK(h.train_loss.back() < h.train_loss.front());
}

TEST_CASE("evaluate_loss is a size-weighted mean over batches") {
  Rng rng = make_rng(15);
  fc::ForecastModel model(tiny_config(), make_bank(4, 8, rng));
  const auto target = fc::make_samples(smooth_series("t", 60, 2.0), data::Scaler{}, 3, 3, 2, 3);
  const double whole = fc::forecast_loss(model.predict(target), fc::stacked_targets(target));
  CHECK(evaluate_loss(model, target, 5) == doctest::Approx(whole).epsilon(1e-12));
}

TEST_CASE("fine-tuning holds frozen prefixes fixed and restores trainable flags") {
  Rng rng = make_rng(16);
  fc::ForecastModel model(tiny_config(), make_bank(4, 8, rng));
  auto& ps = model.params();
  const std::size_t pe = model.aggregator().positional;
  const Matrix before = ps[pe].value;
  const Matrix head_before = ps[model.head().output.weight].value;
  const auto target = fc::make_samples(smooth_series("t", 60, 2.0), data::Scaler{}, 3, 3, 2, 3);
  FinetuneConfig cfg;
  cfg.epochs = 2;
  REQUIRE(cfg.frozen == std::vector<std::string>{"aggregator.positional"});
  fine_tune(model, target, cfg);
  CHECK(bitwise_equal(ps[pe].value, before));
  CHECK(ps[pe].trainable);
  CHECK_FALSE(ps[model.head().output.weight].value == head_before);

  cfg.frozen.clear();
  fine_tune(model, target, cfg);
  CHECK_FALSE(ps[pe].value == before);
}
