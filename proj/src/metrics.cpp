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

#include "tpb/metrics.hpp"

#include <cmath>

#include "tpb/errors.hpp"

namespace tpb::metrics {

namespace {

void check(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) throw ShapeError("metric inputs differ in length");
  if (y.empty()) throw ShapeError("metric inputs are empty");
}

}  // namespace

double rmse(std::span<const double> y, std::span<const double> y_hat) {
  check(y, y_hat);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = y[i] - y_hat[i];
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(y.size()));
}

double mae(std::span<const double> y, std::span<const double> y_hat) {
  check(y, y_hat);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    acc += std::abs(y[i] - y_hat[i]);
  }
  return acc / static_cast<double>(y.size());
}

double mape(std::span<const double> y, std::span<const double> y_hat, double floor) {
  check(y, y_hat);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (std::abs(y[i]) < floor) continue;
    acc += std::abs(y[i] - y_hat[i]) / std::abs(y[i]);
    ++n;
  }
  if (n == 0) throw NumericError("mape: every target is below the floor");
  return 100.0 * acc / static_cast<double>(n);
}

Triple all(std::span<const double> y, std::span<const double> y_hat, double mape_floor) {
  return {rmse(y, y_hat), mae(y, y_hat), mape(y, y_hat, mape_floor)};
}

}  // namespace tpb::metrics
