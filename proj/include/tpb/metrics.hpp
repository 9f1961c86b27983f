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

#include <span>
#include <vector>

namespace tpb::metrics {

double rmse(std::span<const double> y, std::span<const double> y_hat);
double mae(std::span<const double> y, std::span<const double> y_hat);
// 100 * mean |y - y_hat| / |y| over entries with |y| >= floor; entries below
// the floor are excluded. Throws when every entry is below the floor.
double mape(std::span<const double> y, std::span<const double> y_hat, double floor = 1e-3);

struct Triple {
  double rmse = 0.0;
  double mae = 0.0;
  double mape = 0.0;
};

Triple all(std::span<const double> y, std::span<const double> y_hat, double mape_floor = 1e-3);

}  // namespace tpb::metrics
