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

#include <vector>

#include "tpb/autodiff.hpp"

namespace tpb::optim {

// Plain gradient descent: p <- p - lr * grad.
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(ad::ParameterStore& store) const;

 private:
  double lr_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled weight decay (AdamW); 0 gives plain Adam.
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // Moment buffers are sized lazily against the store's layout on first use.
  void step(ad::ParameterStore& store);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

// Gradient norm across all trainable parameters; non-finite entries propagate.
double grad_norm(const ad::ParameterStore& store);

}  // namespace tpb::optim
