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

#include "tpb/optim.hpp"

#include <cmath>

#include "tpb/errors.hpp"

namespace tpb::optim {

void Sgd::step(ad::ParameterStore& store) const {
  for (auto& p : store) {
    if (p.trainable) {
      p.value -= lr_ * p.grad;
    }
  }
}

void Adam::step(ad::ParameterStore& store) {
  if (m_.empty()) {
    for (const auto& p : store) {
      m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }
  if (m_.size() != store.size()) {
    throw Error("Adam: parameter layout changed between steps");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t i = 0;
  for (auto& p : store) {
    Matrix& m = m_[i];
    Matrix& v = v_[i];
    ++i;
    if (!p.trainable) {
      continue;
    }
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p.grad;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    if (cfg_.weight_decay != 0.0) {
      p.value *= 1.0 - cfg_.lr * cfg_.weight_decay;
    }
    p.value.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

double grad_norm(const ad::ParameterStore& store) {
  double acc = 0.0;
  for (const auto& p : store) {
    if (p.trainable) {
      acc += p.grad.squaredNorm();
    }
  }
  return std::sqrt(acc);
}

}  // namespace tpb::optim
