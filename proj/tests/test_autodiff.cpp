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

#include "grad_check.hpp"
#include "tpb/errors.hpp"
#include "tpb/nn.hpp"
#include "tpb/optim.hpp"

using namespace tpb;
using tpb::ad::Graph;
using tpb::ad::ParameterStore;
using tpb::ad::Var;

TEST_CASE("elementwise and reduction ops match finite differences") {
  Rng rng = make_rng(7);
  ParameterStore store;
  const auto a = store.add("a", nn::normal_matrix(3, 4, 1.0, rng));
  const auto b = store.add("b", nn::normal_matrix(4, 5, 1.0, rng));
  const auto row = store.add("row", nn::normal_matrix(1, 5, 1.0, rng));
  const Matrix target = nn::normal_matrix(3, 5, 1.0, rng);

  auto build = [&](Graph& g, ParameterStore& s) {
    Var x = ad::matmul(g.param(s[a]), g.param(s[b]));
    x = ad::add_row(x, g.param(s[row]));
    Var y = ad::mul(ad::sigmoid(x), ad::tanh(ad::scale(x, 0.5)));
    Var z = ad::softmax_rows(ad::gelu(y));
    return ad::add(ad::mse(z, target), ad::scale(ad::sum(ad::gelu(x)), 1e-2));
  };
  auto errs = testing::gradient_errors(store, build);
  for (const auto& e : errs) {
    INFO(e.name);
    CHECK(e.relative < 1e-6);
  }
}

TEST_CASE("fixed-order product matches matmul_nt, its gradients, and is position independent") {
  Rng rng = make_rng(13);
  ParameterStore store;
  const auto a = store.add("a", nn::normal_matrix(7, 5, 1.0, rng));
  const auto b = store.add("b", nn::normal_matrix(6, 5, 1.0, rng));
  const Matrix target = nn::normal_matrix(7, 6, 1.0, rng);
  auto build = [&](Graph& g, ParameterStore& s) {
    return ad::mse(ad::matmul_nt_exact(g.param(s[a]), g.param(s[b])), target);
  };
  CHECK(testing::max_relative_error(testing::gradient_errors(store, build)) < 1e-6);

  Graph g(false);
  const Matrix exact = ad::matmul_nt_exact(g.constant(store[a].value), g.constant(store[b].value)).value();
  CHECK((exact - store[a].value * store[b].value.transpose()).cwiseAbs().maxCoeff() < 1e-12);

  for (int n = 2; n <= 13; ++n) {
    const Matrix same = Matrix::Ones(n, 1) * nn::normal_matrix(1, 9, 1.0, rng);
    const Matrix w = nn::normal_matrix(11, 9, 1.0, rng);
    const Matrix out = ad::matmul_nt_exact(g.constant(same), g.constant(w)).value();
    for (int i = 1; i < n; ++i) REQUIRE(out.row(i) == out.row(0));
  }
  CHECK_THROWS_AS(ad::matmul_nt_exact(g.constant(Matrix::Ones(2, 3)), g.constant(Matrix::Ones(2, 4))), ShapeError);
}

TEST_CASE("shape ops and layer norm match finite differences") {
  Rng rng = make_rng(11);
  ParameterStore store;
  const auto x = store.add("x", nn::normal_matrix(4, 6, 1.0, rng));
  const auto ln = nn::make_layer_norm(store, "ln", 3);
  store[ln.gamma].value = nn::normal_matrix(1, 3, 1.0, rng);
  store[ln.beta].value = nn::normal_matrix(1, 3, 1.0, rng);
  const auto w = store.add("w", nn::normal_matrix(3, 3, 1.0, rng));
  const Matrix target = nn::normal_matrix(5, 6, 1.0, rng);

  auto build = [&](Graph& g, ParameterStore& s) {
    Var r = ad::reshape(g.param(s[x]), 8, 3);
    r = nn::apply(g, s, ln, r);
    r = ad::matmul_nt(r, g.param(s[w]));
    Var gathered = ad::gather_rows(r, {0, 3, 3, 7, 1, 2, 5, 6, 0, 4});
    Var back = ad::reshape(gathered, 5, 6);
    std::vector<Var> cols{ad::slice_cols(back, 0, 2), ad::slice_cols(back, 2, 4)};
    Var joined = ad::concat_cols(cols);
    std::vector<Var> rows{ad::gather_rows(joined, {0, 1}), ad::gather_rows(joined, {2, 3, 4})};
    Var stacked = ad::concat_rows(rows);
    const std::vector<double> weights{1.0, 0.0, 2.0, 1.0, 0.5};
    return ad::row_weighted_mse(stacked, target, weights);
  };
  auto errs = testing::gradient_errors(store, build);
  for (const auto& e : errs) {
    INFO(e.name);
    CHECK(e.relative < 1e-6);
  }
}

TEST_CASE("transformer block gradients, including query-row subset and segment mask") {
  Rng rng = make_rng(3);
  ParameterStore store;
  const auto block = nn::make_transformer_block(store, "blk", 8, 2, 16, rng);
  const auto x = store.add("x", nn::normal_matrix(7, 8, 1.0, rng));
  const std::vector<int> last{2, 6};
  const Matrix bias = nn::segment_attention_bias({3, 4}, &last);
  const Matrix target = nn::normal_matrix(2, 8, 1.0, rng);
  auto build = [&](Graph& g, ParameterStore& s) {
    Var out = nn::transformer_block(g, s, block, g.param(s[x]), &bias, &last);
    return ad::mse(out, target);
  };
  auto errs = testing::gradient_errors(store, build);
  CHECK(testing::max_relative_error(errs) < 1e-5);
}

TEST_CASE("query-row subset equals the full block restricted to those rows") {
  Rng rng = make_rng(5);
  ParameterStore store;
  const auto block = nn::make_transformer_block(store, "blk", 8, 4, 32, rng);
  const Matrix x = nn::normal_matrix(9, 8, 1.0, rng);
  const std::vector<int> last{3, 8};
  const Matrix full_bias = nn::segment_attention_bias({4, 5});
  const Matrix sub_bias = nn::segment_attention_bias({4, 5}, &last);
  Graph g(false);
  const ParameterStore& cs = store;
  Matrix full = nn::transformer_block(g, cs, block, g.constant(x), &full_bias).value();
  Matrix sub = nn::transformer_block(g, cs, block, g.constant(x), &sub_bias, &last).value();
  CHECK((full.row(3) - sub.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((full.row(8) - sub.row(1)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grouped attention matches finite differences and the masked dense form") {
  Rng rng = make_rng(21);
  ParameterStore store;
  const auto q = store.add("q", nn::normal_matrix(3, 4, 1.0, rng));
  const auto k = store.add("k", nn::normal_matrix(12, 4, 1.0, rng));
  const auto v = store.add("v", nn::normal_matrix(12, 4, 1.0, rng));
  const Matrix target = nn::normal_matrix(3, 4, 1.0, rng);
  auto build = [&](Graph& g, ParameterStore& s) {
    return ad::mse(ad::grouped_attention(g.param(s[q]), g.param(s[k]), g.param(s[v]), 4, 0.7), target);
  };
  CHECK(testing::max_relative_error(testing::gradient_errors(store, build)) < 1e-6);

  Graph g(false);
  const Matrix grouped =
      ad::grouped_attention(g.constant(store[q].value), g.constant(store[k].value), g.constant(store[v].value), 4, 0.7)
          .value();
  Matrix scores = store[q].value * store[k].value.transpose() * 0.7;
  for (int s = 0; s < 3; ++s) {
    for (int j = 0; j < 12; ++j) {
      if (j / 4 != s) scores(s, j) = -1e300;
    }
  }
  const Matrix dense = ad::softmax_rows(g.constant(scores)).value() * store[v].value;
  CHECK((grouped - dense).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("last-row block equals the segment-masked block on those rows, with matching gradients") {
  Rng rng = make_rng(22);
  ParameterStore store;
  const auto block = nn::make_transformer_block(store, "blk", 8, 2, 16, rng);
  const auto x = store.add("x", nn::normal_matrix(15, 8, 1.0, rng));
  const std::vector<int> last{4, 9, 14};
  const Matrix bias = nn::segment_attention_bias({5, 5, 5}, &last);
  const Matrix target = nn::normal_matrix(3, 8, 1.0, rng);

  Graph g(false);
  const ParameterStore& cs = store;
  const Matrix a = nn::transformer_block_last(g, cs, block, g.constant(cs[x].value), 5).value();
  const Matrix b = nn::transformer_block(g, cs, block, g.constant(cs[x].value), &bias, &last).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);

  auto build = [&](Graph& gg, ParameterStore& s) {
    return ad::mse(nn::transformer_block_last(gg, s, block, gg.param(s[x]), 5), target);
  };
  CHECK(testing::max_relative_error(testing::gradient_errors(store, build)) < 1e-5);
  CHECK_THROWS_AS(nn::transformer_block_last(g, cs, block, g.constant(Matrix::Zero(14, 8)), 5), ShapeError);
}

TEST_CASE("segment mask isolates sequences") {
  Rng rng = make_rng(9);
  ParameterStore store;
  const auto block = nn::make_transformer_block(store, "blk", 8, 2, 16, rng);
  Matrix x = nn::normal_matrix(6, 8, 1.0, rng);
  const Matrix bias = nn::segment_attention_bias({2, 4});
  Graph g(false);
  const ParameterStore& cs = store;
  Matrix joint = nn::transformer_block(g, cs, block, g.constant(x), &bias).value();
  Matrix alone = nn::transformer_block(g, cs, block, g.constant(Matrix(x.topRows(2)))).value();
  CHECK((joint.topRows(2) - alone).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zeroed residual branches make the block an identity") {
  Rng rng = make_rng(1);
  ParameterStore store;
  const auto block = nn::make_transformer_block(store, "blk", 8, 2, 16, rng);
  store[block.attn_out.weight].value.setZero();
  store[block.ff_out.weight].value.setZero();
  const Matrix x = nn::normal_matrix(5, 8, 1.0, rng);
  Graph g(false);
  const ParameterStore& cs = store;
  CHECK(nn::transformer_block(g, cs, block, g.constant(x)).value() == x);
}

TEST_CASE("eval graphs record no backward closures and leave grads untouched") {
  Rng rng = make_rng(2);
  ParameterStore store;
  const auto lin = nn::make_linear(store, "lin", 3, 2, rng);
  Graph g(false);
  Var out = nn::apply(g, store, lin, g.constant(Matrix::Ones(4, 3)));
  CHECK_FALSE(out.needs_grad());
  g.backward(ad::sum(out));
  CHECK(store[lin.weight].grad.isZero());
}

TEST_CASE("shape mismatches raise") {
  Graph g;
  Var a = g.constant(Matrix::Ones(2, 3));
  Var b = g.constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::reshape(a, 4, 2), ShapeError);
  CHECK_THROWS_AS(ad::gather_rows(a, {2}), ShapeError);
}

TEST_CASE("optimizers") {
  ParameterStore store;
  store.add("p", Matrix::Constant(2, 2, 1.0));
  store[0].grad = Matrix::Constant(2, 2, 0.5);
  SUBCASE("sgd") {
    optim::Sgd(0.1).step(store);
    CHECK(store[0].value(0, 0) == doctest::Approx(0.95));
  }
  SUBCASE("adam first step moves by lr") {
    optim::Adam adam({.lr = 0.01});
    adam.step(store);
    CHECK(store[0].value(1, 1) == doctest::Approx(0.99).epsilon(1e-6));
  }
  SUBCASE("zero learning rate leaves weights bitwise unchanged") {
    const Matrix before = store[0].value;
    optim::Adam adamw({.lr = 0.0, .weight_decay = 0.01});
    adamw.step(store);
    CHECK(store[0].value == before);
  }
  SUBCASE("frozen parameters are skipped") {
    store.set_trainable("p", false);
    optim::Sgd(1.0).step(store);
    CHECK(store[0].value(0, 0) == 1.0);
  }
}
