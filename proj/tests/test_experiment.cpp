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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tpb/errors.hpp"
#include "tpb/experiment.hpp"

using namespace tpb;
using namespace tpb::exp;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "tpb_test_experiment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A plan small enough to run every stage in a few seconds.
ExperimentPlan tiny_plan() {
  ExperimentPlan p;
  p.synth.cities = {{"a", 6, 3, {0.3, 0.3, 0.2, 0.1, 0.1}},
                    {"b", 6, 3, {0.1, 0.2, 0.3, 0.3, 0.1}},
                    {"target", 6, 2, {0.25, 0.15, 0.25, 0.15, 0.2}}};
  p.synth.few_shot_days = 1.0;
  p.encoder.width = 8;
  p.encoder.encoder_layers = 1;
  p.encoder.heads = 2;
  p.encoder.ff_multiplier = 2;
  p.encoder.patch_count = 4;
  p.forecaster.patch_count = 4;
  p.forecaster.query_width = 8;
  p.forecaster.heads = 2;
  p.forecaster.ff_multiplier = 2;
  p.pretrain.epochs = 1;
  p.pretrain.batch_size = 16;
  p.bank.sample_ratio = 0.5;
  p.bank.k_grid = {3, 4};
  p.bank.kmeans.n_init = 2;
  p.meta.meta_epochs = 2;
  p.meta.batch_size = 4;
  p.finetune.epochs = 2;
  p.source_stride = 12;
  p.few_shot_stride = 12;
  p.test_stride = 12;
  p.variants = {fc::Variant::full, fc::Variant::no_meta, fc::Variant::no_adj, fc::Variant::no_clu};
  p.seeds = {0, 1};
  return p;
}

}  // namespace

TEST_CASE("per-step metrics in original units") {
  data::Scaler sc{10.0, 2.0};
  // Two rows, horizon 2, one channel. Step 1 errors (normalized) 1 and -1, step 2 errors 0 and 2.
  Matrix target(2, 2);
  target << 0.0, 0.0, 1.0, 1.0;
  Matrix pred(2, 2);
  pred << 1.0, 0.0, 0.0, 3.0;
  const auto m = horizon_metrics(pred, target, sc, 2, 1);
  REQUIRE(m.size() == 2);
  CHECK(m[0].rmse == doctest::Approx(2.0));
  CHECK(m[0].mae == doctest::Approx(2.0));
  CHECK(m[1].rmse == doctest::Approx(std::sqrt(8.0)));
  CHECK(m[1].mae == doctest::Approx(2.0));
  // y = 10 and 12 at step 1: |2|/10 and |2|/12.
  CHECK(m[0].mape == doctest::Approx(100.0 * (0.2 + 2.0 / 12.0) / 2.0));
  const auto all = overall_metrics(pred, target, sc);
  CHECK(all.rmse == doctest::Approx(std::sqrt((4.0 + 4.0 + 0.0 + 16.0) / 4.0)));
  CHECK_THROWS_AS(horizon_metrics(pred, target, sc, 3, 1), ShapeError);
  CHECK_THROWS_AS(horizon_metrics(pred, Matrix::Zero(3, 2), sc, 2, 1), ShapeError);
}

TEST_CASE("summaries across seeds, text and json forms") {
  MetricReport r;
  r.variant = "full";
  r.seeds = {0, 1, 2};
  for (double v : {1.0, 2.0, 4.0}) {
    r.per_seed.push_back({{v, v / 2, v * 10}, {v + 1, v, v}});
    r.overall.push_back({v, v, v});
  }
  summarize(r);
  CHECK(r.horizon() == 2);
  CHECK(r.mean[0].rmse == doctest::Approx(7.0 / 3.0));
  CHECK(r.stddev[0].rmse == doctest::Approx(std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                                        (4 - 7.0 / 3) * (4 - 7.0 / 3)) /
                                                       3.0)));
  CHECK(r.median_rmse == 2.0);
  r.overall.push_back({10.0, 0, 0});
  r.per_seed.push_back(r.per_seed.back());
  r.seeds.push_back(3);
  summarize(r);
  CHECK(r.median_rmse == 3.0);

  const MetricReport back = report_from_json(to_json(r));
  CHECK(to_json(back).dump() == to_json(r).dump());
  const std::string text = format_reports({r}, {1, 2});
  CHECK(text.find("full") != std::string::npos);
  CHECK_THROWS_AS(format_reports({r}, {1, 3}), ConfigError);
  const std::string csv = reports_csv({r});
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 3);
  CHECK_THROWS_AS(report_from_json(nlohmann::json{{"variant", "x"}}), CorruptFileError);
}

TEST_CASE("plan json round trip and validation") {
  const ExperimentPlan p = tiny_plan();
  const auto j = to_json(p);
  CHECK(to_json(plan_from_json(j)).dump() == j.dump());

  auto bad = j;
  bad["meta"]["alpah"] = 0.1;
  CHECK_THROWS_AS(plan_from_json(bad), ConfigError);
  bad = j;
  bad["variants"] = {"full", "bogus"};
  CHECK_THROWS_AS(plan_from_json(bad), ConfigError);
  bad = j;
  bad["stages"] = {"train"};
  CHECK_THROWS_AS(plan_from_json(bad), ConfigError);
  bad = j;
  bad["meta"]["alpha"] = "fast";
  CHECK_THROWS_AS(plan_from_json(bad), ConfigError);

  ExperimentPlan q = p;
  q.seeds = {1, 1};
  CHECK_THROWS_AS(q.validate(), ConfigError);
  q = p;
  q.meta.update_step = 0;
  CHECK_THROWS_AS(q.validate(), ConfigError);
  q = p;
  q.stages = {Stage::pretrain};
  q.k_sweep = true;
  CHECK_THROWS_AS(q.validate(), ConfigError);
}

TEST_CASE("missing artifacts are reported before any training starts") {
  ExperimentPlan p = tiny_plan();
  p.stages = {Stage::meta_train, Stage::fine_tune, Stage::evaluate};
  p.encoder_path = "/nonexistent/encoder.tpb";
  CHECK_THROWS_AS(check_dependencies(p), DependencyError);
  const auto dir = fresh_dir("missing");
  CHECK_THROWS_AS(run_experiment(p, dir), DependencyError);
  CHECK(fs::is_empty(dir));
  p.variants = {fc::Variant::no_meta};
  const auto enc = dir / "enc.bin";
  std::ofstream(enc) << "x";
  p.encoder_path = enc;
  CHECK_NOTHROW(check_dependencies(p));
  p.variants = {fc::Variant::no_clu};
  p.random_bank_path = dir / "none.tpb";
  CHECK_THROWS_AS(check_dependencies(p), DependencyError);
}

TEST_CASE("test windows continue from the few-shot span") {
  const ExperimentPlan p = tiny_plan();
  const auto set = load_or_generate(p);
  const auto cfg = forecaster_config(p, fc::Variant::full, 0, 8, 6);
  const auto few = few_shot_samples(set, data::Scaler{}, cfg, 1);
  const auto test = test_samples(set, data::Scaler{}, cfg, 1);
  const int span = set.target.cities[0].step_count;
  CHECK(few.back().target_step + cfg.horizon == span);
  CHECK(test.front().target_step == span);
  CHECK(static_cast<int>(test.size()) == set.test.cities[0].step_count - cfg.horizon + 1);
  // The first test window's history is the tail of the few-shot span.
  const int hist = cfg.patch_length * cfg.patch_count;
  const auto& last_few = few.back();
  CHECK(test.front().history.leftCols(hist - cfg.horizon) == last_few.history.rightCols(hist - cfg.horizon));
}

TEST_CASE("end-to-end run: four variants, artifacts, determinism and staged equivalence") {
  const ExperimentPlan plan = tiny_plan();
  const auto dir_a = fresh_dir("run_a");
  const auto dir_b = fresh_dir("run_b");
  const ExperimentResult a = run_experiment(plan, dir_a);
  REQUIRE(a.reports.size() == 4);
  for (const auto& r : a.reports) {
    CHECK(r.horizon() == plan.forecaster.horizon);
    CHECK(r.per_seed.size() == 2);
    CHECK(r.median_rmse > 0.0);
    for (const auto& t : r.mean) CHECK((t.rmse >= t.mae && t.mae >= 0.0));
  }
  for (const char* f : {"encoder.tpb", "bank.tpb", "bank_random.tpb", "report.json", "report.txt", "metrics.csv",
                        "models/full_s0.tpb", "models/no_clu_s1.tpb"}) {
    CHECK(fs::exists(dir_a / f));
  }
  CHECK(bank::load_bank(dir_a / "bank_random.tpb").provenance().method == "random");

  run_experiment(plan, dir_b);
  CHECK((slurp(dir_a / "report.json") == slurp(dir_b / "report.json")));
  CHECK((slurp(dir_a / "models/full_s1.tpb") == slurp(dir_b / "models/full_s1.tpb")));

  // The artifact directory can move as a whole.
  const auto moved = fs::temp_directory_path() / "tpb_test_experiment" / "run_moved";
  fs::remove_all(moved);
  fs::rename(dir_b, moved);
  CHECK_NOTHROW(fc::ForecastModel::load(moved / "models/no_adj_s0.tpb"));

  // Upstream artifacts from the first run, forecasting stages only.
  ExperimentPlan staged = plan;
  staged.stages = {Stage::meta_train, Stage::fine_tune, Stage::evaluate};
  staged.encoder_path = dir_a / "encoder.tpb";
  staged.bank_path = dir_a / "bank.tpb";
  staged.random_bank_path = dir_a / "bank_random.tpb";
  const auto dir_c = fresh_dir("run_c");
  const ExperimentResult c = run_experiment(staged, dir_c);
  REQUIRE(c.reports.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    auto ja = to_json(a.reports[i]);
    auto jc = to_json(c.reports[i]);
    ja.erase("metadata");
    jc.erase("metadata");
    CHECK(ja == jc);
  }

  // A trained model refuses a bank whose content changed.
  const auto model_path = dir_a / "models/full_s0.tpb";
  CHECK_NOTHROW(fc::ForecastModel::load(model_path));
  CHECK_THROWS_AS(fc::ForecastModel::load(model_path, dir_a / "bank_random.tpb"), DependencyError);
}

TEST_CASE("K sweep reports one row per K") {
  ExperimentPlan plan = tiny_plan();
  plan.variants = {fc::Variant::full};
  plan.seeds = {0};
  plan.k_sweep = true;
  const auto dir = fresh_dir("sweep");
  const ExperimentResult r = run_experiment(plan, dir);
  REQUIRE(r.k_sweep.size() == 2);
  CHECK(r.k_sweep[0].k == 3);
  CHECK(r.k_sweep[1].k == 4);
  for (const auto& row : r.k_sweep) {
    CHECK(row.rmse > 0.0);
    CHECK(row.silhouette >= -1.0);
    CHECK(row.silhouette <= 1.0);
  }
  CHECK(fs::exists(dir / "ksweep.csv"));
  CHECK(fs::exists(dir / "sweep/bank_k4.tpb"));
}

TEST_CASE("exported embeddings round-trip and carry bank labels") {
  const ExperimentPlan plan = tiny_plan();
  const auto set = load_or_generate(plan);
  mae::PatchAutoencoder enc(plan.encoder);
  enc.set_scaler(data::fit_scaler(set.source));
  const BankBuild b = build_banks(enc, set.source, plan.bank);
  const auto dir = fresh_dir("embed");
  export_embeddings(enc, set.source, dir / "emb.tpb", &b.best);
  const EmbeddingDump d = load_embeddings(dir / "emb.tpb");
  const auto emb = bank::embed_corpus(enc, set.source);
  CHECK(d.values.rows() == emb.values.rows());
  CHECK(d.values.rows() ==
        static_cast<Eigen::Index>(data::enumerate_node_windows(set.source, 12, 4).size() * 4));
  CHECK(d.values == emb.values);
  CHECK(d.labels == bank::nearest_centroid(bank::normalize_rows(emb.values), b.best.matrix()));

  // Labels of the clustered sample agree with the k-means assignment.
  std::size_t best = 0;
  for (std::size_t i = 0; i < b.selection.grid.size(); ++i) {
    if (b.selection.grid[i] == b.selection.best_k) best = i;
  }
  CHECK(bank::nearest_centroid(bank::normalize_rows(b.sample), b.best.matrix()) ==
        b.selection.results[best].assignment.labels);

  export_embeddings(enc, set.source, dir / "plain.tpb");
  for (int l : load_embeddings(dir / "plain.tpb").labels) CHECK(l == -1);
  {
    std::fstream f(dir / "emb.tpb", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_embeddings(dir / "emb.tpb"), CorruptFileError);
}
