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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Pass criterion numbers as arguments
// to run a subset.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "tpb/experiment.hpp"

using namespace tpb;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

bool bitwise_equal(const Matrix& x, const Matrix& y) {
  return x.rows() == y.rows() && x.cols() == y.cols() &&
         std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tpb_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double cosine(const RowVector& a, const RowVector& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Plain O(n^2) silhouette with cosine distance; singletons score 0.
std::vector<double> silhouette_oracle(const Matrix& x, const std::vector<int>& labels) {
  const int n = static_cast<int>(x.rows());
  const std::set<int> clusters(labels.begin(), labels.end());
  std::vector<double> s(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> sum(clusters.size(), 0.0);
    std::vector<int> count(clusters.size(), 0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto c = static_cast<std::size_t>(std::distance(clusters.begin(), clusters.find(labels[j])));
      sum[c] += 1.0 - cosine(x.row(i), x.row(j));
      ++count[c];
    }
    const auto own = static_cast<std::size_t>(std::distance(clusters.begin(), clusters.find(labels[i])));
    if (count[own] == 0) continue;
    const double a = sum[own] / count[own];
    double b = 1e300;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      if (c != own) b = std::min(b, sum[c] / count[c]);
    }
    s[static_cast<std::size_t>(i)] = (b - a) / std::max(a, b);
  }
  return s;
}

// Lowest cosine inertia over every two-way partition.
double best_two_partition(const Matrix& x) {
  const int n = static_cast<int>(x.rows());
  double best = 1e300;
  for (int code = 1; code < (1 << (n - 1)); ++code) {
    double inertia = 0.0;
    for (int side = 0; side < 2; ++side) {
      RowVector sum = RowVector::Zero(x.cols());
      for (int i = 0; i < n - 1; ++i) {
        if (((code >> i) & 1) == side) sum += x.row(i) / x.row(i).norm();
      }
      if (side == 0) sum += x.row(n - 1) / x.row(n - 1).norm();
      for (int i = 0; i < n; ++i) {
        const int bit = i == n - 1 ? 0 : (code >> i) & 1;
        if (bit == side) inertia += 1.0 - cosine(x.row(i), sum);
      }
    }
    best = std::min(best, inertia);
  }
  return best;
}

fc::ForecasterConfig tiny_forecaster(fc::Variant v) {
  fc::ForecasterConfig c;
  c.width = 8;
  c.query_width = 8;
  c.patch_length = 3;
  c.patch_count = 3;
  c.horizon = 2;
  c.heads = 2;
  c.variant = v;
  c.graph_nodes = 5;
  c.seed = 1;
  return c;
}

fc::ForecastSample random_sample(const fc::ForecasterConfig& c, Rng& rng, int first_hour) {
  const int n = c.graph_nodes;
  fc::ForecastSample s;
  s.history = nn::normal_matrix(n, c.patch_count * c.patch_width(), 1.0, rng);
  s.target = nn::normal_matrix(n, c.horizon * c.channels, 1.0, rng);
  for (int j = 0; j < c.patch_count; ++j) s.hour_of_week.push_back((first_hour + j) % data::kHoursPerWeek);
  Matrix prior = nn::uniform_matrix(n, n, 0.1, 1.0, rng);
  for (int i = 0; i < n; ++i) prior.row(i) /= prior.row(i).sum();
  s.prior_graph = std::make_shared<const Matrix>(prior);
  return s;
}

std::shared_ptr<const bank::PatternBank> random_unit_bank(int k, int d, Rng& rng, const std::string& method) {
  bank::Provenance p;
  p.method = method;
  return std::make_shared<const bank::PatternBank>(bank::normalize_rows(nn::normal_matrix(k, d, 1.0, rng)), true, p);
}

// 1. Gradient integrity.
Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  auto track = [&](const std::vector<testing::GroupError>& errs, const std::string& tag) {
    for (const auto& e : errs) {
      if (e.relative > worst) {
        worst = e.relative;
        worst_name = tag + ":" + e.name;
      }
    }
  };

  mae::AutoencoderConfig ac;
  ac.width = 8;
  ac.encoder_layers = 1;
  ac.decoder_layers = 1;
  ac.heads = 4;
  ac.patch_length = 3;
  ac.patch_count = 4;
  ac.seed = 5;
  mae::PatchAutoencoder enc(ac);
  Rng rng = make_rng(10);
  std::vector<data::PatchWindow> windows(2);
  for (int w = 0; w < 2; ++w) {
    windows[w].patches = nn::normal_matrix(4, 3, 1.0, rng);
    for (int j = 0; j < 4; ++j) windows[w].hour_of_week.push_back((5 + 95 * w + j) % data::kHoursPerWeek);
  }
  windows[0].mask = {true, false, false, true};
  windows[1].mask = {false, true, false, false};
  enc.params()[enc.encoder().positional].value = nn::normal_matrix(168, 8, 0.5, rng);
  enc.params()[enc.decoder().mask_token].value = nn::normal_matrix(1, 8, 0.5, rng);
  Matrix target(8, 3);
  target << windows[0].patches, windows[1].patches;
  std::vector<bool> mask(windows[0].mask);
  mask.insert(mask.end(), windows[1].mask.begin(), windows[1].mask.end());
  track(testing::gradient_errors(enc.params(),
                                 [&](ad::Graph& g, ad::ParameterStore&) {
                                   return mae::pretrain_loss(enc.decode(g, enc.encode(g, windows, nullptr), windows),
                                                             target, mask);
                                 }),
        "autoencoder");

  auto clustered = random_unit_bank(4, 8, rng, "kmeans");
  auto random = random_unit_bank(4, 8, rng, "random");
  for (fc::Variant v : {fc::Variant::full, fc::Variant::no_meta, fc::Variant::no_adj, fc::Variant::no_clu}) {
    const auto cfg = tiny_forecaster(v);
    const std::vector<fc::ForecastSample> batch{random_sample(cfg, rng, 7), random_sample(cfg, rng, 50)};
    const Matrix y = fc::stacked_targets(batch);
    fc::ForecastModel model(cfg, v == fc::Variant::no_meta ? nullptr : v == fc::Variant::no_clu ? random : clustered);
    for (auto& p : model.params()) {
      if (p.name.find("bias") != std::string::npos || p.name.find("positional") != std::string::npos ||
          p.name == "graph.logits") {
        p.value = nn::normal_matrix(p.value.rows(), p.value.cols(), 0.3, rng);
      }
    }
    track(testing::gradient_errors(model.params(),
                                   [&](ad::Graph& g, ad::ParameterStore& s) {
                                     return fc::forecast_loss(model.forward(g, s, batch), y);
                                   }),
          fc::to_string(v));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 120.0,
          "max relative error " + num(worst) + " (" + worst_name + "), " + num(secs, 3) + " s"};
}

// Shared by criteria 2 and 3.
struct Pretrained {
  bool ready = false;
  data::CorpusSet corpus;
  std::optional<mae::PretrainResult> result;
  double seconds = 0.0;
};

Pretrained& pretrained() {
  static Pretrained p;
  if (!p.ready) {
    p.corpus = data::generate_corpus(data::default_synth_spec());
    mae::AutoencoderConfig ac;
    ac.width = 128;
    mae::PretrainConfig pc;
    pc.epochs = 30;
    const auto t0 = Clock::now();
    p.result.emplace(mae::pretrain(p.corpus.source, ac, pc));
    p.seconds = seconds_since(t0);
    p.ready = true;
  }
  return p;
}

// 2. Pre-training efficacy.
Outcome pretraining_efficacy() {
  const Pretrained& p = pretrained();
  const auto& h = p.result->history;
  const double untrained = h.val_mse.front();
  const double trained = h.val_mse[static_cast<std::size_t>(h.best_epoch)];
  const double ratio = trained / untrained;
  return {ratio <= 0.30 && p.seconds < 600.0, "validation masked MSE " + num(untrained) + " -> " + num(trained) +
                                                  " (ratio " + num(ratio, 3) + "), " + num(p.seconds, 4) + " s"};
}

// 3. Pattern recovery.
Outcome pattern_recovery() {
  const Pretrained& p = pretrained();
  const bank::CorpusEmbedding emb = bank::embed_corpus(p.result->model, p.corpus.source);
  int hits = 0;
  std::string ks;
  double worst_sil = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng(seed);
    const Matrix x = bank::subsample(emb.values, 0.1, rng);
    const bank::KSelection sel = bank::select_k(x, {2, 3, 4, 5, 6, 7, 8, 9, 10}, {}, rng);
    hits += sel.best_k == 5 ? 1 : 0;
    ks += (ks.empty() ? "" : ",") + std::to_string(sel.best_k);
    if (seed == 0) {
      const auto at = std::find(sel.grid.begin(), sel.grid.end(), sel.best_k) - sel.grid.begin();
      const auto& labels = sel.results[static_cast<std::size_t>(at)].assignment.labels;
      const auto got = bank::silhouette_samples(x, labels);
      const auto want = silhouette_oracle(x, labels);
      for (std::size_t i = 0; i < got.size(); ++i) worst_sil = std::max(worst_sil, std::abs(got[i] - want[i]));
    }
  }
  return {hits >= 4 && worst_sil <= 1e-12,
          "K* per seed {" + ks + "}, " + std::to_string(hits) + "/5 at K=5, silhouette deviation " + num(worst_sil)};
}

// 4. Clustering optimality.
Outcome clustering_optimality() {
  Rng rng = make_rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix x = bank::normalize_rows(nn::normal_matrix(8, 4, 1.0, rng));
    const double optimum = best_two_partition(x);
    const double got = bank::kmeans_cosine(x, 2, {}, rng).assignment.inertia;
    worst = std::max(worst, optimum > 0.0 ? got / optimum : (got > 1e-12 ? 1e300 : 1.0));
  }
  return {worst <= 1.05, "worst inertia / exhaustive optimum " + num(worst, 6) + " over 100 trials"};
}

// 5. Graph contract.
Outcome graph_contract() {
  Rng rng = make_rng(5);
  auto cfg = tiny_forecaster(fc::Variant::full);
  cfg.graph_nodes = 6;
  fc::ForecastModel model(cfg, random_unit_bank(4, 8, rng, "kmeans"));
  double row_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix a = model.reconstruct_graph(nn::normal_matrix(6, 8, 1.0 + trial % 5, rng));
    row_err = std::max(row_err, (a.rowwise().sum().array() - 1.0).abs().maxCoeff());
  }
  const Matrix same = Matrix::Ones(6, 1) * nn::normal_matrix(1, 8, 1.0, rng);
  const bool uniform = (model.reconstruct_graph(same).array() == 1.0 / 6.0).all();

  // The key bias adds Q_i . v to every score in row i, a per-row constant.
  const Matrix m = nn::normal_matrix(6, 8, 1.0, rng);
  const Matrix before = model.reconstruct_graph(m);
  model.params()[model.graph().key.bias].value += nn::normal_matrix(1, 8, 3.0, rng);
  const double shift = (model.reconstruct_graph(m) - before).cwiseAbs().maxCoeff();
  return {row_err <= 1e-6 && uniform && shift <= 1e-9, "max row-sum error " + num(row_err) + ", identical rows " +
                                                           (uniform ? "exactly uniform" : "not uniform") +
                                                           ", shift deviation " + num(shift)};
}

// 6. Reptile contract.
Outcome reptile_contract() {
  Rng rng = make_rng(6);
  ad::ParameterStore theta;
  theta.add("w", nn::normal_matrix(3, 3, 1.0, rng));
  theta.add("v", nn::normal_matrix(1, 4, 1.0, rng));
  const ad::ParameterStore before = theta;
  meta::reptile_step(
      theta, 2,
      [](ad::ParameterStore& s, std::size_t, bool query) {
        if (!query) {
          s[0].grad.setConstant(1.0);
          s[1].grad.setConstant(-2.0);
        }
        return 1.0;
      },
      5e-4, 5e-4, 3);
  bool unchanged = true;
  for (std::size_t j = 0; j < theta.size(); ++j) unchanged = unchanged && bitwise_equal(theta[j].value, before[j].value);

  // Support loss 0.5|w - a_t|^2, query loss 0.5|w - b_t|^2.
  ad::ParameterStore q;
  q.add("w", nn::normal_matrix(1, 3, 1.0, rng));
  std::vector<Matrix> a;
  std::vector<Matrix> b;
  for (int t = 0; t < 3; ++t) {
    a.push_back(nn::normal_matrix(1, 3, 1.0, rng));
    b.push_back(nn::normal_matrix(1, 3, 1.0, rng));
  }
  const double alpha = 0.3;
  const double beta = 0.2;
  const int steps = 4;
  const Matrix start = q[0].value;
  const auto trace = meta::reptile_step(
      q, 3,
      [&](ad::ParameterStore& s, std::size_t t, bool query) {
        const Matrix r = s[0].value - (query ? b[t] : a[t]);
        s[0].grad += r;
        return 0.5 * r.squaredNorm();
      },
      alpha, beta, steps);
  double dev = 0.0;
  Matrix total = Matrix::Zero(1, 3);
  for (int t = 0; t < 3; ++t) {
    Matrix w = start;
    for (int i = 0; i < steps; ++i) {
      w = w - alpha * (w - a[t]);
      const Matrix g = w - b[t];
      dev = std::max(dev, (trace.stored[t][i][0] - g).cwiseAbs().maxCoeff());
      total += g;
    }
  }
  dev = std::max(dev, (q[0].value - (start - beta / steps * total)).cwiseAbs().maxCoeff());
  return {unchanged && dev <= 1e-10, std::string("zero query gradients ") +
                                         (unchanged ? "leave theta bitwise unchanged" : "moved theta") +
                                         ", quadratic trajectory deviation " + num(dev)};
}

// Benchmark plan for criteria 7 and 8.
exp::ExperimentPlan benchmark_plan() {
  exp::ExperimentPlan p;
  p.encoder.width = 32;
  p.forecaster.query_width = 32;
  p.pretrain.epochs = 5;
  p.meta.meta_epochs = 20;
  p.finetune.epochs = 30;
  p.variants = {fc::Variant::full, fc::Variant::no_meta, fc::Variant::no_adj, fc::Variant::no_clu};
  p.seeds = {0, 1, 2, 3, 4};
  p.deterministic = true;
  return p;
}

fs::path benchmark_dir() { return fs::temp_directory_path() / "tpb_acceptance" / "benchmark"; }

// 7. Ablation direction.
Outcome ablation_direction() {
  const fs::path out = work_dir("benchmark");
  const auto t0 = Clock::now();
  const exp::ExperimentResult r = exp::run_experiment(benchmark_plan(), out);
  const double secs = seconds_since(t0);
  std::map<std::string, double> median;
  for (const auto& rep : r.reports) median[rep.variant] = rep.median_rmse;
  const double full = median.at("full");
  const double no_meta = median.at("no_meta");
  const double no_clu = median.at("no_clu");
  const double gap = 1.0 - full / no_meta;
  std::string detail = "median test RMSE";
  for (const auto& [name, v] : median) detail += " " + name + " " + num(v);
  detail += "; full below no_meta by " + num(100.0 * gap, 3) + "%, " + num(secs, 4) + " s";
  return {full < no_clu && full < no_meta && gap >= 0.03 && secs < 1800.0, detail};
}

// 8. Freeze contract.
Outcome freeze_contract() {
  exp::ExperimentPlan plan = benchmark_plan();
  const data::CorpusSet corpus = data::generate_corpus(plan.synth);
  const fs::path bank_file = benchmark_dir() / "bank.tpb";
  Rng rng = make_rng(8);
  auto b = fs::exists(bank_file) ? std::make_shared<const bank::PatternBank>(bank::load_bank(bank_file))
                                 : random_unit_bank(5, 32, rng, "kmeans");
  const Matrix snapshot = b->matrix();
  const data::Scaler scaler = data::fit_scaler(corpus.source);
  const auto cfg = exp::forecaster_config(plan, fc::Variant::full, 0, 32, corpus.target.cities.front().node_count);
  fc::ForecastModel model(cfg, b);
  model.set_scaler(scaler);
  meta::MetaConfig mc = plan.meta;
  mc.meta_epochs = 3;
  meta::reptile_meta_train(model, meta::make_source_pool(corpus.source, scaler, cfg, 12), mc);
  meta::FinetuneConfig fcfg = plan.finetune;
  fcfg.epochs = 3;
  fcfg.frozen.clear();
  meta::fine_tune(model, exp::few_shot_samples(corpus, scaler, cfg, 6), fcfg);
  const bool same = bitwise_equal(snapshot, b->matrix()) && model.bank().get() == b.get();

  // Benchmark checkpoints were saved after fine-tuning; each must still carry
  // the bank file it was built on. no_clu uses the random bank.
  int checked = 0;
  int mismatched = 0;
  const fs::path models = benchmark_dir() / "models";
  if (fs::exists(models)) {
    const Matrix clustered = bank::load_bank(bank_file).matrix();
    const Matrix random = bank::load_bank(benchmark_dir() / "bank_random.tpb").matrix();
    for (const auto& entry : fs::directory_iterator(models)) {
      const auto m = fc::ForecastModel::load(entry.path());
      ++checked;
      if (!m.bank()) continue;
      const Matrix& want = m.config().variant == fc::Variant::no_clu ? random : clustered;
      mismatched += bitwise_equal(m.bank()->matrix(), want) ? 0 : 1;
    }
  }
  return {same && mismatched == 0,
          std::string(same ? "bank bitwise unchanged" : "bank changed") + " after meta-training and fine-tuning; " +
              std::to_string(checked) + " benchmark checkpoints reloaded, " + std::to_string(mismatched) +
              " with a bank differing from its file"};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + TPB_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

// 9. Reproducibility.
Outcome reproducibility() {
  const fs::path dir = work_dir("reproducibility");
  exp::ExperimentPlan p;
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
  p.k_sweep = true;
  const fs::path plan_file = dir / "plan.json";
  std::ofstream(plan_file) << exp::to_json(p).dump(2);

  std::vector<std::string> mismatched;
  int failures = 0;
  auto compare = [&](const fs::path& a, const fs::path& b) {
    if (!fs::exists(a) || slurp(a) != slurp(b)) mismatched.push_back(a.filename().string());
  };

  // Whole plan through `tpb run`, twice.
  for (const char* run : {"run_a", "run_b"}) {
    failures += run_cli("run --config \"" + plan_file.string() + "\" --deterministic --out \"" +
                            (dir / run).string() + "\"",
                        dir / (std::string(run) + ".log")) != 0;
  }
  for (const char* f : {"report.json", "report.txt", "metrics.csv", "ksweep.csv"}) compare(dir / "run_a" / f, dir / "run_b" / f);

  // Stage by stage, twice.
  for (const char* run : {"stage_a", "stage_b"}) {
    const fs::path d = dir / run;
    fs::create_directories(d);
    const std::string cfg = " --config \"" + plan_file.string() + "\" --deterministic";
    const std::string data = " --data \"" + (d / "data").string() + "\"";
    const std::vector<std::string> steps{
        "generate-data" + cfg + " --out \"" + (d / "data").string() + "\"",
        "pretrain" + cfg + data + " --out \"" + (d / "encoder.tpb").string() + "\"",
        "build-bank" + cfg + data + " --encoder \"" + (d / "encoder.tpb").string() + "\" --out \"" +
            (d / "bank.tpb").string() + "\"",
        "meta-train" + cfg + data + " --encoder \"" + (d / "encoder.tpb").string() + "\" --bank \"" +
            (d / "bank.tpb").string() + "\" --out \"" + (d / "model.tpb").string() + "\"",
        "fine-tune" + cfg + " --model \"" + (d / "model.tpb").string() + "\" --target \"" + (d / "data").string() +
            "\"",
        "evaluate" + cfg + data + " --model \"" + (d / "model.tpb").string() + "\" --out \"" +
            (d / "report.json").string() + "\""};
    for (std::size_t i = 0; i < steps.size(); ++i) {
      failures += run_cli(steps[i], d / ("step" + std::to_string(i) + ".log")) != 0;
    }
  }
  for (const char* f : {"encoder.tpb", "bank.tpb", "model.tpb", "report.json"}) {
    compare(dir / "stage_a" / f, dir / "stage_b" / f);
  }

  std::string detail = std::to_string(failures) + " failed CLI invocations; ";
  if (mismatched.empty()) {
    detail += "run and staged pipelines reproduce every report byte for byte";
  } else {
    detail += "differing files:";
    for (const auto& m : mismatched) detail += " " + m;
  }
  return {failures == 0 && mismatched.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient integrity", gradient_integrity},   {"pre-training efficacy", pretraining_efficacy},
      {"pattern recovery", pattern_recovery},       {"clustering optimality", clustering_optimality},
      {"graph contract", graph_contract},           {"reptile contract", reptile_contract},
      {"ablation direction", ablation_direction},   {"freeze contract", freeze_contract},
      {"reproducibility", reproducibility}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && selected.count(id) == 0) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << "; "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
