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
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpb/data_synth.hpp"
#include "tpb/forecaster.hpp"
#include "tpb/meta_trainer.hpp"
#include "tpb/metrics.hpp"
#include "tpb/patch_autoencoder.hpp"
#include "tpb/pattern_bank.hpp"

namespace tpb::exp {

using Log = std::function<void(const std::string&)>;

// Metrics at each forecast step in original units. Entry h is step h + 1.
std::vector<metrics::Triple> horizon_metrics(const Matrix& prediction, const Matrix& target,
                                             const data::Scaler& scaler, int horizon, int channels);
// All steps pooled.
metrics::Triple overall_metrics(const Matrix& prediction, const Matrix& target, const data::Scaler& scaler);

struct MetricReport {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<metrics::Triple>> per_seed;  // [seed][step]
  std::vector<metrics::Triple> overall;                // [seed]
  std::vector<metrics::Triple> mean;                   // [step], across seeds
  std::vector<metrics::Triple> stddev;                 // [step], population std across seeds
  metrics::Triple overall_mean;
  metrics::Triple overall_stddev;
  double median_rmse = 0.0;
  nlohmann::json metadata = nlohmann::json::object();

  int horizon() const { return static_cast<int>(mean.size()); }
};

// Fills the across-seed statistics from per_seed and overall.
void summarize(MetricReport& report);

nlohmann::json to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);

// Fixed-width text table at the given forecast steps.
std::string format_reports(const std::vector<MetricReport>& reports, const std::vector<int>& steps = {1, 3, 6});
// One row per (variant, seed, step).
std::string reports_csv(const std::vector<MetricReport>& reports);

enum class Stage { pretrain, build_bank, meta_train, fine_tune, evaluate };
Stage parse_stage(const std::string& name);
std::string to_string(Stage s);

struct BankConfig {
  double sample_ratio = 0.1;
  // K candidates for silhouette selection; a single entry fixes K.
  std::vector<int> k_grid = {2, 3, 4, 5, 6, 7, 8, 9, 10};
  bank::KMeansConfig kmeans;
  std::uint64_t seed = 0;
};

struct ExperimentPlan {
  std::set<Stage> stages = {Stage::pretrain, Stage::build_bank, Stage::meta_train, Stage::fine_tune,
                            Stage::evaluate};
  std::vector<fc::Variant> variants = {fc::Variant::full};
  std::vector<std::uint64_t> seeds = {0};
  // Train and evaluate the full variant once per K in bank.k_grid.
  bool k_sweep = false;

  data::SynthSpec synth = data::default_synth_spec();
  mae::AutoencoderConfig encoder;
  mae::PretrainConfig pretrain;
  BankConfig bank;
  fc::ForecasterConfig forecaster;
  meta::MetaConfig meta;
  meta::FinetuneConfig finetune;
  int source_stride = 6;
  int few_shot_stride = 1;
  int test_stride = 1;
  bool deterministic = true;

  // Corpus directory; generated from `synth` when empty.
  std::filesystem::path data_dir;
  // Existing artifacts consumed when their producing stage is not run.
  std::filesystem::path encoder_path;
  std::filesystem::path bank_path;
  std::filesystem::path random_bank_path;

  // Applies one base seed to every component.
  void set_seed(std::uint64_t seed);
  void validate() const;
};

ExperimentPlan plan_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentPlan& plan);
ExperimentPlan load_plan(const std::filesystem::path& path);

// Raises DependencyError when a stage needs an artifact that is neither
// produced by an earlier stage nor present on disk.
void check_dependencies(const ExperimentPlan& plan);

struct KSweepRow {
  int k = 0;
  double silhouette = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
};

struct ExperimentResult {
  std::vector<MetricReport> reports;
  std::vector<KSweepRow> k_sweep;
  // Artifact path relative to the output directory -> content hash.
  std::map<std::string, std::string> artifacts;
  nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json to_json(const ExperimentResult& r);

// Runs the plan and writes encoder.tpb, bank.tpb, bank_random.tpb,
// models/<variant>_s<seed>.tpb, report.json, report.txt, metrics.csv and
// ksweep.csv under `out_dir`. Everything in report.json is a function of the
// plan and inputs; timings go to the log only.
ExperimentResult run_experiment(const ExperimentPlan& plan, const std::filesystem::path& out_dir,
                                const Log& log = {});

// Loads the corpus named by the plan or generates it.
data::CorpusSet load_or_generate(const ExperimentPlan& plan);
// Hash of every series in a corpus set.
std::string corpus_hash(const data::CorpusSet& set);

// Few-shot span samples and test samples whose history may reach back into
// the few-shot span.
std::vector<fc::ForecastSample> few_shot_samples(const data::CorpusSet& set, const data::Scaler& scaler,
                                                 const fc::ForecasterConfig& cfg, int stride);
std::vector<fc::ForecastSample> test_samples(const data::CorpusSet& set, const data::Scaler& scaler,
                                             const fc::ForecasterConfig& cfg, int stride);

// Builds K-means banks over the K grid and the random bank at the selected K.
struct BankBuild {
  bank::KSelection selection;
  bank::PatternBank best;
  bank::PatternBank random;
  Matrix sample;  // the subsampled embeddings
};
BankBuild build_banks(const mae::PatchAutoencoder& encoder, const data::CityCorpus& source, const BankConfig& cfg);

// Forecaster config with the bank width and graph size filled in.
fc::ForecasterConfig forecaster_config(const ExperimentPlan& plan, fc::Variant variant, std::uint64_t seed,
                                       int width, int target_nodes);

struct EmbeddingDump {
  Matrix values;
  std::vector<int> labels;
};

// Writes every patch embedding of the corpus with its nearest-pattern label
// under `bank` (all -1 when no bank is given).
void export_embeddings(const mae::PatchAutoencoder& encoder, const data::CityCorpus& corpus,
                       const std::filesystem::path& path, const bank::PatternBank* bank = nullptr);
EmbeddingDump load_embeddings(const std::filesystem::path& path);

}  // namespace tpb::exp
