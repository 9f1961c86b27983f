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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpb/tensor.hpp"

namespace tpb::data {

inline constexpr int kHoursPerWeek = 168;
inline constexpr int kMinutesPerWeek = kHoursPerWeek * 60;

// One city's raw tensor [node_count, step_count, channels], stored as float32
// so that the on-disk series file round-trips exactly.
struct TrafficSeries {
  std::string city_id;
  int node_count = 0;
  int step_count = 0;
  int channels = 1;
  int interval_minutes = 5;
  // Minutes since Monday 00:00, modulo one week.
  int start_timestamp = 0;
  std::vector<float> values;
  // Optional [N x N] road-graph prior (row-normalized) used by the no_adj
  // ablation.
  std::optional<Matrix> prior_graph;

  float at(int node, int step, int channel = 0) const {
    return values[(static_cast<std::size_t>(node) * step_count + step) * channels + channel];
  }
  float& at(int node, int step, int channel = 0) {
    return values[(static_cast<std::size_t>(node) * step_count + step) * channels + channel];
  }
  // Hour-of-week slot (Monday 00:00 -> 0) of the given step.
  int hour_of_week(int step) const;
  void validate() const;
};

// P consecutive patches of one node. Row j of `patches` is patch j flattened
// row-major as [T0 x C].
struct PatchWindow {
  Matrix patches;
  std::vector<bool> mask;  // true = masked
  std::vector<int> hour_of_week;
  int node = 0;
  int start_step = 0;

  int patch_count() const { return static_cast<int>(patches.rows()); }
  int unmasked_count() const;
};

enum class CityRole { source, target, test };

struct CityCorpus {
  CityRole role = CityRole::source;
  std::vector<TrafficSeries> cities;
};

struct CitySpec {
  std::string id;
  int node_count = 20;
  double day_count = 14;
  std::vector<double> mixture;  // length K*, sums to 1
};

struct SynthSpec {
  int planted_pattern_count = 5;
  int patch_length = 12;
  int channels = 1;
  int interval_minutes = 5;
  int start_timestamp = 0;
  double noise_std = 0.1;
  // Shape of the generated signal.
  double baseline_level = 60.0;
  double daily_amplitude = 6.0;
  double motif_amplitude = 8.0;
  // Probability that a node keeps its previous hour's motif.
  double persistence = 0.85;
  // Probability that a switching node follows its community's motif.
  double community_coupling = 0.5;
  int communities = 4;
  // Dirichlet concentration of per-node motif preferences around the city mixture.
  double node_concentration = 2.0;
  std::uint64_t seed = 0;
  std::vector<CitySpec> cities;
  // City whose first `few_shot_days` form the target span; the rest is test.
  std::string target_city = "target";
  double few_shot_days = 2.0;
  // Latent motifs [K* x (T0*C)]; filled by make_pattern_library when empty.
  Matrix pattern_library;

  const CitySpec& city(const std::string& id) const;
  void validate() const;
};

// Source/target/test corpus used throughout the test suite and the default
// experiment: three 14-day source cities and one target city whose first two
// days are the few-shot span and whose remaining days form the test split.
SynthSpec default_synth_spec();
SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json synth_spec_to_json(const SynthSpec& spec);

// Smooth zero-mean motifs (each a sum of at most three sinusoids) scaled to
// unit RMS, with pairwise cosine similarity kept below 0.5.
Matrix make_pattern_library(const SynthSpec& spec);

struct SynthCity {
  TrafficSeries series;
  // Noise- and motif-free component, [N x T_total].
  Matrix baseline;
  // Planted motif id per (node, patch slot), [N x (T_total / T0)].
  std::vector<std::vector<int>> motif_labels;
};

SynthCity generate_synthetic_city_with_labels(const SynthSpec& spec, const std::string& city_id);
TrafficSeries generate_synthetic_city(const SynthSpec& spec, const std::string& city_id);

// Extracts P patches of length T0 for one node starting at `start_step`.
PatchWindow patchify(const TrafficSeries& series, int node, int start_step, int patch_length,
                     int patch_count);
// One window per node.
std::vector<PatchWindow> patchify_all(const TrafficSeries& series, int start_step, int patch_length,
                                      int patch_count);

// Exactly round(ratio * P) entries set, uniformly without replacement.
std::vector<bool> sample_mask(int patch_count, double mask_ratio, Rng& rng);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Random disjoint cover of [0, n). Validation and test sizes are floored, the
// remainder goes to train.
SplitIndices split_indices(std::size_t n, std::array<double, 3> fractions, Rng& rng);

// A pre-training / bank window: one node, P*T0 consecutive steps.
struct NodeWindowRef {
  int city = 0;
  int node = 0;
  int start_step = 0;
};

// Non-overlapping windows of length T0*P over every node of every city, in
// (city, node, time) order.
std::vector<NodeWindowRef> enumerate_node_windows(const CityCorpus& corpus, int patch_length,
                                                  int patch_count);

struct SourceSplit {
  std::vector<NodeWindowRef> train;
  std::vector<NodeWindowRef> val;
  std::vector<NodeWindowRef> test;
};

SourceSplit split_source(const CityCorpus& corpus, int patch_length, int patch_count,
                         std::array<double, 3> fractions, Rng& rng);

// Linear interpolation onto a commensurate sampling interval.
TrafficSeries align_interval(const TrafficSeries& series, int target_interval_minutes);

// Copies steps [begin, begin + count) into a new series with the timestamp
// advanced accordingly.
TrafficSeries slice_steps(const TrafficSeries& series, int begin, int count);

// Appends `tail` to `head`. Both must share layout and interval, and `tail`
// must start where `head` ends.
TrafficSeries concat_steps(const TrafficSeries& head, const TrafficSeries& tail);

// Few-shot target span and test span cut from one generated target city.
struct TargetSplit {
  TrafficSeries few_shot;
  TrafficSeries test;
};
TargetSplit split_target(const TrafficSeries& target, double few_shot_days);

// Global z-score statistics fitted on source data.
struct Scaler {
  double mean = 0.0;
  double stddev = 1.0;

  double forward(double x) const { return (x - mean) / stddev; }
  double inverse(double z) const { return z * stddev + mean; }
};
Scaler fit_scaler(const CityCorpus& corpus);

void save_series(const TrafficSeries& series, const std::filesystem::path& path);
TrafficSeries load_series(const std::filesystem::path& path);

// Corpus directory: manifest.json + one series file per city.
void save_corpus_dir(const std::filesystem::path& dir, const CityCorpus& source,
                     const CityCorpus& target, const CityCorpus& test);
struct CorpusSet {
  CityCorpus source;
  CityCorpus target;
  CityCorpus test;
};
CorpusSet load_corpus_dir(const std::filesystem::path& dir);

// Generates source, few-shot target and test corpora from a SynthSpec.
CorpusSet generate_corpus(const SynthSpec& spec);

}  // namespace tpb::data
