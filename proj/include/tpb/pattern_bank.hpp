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
#include <string>
#include <vector>

#include "tpb/data_synth.hpp"
#include "tpb/patch_autoencoder.hpp"
#include "tpb/tensor.hpp"

namespace tpb::bank {

struct Provenance {
  std::vector<std::string> source_cities;
  double sample_ratio = 1.0;
  std::uint64_t seed = 0;
  double silhouette = 0.0;
  // "kmeans" or "random".
  std::string method = "kmeans";
};

// Frozen K x d matrix of traffic patterns. Rows are rounded to float32 on
// construction so that a save/load round trip is exact.
class PatternBank {
 public:
  PatternBank() = default;
  PatternBank(const Matrix& patterns, bool unit_normalized, Provenance provenance);

  const Matrix& matrix() const { return b_; }
  int k() const { return static_cast<int>(b_.rows()); }
  int width() const { return static_cast<int>(b_.cols()); }
  const std::string& metric() const { return metric_; }
  bool unit_normalized() const { return unit_normalized_; }
  const Provenance& provenance() const { return provenance_; }
  // Hash of the stored rows and header fields.
  std::string content_hash() const;

 private:
  Matrix b_;
  std::string metric_ = "cosine";
  bool unit_normalized_ = true;
  Provenance provenance_;
};

struct ClusterAssignment {
  std::vector<int> labels;
  double inertia = 0.0;
  // Inertia after each assignment step of the winning restart.
  std::vector<double> inertia_history;
  int iterations = 0;
};

struct KMeansConfig {
  int n_init = 10;
  int max_iter = 100;
  double tol = 1e-6;
};

struct ClusterResult {
  PatternBank bank;
  ClusterAssignment assignment;
};

// Encoder outputs for every patch of every non-overlapping source window.
// Row r belongs to windows[r / patch_count], patch r % patch_count.
struct CorpusEmbedding {
  Matrix values;
  std::vector<data::NodeWindowRef> windows;
  int patch_count = 0;
};

CorpusEmbedding embed_corpus(const mae::PatchAutoencoder& model, const data::CityCorpus& corpus,
                             int batch_size = 32);

// Sorted row indices of a uniform sample without replacement of round(ratio * n) rows.
std::vector<int> subsample_indices(int n, double ratio, Rng& rng);
Matrix subsample(const Matrix& embeddings, double ratio, Rng& rng);
Matrix take_rows(const Matrix& m, const std::vector<int>& rows);

Matrix normalize_rows(const Matrix& m);

// Spherical k-means under distance 1 - cos(x, c).
ClusterResult kmeans_cosine(const Matrix& embeddings, int k, const KMeansConfig& cfg, Rng& rng);

// Index of the nearest row of `centroids` (unit rows) for each row of `x`.
std::vector<int> nearest_centroid(const Matrix& x, const Matrix& centroids);

std::vector<double> silhouette_samples(const Matrix& embeddings, const std::vector<int>& labels);
double silhouette(const Matrix& embeddings, const std::vector<int>& labels);

struct KSelection {
  int best_k = 0;
  std::vector<int> grid;
  std::vector<double> scores;
  std::vector<ClusterResult> results;
};

KSelection select_k(const Matrix& embeddings, const std::vector<int>& k_grid,
                    const KMeansConfig& cfg, Rng& rng);

const std::vector<int>& default_k_grid();

// Bank of K randomly chosen (normalized) embeddings; the clustering-free ablation.
PatternBank random_bank(const Matrix& embeddings, int k, Rng& rng, Provenance provenance = {});

void save_bank(const PatternBank& bank, const std::filesystem::path& path);
PatternBank load_bank(const std::filesystem::path& path);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace tpb::bank
