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

#include "tpb/pattern_bank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "tpb/archive.hpp"
#include "tpb/errors.hpp"

namespace tpb::bank {

namespace {

constexpr std::string_view kBankMagic = "TPBBANK1";

io::Archive to_archive(const Matrix& b, const std::string& metric, bool unit, const Provenance& p) {
  io::Archive ar;
  auto& m = ar.meta();
  m["K"] = b.rows();
  m["d"] = b.cols();
  m["metric"] = metric;
  m["unit_normalized"] = unit;
  m["seed"] = p.seed;
  m["silhouette"] = p.silhouette;
  m["sample_ratio"] = p.sample_ratio;
  m["source_cities"] = p.source_cities;
  m["method"] = p.method;
  ar.put("B", b, io::Archive::DType::f32);
  return ar;
}

void check_rows(const Matrix& x, const char* what) {
  if (x.rows() == 0 || x.cols() == 0) throw ShapeError(std::string(what) + ": empty embedding matrix");
  if (!x.allFinite()) throw NumericError(std::string(what) + ": non-finite embedding");
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (x.row(i).norm() == 0.0) {
      throw NumericError(std::string(what) + ": zero-norm embedding row " + std::to_string(i));
    }
  }
}

// Labels of the nearest centroid and the summed distance.
double assign(const Matrix& x, const Matrix& c, std::vector<int>& labels, std::vector<double>& dist) {
  const Matrix sims = x * c.transpose();
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    sims.row(i).maxCoeff(&best);
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    const double d = std::max(0.0, 1.0 - sims(i, best));
    dist[static_cast<std::size_t>(i)] = d;
    inertia += d;
  }
  return inertia;
}

// Moves the point farthest from its centroid (taken from a cluster with more
// than one member) into each empty cluster. Returns true if anything moved.
bool repair_empty(const Matrix& x, Matrix& c, std::vector<int>& labels, std::vector<double>& dist) {
  const int k = static_cast<int>(c.rows());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  bool moved = false;
  for (int j = 0; j < k; ++j) {
    if (counts[static_cast<std::size_t>(j)] > 0) continue;
    int victim = -1;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (counts[static_cast<std::size_t>(labels[i])] < 2) continue;
      if (victim < 0 || dist[i] > dist[static_cast<std::size_t>(victim)]) victim = static_cast<int>(i);
    }
    if (victim < 0) throw ShapeError("kmeans_cosine: cannot repair empty cluster");
    --counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(victim)])];
    labels[static_cast<std::size_t>(victim)] = j;
    dist[static_cast<std::size_t>(victim)] = 0.0;
    counts[static_cast<std::size_t>(j)] = 1;
    c.row(j) = x.row(victim);
    moved = true;
  }
  return moved;
}

// D^2-weighted seeding; used for every restart after the first so that
// restarts explore different basins.
Matrix weighted_seeds(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  Matrix c(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  c.row(0) = x.row(pick(rng));
  Eigen::VectorXd nearest = (1.0 - (x * c.row(0).transpose()).array()).cwiseMax(0.0).matrix();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int j = 1; j < k; ++j) {
    const double total = nearest.sum();
    Eigen::Index chosen = n - 1;
    if (total > 0.0) {
      double target = u(rng) * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= nearest(i);
        if (target < 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    c.row(j) = x.row(chosen);
    nearest = nearest.cwiseMin((1.0 - (x * c.row(j).transpose()).array()).cwiseMax(0.0).matrix());
  }
  return c;
}

Matrix farthest_point_seeds(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  Matrix c(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  c.row(0) = x.row(pick(rng));
  Eigen::VectorXd nearest = (1.0 - (x * c.row(0).transpose()).array()).matrix();
  for (int j = 1; j < k; ++j) {
    Eigen::Index far = 0;
    nearest.maxCoeff(&far);
    c.row(j) = x.row(far);
    nearest = nearest.cwiseMin((1.0 - (x * c.row(j).transpose()).array()).matrix());
  }
  return c;
}

// One first-variation pass: moves single points between clusters whenever
// that raises the summed norm of the cluster sums, which is n minus the
// inertia at optimal centroids. Lloyd iterations stall in local optima that
// such moves escape. Returns true if any point moved.
bool first_variation(const Matrix& x, int k, std::vector<int>& labels) {
  Matrix sums = Matrix::Zero(k, x.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sums.row(labels[i]) += x.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  Eigen::VectorXd norms = sums.rowwise().norm();
  const double min_gain = 1e-12 * std::max(1.0, norms.sum());
  bool moved = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int from = labels[i];
    if (counts[static_cast<std::size_t>(from)] < 2) continue;
    const auto xi = x.row(static_cast<Eigen::Index>(i));
    const double leave = (sums.row(from) - xi).norm() - norms(from);
    int to = -1;
    double best = min_gain;
    for (int j = 0; j < k; ++j) {
      if (j == from) continue;
      const double gain = leave + (sums.row(j) + xi).norm() - norms(j);
      if (gain > best) {
        best = gain;
        to = j;
      }
    }
    if (to < 0) continue;
    sums.row(from) -= xi;
    sums.row(to) += xi;
    norms(from) = sums.row(from).norm();
    norms(to) = sums.row(to).norm();
    --counts[static_cast<std::size_t>(from)];
    ++counts[static_cast<std::size_t>(to)];
    labels[i] = to;
    moved = true;
  }
  return moved;
}

struct Restart {
  Matrix centroids;
  ClusterAssignment assignment;
};

Restart lloyd(const Matrix& x, int k, const KMeansConfig& cfg, bool farthest, Rng& rng) {
  const auto n = static_cast<std::size_t>(x.rows());
  Restart r;
  Matrix c = farthest ? farthest_point_seeds(x, k, rng) : weighted_seeds(x, k, rng);
  std::vector<int> labels(n, -1);
  std::vector<int> previous;
  std::vector<double> dist(n, 0.0);
  auto& hist = r.assignment.inertia_history;
  for (int it = 0; it < cfg.max_iter; ++it) {
    double inertia = assign(x, c, labels, dist);
    // Each repair gives one point distance zero, so inertia cannot rise; the
    // loop is bounded by k rounds.
    for (int round = 0; round < k && repair_empty(x, c, labels, dist); ++round) {
      inertia = assign(x, c, labels, dist);
    }
    hist.push_back(inertia);
    r.assignment.iterations = it + 1;
    const bool stable = labels == previous;
    const bool small_change =
        hist.size() > 1 && hist[hist.size() - 2] - inertia <= cfg.tol * hist[hist.size() - 2];
    if (it + 1 == cfg.max_iter) break;
    if (stable || small_change) {
      if (!first_variation(x, k, labels)) break;
    }
    previous = labels;

    Matrix sums = Matrix::Zero(k, x.cols());
    for (std::size_t i = 0; i < n; ++i) sums.row(labels[i]) += x.row(static_cast<Eigen::Index>(i));
    for (int j = 0; j < k; ++j) {
      const double norm = sums.row(j).norm();
      // Members that cancel exactly score equally against any centroid.
      if (norm > 0.0) c.row(j) = sums.row(j) / norm;
    }
  }
  // Number clusters by first appearance so equal partitions get equal labels.
  std::vector<int> order(static_cast<std::size_t>(k), -1);
  int next = 0;
  for (int& l : labels) {
    auto& slot = order[static_cast<std::size_t>(l)];
    if (slot < 0) slot = next++;
    l = slot;
  }
  r.centroids.resize(k, x.cols());
  for (int j = 0; j < k; ++j) r.centroids.row(order[static_cast<std::size_t>(j)]) = c.row(j);
  r.assignment.labels = std::move(labels);
  r.assignment.inertia = hist.back();
  return r;
}

}  // namespace

PatternBank::PatternBank(const Matrix& patterns, bool unit_normalized, Provenance provenance)
    : b_(patterns.cast<float>().cast<double>()),
      unit_normalized_(unit_normalized),
      provenance_(std::move(provenance)) {
  if (b_.rows() < 2) throw ConfigError("PatternBank: K must be at least 2");
  if (b_.cols() < 1) throw ShapeError("PatternBank: zero width");
  if (!b_.allFinite()) throw NumericError("PatternBank: non-finite pattern");
  if (unit_normalized_) {
    for (Eigen::Index i = 0; i < b_.rows(); ++i) {
      if (std::abs(b_.row(i).norm() - 1.0) > 1e-6) throw NumericError("PatternBank: row is not unit norm");
    }
  }
}

std::string PatternBank::content_hash() const {
  return to_archive(b_, metric_, unit_normalized_, provenance_).content_hash();
}

CorpusEmbedding embed_corpus(const mae::PatchAutoencoder& model, const data::CityCorpus& corpus,
                             int batch_size) {
  const auto& cfg = model.config();
  if (corpus.cities.empty()) throw ConfigError("embed_corpus: empty corpus");
  if (corpus.cities.front().channels != cfg.channels) throw ShapeError("embed_corpus: channel mismatch");
  if (batch_size < 1) throw ConfigError("embed_corpus: batch_size must be positive");
  CorpusEmbedding out;
  out.patch_count = cfg.patch_count;
  out.windows = data::enumerate_node_windows(corpus, cfg.patch_length, cfg.patch_count);
  auto windows = mae::make_windows(corpus, out.windows, model.scaler(), cfg.patch_length, cfg.patch_count);
  out.values.resize(static_cast<Eigen::Index>(windows.size()) * cfg.patch_count, cfg.width);
  Eigen::Index row = 0;
  for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t len = std::min(windows.size() - start, static_cast<std::size_t>(batch_size));
    const std::span<const data::PatchWindow> batch(windows.data() + start, len);
    ad::Graph g(false);
    const Matrix h = model.encode(g, batch).value();
    out.values.middleRows(row, h.rows()) = h;
    row += h.rows();
  }
  if (!out.values.allFinite()) throw NumericError("embed_corpus: non-finite embedding");
  return out;
}

std::vector<int> subsample_indices(int n, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("subsample: ratio must lie in (0, 1]");
  if (n < 1) throw ShapeError("subsample: empty input");
  const int m = std::max(1, static_cast<int>(std::lround(ratio * n)));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (m == n) return idx;
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Matrix take_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

Matrix subsample(const Matrix& embeddings, double ratio, Rng& rng) {
  return take_rows(embeddings, subsample_indices(static_cast<int>(embeddings.rows()), ratio, rng));
}

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (norm == 0.0) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
    out.row(i) /= norm;
  }
  return out;
}

ClusterResult kmeans_cosine(const Matrix& embeddings, int k, const KMeansConfig& cfg, Rng& rng) {
  if (k < 2) throw ConfigError("kmeans_cosine: K must be at least 2");
  if (cfg.n_init < 1 || cfg.max_iter < 1 || !(cfg.tol >= 0.0)) throw ConfigError("kmeans_cosine: bad config");
  check_rows(embeddings, "kmeans_cosine");
  if (k > embeddings.rows()) throw ConfigError("kmeans_cosine: K exceeds the number of points");
  const Matrix x = normalize_rows(embeddings);

  Restart best;
  for (int r = 0; r < cfg.n_init; ++r) {
    Restart cur = lloyd(x, k, cfg, r == 0, rng);
    // Near-equal inertias count as ties, resolved toward the earlier restart.
    const double margin = 1e-12 * std::max(1.0, best.assignment.inertia);
    if (r == 0 || cur.assignment.inertia < best.assignment.inertia - margin) best = std::move(cur);
  }
  return {PatternBank(best.centroids, true, Provenance{}), std::move(best.assignment)};
}

std::vector<int> nearest_centroid(const Matrix& x, const Matrix& centroids) {
  if (x.cols() != centroids.cols()) throw ShapeError("nearest_centroid: width mismatch");
  std::vector<int> labels(static_cast<std::size_t>(x.rows()));
  std::vector<double> dist(labels.size());
  assign(normalize_rows(x), centroids, labels, dist);
  return labels;
}

std::vector<double> silhouette_samples(const Matrix& embeddings, const std::vector<int>& labels) {
  const Eigen::Index n = embeddings.rows();
  if (n < 3) throw ShapeError("silhouette: need at least 3 points");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("silhouette: label count mismatch");
  std::map<int, int> remap;
  for (int l : labels) remap.emplace(l, 0);
  if (remap.size() < 2) throw ConfigError("silhouette: need at least 2 clusters");
  int next = 0;
  for (auto& [label, id] : remap) id = next++;
  const int k = next;
  std::vector<int> ids(labels.size());
  std::vector<double> sizes(static_cast<std::size_t>(k), 0.0);
  Matrix onehot = Matrix::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    ids[i] = remap[labels[static_cast<std::size_t>(i)]];
    onehot(i, ids[i]) = 1.0;
    sizes[static_cast<std::size_t>(ids[i])] += 1.0;
  }
  check_rows(embeddings, "silhouette");
  const Matrix x = normalize_rows(embeddings);

  // Per-point distance sums to each cluster, computed in row blocks.
  constexpr Eigen::Index kBlock = 512;
  std::vector<double> s(static_cast<std::size_t>(n), 0.0);
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index len = std::min(kBlock, n - start);
    const Matrix dist = (1.0 - (x.middleRows(start, len) * x.transpose()).array()).matrix();
    const Matrix sums = dist * onehot;
    for (Eigen::Index r = 0; r < len; ++r) {
      const Eigen::Index i = start + r;
      const int own = ids[static_cast<std::size_t>(i)];
      const double own_size = sizes[static_cast<std::size_t>(own)];
      if (own_size < 2.0) continue;
      const double a = (sums(r, own) - dist(r, i)) / (own_size - 1.0);
      double b = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        if (c != own) b = std::min(b, sums(r, c) / sizes[static_cast<std::size_t>(c)]);
      }
      const double denom = std::max(a, b);
      s[static_cast<std::size_t>(i)] = denom > 0.0 ? (b - a) / denom : 0.0;
    }
  }
  return s;
}

double silhouette(const Matrix& embeddings, const std::vector<int>& labels) {
  const auto s = silhouette_samples(embeddings, labels);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

KSelection select_k(const Matrix& embeddings, const std::vector<int>& k_grid, const KMeansConfig& cfg,
                    Rng& rng) {
  if (k_grid.empty()) throw ConfigError("select_k: empty K grid");
  KSelection out;
  out.grid = k_grid;
  double best = -std::numeric_limits<double>::infinity();
  for (int k : k_grid) {
    ClusterResult res = kmeans_cosine(embeddings, k, cfg, rng);
    const double score = silhouette(embeddings, res.assignment.labels);
    out.scores.push_back(score);
    if (score > best || (score == best && k < out.best_k)) {
      best = score;
      out.best_k = k;
    }
    out.results.push_back(std::move(res));
  }
  return out;
}

const std::vector<int>& default_k_grid() {
  static const std::vector<int> grid{4, 8, 10, 16, 32, 64};
  return grid;
}

PatternBank random_bank(const Matrix& embeddings, int k, Rng& rng, Provenance provenance) {
  if (k < 2) throw ConfigError("random_bank: K must be at least 2");
  if (k > embeddings.rows()) throw ConfigError("random_bank: K exceeds the number of points");
  check_rows(embeddings, "random_bank");
  std::vector<int> idx(static_cast<std::size_t>(embeddings.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(k));
  provenance.method = "random";
  return PatternBank(normalize_rows(take_rows(embeddings, idx)), true, std::move(provenance));
}

void save_bank(const PatternBank& bank, const std::filesystem::path& path) {
  to_archive(bank.matrix(), bank.metric(), bank.unit_normalized(), bank.provenance()).save(path, kBankMagic);
}

PatternBank load_bank(const std::filesystem::path& path) {
  const io::Archive ar = io::Archive::load(path, kBankMagic);
  const auto& m = ar.meta();
  try {
    if (!ar.has("B")) throw CorruptFileError("bank file has no pattern matrix: " + path.string());
    const Matrix b = ar.matrix("B");
    if (m.at("K").get<Eigen::Index>() != b.rows() || m.at("d").get<Eigen::Index>() != b.cols()) {
      throw CorruptFileError("bank header shape disagrees with payload: " + path.string());
    }
    if (m.at("metric").get<std::string>() != "cosine") {
      throw VersionError("unsupported bank metric '" + m.at("metric").get<std::string>() + "'");
    }
    Provenance p;
    p.seed = m.at("seed").get<std::uint64_t>();
    p.silhouette = m.at("silhouette").get<double>();
    p.sample_ratio = m.at("sample_ratio").get<double>();
    p.source_cities = m.at("source_cities").get<std::vector<std::string>>();
    p.method = m.at("method").get<std::string>();
    return PatternBank(b, m.at("unit_normalized").get<bool>(), std::move(p));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("malformed bank header in " + path.string() + ": " + e.what());
  }
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("adjusted_rand_index: label size mismatch");
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ra;
  std::map<int, double> rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  auto pairs = [](double v) { return v * (v - 1.0) / 2.0; };
  double index = 0.0;
  for (const auto& [key, v] : joint) index += pairs(v);
  double sa = 0.0;
  double sb = 0.0;
  for (const auto& [key, v] : ra) sa += pairs(v);
  for (const auto& [key, v] : rb) sb += pairs(v);
  const double expected = sa * sb / pairs(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace tpb::bank
