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

#include "tpb/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "tpb/archive.hpp"
#include "tpb/errors.hpp"

namespace tpb::data {

namespace {

constexpr std::string_view kSeriesMagic = "TPBSERS1";

int positive_mod(long long a, long long m) { return static_cast<int>(((a % m) + m) % m); }

int sample_categorical(const std::vector<double>& weights, Rng& rng) {
  std::discrete_distribution<int> dist(weights.begin(), weights.end());
  return dist(rng);
}

std::vector<double> sample_dirichlet(const std::vector<double>& alpha, Rng& rng) {
  std::vector<double> out(alpha.size());
  double total = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    if (alpha[k] <= 0.0) {
      out[k] = 0.0;
      continue;
    }
    std::gamma_distribution<double> g(alpha[k], 1.0);
    out[k] = g(rng);
    total += out[k];
  }
  if (total <= 0.0) {
    return std::vector<double>(alpha.size(), 1.0 / static_cast<double>(alpha.size()));
  }
  for (auto& v : out) v /= total;
  return out;
}

// Rush-hour dips on weekdays, damped on weekends.
double daily_profile(double hour_of_week) {
  const double day = std::floor(hour_of_week / 24.0);
  const double h = hour_of_week - 24.0 * day;
  const double weekend = day >= 5.0 ? 0.3 : 1.0;
  const double morning = std::exp(-(h - 8.0) * (h - 8.0) / 4.5);
  const double evening = 0.8 * std::exp(-(h - 17.5) * (h - 17.5) / 8.0);
  return -weekend * (morning + evening);
}

std::size_t city_index(const SynthSpec& spec, const std::string& id) {
  for (std::size_t i = 0; i < spec.cities.size(); ++i) {
    if (spec.cities[i].id == id) return i;
  }
  throw ConfigError("unknown city id: " + id);
}

}  // namespace

int TrafficSeries::hour_of_week(int step) const {
  const long long minutes = static_cast<long long>(start_timestamp) +
                            static_cast<long long>(step) * interval_minutes;
  return positive_mod(minutes / 60 - (minutes < 0 && minutes % 60 != 0 ? 1 : 0), kHoursPerWeek);
}

void TrafficSeries::validate() const {
  if (node_count <= 0 || step_count <= 0 || channels <= 0) {
    throw ShapeError("series '" + city_id + "' has an empty dimension");
  }
  if (interval_minutes <= 0 || 60 % interval_minutes != 0) {
    throw ConfigError("interval_minutes must divide 60");
  }
  if (values.size() != static_cast<std::size_t>(node_count) * step_count * channels) {
    throw ShapeError("series '" + city_id + "' value count does not match its shape");
  }
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("series '" + city_id + "' contains non-finite values");
    }
  }
  if (prior_graph && (prior_graph->rows() != node_count || prior_graph->cols() != node_count)) {
    throw ShapeError("series '" + city_id + "' prior graph is not N x N");
  }
}

int PatchWindow::unmasked_count() const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), false));
}

const CitySpec& SynthSpec::city(const std::string& id) const { return cities[city_index(*this, id)]; }

void SynthSpec::validate() const {
  if (planted_pattern_count < 2) throw ConfigError("planted_pattern_count must be >= 2");
  if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  if (patch_length <= 0 || channels <= 0) throw ConfigError("patch_length and channels must be positive");
  if (interval_minutes <= 0 || 60 % interval_minutes != 0) throw ConfigError("interval_minutes must divide 60");
  if (persistence < 0.0 || persistence > 1.0) throw ConfigError("persistence must be in [0, 1]");
  if (community_coupling < 0.0 || community_coupling > 1.0) {
    throw ConfigError("community_coupling must be in [0, 1]");
  }
  if (communities <= 0) throw ConfigError("communities must be positive");
  if (node_concentration <= 0.0) throw ConfigError("node_concentration must be positive");
  if (cities.empty()) throw ConfigError("synth spec lists no cities");
  for (const auto& c : cities) {
    if (c.node_count <= 0 || c.day_count <= 0) throw ConfigError("city '" + c.id + "' has no nodes or days");
    if (static_cast<int>(c.mixture.size()) != planted_pattern_count) {
      throw ConfigError("city '" + c.id + "' mixture length must equal planted_pattern_count");
    }
    double total = 0.0;
    for (double w : c.mixture) {
      if (w < 0.0) throw ConfigError("city '" + c.id + "' has a negative mixture weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("city '" + c.id + "' mixture must sum to 1");
  }
  if (pattern_library.size() != 0 &&
      (pattern_library.rows() != planted_pattern_count ||
       pattern_library.cols() != static_cast<Eigen::Index>(patch_length) * channels)) {
    throw ConfigError("pattern_library must be [K* x T0*C]");
  }
}

SynthSpec default_synth_spec() {
  SynthSpec s;
  s.cities = {
      {"city_a", 20, 14, {0.30, 0.30, 0.20, 0.10, 0.10}},
      {"city_b", 20, 14, {0.10, 0.20, 0.30, 0.30, 0.10}},
      {"city_c", 20, 14, {0.20, 0.10, 0.10, 0.30, 0.30}},
      {"target", 20, 5, {0.25, 0.15, 0.25, 0.15, 0.20}},
  };
  s.target_city = "target";
  s.few_shot_days = 2.0;
  return s;
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s = default_synth_spec();
  try {
    s.planted_pattern_count = j.value("planted_pattern_count", s.planted_pattern_count);
    s.patch_length = j.value("patch_length", s.patch_length);
    s.channels = j.value("channels", s.channels);
    s.interval_minutes = j.value("interval_minutes", s.interval_minutes);
    s.start_timestamp = j.value("start_timestamp", s.start_timestamp);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.baseline_level = j.value("baseline_level", s.baseline_level);
    s.daily_amplitude = j.value("daily_amplitude", s.daily_amplitude);
    s.motif_amplitude = j.value("motif_amplitude", s.motif_amplitude);
    s.persistence = j.value("persistence", s.persistence);
    s.community_coupling = j.value("community_coupling", s.community_coupling);
    s.communities = j.value("communities", s.communities);
    s.node_concentration = j.value("node_concentration", s.node_concentration);
    s.seed = j.value("seed", s.seed);
    s.target_city = j.value("target_city", s.target_city);
    s.few_shot_days = j.value("few_shot_days", s.few_shot_days);
    if (j.contains("cities")) {
      s.cities.clear();
      for (const auto& c : j.at("cities")) {
        CitySpec cs;
        cs.id = c.at("id").get<std::string>();
        cs.node_count = c.value("node_count", 20);
        cs.day_count = c.value("day_count", 14.0);
        cs.mixture = c.at("mixture").get<std::vector<double>>();
        s.cities.push_back(std::move(cs));
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid synth spec: ") + ex.what());
  }
  s.validate();
  return s;
}

nlohmann::json synth_spec_to_json(const SynthSpec& s) {
  nlohmann::json j;
  j["planted_pattern_count"] = s.planted_pattern_count;
  j["patch_length"] = s.patch_length;
  j["channels"] = s.channels;
  j["interval_minutes"] = s.interval_minutes;
  j["start_timestamp"] = s.start_timestamp;
  j["noise_std"] = s.noise_std;
  j["baseline_level"] = s.baseline_level;
  j["daily_amplitude"] = s.daily_amplitude;
  j["motif_amplitude"] = s.motif_amplitude;
  j["persistence"] = s.persistence;
  j["community_coupling"] = s.community_coupling;
  j["communities"] = s.communities;
  j["node_concentration"] = s.node_concentration;
  j["seed"] = s.seed;
  j["target_city"] = s.target_city;
  j["few_shot_days"] = s.few_shot_days;
  j["cities"] = nlohmann::json::array();
  for (const auto& c : s.cities) {
    j["cities"].push_back({{"id", c.id}, {"node_count", c.node_count}, {"day_count", c.day_count},
                           {"mixture", c.mixture}});
  }
  return j;
}

Matrix make_pattern_library(const SynthSpec& spec) {
  if (spec.pattern_library.size() != 0) {
    return spec.pattern_library;
  }
  const int k_count = spec.planted_pattern_count;
  const int t0 = spec.patch_length;
  const int width = t0 * spec.channels;
  Rng rng = make_rng(spec.seed, 0x6d6f746966ULL);
  std::uniform_int_distribution<int> n_terms(1, 3);
  std::uniform_real_distribution<double> freq(0.5, 2.5);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.4, 1.0);

  Matrix lib(k_count, width);
  int filled = 0;
  int attempts = 0;
  while (filled < k_count) {
    if (++attempts > 10000) {
      throw ConfigError("could not draw well-separated motifs; lower planted_pattern_count");
    }
    RowVector motif = RowVector::Zero(width);
    const int terms = n_terms(rng);
    for (int c = 0; c < spec.channels; ++c) {
      for (int term = 0; term < terms; ++term) {
        const double f = freq(rng);
        const double ph = phase(rng);
        const double a = amp(rng);
        for (int t = 0; t < t0; ++t) {
          motif(t * spec.channels + c) += a * std::sin(2.0 * std::numbers::pi * f * t / t0 + ph);
        }
      }
    }
    motif.array() -= motif.mean();
    const double rms = std::sqrt(motif.squaredNorm() / width);
    if (rms < 1e-6) continue;
    motif /= rms;
    bool separated = true;
    for (int k = 0; k < filled && separated; ++k) {
      const double cos = motif.dot(lib.row(k)) / (motif.norm() * lib.row(k).norm());
      separated = cos < 0.5;
    }
    if (separated) {
      lib.row(filled++) = motif;
    }
  }
  return lib;
}

SynthCity generate_synthetic_city_with_labels(const SynthSpec& spec, const std::string& city_id) {
  spec.validate();
  const std::size_t ci = city_index(spec, city_id);
  const CitySpec& city = spec.cities[ci];
  const Matrix library = make_pattern_library(spec);
  const int k_count = spec.planted_pattern_count;
  const int t0 = spec.patch_length;
  const int channels = spec.channels;
  const int n = city.node_count;
  const int steps = static_cast<int>(std::lround(city.day_count * 24.0 * 60.0 / spec.interval_minutes));
  const int slots = (steps + t0 - 1) / t0;

  Rng rng = make_rng(spec.seed, 1000 + ci);

  // Community motif chains.
  std::vector<std::vector<int>> community_motif(static_cast<std::size_t>(spec.communities),
                                                std::vector<int>(static_cast<std::size_t>(slots)));
  for (auto& chain : community_motif) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    chain[0] = sample_categorical(city.mixture, rng);
    for (int s = 1; s < slots; ++s) {
      chain[s] = u(rng) < spec.persistence ? chain[s - 1] : sample_categorical(city.mixture, rng);
    }
  }

  SynthCity out;
  out.motif_labels.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(slots)));
  std::vector<double> alpha(static_cast<std::size_t>(k_count));
  for (int k = 0; k < k_count; ++k) {
    alpha[k] = spec.node_concentration * k_count * city.mixture[k];
  }
  std::normal_distribution<double> offset_dist(0.0, 2.0);
  std::vector<double> node_offset(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int community = i % spec.communities;
    const std::vector<double> pref = sample_dirichlet(alpha, rng);
    node_offset[i] = offset_dist(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto& labels = out.motif_labels[i];
    labels[0] = u(rng) < spec.community_coupling ? community_motif[community][0] : sample_categorical(pref, rng);
    for (int s = 1; s < slots; ++s) {
      if (u(rng) < spec.persistence) {
        labels[s] = labels[s - 1];
      } else if (u(rng) < spec.community_coupling) {
        labels[s] = community_motif[community][s];
      } else {
        labels[s] = sample_categorical(pref, rng);
      }
    }
  }

  TrafficSeries& series = out.series;
  series.city_id = city.id;
  series.node_count = n;
  series.step_count = steps;
  series.channels = channels;
  series.interval_minutes = spec.interval_minutes;
  series.start_timestamp = positive_mod(spec.start_timestamp, kMinutesPerWeek);
  series.values.resize(static_cast<std::size_t>(n) * steps * channels);
  out.baseline.resize(n, steps);

  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < steps; ++t) {
      const double minutes = series.start_timestamp + static_cast<double>(t) * spec.interval_minutes;
      const double how = std::fmod(minutes / 60.0, static_cast<double>(kHoursPerWeek));
      const double base = spec.baseline_level + node_offset[i] + spec.daily_amplitude * daily_profile(how);
      out.baseline(i, t) = base;
      const int motif = out.motif_labels[i][t / t0];
      for (int c = 0; c < channels; ++c) {
        double v = base + spec.motif_amplitude * library(motif, (t % t0) * channels + c);
        if (spec.noise_std > 0.0) {
          v += spec.noise_std * noise(rng);
        }
        series.at(i, t, c) = static_cast<float>(v);
      }
    }
  }

  Matrix prior = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i % spec.communities == j % spec.communities) prior(i, j) = 1.0;
    }
    prior.row(i) /= prior.row(i).sum();
  }
  series.prior_graph = std::move(prior);
  return out;
}

TrafficSeries generate_synthetic_city(const SynthSpec& spec, const std::string& city_id) {
  return generate_synthetic_city_with_labels(spec, city_id).series;
}

PatchWindow patchify(const TrafficSeries& series, int node, int start_step, int patch_length,
                     int patch_count) {
  if (patch_length <= 0 || patch_count <= 0) {
    throw ShapeError("patchify: patch length and count must be positive");
  }
  if (node < 0 || node >= series.node_count) {
    throw ShapeError("patchify: node out of range");
  }
  if (start_step < 0 || start_step + patch_length * patch_count > series.step_count) {
    throw ShapeError("patchify: window exceeds series length");
  }
  const int c = series.channels;
  PatchWindow w;
  w.node = node;
  w.start_step = start_step;
  w.patches.resize(patch_count, patch_length * c);
  w.mask.assign(static_cast<std::size_t>(patch_count), false);
  w.hour_of_week.resize(static_cast<std::size_t>(patch_count));
  for (int j = 0; j < patch_count; ++j) {
    const int first = start_step + j * patch_length;
    for (int t = 0; t < patch_length; ++t) {
      for (int ch = 0; ch < c; ++ch) {
        w.patches(j, t * c + ch) = series.at(node, first + t, ch);
      }
    }
    w.hour_of_week[j] = series.hour_of_week(first);
  }
  return w;
}

std::vector<PatchWindow> patchify_all(const TrafficSeries& series, int start_step, int patch_length,
                                      int patch_count) {
  std::vector<PatchWindow> out;
  out.reserve(static_cast<std::size_t>(series.node_count));
  for (int i = 0; i < series.node_count; ++i) {
    out.push_back(patchify(series, i, start_step, patch_length, patch_count));
  }
  return out;
}

std::vector<bool> sample_mask(int patch_count, double mask_ratio, Rng& rng) {
  if (patch_count < 0) throw ShapeError("sample_mask: negative patch count");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
    throw ConfigError("mask_ratio must be in [0, 1]");
  }
  const auto count = static_cast<int>(std::lround(mask_ratio * patch_count));
  std::vector<int> order(static_cast<std::size_t>(patch_count));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> mask(static_cast<std::size_t>(patch_count), false);
  for (int i = 0; i < count; ++i) {
    mask[order[i]] = true;
  }
  return mask;
}

SplitIndices split_indices(std::size_t n, std::array<double, 3> fractions, Rng& rng) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const auto dn = static_cast<double>(n);
  const auto n_val = static_cast<std::size_t>(std::floor(fractions[1] * dn + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(fractions[2] * dn + 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  SplitIndices s;
  const std::size_t n_train = n - n_val - n_test;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<NodeWindowRef> enumerate_node_windows(const CityCorpus& corpus, int patch_length,
                                                  int patch_count) {
  const int span = patch_length * patch_count;
  std::vector<NodeWindowRef> out;
  for (std::size_t c = 0; c < corpus.cities.size(); ++c) {
    const auto& s = corpus.cities[c];
    for (int node = 0; node < s.node_count; ++node) {
      for (int start = 0; start + span <= s.step_count; start += span) {
        out.push_back({static_cast<int>(c), node, start});
      }
    }
  }
  return out;
}

SourceSplit split_source(const CityCorpus& corpus, int patch_length, int patch_count,
                         std::array<double, 3> fractions, Rng& rng) {
  const auto windows = enumerate_node_windows(corpus, patch_length, patch_count);
  const SplitIndices idx = split_indices(windows.size(), fractions, rng);
  SourceSplit out;
  for (auto i : idx.train) out.train.push_back(windows[i]);
  for (auto i : idx.val) out.val.push_back(windows[i]);
  for (auto i : idx.test) out.test.push_back(windows[i]);
  return out;
}

TrafficSeries align_interval(const TrafficSeries& series, int target_interval_minutes) {
  const int src = series.interval_minutes;
  const int dst = target_interval_minutes;
  if (dst <= 0 || 60 % dst != 0) {
    throw ConfigError("target interval must divide 60");
  }
  if (src % dst != 0 && dst % src != 0) {
    throw ConfigError("non-commensurate sampling intervals");
  }
  const long long span = static_cast<long long>(series.step_count - 1) * src;
  const int length = static_cast<int>((span + dst - 1) / dst) + 1;
  TrafficSeries out = series;
  out.interval_minutes = dst;
  out.step_count = length;
  out.values.assign(static_cast<std::size_t>(series.node_count) * length * series.channels, 0.0f);
  for (int k = 0; k < length; ++k) {
    // Source position as an exact rational k*dst/src.
    const long long num = static_cast<long long>(k) * dst;
    long long lo = num / src;
    if (lo >= series.step_count - 1) lo = std::max(series.step_count - 2, 0);
    const double frac = static_cast<double>(num - lo * src) / src;
    const long long hi = std::min<long long>(lo + 1, series.step_count - 1);
    for (int i = 0; i < series.node_count; ++i) {
      for (int c = 0; c < series.channels; ++c) {
        const double a = series.at(i, static_cast<int>(lo), c);
        const double b = series.at(i, static_cast<int>(hi), c);
        out.at(i, k, c) = static_cast<float>(hi == lo ? a : a + (b - a) * frac);
      }
    }
  }
  return out;
}

TrafficSeries slice_steps(const TrafficSeries& series, int begin, int count) {
  if (begin < 0 || count <= 0 || begin + count > series.step_count) {
    throw ShapeError("slice_steps: range exceeds series length");
  }
  TrafficSeries out = series;
  out.step_count = count;
  out.start_timestamp = positive_mod(static_cast<long long>(series.start_timestamp) +
                                         static_cast<long long>(begin) * series.interval_minutes,
                                     kMinutesPerWeek);
  out.values.resize(static_cast<std::size_t>(series.node_count) * count * series.channels);
  for (int i = 0; i < series.node_count; ++i) {
    for (int t = 0; t < count; ++t) {
      for (int c = 0; c < series.channels; ++c) {
        out.at(i, t, c) = series.at(i, begin + t, c);
      }
    }
  }
  return out;
}

TrafficSeries concat_steps(const TrafficSeries& head, const TrafficSeries& tail) {
  if (head.node_count != tail.node_count || head.channels != tail.channels ||
      head.interval_minutes != tail.interval_minutes) {
    throw ShapeError("concat_steps: series layouts differ");
  }
  const long long expected = positive_mod(static_cast<long long>(head.start_timestamp) +
                                              static_cast<long long>(head.step_count) * head.interval_minutes,
                                          kMinutesPerWeek);
  if (tail.start_timestamp != expected) {
    throw ConfigError("concat_steps: the second series does not start where the first ends");
  }
  TrafficSeries out = head;
  out.step_count = head.step_count + tail.step_count;
  out.values.resize(static_cast<std::size_t>(out.node_count) * out.step_count * out.channels);
  for (int i = 0; i < out.node_count; ++i) {
    for (int t = 0; t < out.step_count; ++t) {
      for (int c = 0; c < out.channels; ++c) {
        out.at(i, t, c) = t < head.step_count ? head.at(i, t, c) : tail.at(i, t - head.step_count, c);
      }
    }
  }
  return out;
}

TargetSplit split_target(const TrafficSeries& target, double few_shot_days) {
  const int steps = static_cast<int>(std::lround(few_shot_days * 24.0 * 60.0 / target.interval_minutes));
  if (steps <= 0 || steps >= target.step_count) {
    throw ConfigError("few-shot span must be shorter than the target series");
  }
  return {slice_steps(target, 0, steps), slice_steps(target, steps, target.step_count - steps)};
}

Scaler fit_scaler(const CityCorpus& corpus) {
  double sum = 0.0;
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus.cities) {
    for (float v : s.values) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("cannot fit a scaler on an empty corpus");
  Scaler sc;
  sc.mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - sc.mean * sc.mean, 0.0);
  sc.stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
  return sc;
}

void save_series(const TrafficSeries& series, const std::filesystem::path& path) {
  series.validate();
  io::Archive a;
  a.meta() = {{"n_nodes", series.node_count},         {"n_steps", series.step_count},
              {"channels", series.channels},          {"interval_minutes", series.interval_minutes},
              {"start_timestamp", series.start_timestamp}, {"city_id", series.city_id}};
  a.put_f32("values", series.values, {series.node_count, series.step_count, series.channels});
  if (series.prior_graph) {
    a.put("prior_graph", *series.prior_graph, io::Archive::DType::f64);
  }
  a.save(path, kSeriesMagic);
}

TrafficSeries load_series(const std::filesystem::path& path) {
  const io::Archive a = io::Archive::load(path, kSeriesMagic);
  TrafficSeries s;
  try {
    s.node_count = a.meta().at("n_nodes").get<int>();
    s.step_count = a.meta().at("n_steps").get<int>();
    s.channels = a.meta().at("channels").get<int>();
    s.interval_minutes = a.meta().at("interval_minutes").get<int>();
    s.start_timestamp = a.meta().at("start_timestamp").get<int>();
    s.city_id = a.meta().value("city_id", path.stem().string());
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptFileError(std::string("series header: ") + ex.what());
  }
  s.values = a.floats("values");
  if (a.has("prior_graph")) {
    s.prior_graph = a.matrix("prior_graph");
  }
  s.validate();
  return s;
}

namespace {

nlohmann::json save_role(const std::filesystem::path& dir, const CityCorpus& corpus,
                         const std::string& role) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& s : corpus.cities) {
    const std::string name = role + "_" + s.city_id + ".tps";
    save_series(s, dir / name);
    files.push_back({{"file", name}, {"hash", io::file_hash(dir / name)}});
  }
  return files;
}

CityCorpus load_role(const std::filesystem::path& dir, const nlohmann::json& manifest,
                     const std::string& role, CityRole r) {
  CityCorpus c;
  c.role = r;
  if (!manifest.contains(role)) return c;
  for (const auto& item : manifest.at(role)) {
    const auto file = dir / item.at("file").get<std::string>();
    if (!std::filesystem::exists(file)) {
      throw DependencyError("corpus file missing: " + file.string());
    }
    if (item.contains("hash") && io::file_hash(file) != item.at("hash").get<std::string>()) {
      throw DependencyError("corpus file hash mismatch: " + file.string());
    }
    c.cities.push_back(load_series(file));
  }
  return c;
}

}  // namespace

void save_corpus_dir(const std::filesystem::path& dir, const CityCorpus& source,
                     const CityCorpus& target, const CityCorpus& test) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["source"] = save_role(dir, source, "source");
  manifest["target"] = save_role(dir, target, "target");
  manifest["test"] = save_role(dir, test, "test");
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

CorpusSet load_corpus_dir(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) {
    throw DependencyError("corpus manifest missing: " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptFileError(std::string("corpus manifest: ") + ex.what());
  }
  CorpusSet set;
  set.source = load_role(dir, manifest, "source", CityRole::source);
  set.target = load_role(dir, manifest, "target", CityRole::target);
  set.test = load_role(dir, manifest, "test", CityRole::test);
  return set;
}

CorpusSet generate_corpus(const SynthSpec& spec) {
  spec.validate();
  CorpusSet set;
  set.source.role = CityRole::source;
  set.target.role = CityRole::target;
  set.test.role = CityRole::test;
  bool have_target = false;
  for (const auto& c : spec.cities) {
    TrafficSeries s = generate_synthetic_city(spec, c.id);
    if (c.id == spec.target_city) {
      TargetSplit split = split_target(s, spec.few_shot_days);
      set.target.cities.push_back(std::move(split.few_shot));
      set.test.cities.push_back(std::move(split.test));
      have_target = true;
    } else {
      set.source.cities.push_back(std::move(s));
    }
  }
  if (!have_target) throw ConfigError("synth spec has no city named '" + spec.target_city + "'");
  if (set.source.cities.empty()) throw ConfigError("synth spec has no source city");
  return set;
}

}  // namespace tpb::data
