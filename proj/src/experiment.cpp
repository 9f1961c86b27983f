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

#include "tpb/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "tpb/archive.hpp"
#include "tpb/errors.hpp"

namespace tpb::exp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kEmbeddingMagic = "TPBEMBD1";

std::vector<double> unscaled(const Matrix& m, const data::Scaler& scaler) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) out[static_cast<std::size_t>(i)] = scaler.inverse(m.data()[i]);
  return out;
}

json triple_json(const metrics::Triple& t) { return {{"rmse", t.rmse}, {"mae", t.mae}, {"mape", t.mape}}; }

metrics::Triple triple_from(const json& j) {
  return {j.at("rmse").get<double>(), j.at("mae").get<double>(), j.at("mape").get<double>()};
}

// Rejects keys outside `allowed`, so that typos in config files surface.
void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

std::vector<metrics::Triple> horizon_metrics(const Matrix& prediction, const Matrix& target,
                                             const data::Scaler& scaler, int horizon, int channels) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols()) {
    throw ShapeError("horizon_metrics: prediction and target shapes differ");
  }
  if (horizon < 1 || channels < 1 || target.cols() != static_cast<Eigen::Index>(horizon) * channels) {
    throw ShapeError("horizon_metrics: target width is not horizon * channels");
  }
  if (target.rows() == 0) throw ShapeError("horizon_metrics: empty input");
  std::vector<metrics::Triple> out;
  for (int h = 0; h < horizon; ++h) {
    std::vector<double> y;
    std::vector<double> y_hat;
    for (Eigen::Index r = 0; r < target.rows(); ++r) {
      for (int c = 0; c < channels; ++c) {
        y.push_back(scaler.inverse(target(r, h * channels + c)));
        y_hat.push_back(scaler.inverse(prediction(r, h * channels + c)));
      }
    }
    out.push_back(metrics::all(y, y_hat));
  }
  return out;
}

metrics::Triple overall_metrics(const Matrix& prediction, const Matrix& target, const data::Scaler& scaler) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols()) {
    throw ShapeError("overall_metrics: prediction and target shapes differ");
  }
  return metrics::all(unscaled(target, scaler), unscaled(prediction, scaler));
}

void summarize(MetricReport& r) {
  if (r.per_seed.empty() || r.per_seed.size() != r.overall.size()) {
    throw ShapeError("summarize: per-seed metrics are missing or inconsistent");
  }
  const std::size_t steps = r.per_seed.front().size();
  const double n = static_cast<double>(r.per_seed.size());
  auto stats = [&](auto get, double& mean, double& sd) {
    mean = 0.0;
    for (std::size_t s = 0; s < r.per_seed.size(); ++s) mean += get(s);
    mean /= n;
    double sq = 0.0;
    for (std::size_t s = 0; s < r.per_seed.size(); ++s) sq += (get(s) - mean) * (get(s) - mean);
    sd = std::sqrt(sq / n);
  };
  r.mean.assign(steps, {});
  r.stddev.assign(steps, {});
  for (std::size_t h = 0; h < steps; ++h) {
    for (const auto& seed : r.per_seed) {
      if (seed.size() != steps) throw ShapeError("summarize: seeds report different horizons");
    }
    stats([&](std::size_t s) { return r.per_seed[s][h].rmse; }, r.mean[h].rmse, r.stddev[h].rmse);
    stats([&](std::size_t s) { return r.per_seed[s][h].mae; }, r.mean[h].mae, r.stddev[h].mae);
    stats([&](std::size_t s) { return r.per_seed[s][h].mape; }, r.mean[h].mape, r.stddev[h].mape);
  }
  stats([&](std::size_t s) { return r.overall[s].rmse; }, r.overall_mean.rmse, r.overall_stddev.rmse);
  stats([&](std::size_t s) { return r.overall[s].mae; }, r.overall_mean.mae, r.overall_stddev.mae);
  stats([&](std::size_t s) { return r.overall[s].mape; }, r.overall_mean.mape, r.overall_stddev.mape);
  std::vector<double> rmses;
  for (const auto& t : r.overall) rmses.push_back(t.rmse);
  std::sort(rmses.begin(), rmses.end());
  const std::size_t m = rmses.size();
  r.median_rmse = m % 2 == 1 ? rmses[m / 2] : 0.5 * (rmses[m / 2 - 1] + rmses[m / 2]);
}

json to_json(const MetricReport& r) {
  json j;
  j["variant"] = r.variant;
  j["seeds"] = r.seeds;
  json per_seed = json::array();
  for (const auto& seed : r.per_seed) {
    json steps = json::array();
    for (const auto& t : seed) steps.push_back(triple_json(t));
    per_seed.push_back(steps);
  }
  j["per_seed"] = per_seed;
  json overall = json::array();
  for (const auto& t : r.overall) overall.push_back(triple_json(t));
  j["overall"] = overall;
  json mean = json::array();
  json sd = json::array();
  for (std::size_t h = 0; h < r.mean.size(); ++h) {
    mean.push_back(triple_json(r.mean[h]));
    sd.push_back(triple_json(r.stddev[h]));
  }
  j["mean"] = mean;
  j["std"] = sd;
  j["overall_mean"] = triple_json(r.overall_mean);
  j["overall_std"] = triple_json(r.overall_stddev);
  j["median_rmse"] = r.median_rmse;
  j["metadata"] = r.metadata;
  return j;
}

MetricReport report_from_json(const json& j) {
  try {
    MetricReport r;
    r.variant = j.at("variant").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& seed : j.at("per_seed")) {
      std::vector<metrics::Triple> steps;
      for (const auto& t : seed) steps.push_back(triple_from(t));
      r.per_seed.push_back(std::move(steps));
    }
    for (const auto& t : j.at("overall")) r.overall.push_back(triple_from(t));
    summarize(r);
    r.metadata = j.value("metadata", json::object());
    return r;
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("malformed metric report: ") + e.what());
  }
}

std::string format_reports(const std::vector<MetricReport>& reports, const std::vector<int>& steps) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "variant";
  for (int s : steps) {
    os << " | step " << std::setw(2) << s << "  RMSE             MAE              MAPE%          ";
  }
  os << " | median RMSE\n";
  for (const auto& r : reports) {
    os << std::left << std::setw(10) << r.variant;
    for (int s : steps) {
      if (s < 1 || s > r.horizon()) throw ConfigError("format_reports: step outside the forecast horizon");
      const auto& m = r.mean[static_cast<std::size_t>(s - 1)];
      const auto& d = r.stddev[static_cast<std::size_t>(s - 1)];
      os << " | " << std::setw(8) << "" << std::setw(17) << (fmt(m.rmse) + " +- " + fmt(d.rmse, 3))
         << std::setw(17) << (fmt(m.mae) + " +- " + fmt(d.mae, 3)) << std::setw(15)
         << (fmt(m.mape, 3) + " +- " + fmt(d.mape, 2));
    }
    os << " | " << fmt(r.median_rmse) << "\n";
  }
  return os.str();
}

std::string reports_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << std::setprecision(17) << "variant,seed,step,rmse,mae,mape\n";
  for (const auto& r : reports) {
    for (std::size_t s = 0; s < r.per_seed.size(); ++s) {
      for (std::size_t h = 0; h < r.per_seed[s].size(); ++h) {
        const auto& t = r.per_seed[s][h];
        os << r.variant << ',' << r.seeds[s] << ',' << h + 1 << ',' << t.rmse << ',' << t.mae << ',' << t.mape << '\n';
      }
      const auto& t = r.overall[s];
      os << r.variant << ',' << r.seeds[s] << ",all," << t.rmse << ',' << t.mae << ',' << t.mape << '\n';
    }
  }
  return os.str();
}

Stage parse_stage(const std::string& name) {
  if (name == "pretrain") return Stage::pretrain;
  if (name == "build-bank" || name == "build_bank") return Stage::build_bank;
  if (name == "meta-train" || name == "meta_train") return Stage::meta_train;
  if (name == "fine-tune" || name == "fine_tune") return Stage::fine_tune;
  if (name == "evaluate") return Stage::evaluate;
  throw ConfigError("unknown stage '" + name + "'");
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrain:
      return "pretrain";
    case Stage::build_bank:
      return "build-bank";
    case Stage::meta_train:
      return "meta-train";
    case Stage::fine_tune:
      return "fine-tune";
    case Stage::evaluate:
      return "evaluate";
  }
  return "?";
}

void ExperimentPlan::set_seed(std::uint64_t seed) {
  seeds = {seed};
  encoder.seed = seed;
  pretrain.seed = seed;
  bank.seed = seed;
  forecaster.seed = seed;
  meta.seed = seed;
  finetune.seed = seed;
}

void ExperimentPlan::validate() const {
  if (variants.empty()) throw ConfigError("plan: no variants");
  if (seeds.empty()) throw ConfigError("plan: no seeds");
  if (stages.empty()) throw ConfigError("plan: no stages");
  std::set<fc::Variant> seen;
  for (auto v : variants) {
    if (!seen.insert(v).second) throw ConfigError("plan: variant " + fc::to_string(v) + " listed twice");
  }
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("plan: duplicate seeds");
  }
  if (source_stride < 1 || few_shot_stride < 1 || test_stride < 1) throw ConfigError("plan: strides must be positive");
  if (!(bank.sample_ratio > 0.0 && bank.sample_ratio <= 1.0)) throw ConfigError("bank sample_ratio must be in (0, 1]");
  if (bank.k_grid.empty()) throw ConfigError("bank k_grid is empty");
  for (int k : bank.k_grid) {
    if (k < 2) throw ConfigError("bank k_grid entries must be at least 2");
  }
  if (k_sweep && !stages.count(Stage::build_bank)) throw ConfigError("k_sweep requires the build-bank stage");
  if (encoder.patch_length != forecaster.patch_length || encoder.patch_count != forecaster.patch_count ||
      encoder.channels != forecaster.channels) {
    throw ConfigError("encoder and forecaster disagree on patch_length, patch_count or channels");
  }
  if (data_dir.empty()) synth.validate();
  if (synth.patch_length != encoder.patch_length || synth.channels != encoder.channels) {
    if (data_dir.empty()) throw ConfigError("synthetic data and encoder disagree on patch_length or channels");
  }
  encoder.validate();
  pretrain.validate();
  meta.validate();
  finetune.validate();
}

ExperimentPlan plan_from_json(const json& j) {
  ExperimentPlan p;
  try {
    check_keys(j, "plan",
               {"stages", "variants", "seeds", "k_sweep", "synth", "encoder", "pretrain", "bank", "forecaster", "meta",
                "finetune", "strides", "deterministic", "data_dir", "encoder_path", "bank_path", "random_bank_path"});
    if (j.contains("stages")) {
      p.stages.clear();
      for (const auto& s : j.at("stages")) p.stages.insert(parse_stage(s.get<std::string>()));
    }
    if (j.contains("variants")) {
      p.variants.clear();
      for (const auto& v : j.at("variants")) p.variants.push_back(fc::parse_variant(v.get<std::string>()));
    }
    read(j, "seeds", p.seeds);
    read(j, "k_sweep", p.k_sweep);
    read(j, "deterministic", p.deterministic);
    if (j.contains("synth")) p.synth = data::synth_spec_from_json(j.at("synth"));
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      check_keys(e, "encoder",
                 {"width", "encoder_layers", "decoder_layers", "heads", "ff_multiplier", "patch_length",
                  "patch_count", "channels", "pe_dropout", "depth_scaled_init", "seed"});
      read(e, "width", p.encoder.width);
      read(e, "encoder_layers", p.encoder.encoder_layers);
      read(e, "decoder_layers", p.encoder.decoder_layers);
      read(e, "heads", p.encoder.heads);
      read(e, "ff_multiplier", p.encoder.ff_multiplier);
      read(e, "patch_length", p.encoder.patch_length);
      read(e, "patch_count", p.encoder.patch_count);
      read(e, "channels", p.encoder.channels);
      read(e, "pe_dropout", p.encoder.pe_dropout);
      read(e, "depth_scaled_init", p.encoder.depth_scaled_init);
      read(e, "seed", p.encoder.seed);
    }
    if (j.contains("pretrain")) {
      const auto& e = j.at("pretrain");
      check_keys(e, "pretrain", {"batch_size", "lr", "beta1", "beta2", "mask_ratio", "epochs", "seed", "split"});
      read(e, "batch_size", p.pretrain.batch_size);
      read(e, "lr", p.pretrain.lr);
      read(e, "beta1", p.pretrain.beta1);
      read(e, "beta2", p.pretrain.beta2);
      read(e, "mask_ratio", p.pretrain.mask_ratio);
      read(e, "epochs", p.pretrain.epochs);
      read(e, "seed", p.pretrain.seed);
      read(e, "split", p.pretrain.split);
    }
    if (j.contains("bank")) {
      const auto& e = j.at("bank");
      check_keys(e, "bank", {"sample_ratio", "k_grid", "n_init", "max_iter", "tol", "seed"});
      read(e, "sample_ratio", p.bank.sample_ratio);
      read(e, "k_grid", p.bank.k_grid);
      read(e, "n_init", p.bank.kmeans.n_init);
      read(e, "max_iter", p.bank.kmeans.max_iter);
      read(e, "tol", p.bank.kmeans.tol);
      read(e, "seed", p.bank.seed);
    }
    if (j.contains("forecaster")) {
      const auto& e = j.at("forecaster");
      check_keys(e, "forecaster",
                 {"query_width", "horizon", "heads", "ff_multiplier", "aggregator_layers", "epsilon", "raw_weights",
                  "key_init"});
      read(e, "query_width", p.forecaster.query_width);
      read(e, "horizon", p.forecaster.horizon);
      read(e, "heads", p.forecaster.heads);
      read(e, "ff_multiplier", p.forecaster.ff_multiplier);
      read(e, "aggregator_layers", p.forecaster.aggregator_layers);
      read(e, "epsilon", p.forecaster.epsilon);
      read(e, "raw_weights", p.forecaster.raw_weights);
      read(e, "key_init", p.forecaster.key_init);
    }
    if (j.contains("meta")) {
      const auto& e = j.at("meta");
      check_keys(e, "meta", {"meta_batch", "batch_size", "alpha", "beta", "update_step", "meta_epochs"});
      read(e, "meta_batch", p.meta.meta_batch);
      read(e, "batch_size", p.meta.batch_size);
      read(e, "alpha", p.meta.alpha);
      read(e, "beta", p.meta.beta);
      read(e, "update_step", p.meta.update_step);
      read(e, "meta_epochs", p.meta.meta_epochs);
    }
    if (j.contains("finetune")) {
      const auto& e = j.at("finetune");
      check_keys(e, "finetune", {"batch_size", "lr", "beta1", "beta2", "weight_decay", "epochs", "frozen"});
      read(e, "batch_size", p.finetune.batch_size);
      read(e, "lr", p.finetune.lr);
      read(e, "beta1", p.finetune.beta1);
      read(e, "beta2", p.finetune.beta2);
      read(e, "weight_decay", p.finetune.weight_decay);
      read(e, "epochs", p.finetune.epochs);
      read(e, "frozen", p.finetune.frozen);
    }
    if (j.contains("strides")) {
      const auto& e = j.at("strides");
      check_keys(e, "strides", {"source", "few_shot", "test"});
      read(e, "source", p.source_stride);
      read(e, "few_shot", p.few_shot_stride);
      read(e, "test", p.test_stride);
    }
    if (j.contains("data_dir")) p.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("encoder_path")) p.encoder_path = j.at("encoder_path").get<std::string>();
    if (j.contains("bank_path")) p.bank_path = j.at("bank_path").get<std::string>();
    if (j.contains("random_bank_path")) p.random_bank_path = j.at("random_bank_path").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed plan: ") + e.what());
  }
  // Patch geometry follows the encoder.
  p.forecaster.patch_length = p.encoder.patch_length;
  p.forecaster.patch_count = p.encoder.patch_count;
  p.forecaster.channels = p.encoder.channels;
  return p;
}

json to_json(const ExperimentPlan& p) {
  json j;
  json stages = json::array();
  for (auto s : p.stages) stages.push_back(to_string(s));
  j["stages"] = stages;
  json variants = json::array();
  for (auto v : p.variants) variants.push_back(fc::to_string(v));
  j["variants"] = variants;
  j["seeds"] = p.seeds;
  j["k_sweep"] = p.k_sweep;
  j["deterministic"] = p.deterministic;
  j["synth"] = data::synth_spec_to_json(p.synth);
  const auto& e = p.encoder;
  j["encoder"] = {{"width", e.width},
                  {"encoder_layers", e.encoder_layers},
                  {"decoder_layers", e.decoder_layers},
                  {"heads", e.heads},
                  {"ff_multiplier", e.ff_multiplier},
                  {"patch_length", e.patch_length},
                  {"patch_count", e.patch_count},
                  {"channels", e.channels},
                  {"pe_dropout", e.pe_dropout},
                  {"depth_scaled_init", e.depth_scaled_init},
                  {"seed", e.seed}};
  const auto& t = p.pretrain;
  j["pretrain"] = {{"batch_size", t.batch_size}, {"lr", t.lr},         {"beta1", t.beta1},
                   {"beta2", t.beta2},           {"mask_ratio", t.mask_ratio}, {"epochs", t.epochs},
                   {"seed", t.seed},             {"split", t.split}};
  j["bank"] = {{"sample_ratio", p.bank.sample_ratio}, {"k_grid", p.bank.k_grid},
               {"n_init", p.bank.kmeans.n_init},      {"max_iter", p.bank.kmeans.max_iter},
               {"tol", p.bank.kmeans.tol},            {"seed", p.bank.seed}};
  const auto& f = p.forecaster;
  j["forecaster"] = {{"query_width", f.query_width},
                     {"horizon", f.horizon},
                     {"heads", f.heads},
                     {"ff_multiplier", f.ff_multiplier},
                     {"aggregator_layers", f.aggregator_layers},
                     {"epsilon", f.epsilon},
                     {"raw_weights", f.raw_weights},
                     {"key_init", f.key_init}};
  const auto& m = p.meta;
  j["meta"] = {{"meta_batch", m.meta_batch}, {"batch_size", m.batch_size},   {"alpha", m.alpha},
               {"beta", m.beta},             {"update_step", m.update_step}, {"meta_epochs", m.meta_epochs}};
  const auto& ft = p.finetune;
  j["finetune"] = {{"batch_size", ft.batch_size}, {"lr", ft.lr},
                   {"beta1", ft.beta1},           {"beta2", ft.beta2},
                   {"weight_decay", ft.weight_decay}, {"epochs", ft.epochs},
                   {"frozen", ft.frozen}};
  j["strides"] = {{"source", p.source_stride}, {"few_shot", p.few_shot_stride}, {"test", p.test_stride}};
  j["data_dir"] = p.data_dir.string();
  j["encoder_path"] = p.encoder_path.string();
  j["bank_path"] = p.bank_path.string();
  j["random_bank_path"] = p.random_bank_path.string();
  return j;
}

ExperimentPlan load_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return plan_from_json(j);
}

void check_dependencies(const ExperimentPlan& plan) {
  auto need = [](const fs::path& p, const std::string& what) {
    if (p.empty()) throw DependencyError(what + " is required but no path was given");
    if (!fs::exists(p)) throw DependencyError(what + " not found: " + p.string());
  };
  if (!plan.data_dir.empty()) need(plan.data_dir / "manifest.json", "corpus manifest");
  const auto& st = plan.stages;
  const bool forecasting = st.count(Stage::meta_train) || st.count(Stage::fine_tune) || st.count(Stage::evaluate);
  if (st.count(Stage::build_bank) && !st.count(Stage::pretrain)) need(plan.encoder_path, "encoder checkpoint");
  if (forecasting && !st.count(Stage::pretrain)) need(plan.encoder_path, "encoder checkpoint");
  if (forecasting && !st.count(Stage::build_bank)) {
    const bool needs_bank = std::any_of(plan.variants.begin(), plan.variants.end(), [](fc::Variant v) {
      return v == fc::Variant::full || v == fc::Variant::no_adj;
    });
    const bool needs_random = std::find(plan.variants.begin(), plan.variants.end(), fc::Variant::no_clu) !=
                              plan.variants.end();
    if (needs_bank) need(plan.bank_path, "pattern bank");
    if (needs_random) need(plan.random_bank_path, "random pattern bank");
  }
}

json to_json(const ExperimentResult& r) {
  json j;
  json reports = json::array();
  for (const auto& rep : r.reports) reports.push_back(to_json(rep));
  j["reports"] = reports;
  json sweep = json::array();
  for (const auto& row : r.k_sweep) {
    sweep.push_back({{"k", row.k}, {"silhouette", row.silhouette}, {"rmse", row.rmse}, {"mae", row.mae}});
  }
  j["k_sweep"] = sweep;
  j["artifacts"] = r.artifacts;
  j["metadata"] = r.metadata;
  return j;
}

data::CorpusSet load_or_generate(const ExperimentPlan& plan) {
  if (!plan.data_dir.empty()) return data::load_corpus_dir(plan.data_dir);
  return data::generate_corpus(plan.synth);
}

std::string corpus_hash(const data::CorpusSet& set) {
  std::string bytes;
  for (const auto* corpus : {&set.source, &set.target, &set.test}) {
    for (const auto& s : corpus->cities) {
      bytes += s.city_id;
      bytes += '|' + std::to_string(s.node_count) + '|' + std::to_string(s.step_count) + '|' +
               std::to_string(s.channels) + '|' + std::to_string(s.interval_minutes) + '|' +
               std::to_string(s.start_timestamp) + '|';
      bytes.append(reinterpret_cast<const char*>(s.values.data()), s.values.size() * sizeof(float));
    }
  }
  return io::fnv1a_hex(bytes);
}

std::vector<fc::ForecastSample> few_shot_samples(const data::CorpusSet& set, const data::Scaler& scaler,
                                                 const fc::ForecasterConfig& cfg, int stride) {
  std::vector<fc::ForecastSample> out;
  for (std::size_t c = 0; c < set.target.cities.size(); ++c) {
    auto s = fc::make_samples(set.target.cities[c], scaler, cfg.patch_length, cfg.patch_count, cfg.horizon, stride, 0,
                              static_cast<int>(c));
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  if (out.empty()) throw ConfigError("the few-shot target span is shorter than one forecasting window");
  return out;
}

std::vector<fc::ForecastSample> test_samples(const data::CorpusSet& set, const data::Scaler& scaler,
                                             const fc::ForecasterConfig& cfg, int stride) {
  std::vector<fc::ForecastSample> out;
  for (std::size_t c = 0; c < set.test.cities.size(); ++c) {
    const auto& test = set.test.cities[c];
    const data::TrafficSeries* head = nullptr;
    for (const auto& t : set.target.cities) {
      if (t.city_id == test.city_id) head = &t;
    }
    std::vector<fc::ForecastSample> s;
    if (head != nullptr) {
      s = fc::make_samples(data::concat_steps(*head, test), scaler, cfg.patch_length, cfg.patch_count, cfg.horizon,
                           stride, head->step_count, static_cast<int>(c));
    } else {
      s = fc::make_samples(test, scaler, cfg.patch_length, cfg.patch_count, cfg.horizon, stride, 0,
                           static_cast<int>(c));
    }
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  if (out.empty()) throw ConfigError("the test span yields no forecasting windows");
  return out;
}

BankBuild build_banks(const mae::PatchAutoencoder& encoder, const data::CityCorpus& source, const BankConfig& cfg) {
  const bank::CorpusEmbedding emb = bank::embed_corpus(encoder, source);
  Rng rng = make_rng(cfg.seed, 0x42414e4b);
  BankBuild out;
  out.sample = bank::subsample(emb.values, cfg.sample_ratio, rng);
  out.selection = bank::select_k(out.sample, cfg.k_grid, cfg.kmeans, rng);
  std::size_t best = 0;
  for (std::size_t i = 0; i < out.selection.grid.size(); ++i) {
    if (out.selection.grid[i] == out.selection.best_k) best = i;
  }
  bank::Provenance prov = out.selection.results[best].bank.provenance();
  for (const auto& s : source.cities) prov.source_cities.push_back(s.city_id);
  prov.sample_ratio = cfg.sample_ratio;
  prov.seed = cfg.seed;
  prov.silhouette = out.selection.scores[best];
  prov.method = "kmeans";
  out.best = bank::PatternBank(out.selection.results[best].bank.matrix(), true, prov);
  for (std::size_t i = 0; i < out.selection.results.size(); ++i) {
    bank::Provenance p = prov;
    p.silhouette = out.selection.scores[i];
    out.selection.results[i].bank = bank::PatternBank(out.selection.results[i].bank.matrix(), true, p);
  }
  bank::Provenance random_prov = prov;
  random_prov.method = "random";
  random_prov.silhouette = 0.0;
  out.random = bank::random_bank(out.sample, out.selection.best_k, rng, random_prov);
  return out;
}

fc::ForecasterConfig forecaster_config(const ExperimentPlan& plan, fc::Variant variant, std::uint64_t seed,
                                       int width, int target_nodes) {
  fc::ForecasterConfig cfg = plan.forecaster;
  cfg.width = width;
  cfg.patch_length = plan.encoder.patch_length;
  cfg.patch_count = plan.encoder.patch_count;
  cfg.channels = plan.encoder.channels;
  cfg.variant = variant;
  cfg.graph_nodes = target_nodes;
  cfg.seed = seed;
  return cfg;
}

namespace {

struct RunContext {
  const ExperimentPlan& plan;
  const fs::path& out;
  const Log& log;
  const data::CorpusSet& corpus;
  data::Scaler scaler;
  ExperimentResult& result;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void say(const std::string& line) const {
    if (!log) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream os;
    os << "[" << std::fixed << std::setprecision(1) << s << "s] " << line;
    log(os.str());
  }
  void record(const fs::path& path) {
    result.artifacts[fs::relative(path, out).generic_string()] = io::file_hash(path);
  }
};

// Trains one forecaster per the plan's forecasting stages and returns its
// test predictions (empty when evaluation is not requested).
struct TrainedModel {
  fc::ForecastModel model;
  std::vector<metrics::Triple> steps;
  metrics::Triple overall;
};

TrainedModel train_one(RunContext& ctx, fc::Variant variant, std::uint64_t seed,
                       const std::shared_ptr<const bank::PatternBank>& b, const fs::path& bank_path,
                       int width, const fs::path& model_path) {
  const auto& plan = ctx.plan;
  const int nodes = ctx.corpus.target.cities.empty() ? 0 : ctx.corpus.target.cities.front().node_count;
  const fc::ForecasterConfig cfg = forecaster_config(plan, variant, seed, width, nodes);
  TrainedModel t{fc::ForecastModel(cfg, variant == fc::Variant::no_meta ? nullptr : b), {}, {}};
  t.model.set_scaler(ctx.scaler);
  const std::string tag = fc::to_string(variant) + " seed " + std::to_string(seed);
  if (plan.stages.count(Stage::meta_train)) {
    const meta::SourcePool pool = meta::make_source_pool(ctx.corpus.source, ctx.scaler, cfg, plan.source_stride);
    meta::MetaConfig mc = plan.meta;
    mc.seed = seed;
    const auto h = meta::reptile_meta_train(t.model, pool, mc);
    ctx.say(tag + ": meta-trained, last query loss " + (h.query_loss.empty() ? "-" : fmt(h.query_loss.back())));
  }
  if (plan.stages.count(Stage::fine_tune)) {
    const auto few = few_shot_samples(ctx.corpus, ctx.scaler, cfg, plan.few_shot_stride);
    meta::FinetuneConfig fcfg = plan.finetune;
    fcfg.seed = seed;
    const auto h = meta::fine_tune(t.model, few, fcfg);
    ctx.say(tag + ": fine-tuned on " + std::to_string(few.size()) + " windows, last train loss " +
            (h.train_loss.empty() ? "-" : fmt(h.train_loss.back())));
  }
  if (!model_path.empty()) {
    fs::create_directories(model_path.parent_path());
    t.model.save(model_path, bank_path);
    ctx.record(model_path);
  }
  if (plan.stages.count(Stage::evaluate)) {
    const auto test = test_samples(ctx.corpus, ctx.scaler, cfg, plan.test_stride);
    const Matrix pred = t.model.predict(test);
    const Matrix target = fc::stacked_targets(test);
    t.steps = horizon_metrics(pred, target, ctx.scaler, cfg.horizon, cfg.channels);
    t.overall = overall_metrics(pred, target, ctx.scaler);
    ctx.say(tag + ": test RMSE " + fmt(t.overall.rmse) + " MAE " + fmt(t.overall.mae));
  }
  return t;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentPlan& plan, const fs::path& out_dir, const Log& log) {
  plan.validate();
  check_dependencies(plan);
  if (plan.deterministic) Eigen::setNbThreads(1);
  fs::create_directories(out_dir);

  const data::CorpusSet corpus = load_or_generate(plan);
  if (corpus.source.cities.empty()) throw DependencyError("corpus has no source cities");
  ExperimentResult result;
  result.metadata["plan"] = to_json(plan);
  result.metadata["plan_hash"] = io::fnv1a_hex(to_json(plan).dump());
  result.metadata["corpus_hash"] = corpus_hash(corpus);
  result.metadata["deterministic"] = plan.deterministic;

  // Encoder.
  const data::Scaler fitted = data::fit_scaler(corpus.source);
  RunContext ctx{plan, out_dir, log, corpus, fitted, result};
  std::optional<mae::PatchAutoencoder> encoder;
  fs::path encoder_path = plan.encoder_path;
  if (plan.stages.count(Stage::pretrain)) {
    ctx.say("pre-training the patch encoder");
    mae::PretrainResult pr = mae::pretrain(corpus.source, plan.encoder, plan.pretrain,
                                           [&](const std::string& line) { ctx.say(line); });
    result.metadata["pretrain"] = {{"val_mse", pr.history.val_mse},
                                   {"train_loss", pr.history.train_loss},
                                   {"best_epoch", pr.history.best_epoch}};
    encoder_path = out_dir / "encoder.tpb";
    pr.model.save(encoder_path);
    ctx.record(encoder_path);
    encoder.emplace(std::move(pr.model));
  } else {
    encoder.emplace(mae::PatchAutoencoder::load(encoder_path));
    result.metadata["encoder_hash"] = io::file_hash(encoder_path);
  }
  const data::Scaler scaler = encoder->scaler();
  ctx.scaler = scaler;
  if (encoder->config().patch_length != plan.forecaster.patch_length ||
      encoder->config().patch_count != plan.forecaster.patch_count) {
    throw DependencyError("encoder checkpoint patch geometry does not match the plan");
  }

  // Banks.
  std::shared_ptr<const bank::PatternBank> kmeans_bank;
  std::shared_ptr<const bank::PatternBank> random_bank;
  fs::path bank_path = plan.bank_path;
  fs::path random_path = plan.random_bank_path;
  std::optional<BankBuild> build;
  if (plan.stages.count(Stage::build_bank)) {
    ctx.say("building pattern banks");
    build.emplace(build_banks(*encoder, corpus.source, plan.bank));
    json table = json::array();
    for (std::size_t i = 0; i < build->selection.grid.size(); ++i) {
      table.push_back({{"k", build->selection.grid[i]}, {"silhouette", build->selection.scores[i]}});
    }
    result.metadata["bank"] = {{"selected_k", build->selection.best_k}, {"silhouette", table}};
    bank_path = out_dir / "bank.tpb";
    random_path = out_dir / "bank_random.tpb";
    bank::save_bank(build->best, bank_path);
    bank::save_bank(build->random, random_path);
    ctx.record(bank_path);
    ctx.record(random_path);
    kmeans_bank = std::make_shared<const bank::PatternBank>(build->best);
    random_bank = std::make_shared<const bank::PatternBank>(build->random);
    ctx.say("selected K = " + std::to_string(build->selection.best_k));
  } else {
    if (!bank_path.empty()) kmeans_bank = std::make_shared<const bank::PatternBank>(bank::load_bank(bank_path));
    if (!random_path.empty()) random_bank = std::make_shared<const bank::PatternBank>(bank::load_bank(random_path));
  }
  if (kmeans_bank && kmeans_bank->width() != encoder->config().width) {
    throw DependencyError("pattern bank width does not match the encoder width");
  }

  const auto& st = plan.stages;
  const bool forecasting = st.count(Stage::meta_train) || st.count(Stage::fine_tune) || st.count(Stage::evaluate);
  const int width = encoder->config().width;
  if (forecasting) {
    for (fc::Variant v : plan.variants) {
      MetricReport report;
      report.variant = fc::to_string(v);
      std::shared_ptr<const bank::PatternBank> b;
      fs::path bp;
      if (v == fc::Variant::no_clu) {
        b = random_bank;
        bp = random_path;
      } else if (v != fc::Variant::no_meta) {
        b = kmeans_bank;
        bp = bank_path;
      }
      if (b) report.metadata["bank_hash"] = b->content_hash();
      for (std::uint64_t seed : plan.seeds) {
        const fs::path model_path = out_dir / "models" / (report.variant + "_s" + std::to_string(seed) + ".tpb");
        TrainedModel t = train_one(ctx, v, seed, b, bp, width, model_path);
        if (st.count(Stage::evaluate)) {
          report.seeds.push_back(seed);
          report.per_seed.push_back(t.steps);
          report.overall.push_back(t.overall);
        }
      }
      if (st.count(Stage::evaluate)) {
        summarize(report);
        report.metadata["corpus_hash"] = result.metadata["corpus_hash"];
        report.metadata["plan_hash"] = result.metadata["plan_hash"];
        result.reports.push_back(std::move(report));
      }
    }
  }

  if (plan.k_sweep) {
    for (std::size_t i = 0; i < build->selection.grid.size(); ++i) {
      const int k = build->selection.grid[i];
      const fs::path kp = out_dir / "sweep" / ("bank_k" + std::to_string(k) + ".tpb");
      fs::create_directories(kp.parent_path());
      bank::save_bank(build->selection.results[i].bank, kp);
      ctx.record(kp);
      auto b = std::make_shared<const bank::PatternBank>(build->selection.results[i].bank);
      ExperimentPlan sweep_plan = plan;
      sweep_plan.stages.insert(Stage::evaluate);
      RunContext sweep_ctx{sweep_plan, out_dir, log, corpus, scaler, result, ctx.start};
      TrainedModel t = train_one(sweep_ctx, fc::Variant::full, plan.seeds.front(), b, kp, width, {});
      result.k_sweep.push_back({k, build->selection.scores[i], t.overall.rmse, t.overall.mae});
    }
    std::ostringstream csv;
    csv << std::setprecision(17) << "k,silhouette,rmse,mae\n";
    for (const auto& row : result.k_sweep) csv << row.k << ',' << row.silhouette << ',' << row.rmse << ',' << row.mae << '\n';
    write_text(out_dir / "ksweep.csv", csv.str());
    ctx.record(out_dir / "ksweep.csv");
  }

  if (!result.reports.empty()) {
    write_text(out_dir / "report.txt", format_reports(result.reports, {1, std::min(3, plan.forecaster.horizon),
                                                                       plan.forecaster.horizon}));
    write_text(out_dir / "metrics.csv", reports_csv(result.reports));
    ctx.record(out_dir / "report.txt");
    ctx.record(out_dir / "metrics.csv");
  }
  json body = to_json(result);
  body["content_hash"] = io::fnv1a_hex(to_json(result).dump());
  write_text(out_dir / "report.json", body.dump(2) + "\n");
  return result;
}

void export_embeddings(const mae::PatchAutoencoder& encoder, const data::CityCorpus& corpus, const fs::path& path,
                       const bank::PatternBank* b) {
  const bank::CorpusEmbedding emb = bank::embed_corpus(encoder, corpus);
  std::vector<std::int32_t> labels(static_cast<std::size_t>(emb.values.rows()), -1);
  if (b != nullptr) {
    if (b->width() != emb.values.cols()) throw ShapeError("export_embeddings: bank width differs from the encoder");
    const auto nearest = bank::nearest_centroid(bank::normalize_rows(emb.values), b->matrix());
    std::copy(nearest.begin(), nearest.end(), labels.begin());
  }
  io::Archive a;
  a.meta()["rows"] = emb.values.rows();
  a.meta()["d"] = emb.values.cols();
  a.meta()["patch_count"] = emb.patch_count;
  a.meta()["bank_hash"] = b != nullptr ? b->content_hash() : std::string();
  a.put("embeddings", emb.values, io::Archive::DType::f64);
  a.put_i32("labels", labels, {static_cast<std::int64_t>(labels.size())});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  a.save(path, kEmbeddingMagic);
}

EmbeddingDump load_embeddings(const fs::path& path) {
  const io::Archive a = io::Archive::load(path, kEmbeddingMagic);
  EmbeddingDump d;
  d.values = a.matrix("embeddings");
  const auto labels = a.ints("labels");
  d.labels.assign(labels.begin(), labels.end());
  if (d.labels.size() != static_cast<std::size_t>(d.values.rows())) {
    throw CorruptFileError("embedding file: label count differs from row count");
  }
  return d;
}

}  // namespace tpb::exp
