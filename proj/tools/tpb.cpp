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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "tpb/archive.hpp"
#include "tpb/errors.hpp"
#include "tpb/experiment.hpp"

namespace fs = std::filesystem;
using namespace tpb;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDependency = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "JSON config (plan) file");
  cmd->add_option("--seed", c.seed, "Seed for every stochastic component");
  cmd->add_flag("--deterministic", c.deterministic, "Single-threaded, bitwise reproducible run");
  cmd->add_option("--out", c.out, out_help);
}

exp::ExperimentPlan make_plan(const Common& c) {
  exp::ExperimentPlan plan = c.config.empty() ? exp::ExperimentPlan{} : exp::load_plan(c.config);
  if (c.seed) plan.set_seed(*c.seed);
  if (c.deterministic) plan.deterministic = true;
  if (plan.deterministic) Eigen::setNbThreads(1);
  return plan;
}

// --data, then TPB_DATA_DIR, then the plan's data_dir; empty means generate.
fs::path data_dir(const std::string& flag, const exp::ExperimentPlan& plan) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("TPB_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return plan.data_dir;
}

data::CorpusSet corpus_for(const std::string& flag, exp::ExperimentPlan& plan) {
  plan.data_dir = data_dir(flag, plan);
  return exp::load_or_generate(plan);
}

fs::path require_out(const Common& c, const fs::path& fallback) {
  return c.out.empty() ? fallback : fs::path(c.out);
}

void say(const std::string& line) { std::cerr << line << '\n'; }

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::shared_ptr<const bank::PatternBank> load_shared_bank(const fs::path& p) {
  return std::make_shared<const bank::PatternBank>(bank::load_bank(p));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Traffic pattern bank: pre-training, bank construction and few-shot forecasting"};
  app.require_subcommand(1);

  // generate-data
  Common gen_c;
  auto* gen = app.add_subcommand("generate-data", "Write the synthetic source, target and test corpus");
  add_common(gen, gen_c, "Corpus directory (default: $TPB_DATA_DIR or ./data)");

  // pretrain
  Common pre_c;
  std::string pre_data;
  auto* pre = app.add_subcommand("pretrain", "Masked patch autoencoder pre-training on the source cities");
  add_common(pre, pre_c, "Encoder checkpoint (default: encoder.tpb)");
  pre->add_option("--data", pre_data, "Corpus directory");

  // build-bank
  Common bank_c;
  std::string bank_encoder;
  std::string bank_data;
  std::string bank_random;
  std::string bank_embeddings;
  std::optional<int> bank_k;
  auto* bb = app.add_subcommand("build-bank", "Cluster source patch embeddings into a pattern bank");
  add_common(bb, bank_c, "Bank file (default: bank.tpb)");
  bb->add_option("--encoder", bank_encoder, "Encoder checkpoint")->required();
  bb->add_option("--data", bank_data, "Corpus directory");
  bb->add_option("--k", bank_k, "Fix K instead of selecting it by silhouette");
  bb->add_option("--random-out", bank_random, "Also write a bank of random embeddings at the same K");
  bb->add_option("--embeddings", bank_embeddings, "Also export all patch embeddings with bank labels");

  // sweep-k
  Common sweep_c;
  std::string sweep_encoder;
  std::string sweep_data;
  bool sweep_forecast = false;
  auto* sweep = app.add_subcommand("sweep-k", "Silhouette (and optionally test RMSE) across the K grid");
  add_common(sweep, sweep_c, "Output directory (default: sweep)");
  sweep->add_option("--encoder", sweep_encoder, "Encoder checkpoint")->required();
  sweep->add_option("--data", sweep_data, "Corpus directory");
  sweep->add_flag("--forecast", sweep_forecast, "Train and evaluate the full model at every K");

  // meta-train
  Common meta_c;
  std::string meta_bank;
  std::string meta_encoder;
  std::string meta_data;
  std::string meta_variant = "full";
  auto* mt = app.add_subcommand("meta-train", "Reptile meta-training of a forecaster on the source cities");
  add_common(mt, meta_c, "Model checkpoint (default: model.tpb)");
  mt->add_option("--bank", meta_bank, "Pattern bank (not needed for no_meta)");
  mt->add_option("--encoder", meta_encoder, "Encoder checkpoint (supplies the scaler and width)")->required();
  mt->add_option("--data", meta_data, "Corpus directory");
  mt->add_option("--variant", meta_variant, "full | no_meta | no_adj | no_clu");

  // fine-tune
  Common ft_c;
  std::string ft_model;
  std::string ft_target;
  std::string ft_bank;
  auto* ft = app.add_subcommand("fine-tune", "Fine-tune a forecaster on the few-shot target span");
  add_common(ft, ft_c, "Model checkpoint (default: overwrite --model)");
  ft->add_option("--model", ft_model, "Model checkpoint")->required();
  ft->add_option("--target", ft_target, "Corpus directory holding the few-shot target span");
  ft->add_option("--bank", ft_bank, "Pattern bank (default: the one recorded in the model)");

  // evaluate
  Common ev_c;
  std::string ev_model;
  std::string ev_data;
  std::string ev_bank;
  auto* ev = app.add_subcommand("evaluate", "Test-span RMSE, MAE and MAPE of a forecaster");
  add_common(ev, ev_c, "Report file (default: report.json)");
  ev->add_option("--model", ev_model, "Model checkpoint")->required();
  ev->add_option("--data", ev_data, "Corpus directory");
  ev->add_option("--bank", ev_bank, "Pattern bank (default: the one recorded in the model)");

  // run
  Common run_c;
  std::string run_data;
  auto* run = app.add_subcommand("run", "Run an experiment plan: stages, variants, seeds and K sweep");
  add_common(run, run_c, "Output directory (default: runs/latest)");
  run->add_option("--data", run_data, "Corpus directory");

  // show-config
  Common show_c;
  auto* show = app.add_subcommand("show-config", "Print the effective plan as JSON");
  add_common(show, show_c, "Write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (show->parsed()) {
      const exp::ExperimentPlan plan = make_plan(show_c);
      plan.validate();
      if (show_c.out.empty()) {
        std::cout << exp::to_json(plan).dump(2) << '\n';
      } else {
        write_json(show_c.out, exp::to_json(plan));
      }
      return 0;
    }

    if (gen->parsed()) {
      exp::ExperimentPlan plan = make_plan(gen_c);
      if (gen_c.seed) plan.synth.seed = *gen_c.seed;
      fs::path out = gen_c.out;
      if (out.empty()) {
        const char* env = std::getenv("TPB_DATA_DIR");
        out = env != nullptr && *env != '\0' ? fs::path(env) : fs::path("data");
      }
      const data::CorpusSet set = data::generate_corpus(plan.synth);
      data::save_corpus_dir(out, set.source, set.target, set.test);
      std::cout << "wrote " << set.source.cities.size() << " source, " << set.target.cities.size() << " target and "
                << set.test.cities.size() << " test series to " << out.string() << "\n"
                << "corpus hash " << exp::corpus_hash(set) << "\n";
      return 0;
    }

    if (pre->parsed()) {
      exp::ExperimentPlan plan = make_plan(pre_c);
      const data::CorpusSet set = corpus_for(pre_data, plan);
      const fs::path out = require_out(pre_c, "encoder.tpb");
      mae::PretrainResult r = mae::pretrain(set.source, plan.encoder, plan.pretrain, say);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      r.model.save(out);
      const auto& h = r.history.val_mse;
      std::cout << "validation masked MSE " << h.front() << " -> " << h[static_cast<std::size_t>(r.history.best_epoch)]
                << " (best epoch " << r.history.best_epoch << ")\n"
                << "wrote " << out.string() << " " << io::file_hash(out) << "\n";
      return 0;
    }

    if (bb->parsed()) {
      exp::ExperimentPlan plan = make_plan(bank_c);
      if (bank_k) plan.bank.k_grid = {*bank_k};
      plan.validate();
      const data::CorpusSet set = corpus_for(bank_data, plan);
      const mae::PatchAutoencoder enc = mae::PatchAutoencoder::load(bank_encoder);
      const exp::BankBuild b = exp::build_banks(enc, set.source, plan.bank);
      const fs::path out = require_out(bank_c, "bank.tpb");
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      bank::save_bank(b.best, out);
      std::cout << "K\tsilhouette\n";
      for (std::size_t i = 0; i < b.selection.grid.size(); ++i) {
        std::cout << b.selection.grid[i] << '\t' << b.selection.scores[i] << '\n';
      }
      std::cout << "selected K = " << b.selection.best_k << "\nwrote " << out.string() << " "
                << b.best.content_hash() << "\n";
      if (!bank_random.empty()) {
        bank::save_bank(b.random, bank_random);
        std::cout << "wrote " << bank_random << " " << b.random.content_hash() << "\n";
      }
      if (!bank_embeddings.empty()) {
        exp::export_embeddings(enc, set.source, bank_embeddings, &b.best);
        std::cout << "wrote " << bank_embeddings << "\n";
      }
      return 0;
    }

    if (sweep->parsed()) {
      exp::ExperimentPlan plan = make_plan(sweep_c);
      plan.data_dir = data_dir(sweep_data, plan);
      const fs::path out = require_out(sweep_c, "sweep");
      if (sweep_forecast) {
        plan.stages = {exp::Stage::build_bank, exp::Stage::meta_train, exp::Stage::fine_tune, exp::Stage::evaluate};
        plan.encoder_path = sweep_encoder;
        plan.variants = {fc::Variant::full};
        plan.k_sweep = true;
        const exp::ExperimentResult r = exp::run_experiment(plan, out, say);
        std::cout << "K\tsilhouette\trmse\tmae\n";
        for (const auto& row : r.k_sweep) {
          std::cout << row.k << '\t' << row.silhouette << '\t' << row.rmse << '\t' << row.mae << '\n';
        }
      } else {
        plan.validate();
        const data::CorpusSet set = exp::load_or_generate(plan);
        const mae::PatchAutoencoder enc = mae::PatchAutoencoder::load(sweep_encoder);
        const exp::BankBuild b = exp::build_banks(enc, set.source, plan.bank);
        fs::create_directories(out);
        std::ofstream csv(out / "silhouette.csv");
        csv.precision(17);
        csv << "k,silhouette\n";
        std::cout << "K\tsilhouette\n";
        for (std::size_t i = 0; i < b.selection.grid.size(); ++i) {
          csv << b.selection.grid[i] << ',' << b.selection.scores[i] << '\n';
          std::cout << b.selection.grid[i] << '\t' << b.selection.scores[i] << '\n';
        }
        std::cout << "selected K = " << b.selection.best_k << "\n";
      }
      return 0;
    }

    if (mt->parsed()) {
      exp::ExperimentPlan plan = make_plan(meta_c);
      plan.validate();
      const fc::Variant variant = fc::parse_variant(meta_variant);
      const bool needs_bank = variant != fc::Variant::no_meta;
      if (needs_bank && meta_bank.empty()) throw DependencyError("--bank is required for variant " + meta_variant);
      if (needs_bank && !fs::exists(meta_bank)) throw DependencyError("pattern bank not found: " + meta_bank);
      if (!fs::exists(meta_encoder)) throw DependencyError("encoder checkpoint not found: " + meta_encoder);
      const data::CorpusSet set = corpus_for(meta_data, plan);
      const mae::PatchAutoencoder enc = mae::PatchAutoencoder::load(meta_encoder);
      auto b = needs_bank ? load_shared_bank(meta_bank) : nullptr;
      if (variant == fc::Variant::no_clu && b->provenance().method != "random") {
        throw ConfigError("no_clu needs a random bank (build-bank --random-out)");
      }
      const int nodes = set.target.cities.empty() ? 0 : set.target.cities.front().node_count;
      const std::uint64_t seed = plan.seeds.front();
      fc::ForecastModel model(exp::forecaster_config(plan, variant, seed, enc.config().width, nodes), b);
      model.set_scaler(enc.scaler());
      const auto pool = meta::make_source_pool(set.source, enc.scaler(), model.config(), plan.source_stride);
      meta::MetaConfig mc = plan.meta;
      mc.seed = seed;
      meta::reptile_meta_train(model, pool, mc, say);
      const fs::path out = require_out(meta_c, "model.tpb");
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      model.save(out, needs_bank ? fs::path(meta_bank) : fs::path());
      std::cout << "wrote " << out.string() << " " << io::file_hash(out) << "\n";
      return 0;
    }

    if (ft->parsed()) {
      exp::ExperimentPlan plan = make_plan(ft_c);
      plan.validate();
      if (!fs::exists(ft_model)) throw DependencyError("model checkpoint not found: " + ft_model);
      const fs::path bank_path = ft_bank.empty() ? fc::ForecastModel::recorded_bank_path(ft_model) : fs::path(ft_bank);
      fc::ForecastModel model = fc::ForecastModel::load(ft_model, ft_bank);
      const data::CorpusSet set = corpus_for(ft_target, plan);
      if (set.target.cities.empty()) throw ConfigError("the corpus has no few-shot target span");
      const auto few = exp::few_shot_samples(set, model.scaler(), model.config(), plan.few_shot_stride);
      meta::FinetuneConfig cfg = plan.finetune;
      cfg.seed = plan.seeds.front();
      const auto h = meta::fine_tune(model, few, cfg, say);
      const fs::path out = require_out(ft_c, ft_model);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      model.save(out, bank_path);
      std::cout << "fine-tuned on " << few.size() << " windows, final train loss "
                << (h.train_loss.empty() ? 0.0 : h.train_loss.back()) << "\nwrote " << out.string() << " "
                << io::file_hash(out) << "\n";
      return 0;
    }

    if (ev->parsed()) {
      exp::ExperimentPlan plan = make_plan(ev_c);
      if (!fs::exists(ev_model)) throw DependencyError("model checkpoint not found: " + ev_model);
      const fc::ForecastModel model = fc::ForecastModel::load(ev_model, ev_bank);
      const data::CorpusSet set = corpus_for(ev_data, plan);
      const auto test = exp::test_samples(set, model.scaler(), model.config(), plan.test_stride);
      const Matrix pred = model.predict(test);
      const Matrix target = fc::stacked_targets(test);
      exp::MetricReport r;
      r.variant = fc::to_string(model.config().variant);
      r.seeds = {model.config().seed};
      r.per_seed = {exp::horizon_metrics(pred, target, model.scaler(), model.config().horizon, model.config().channels)};
      r.overall = {exp::overall_metrics(pred, target, model.scaler())};
      exp::summarize(r);
      r.metadata = {{"model_hash", io::file_hash(ev_model)},
                    {"bank_hash", model.bank() ? model.bank()->content_hash() : std::string()},
                    {"corpus_hash", exp::corpus_hash(set)},
                    {"test_windows", test.size()}};
      const int h = model.config().horizon;
      std::cout << exp::format_reports({r}, {1, std::min(3, h), h});
      const fs::path out = require_out(ev_c, "report.json");
      write_json(out, exp::to_json(r));
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (run->parsed()) {
      exp::ExperimentPlan plan = make_plan(run_c);
      plan.data_dir = data_dir(run_data, plan);
      const fs::path out = require_out(run_c, "runs/latest");
      const exp::ExperimentResult r = exp::run_experiment(plan, out, say);
      if (!r.reports.empty()) {
        const int h = plan.forecaster.horizon;
        std::cout << exp::format_reports(r.reports, {1, std::min(3, h), h});
      }
      for (const auto& row : r.k_sweep) {
        std::cout << "K=" << row.k << " silhouette " << row.silhouette << " rmse " << row.rmse << "\n";
      }
      std::cout << "wrote " << (out / "report.json").string() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return kExitDependency;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
