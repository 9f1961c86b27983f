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

#include "tpb/patch_autoencoder.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "tpb/archive.hpp"
#include "tpb/errors.hpp"
#include "tpb/optim.hpp"

namespace tpb::mae {

namespace {

constexpr std::string_view kCheckpointMagic = "TPBAENC1";
constexpr int kEvalBatch = 16;

void check_windows(const AutoencoderConfig& cfg, std::span<const data::PatchWindow> windows) {
  if (windows.empty()) throw ShapeError("autoencoder: no windows");
  for (const auto& w : windows) {
    if (w.patches.cols() != cfg.patch_width()) {
      throw ShapeError("autoencoder: patch width does not match T0*C");
    }
    if (w.patch_count() != cfg.patch_count) {
      throw ShapeError("autoencoder: window patch count does not match P");
    }
    if (static_cast<int>(w.mask.size()) != w.patch_count() ||
        static_cast<int>(w.hour_of_week.size()) != w.patch_count()) {
      throw ShapeError("autoencoder: mask / hour index length mismatch");
    }
    for (int h : w.hour_of_week) {
      if (h < 0 || h >= data::kHoursPerWeek) throw ShapeError("autoencoder: hour index out of range");
    }
  }
}

}  // namespace

void AutoencoderConfig::validate() const {
  if (width <= 0 || encoder_layers <= 0 || decoder_layers <= 0 || heads <= 0 || ff_multiplier <= 0) {
    throw ConfigError("autoencoder dimensions must be positive");
  }
  if (width % heads != 0) throw ConfigError("autoencoder width must be divisible by heads");
  if (patch_length <= 0 || patch_count <= 0 || channels <= 0) {
    throw ConfigError("patch_length, patch_count and channels must be positive");
  }
  if (pe_dropout < 0.0 || pe_dropout >= 1.0) throw ConfigError("pe_dropout must be in [0, 1)");
}

PatchAutoencoder::PatchAutoencoder(AutoencoderConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(cfg_.seed, 0x656e63ULL);
  const int d = cfg_.width;
  enc_.input = nn::make_linear(params_, "enc.input", cfg_.patch_width(), d, rng);
  enc_.positional = params_.add("enc.positional", nn::uniform_matrix(data::kHoursPerWeek, d, -0.02, 0.02, rng));
  // Residual branches start at 1/sqrt(2L) of the Xavier scale when depth scaling is on.
  auto branch = [&](int layers) { return cfg_.depth_scaled_init ? 1.0 / std::sqrt(2.0 * layers) : 1.0; };
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    enc_.layers.push_back(nn::make_transformer_block(params_, "enc.layer" + std::to_string(l), d, cfg_.heads,
                                                     cfg_.ff_multiplier * d, rng, branch(cfg_.encoder_layers)));
  }
  dec_.mask_token = params_.add("dec.mask_token", nn::normal_matrix(1, d, 0.02, rng));
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    dec_.layers.push_back(nn::make_transformer_block(params_, "dec.layer" + std::to_string(l), d, cfg_.heads,
                                                     cfg_.ff_multiplier * d, rng, branch(cfg_.decoder_layers)));
  }
  dec_.output = nn::make_linear(params_, "dec.output", d, cfg_.patch_width(), rng);
}

template <class Self, class Store>
ad::Var PatchAutoencoder::encode_impl(Self& self, Store& store, ad::Graph& g,
                                      std::span<const data::PatchWindow> windows, Rng* dropout_rng) {
  const AutoencoderConfig& cfg = self.cfg_;
  check_windows(cfg, windows);
  std::vector<int> hours;
  std::vector<int> segments;
  int tokens = 0;
  for (const auto& w : windows) {
    const int n = w.unmasked_count();
    if (n == 0) throw ShapeError("encode: every patch of a window is masked");
    segments.push_back(n);
    tokens += n;
  }
  Matrix x(tokens, cfg.patch_width());
  int row = 0;
  for (const auto& w : windows) {
    for (int j = 0; j < w.patch_count(); ++j) {
      if (!w.mask[j]) {
        x.row(row++) = w.patches.row(j);
        hours.push_back(w.hour_of_week[j]);
      }
    }
  }
  ad::Var h = nn::apply(g, store, self.enc_.input, g.constant(std::move(x)));
  ad::Var pe = ad::gather_rows(g.param(store[self.enc_.positional]), std::move(hours));
  if (dropout_rng != nullptr && cfg.pe_dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - cfg.pe_dropout);
    Matrix m(pe.rows(), pe.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = keep(*dropout_rng) ? 1.0 / (1.0 - cfg.pe_dropout) : 0.0;
    }
    pe = ad::mul_const(pe, m);
  }
  h = ad::add(h, pe);
  const Matrix bias = nn::segment_attention_bias(segments);
  const Matrix* bias_ptr = segments.size() > 1 ? &bias : nullptr;
  for (const auto& layer : self.enc_.layers) {
    h = nn::transformer_block(g, store, layer, h, bias_ptr);
  }
  return h;
}

template <class Self, class Store>
ad::Var PatchAutoencoder::decode_impl(Self& self, Store& store, ad::Graph& g, ad::Var embeddings,
                                      std::span<const data::PatchWindow> windows) {
  const AutoencoderConfig& cfg = self.cfg_;
  check_windows(cfg, windows);
  int tokens = 0;
  for (const auto& w : windows) tokens += w.unmasked_count();
  if (embeddings.rows() != tokens) {
    throw ShapeError("decode: embedding rows do not match the unmasked patch count");
  }
  if (embeddings.cols() != cfg.width) throw ShapeError("decode: embedding width mismatch");

  std::vector<int> pick;
  std::vector<int> hours;
  std::vector<int> segments;
  int next = 0;
  for (const auto& w : windows) {
    for (int j = 0; j < w.patch_count(); ++j) {
      pick.push_back(w.mask[j] ? tokens : next++);
      hours.push_back(w.hour_of_week[j]);
    }
    segments.push_back(w.patch_count());
  }
  const std::vector<ad::Var> parts{embeddings, g.param(store[self.dec_.mask_token])};
  ad::Var seq = ad::gather_rows(ad::concat_rows(parts), std::move(pick));
  seq = ad::add(seq, ad::gather_rows(g.param(store[self.enc_.positional]), std::move(hours)));
  const Matrix bias = nn::segment_attention_bias(segments);
  const Matrix* bias_ptr = segments.size() > 1 ? &bias : nullptr;
  for (const auto& layer : self.dec_.layers) {
    seq = nn::transformer_block(g, store, layer, seq, bias_ptr);
  }
  return nn::apply(g, store, self.dec_.output, seq);
}

ad::Var PatchAutoencoder::encode(ad::Graph& g, std::span<const data::PatchWindow> windows, Rng* dropout_rng) {
  return encode_impl(*this, params_, g, windows, dropout_rng);
}

ad::Var PatchAutoencoder::encode(ad::Graph& g, std::span<const data::PatchWindow> windows) const {
  return encode_impl(*this, params_, g, windows, nullptr);
}

ad::Var PatchAutoencoder::decode(ad::Graph& g, ad::Var embeddings, std::span<const data::PatchWindow> windows) {
  return decode_impl(*this, params_, g, embeddings, windows);
}

ad::Var PatchAutoencoder::decode(ad::Graph& g, ad::Var embeddings,
                                 std::span<const data::PatchWindow> windows) const {
  return decode_impl(*this, params_, g, embeddings, windows);
}

Matrix PatchAutoencoder::encode(const data::PatchWindow& window) const {
  ad::Graph g(false);
  return encode(g, std::span<const data::PatchWindow>(&window, 1)).value();
}

Matrix PatchAutoencoder::decode(const Matrix& embeddings, const data::PatchWindow& window) const {
  ad::Graph g(false);
  return decode(g, g.constant(embeddings), std::span<const data::PatchWindow>(&window, 1)).value();
}

Matrix PatchAutoencoder::reconstruct(const data::PatchWindow& window) const {
  ad::Graph g(false);
  const std::span<const data::PatchWindow> one(&window, 1);
  return decode(g, encode(g, one), one).value();
}

void PatchAutoencoder::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  io::Archive a;
  a.meta() = extra.is_object() ? extra : nlohmann::json::object();
  a.meta()["d"] = cfg_.width;
  a.meta()["L_E"] = cfg_.encoder_layers;
  a.meta()["L_D"] = cfg_.decoder_layers;
  a.meta()["heads"] = cfg_.heads;
  a.meta()["ff_multiplier"] = cfg_.ff_multiplier;
  a.meta()["T0"] = cfg_.patch_length;
  a.meta()["P"] = cfg_.patch_count;
  a.meta()["C"] = cfg_.channels;
  a.meta()["pe_dropout"] = cfg_.pe_dropout;
  a.meta()["depth_scaled_init"] = cfg_.depth_scaled_init;
  a.meta()["seed"] = cfg_.seed;
  a.meta()["scaler_mean"] = scaler_.mean;
  a.meta()["scaler_std"] = scaler_.stddev;
  for (const auto& p : params_) {
    a.put(p.name, p.value, io::Archive::DType::f64);
  }
  a.save(path, kCheckpointMagic);
}

PatchAutoencoder PatchAutoencoder::load(const std::filesystem::path& path) {
  const io::Archive a = io::Archive::load(path, kCheckpointMagic);
  AutoencoderConfig cfg;
  try {
    const auto& m = a.meta();
    cfg.width = m.at("d").get<int>();
    cfg.encoder_layers = m.at("L_E").get<int>();
    cfg.decoder_layers = m.at("L_D").get<int>();
    cfg.heads = m.at("heads").get<int>();
    cfg.ff_multiplier = m.at("ff_multiplier").get<int>();
    cfg.patch_length = m.at("T0").get<int>();
    cfg.patch_count = m.at("P").get<int>();
    cfg.channels = m.at("C").get<int>();
    cfg.pe_dropout = m.at("pe_dropout").get<double>();
    cfg.depth_scaled_init = m.at("depth_scaled_init").get<bool>();
    cfg.seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptFileError(std::string("autoencoder checkpoint header: ") + ex.what());
  }
  PatchAutoencoder model(cfg);
  for (auto& p : model.params_) {
    Matrix v = a.matrix(p.name);
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw CorruptFileError("autoencoder checkpoint: shape mismatch for " + p.name);
    }
    p.value = std::move(v);
  }
  model.scaler_.mean = a.meta().value("scaler_mean", 0.0);
  model.scaler_.stddev = a.meta().value("scaler_std", 1.0);
  return model;
}

double pretrain_loss(const Matrix& patches, const Matrix& reconstruction, const std::vector<bool>& mask) {
  if (patches.rows() != reconstruction.rows() || patches.cols() != reconstruction.cols() ||
      static_cast<Eigen::Index>(mask.size()) != patches.rows()) {
    throw ShapeError("pretrain_loss: shape mismatch");
  }
  double acc = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index j = 0; j < patches.rows(); ++j) {
    if (!mask[static_cast<std::size_t>(j)]) continue;
    acc += (patches.row(j) - reconstruction.row(j)).squaredNorm();
    count += patches.cols();
  }
  if (count == 0) throw ShapeError("pretrain_loss: no masked patches");
  return acc / static_cast<double>(count);
}

ad::Var pretrain_loss(ad::Var reconstruction, const Matrix& patches, const std::vector<bool>& mask) {
  if (std::none_of(mask.begin(), mask.end(), [](bool m) { return m; })) {
    throw ShapeError("pretrain_loss: no masked patches");
  }
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
  return ad::row_weighted_mse(reconstruction, patches, w);
}

void PretrainConfig::validate() const {
  if (batch_size <= 0 || epochs < 0) throw ConfigError("batch_size must be positive, epochs non-negative");
  if (lr < 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("invalid optimizer settings");
  }
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) {
    throw ConfigError("pre-training mask_ratio must be in (0, 1)");
  }
}

std::vector<data::PatchWindow> make_windows(const data::CityCorpus& corpus,
                                            std::span<const data::NodeWindowRef> refs,
                                            const data::Scaler& scaler, int patch_length,
                                            int patch_count) {
  std::vector<data::PatchWindow> out;
  out.reserve(refs.size());
  for (const auto& r : refs) {
    data::PatchWindow w = data::patchify(corpus.cities.at(static_cast<std::size_t>(r.city)), r.node,
                                         r.start_step, patch_length, patch_count);
    w.patches = w.patches.unaryExpr([&](double v) { return scaler.forward(v); });
    out.push_back(std::move(w));
  }
  return out;
}

void assign_masks(std::span<data::PatchWindow> windows, double mask_ratio, Rng& rng) {
  for (auto& w : windows) {
    w.mask = data::sample_mask(w.patch_count(), mask_ratio, rng);
  }
}

namespace {

Matrix stacked_patches(std::span<const data::PatchWindow> windows) {
  Eigen::Index rows = 0;
  for (const auto& w : windows) rows += w.patches.rows();
  Matrix out(rows, windows.front().patches.cols());
  Eigen::Index at = 0;
  for (const auto& w : windows) {
    out.middleRows(at, w.patches.rows()) = w.patches;
    at += w.patches.rows();
  }
  return out;
}

std::vector<bool> stacked_mask(std::span<const data::PatchWindow> windows) {
  std::vector<bool> out;
  for (const auto& w : windows) out.insert(out.end(), w.mask.begin(), w.mask.end());
  return out;
}

template <class Fn>
void for_each_batch(std::span<const data::PatchWindow> windows, Fn&& fn) {
  for (std::size_t at = 0; at < windows.size(); at += kEvalBatch) {
    const std::size_t n = std::min<std::size_t>(kEvalBatch, windows.size() - at);
    fn(windows.subspan(at, n));
  }
}

}  // namespace

double masked_mse(const PatchAutoencoder& model, std::span<const data::PatchWindow> windows) {
  double acc = 0.0;
  double count = 0.0;
  for_each_batch(windows, [&](std::span<const data::PatchWindow> batch) {
    ad::Graph g(false);
    const Matrix rec = model.decode(g, model.encode(g, batch), batch).value();
    const Matrix target = stacked_patches(batch);
    const auto mask = stacked_mask(batch);
    for (Eigen::Index j = 0; j < target.rows(); ++j) {
      if (!mask[static_cast<std::size_t>(j)]) continue;
      acc += (target.row(j) - rec.row(j)).squaredNorm();
      count += static_cast<double>(target.cols());
    }
  });
  if (count == 0.0) throw ShapeError("masked_mse: no masked patches");
  return acc / count;
}

metrics::Triple masked_metrics(const Matrix& patches, const Matrix& reconstruction,
                               const std::vector<bool>& mask, const data::Scaler& scaler) {
  if (patches.rows() != reconstruction.rows() || patches.cols() != reconstruction.cols() ||
      static_cast<Eigen::Index>(mask.size()) != patches.rows()) {
    throw ShapeError("masked_metrics: shape mismatch");
  }
  std::vector<double> y;
  std::vector<double> y_hat;
  for (Eigen::Index j = 0; j < patches.rows(); ++j) {
    if (!mask[static_cast<std::size_t>(j)]) continue;
    for (Eigen::Index c = 0; c < patches.cols(); ++c) {
      y.push_back(scaler.inverse(patches(j, c)));
      y_hat.push_back(scaler.inverse(reconstruction(j, c)));
    }
  }
  return metrics::all(y, y_hat);
}

metrics::Triple reconstruction_report(const PatchAutoencoder& model,
                                      std::span<const data::PatchWindow> windows) {
  std::vector<Matrix> targets;
  std::vector<Matrix> recs;
  std::vector<bool> mask;
  Eigen::Index rows = 0;
  for_each_batch(windows, [&](std::span<const data::PatchWindow> batch) {
    ad::Graph g(false);
    recs.push_back(model.decode(g, model.encode(g, batch), batch).value());
    targets.push_back(stacked_patches(batch));
    const auto m = stacked_mask(batch);
    mask.insert(mask.end(), m.begin(), m.end());
    rows += targets.back().rows();
  });
  Matrix all_targets(rows, windows.front().patches.cols());
  Matrix all_recs(rows, windows.front().patches.cols());
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    all_targets.middleRows(at, targets[i].rows()) = targets[i];
    all_recs.middleRows(at, recs[i].rows()) = recs[i];
    at += targets[i].rows();
  }
  return masked_metrics(all_targets, all_recs, mask, model.scaler());
}

PretrainResult pretrain(const data::CityCorpus& source, const AutoencoderConfig& model_cfg,
                        const PretrainConfig& cfg, const std::function<void(const std::string&)>& log) {
  cfg.validate();
  model_cfg.validate();
  if (source.cities.empty()) throw ConfigError("pretrain: empty source corpus");

  Rng split_rng = make_rng(cfg.seed, 1);
  data::SourceSplit split =
      data::split_source(source, model_cfg.patch_length, model_cfg.patch_count, cfg.split, split_rng);
  if (split.train.empty()) throw ConfigError("pretrain: no training windows in the source corpus");

  AutoencoderConfig mc = model_cfg;
  PatchAutoencoder model(mc);
  model.set_scaler(data::fit_scaler(source));

  std::vector<data::PatchWindow> train =
      make_windows(source, split.train, model.scaler(), mc.patch_length, mc.patch_count);
  std::vector<data::PatchWindow> val = make_windows(
      source, split.val.empty() ? split.train : split.val, model.scaler(), mc.patch_length, mc.patch_count);
  Rng val_rng = make_rng(cfg.seed, 2);
  assign_masks(val, cfg.mask_ratio, val_rng);

  PretrainHistory history;
  history.val_mse.push_back(masked_mse(model, val));
  history.train_loss.push_back(std::numeric_limits<double>::quiet_NaN());
  PatchAutoencoder best = model;
  double best_val = history.val_mse.front();
  if (log) {
    std::ostringstream os;
    os << "epoch 0 val_mse " << best_val;
    log(os.str());
  }

  optim::Adam adam({.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2});
  Rng rng = make_rng(cfg.seed, 3);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<data::PatchWindow> batch;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      batch.clear();
      for (std::size_t i = at; i < std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        batch.push_back(train[order[i]]);
        batch.back().mask = data::sample_mask(batch.back().patch_count(), cfg.mask_ratio, rng);
      }
      model.params().zero_grad();
      ad::Graph g(true);
      ad::Var rec = model.decode(g, model.encode(g, batch, &rng), batch);
      ad::Var loss = pretrain_loss(rec, stacked_patches(batch), stacked_mask(batch));
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "pretrain: non-finite loss at epoch " << epoch << ", batch " << batches
           << " (first window node " << batch.front().node << ", start "
           << batch.front().start_step << ")";
        throw NumericError(os.str());
      }
      g.backward(loss);
      adam.step(model.params());
      loss_sum += value;
      ++batches;
    }
    const double v = masked_mse(model, val);
    history.val_mse.push_back(v);
    history.train_loss.push_back(loss_sum / std::max(batches, 1));
    if (v < best_val) {
      best_val = v;
      best = model;
      history.best_epoch = epoch;
    }
    if (log) {
      std::ostringstream os;
      os << "epoch " << epoch << " train_loss " << history.train_loss.back() << " val_mse " << v;
      log(os.str());
    }
  }
  return {std::move(best), std::move(history), std::move(split)};
}

}  // namespace tpb::mae
