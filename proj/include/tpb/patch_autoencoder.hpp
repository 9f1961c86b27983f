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
#include <functional>
#include <string>
#include <span>
#include <vector>

#include "tpb/autodiff.hpp"
#include "tpb/data_synth.hpp"
#include "tpb/metrics.hpp"
#include "tpb/nn.hpp"

namespace tpb::mae {

struct AutoencoderConfig {
  int width = 128;
  int encoder_layers = 4;
  int decoder_layers = 1;
  int heads = 4;
  int ff_multiplier = 4;
  int patch_length = 12;
  int patch_count = 24;
  int channels = 1;
  double pe_dropout = 0.1;
  bool depth_scaled_init = true;
  std::uint64_t seed = 0;

  int patch_width() const { return patch_length * channels; }
  void validate() const;
};

// Linear patch projection, 168-slot learnable hour-of-week table and the
// encoder transformer stack.
struct EncoderParams {
  nn::Linear input;
  std::size_t positional = 0;
  std::vector<nn::TransformerBlock> layers;
};

struct DecoderParams {
  std::size_t mask_token = 0;
  std::vector<nn::TransformerBlock> layers;
  nn::Linear output;
};

// Masked traffic-patch autoencoder. Inputs are expected in normalized units;
// the fitted scaler travels with the checkpoint.
class PatchAutoencoder {
 public:
  explicit PatchAutoencoder(AutoencoderConfig cfg);

  const AutoencoderConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const EncoderParams& encoder() const { return enc_; }
  const DecoderParams& decoder() const { return dec_; }
  const data::Scaler& scaler() const { return scaler_; }
  void set_scaler(data::Scaler s) { scaler_ = s; }

  // Embeddings of every unmasked patch, windows stacked in order
  // [sum of unmasked counts x d]. `dropout_rng` enables positional dropout.
  ad::Var encode(ad::Graph& g, std::span<const data::PatchWindow> windows, Rng* dropout_rng = nullptr);
  ad::Var encode(ad::Graph& g, std::span<const data::PatchWindow> windows) const;
  // Reconstructions [windows * P x T0*C] from the stacked encoder output.
  ad::Var decode(ad::Graph& g, ad::Var embeddings, std::span<const data::PatchWindow> windows);
  ad::Var decode(ad::Graph& g, ad::Var embeddings, std::span<const data::PatchWindow> windows) const;

  // Evaluation-mode helpers (no dropout, no gradient tape).
  Matrix encode(const data::PatchWindow& window) const;
  Matrix decode(const Matrix& embeddings, const data::PatchWindow& window) const;
  Matrix reconstruct(const data::PatchWindow& window) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static PatchAutoencoder load(const std::filesystem::path& path);

 private:
  template <class Self, class Store>
  static ad::Var encode_impl(Self& self, Store& store, ad::Graph& g,
                             std::span<const data::PatchWindow> windows, Rng* dropout_rng);
  template <class Self, class Store>
  static ad::Var decode_impl(Self& self, Store& store, ad::Graph& g, ad::Var embeddings,
                             std::span<const data::PatchWindow> windows);

  AutoencoderConfig cfg_;
  ad::ParameterStore params_;
  EncoderParams enc_;
  DecoderParams dec_;
  data::Scaler scaler_;
};

// Mean squared error over masked patch entries only.
double pretrain_loss(const Matrix& patches, const Matrix& reconstruction, const std::vector<bool>& mask);
ad::Var pretrain_loss(ad::Var reconstruction, const Matrix& patches, const std::vector<bool>& mask);

struct PretrainConfig {
  int batch_size = 4;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double mask_ratio = 0.75;
  int epochs = 30;
  std::uint64_t seed = 0;
  std::array<double, 3> split = {0.7, 0.2, 0.1};

  void validate() const;
};

struct PretrainHistory {
  // Entry 0 is the untrained model; entry e is after epoch e.
  std::vector<double> val_mse;
  std::vector<double> train_loss;
  int best_epoch = 0;
};

// Normalized windows with masks, ready for the autoencoder.
std::vector<data::PatchWindow> make_windows(const data::CityCorpus& corpus,
                                            std::span<const data::NodeWindowRef> refs,
                                            const data::Scaler& scaler, int patch_length,
                                            int patch_count);

struct PretrainResult {
  PatchAutoencoder model;
  PretrainHistory history;
  data::SourceSplit split;
};

// Masked reconstruction training on the train split; returns the checkpoint
// with the lowest validation masked-MSE. `log` receives one line per epoch.
PretrainResult pretrain(const data::CityCorpus& source, const AutoencoderConfig& model_cfg,
                        const PretrainConfig& cfg,
                        const std::function<void(const std::string&)>& log = {});

// Validation masks are drawn once from a fixed stream so epochs are comparable.
void assign_masks(std::span<data::PatchWindow> windows, double mask_ratio, Rng& rng);
double masked_mse(const PatchAutoencoder& model, std::span<const data::PatchWindow> windows);

// RMSE / MAE / MAPE over the masked rows of stacked patches, mapped back to
// original units.
metrics::Triple masked_metrics(const Matrix& patches, const Matrix& reconstruction,
                               const std::vector<bool>& mask, const data::Scaler& scaler);

// RMSE / MAE / MAPE over masked entries in original units.
metrics::Triple reconstruction_report(const PatchAutoencoder& model,
                                      std::span<const data::PatchWindow> windows);

}  // namespace tpb::mae
