// Copyright 2026 The atpt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "atpt/image.hpp"
#include "atpt/model.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

/// Procedural fine-grained dataset: shared smoothed-noise backgrounds, one
/// small mirror-symmetric glyph per class.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  std::size_t image_size = 32;
  std::size_t glyph_size = 8;
  std::size_t jitter = 5;
  double background_mean = 0.45;
  double background_std = 0.12;
  double noise = 0.03;
  double glyph_contrast = 0.35;
  std::uint64_t seed = 1234;

  void validate() const;
  std::string hash() const;
};

nlohmann::json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

struct Sample {
  Tensor image;
  std::size_t label = 0;
  Box box;
};

struct Dataset {
  std::vector<Sample> samples;
  std::string split;
  std::string spec_hash;

  std::size_t size() const { return samples.size(); }
};

constexpr std::size_t kGlyphClasses = 10;

/// Binary glyph_size x glyph_size stroke pattern of a class.
Tensor glyph_pattern(std::size_t label, std::size_t glyph_size);

/// One image. `erase` renders the background alone (same draw, no glyph).
Sample render_sample(const SyntheticSpec& spec, std::size_t label, std::uint64_t seed, bool erase = false);

struct DatasetPair {
  Dataset train, test;
};

/// Deterministic in (spec); labels cycle through the classes.
DatasetPair generate(const SyntheticSpec& spec, bool erase = false);
Dataset generate_split(const SyntheticSpec& spec, const std::string& split, bool erase = false);

struct PretrainConfig {
  std::size_t epochs = 14;
  std::size_t batch = 32;
  double lr = 2e-3;
  double lr_final = 1e-4;
  /// Linear learning-rate ramp length.
  std::size_t warmup_epochs = 1;
  double weight_decay = 1e-4;
  /// Train on flipped / centre-cropped views as seen at test time.
  bool augment = true;
  /// Chance of an AugMix draw on top of the base view.
  double augmix_prob = 0.5;
  std::uint64_t seed = 7;
  /// Negative control: train on permuted labels.
  bool shuffle_labels = false;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Joint cross-entropy training of encoder, text head, class tokens and
/// default prompts. Returns per-epoch stats; a non-finite loss stops training
/// and restores the last good weights.
std::vector<EpochStats> pretrain(Model& model, const Dataset& train, const PretrainConfig& config,
                                 const EpochCallback& callback = {});

/// Zero-shot accuracy under the default prompts.
double zero_shot_accuracy(const Model& model, const Dataset& data, std::size_t limit = 0);

/// Fraction of l1-normalized attention mass inside the box after upsampling.
double localization_score(const Tensor& grid, const Box& box, std::size_t image_size);

nlohmann::json to_json(const PretrainConfig& c);

}  // namespace atpt
