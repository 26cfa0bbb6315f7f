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
#include <vector>

#include "atpt/attribution.hpp"
#include "atpt/image.hpp"
#include "atpt/model.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

struct BaseViewParams {
  bool flip = false;
  double scale = 1.0;
};

/// Flip with p = 0.5, crop scale uniform in [0.7, 1].
BaseViewParams sample_base_view(std::uint64_t seed);
Tensor apply_base_view(const Tensor& image, const BaseViewParams& params);
Tensor base_view(const Tensor& image, std::uint64_t seed);
/// Where a box of the original lands in the base view; empty when cropped out.
Box apply_base_view(const Box& box, const BaseViewParams& params, std::size_t image_size);

enum class AugOp { Brightness, Contrast, Posterize, Rotate, Translate, BoxBlur };

struct AugStep {
  AugOp op = AugOp::Brightness;
  double a = 0.0;  // shift, factor, levels, degrees or row offset
  double b = 0.0;  // column offset for Translate
};

/// Three op chains, their Dirichlet(1,1,1) weights and the Beta(1,1) blend.
struct AugmixPlan {
  std::vector<std::vector<AugStep>> chains;
  std::vector<double> chain_weights;
  double mix = 0.0;
};

AugmixPlan sample_augmix(std::uint64_t seed);
Tensor apply_op(const Tensor& image, const AugStep& step);
Tensor apply_augmix(const Tensor& base, const AugmixPlan& plan);
Tensor aggressive_view(const Tensor& base, std::uint64_t seed);

struct MaskPair {
  Tensor high, low;        // H x W, 0/1
  double threshold = 0.0;  // A_(J)
  double ratio = 0.0;
  std::size_t target = 0;  // J
  std::size_t count = 0;   // |{high = 1}|
  bool degenerate = false;
};

/// Nearest-neighbour upsample to `image_size`, then high = (A >= J-th largest).
MaskPair attention_masks(const Tensor& grid, std::size_t image_size, double ratio);

/// x = (1 - lambda) b + lambda x~ with lambda = high m_high + low m_low.
Tensor mix_views(const Tensor& base, const Tensor& aggressive, const MaskPair& masks,
                 double m_high, double m_low);

struct AugmentConfig {
  std::size_t views = 64;
  double ratio = 0.2;
  double m_high = 0.8;
  double m_low = 0.2;
  bool swap_mix_strengths = false;
  /// Off: mixed views are the aggressive views themselves.
  bool guided = true;
  MapVariant variant = MapVariant::Refined;
  RolloutOptions rollout;

  double lambda_high() const { return swap_mix_strengths ? m_low : m_high; }
  double lambda_low() const { return swap_mix_strengths ? m_high : m_low; }
};

/// Index 0 of every vector is the original image; 1..N are augmented.
struct ViewSet {
  std::vector<Tensor> base, aggressive, mixed;
  std::vector<std::uint64_t> seeds;
  std::vector<AttentionMap> maps;  // empty when not guided; maps[0] unused
  std::vector<MaskPair> masks;

  std::size_t size() const { return mixed.size(); }
};

/// seed_i = split_seed(master, i); base and aggressive streams split from it.
std::uint64_t view_seed(std::uint64_t master, std::size_t index);
std::uint64_t base_seed(std::uint64_t view);
std::uint64_t aggressive_seed(std::uint64_t view);

/// Full construction with attention computed on each base view under
/// `class_embeddings` (the reset prompts), target = argmax on that view.
ViewSet build_viewset(const Tensor& image, const Model& model, const Tensor& class_embeddings,
                      const AugmentConfig& config, std::uint64_t master_seed);

}  // namespace atpt
