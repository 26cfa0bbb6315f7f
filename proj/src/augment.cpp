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

#include "atpt/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "atpt/image.hpp"
#include "atpt/log.hpp"
#include "atpt/rng.hpp"

namespace atpt {

BaseViewParams sample_base_view(std::uint64_t seed) {
  Rng rng(seed);
  BaseViewParams p;
  p.flip = rng.bernoulli(0.5);
  p.scale = rng.uniform(0.7, 1.0);
  return p;
}

Tensor apply_base_view(const Tensor& image, const BaseViewParams& params) {
  check_image(image, "base_view");
  Tensor out = params.flip ? flip_horizontal(image) : image;
  out = center_crop_resize(out, params.scale);
  clip01(out);
  return out;
}

Box apply_base_view(const Box& box, const BaseViewParams& params, std::size_t image_size) {
  Box b = params.flip ? flip_horizontal(box, image_size) : box;
  if (params.scale == 1.0) return b;
  const double n = static_cast<double>(image_size);
  const double offset = (n - params.scale * n) / 2.0;
  auto lo = [&](std::size_t e) {
    return static_cast<std::size_t>(std::clamp(std::floor((static_cast<double>(e) - offset) / params.scale), 0.0, n));
  };
  auto hi = [&](std::size_t e) {
    return static_cast<std::size_t>(std::clamp(std::ceil((static_cast<double>(e) - offset) / params.scale), 0.0, n));
  };
  return {lo(b.row0), lo(b.col0), hi(b.row1), hi(b.col1)};
}

Tensor base_view(const Tensor& image, std::uint64_t seed) {
  return apply_base_view(image, sample_base_view(seed));
}

namespace {

AugStep sample_step(Rng& rng) {
  AugStep s;
  s.op = static_cast<AugOp>(rng.uniform_int(0, 5));
  switch (s.op) {
    case AugOp::Brightness: s.a = rng.uniform(-0.3, 0.3); break;
    case AugOp::Contrast: s.a = rng.uniform(0.4, 1.6); break;
    case AugOp::Posterize: s.a = rng.uniform_int(3, 8); break;
    case AugOp::Rotate: s.a = rng.uniform(-15.0, 15.0); break;
    case AugOp::Translate:
      s.a = rng.uniform_int(-3, 3);
      s.b = rng.uniform_int(-3, 3);
      break;
    case AugOp::BoxBlur: break;
  }
  return s;
}

Tensor resample(const Tensor& image, double degrees, double dy, double dx) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t), sn = std::sin(t);
  Tensor out(image.shape());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double y = static_cast<double>(r) - cy - dy, x = static_cast<double>(c) - cx - dx;
      out.at(r, c) = sample_bilinear(image, cy + cs * y - sn * x, cx + sn * y + cs * x);
    }
  }
  return out;
}

}  // namespace

AugmixPlan sample_augmix(std::uint64_t seed) {
  Rng rng(seed);
  AugmixPlan plan;
  for (int k = 0; k < 3; ++k) {
    std::vector<AugStep> chain(static_cast<std::size_t>(rng.uniform_int(1, 3)));
    for (auto& s : chain) s = sample_step(rng);
    plan.chains.push_back(std::move(chain));
  }
  plan.chain_weights = rng.dirichlet({1.0, 1.0, 1.0});
  plan.mix = rng.beta(1.0, 1.0);
  return plan;
}

Tensor apply_op(const Tensor& image, const AugStep& step) {
  Tensor out = image;
  switch (step.op) {
    case AugOp::Brightness:
      for (double& v : out.data()) v += step.a;
      break;
    case AugOp::Contrast: {
      const double mean = sum(image) / static_cast<double>(image.size());
      for (double& v : out.data()) v = mean + (v - mean) * step.a;
      break;
    }
    case AugOp::Posterize: {
      const double levels = step.a - 1.0;
      for (double& v : out.data()) v = std::round(std::clamp(v, 0.0, 1.0) * levels) / levels;
      break;
    }
    case AugOp::Rotate: out = resample(image, step.a, 0.0, 0.0); break;
    case AugOp::Translate: out = resample(image, 0.0, step.a, step.b); break;
    case AugOp::BoxBlur: {
      const auto h = static_cast<long>(image.dim(0)), w = static_cast<long>(image.dim(1));
      for (long r = 0; r < h; ++r) {
        for (long c = 0; c < w; ++c) {
          double acc = 0.0;
          for (long dr = -1; dr <= 1; ++dr)
            for (long dc = -1; dc <= 1; ++dc)
              acc += image.at(static_cast<std::size_t>(std::clamp(r + dr, 0L, h - 1)),
                              static_cast<std::size_t>(std::clamp(c + dc, 0L, w - 1)));
          out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc / 9.0;
        }
      }
      break;
    }
  }
  clip01(out);
  return out;
}

Tensor apply_augmix(const Tensor& base, const AugmixPlan& plan) {
  check_image(base, "aggressive_view");
  if (plan.mix == 0.0) return base;
  Tensor mixed(base.shape());
  for (std::size_t k = 0; k < plan.chains.size(); ++k) {
    Tensor x = base;
    for (const auto& step : plan.chains[k]) x = apply_op(x, step);
    for (std::size_t i = 0; i < x.size(); ++i) mixed[i] += plan.chain_weights[k] * x[i];
  }
  Tensor out(base.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 - plan.mix) * base[i] + plan.mix * mixed[i];
  clip01(out);
  return out;
}

Tensor aggressive_view(const Tensor& base, std::uint64_t seed) {
  return apply_augmix(base, sample_augmix(seed));
}

MaskPair attention_masks(const Tensor& grid, std::size_t image_size, double ratio) {
  check_image(grid, "attention_masks");
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error("attention_masks: ratio must be in (0, 1)");
  if (image_size % grid.dim(0) != 0 || grid.dim(0) != grid.dim(1))
    throw ShapeError("attention_masks", "grid " + shape_str(grid.shape()) + " does not tile " +
                                            std::to_string(image_size));
  const Tensor up = upsample_nearest(grid, image_size / grid.dim(0));
  MaskPair m;
  m.ratio = ratio;
  m.target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(up.size())));
  std::vector<double> sorted(up.data().begin(), up.data().end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(m.target - 1), sorted.end(),
                   std::greater<>());
  m.threshold = sorted[m.target - 1];
  m.high = Tensor(up.shape());
  m.low = Tensor(up.shape());
  for (std::size_t i = 0; i < up.size(); ++i) {
    const bool hi = up[i] >= m.threshold;
    m.high[i] = hi ? 1.0 : 0.0;
    m.low[i] = hi ? 0.0 : 1.0;
    m.count += hi;
  }
  m.degenerate = m.count == up.size();
  if (m.degenerate) logger().info("attention_masks: constant map, every pixel is high-attention");
  return m;
}

Tensor mix_views(const Tensor& base, const Tensor& aggressive, const MaskPair& masks,
                 double m_high, double m_low) {
  if (base.shape() != aggressive.shape()) throw ShapeError("mix_views", base.shape(), aggressive.shape());
  if (base.shape() != masks.high.shape()) throw ShapeError("mix_views", base.shape(), masks.high.shape());
  if (m_high < 0.0 || m_high > 1.0 || m_low < 0.0 || m_low > 1.0)
    throw Error("mix_views: strengths must lie in [0, 1]");
  Tensor out(base.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lambda = masks.high[i] * m_high + masks.low[i] * m_low;
    const double b = base[i], a = aggressive[i];
    if (lambda == 0.0) {
      out[i] = b;
    } else if (lambda == 1.0) {
      out[i] = a;
    } else {
      out[i] = std::clamp((1.0 - lambda) * b + lambda * a, std::min(a, b), std::max(a, b));
    }
  }
  return out;
}

std::uint64_t view_seed(std::uint64_t master, std::size_t index) { return split_seed(master, index); }
std::uint64_t base_seed(std::uint64_t view) { return split_seed(view, 0); }
std::uint64_t aggressive_seed(std::uint64_t view) { return split_seed(view, 1); }

ViewSet build_viewset(const Tensor& image, const Model& model, const Tensor& class_embeddings,
                      const AugmentConfig& config, std::uint64_t master_seed) {
  if (config.views == 0) throw Error("build_viewset: need at least one view");
  const std::size_t size = model.config.encoder.image_size;
  ViewSet vs;
  vs.base.push_back(image);
  vs.aggressive.push_back(image);
  vs.mixed.push_back(image);
  vs.seeds.push_back(master_seed);
  if (config.guided) {
    vs.maps.emplace_back();
    vs.masks.emplace_back();
  }
  for (std::size_t i = 1; i <= config.views; ++i) {
    const std::uint64_t seed = view_seed(master_seed, i);
    Tensor b = base_view(image, base_seed(seed));
    Tensor a = aggressive_view(b, aggressive_seed(seed));
    Tensor x = a;
    if (config.guided) {
      const ImagePass pass = target_logit(model, b, class_embeddings);
      AttentionMap map = rollout(pass.capture, config.variant, config.rollout);
      map.view = i;
      MaskPair masks = attention_masks(map.grid, size, config.ratio);
      x = mix_views(b, a, masks, config.lambda_high(), config.lambda_low());
      vs.maps.push_back(std::move(map));
      vs.masks.push_back(std::move(masks));
    }
    vs.seeds.push_back(seed);
    vs.base.push_back(std::move(b));
    vs.aggressive.push_back(std::move(a));
    vs.mixed.push_back(std::move(x));
  }
  return vs;
}

}  // namespace atpt
