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

#include "atpt/model.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

struct AttackConfig {
  enum class Kind { Fgsm, Pgd };
  Kind kind = Kind::Pgd;
  double eps = 4.0 / 255.0;
  std::size_t steps = 20;
  /// Step size; <= 0 selects 2.5 * eps / steps.
  double alpha = 0.0;
  bool random_init = false;
  std::uint64_t seed = 0;

  double step_size() const;
  void validate() const;
  std::string name() const;
};

nlohmann::json to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const nlohmann::json& j);

/// Gradient of -log p_label(x) under the given class embeddings.
Tensor ce_input_gradient(const Model& model, const Tensor& image, std::size_t label,
                         const Tensor& class_embeddings);

/// x + eps * sign(grad), clipped to [0, 1]. Zero gradient entries stay put.
Tensor sign_step(const Tensor& x, const Tensor& grad, double step);
/// Projection onto the eps-ball around `origin` intersected with [0, 1].
void project(Tensor& x, const Tensor& origin, double eps);

Tensor fgsm(const Model& model, const Tensor& image, std::size_t label, double eps);

/// Called after every PGD iterate with (step index, iterate).
using PgdObserver = std::function<void(std::size_t, const Tensor&)>;

Tensor pgd(const Model& model, const Tensor& image, std::size_t label, const AttackConfig& config,
           const PgdObserver& observer = {});

Tensor run_attack(const Model& model, const Tensor& image, std::size_t label,
                  const AttackConfig& config);

/// Cache file name component from (dataset seed, model hash, attack config).
std::string attack_cache_key(std::uint64_t dataset_seed, const std::string& model_hash,
                             const AttackConfig& config, std::size_t count);

void save_attack_cache(const std::string& path, const std::vector<Tensor>& images,
                       const nlohmann::json& manifest);
/// Empty when the file is absent or its manifest does not match.
std::vector<Tensor> load_attack_cache(const std::string& path, const nlohmann::json& manifest);

}  // namespace atpt
