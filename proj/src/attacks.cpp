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

#include "atpt/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "atpt/checkpoint.hpp"
#include "atpt/rng.hpp"

namespace atpt {

double AttackConfig::step_size() const {
  if (alpha > 0.0) return alpha;
  return steps == 0 ? 0.0 : 2.5 * eps / static_cast<double>(steps);
}

void AttackConfig::validate() const {
  if (!(eps >= 0.0)) throw Error("attack: eps must be nonnegative");
  if (alpha < 0.0) throw Error("attack: alpha must be positive");
}

std::string AttackConfig::name() const { return kind == Kind::Fgsm ? "fgsm" : "pgd"; }

nlohmann::json to_json(const AttackConfig& c) {
  return {{"kind", c.name()},         {"eps", c.eps},
          {"steps", c.steps},         {"alpha", c.step_size()},
          {"random_init", c.random_init}, {"seed", c.seed}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  const std::string kind = j.at("kind");
  if (kind != "fgsm" && kind != "pgd") throw Error("unknown attack kind '" + kind + "'");
  c.kind = kind == "fgsm" ? AttackConfig::Kind::Fgsm : AttackConfig::Kind::Pgd;
  c.eps = j.at("eps");
  c.steps = j.at("steps");
  c.alpha = j.at("alpha");
  c.random_init = j.at("random_init");
  c.seed = j.at("seed");
  return c;
}

Tensor ce_input_gradient(const Model& model, const Tensor& image, std::size_t label,
                         const Tensor& class_embeddings) {
  PassOptions opt;
  opt.objective = Objective::CrossEntropy;
  opt.target = label;
  opt.capture = false;
  opt.input_gradient = true;
  Tensor grad = image_pass(model, image, class_embeddings, opt).input_grad;
  if (!all_finite(grad)) throw Error("attack: non-finite input gradient");
  return grad;
}

Tensor sign_step(const Tensor& x, const Tensor& grad, double step) {
  if (x.shape() != grad.shape()) throw ShapeError("sign_step", x.shape(), grad.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
    out[i] = std::clamp(x[i] + step * s, 0.0, 1.0);
  }
  return out;
}

void project(Tensor& x, const Tensor& origin, double eps) {
  for (std::size_t i = 0; i < x.size(); ++i)
    x[i] = std::clamp(std::clamp(x[i], origin[i] - eps, origin[i] + eps), 0.0, 1.0);
}

Tensor fgsm(const Model& model, const Tensor& image, std::size_t label, double eps) {
  if (!(eps >= 0.0)) throw Error("fgsm: eps must be nonnegative");
  if (eps == 0.0) return image;
  Tensor out = sign_step(image, ce_input_gradient(model, image, label, model.default_class_embeddings), eps);
  project(out, image, eps);
  return out;
}

Tensor pgd(const Model& model, const Tensor& image, std::size_t label, const AttackConfig& config,
           const PgdObserver& observer) {
  config.validate();
  Tensor x = image;
  if (config.random_init && config.eps > 0.0) {
    Rng rng(config.seed);
    for (double& v : x.data()) v += rng.uniform(-config.eps, config.eps);
    project(x, image, config.eps);
  }
  const double alpha = config.step_size();
  for (std::size_t t = 0; t < config.steps; ++t) {
    x = sign_step(x, ce_input_gradient(model, x, label, model.default_class_embeddings), alpha);
    project(x, image, config.eps);
    if (observer) observer(t, x);
  }
  return x;
}

Tensor run_attack(const Model& model, const Tensor& image, std::size_t label,
                  const AttackConfig& config) {
  return config.kind == AttackConfig::Kind::Fgsm ? fgsm(model, image, label, config.eps)
                                                 : pgd(model, image, label, config);
}

std::string attack_cache_key(std::uint64_t dataset_seed, const std::string& model_hash,
                             const AttackConfig& config, std::size_t count) {
  const std::string blob = std::to_string(dataset_seed) + "|" + model_hash + "|" +
                           to_json(config).dump() + "|" + std::to_string(count);
  std::ostringstream s;
  s << config.name() << '-' << std::hex << std::setw(16) << std::setfill('0')
    << fnv1a(blob.data(), blob.size());
  return s.str();
}

void save_attack_cache(const std::string& path, const std::vector<Tensor>& images,
                       const nlohmann::json& manifest) {
  TensorArchive archive;
  archive.config = manifest;
  for (std::size_t i = 0; i < images.size(); ++i)
    archive.tensors.emplace_back("adv." + std::to_string(i), images[i]);
  write_archive(path, archive);
  write_json(path + ".json", manifest);
}

std::vector<Tensor> load_attack_cache(const std::string& path, const nlohmann::json& manifest) {
  if (!std::filesystem::exists(path)) return {};
  TensorArchive archive = read_archive(path);
  if (archive.config != manifest) return {};
  std::vector<Tensor> out;
  for (auto& [name, t] : archive.tensors) out.push_back(std::move(t));
  return out;
}

}  // namespace atpt
