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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "atpt/adapt.hpp"
#include "atpt/attacks.hpp"
#include "atpt/datagen.hpp"
#include "atpt/model.hpp"

namespace atpt {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required file is absent; the message names the subcommand that makes it.
class MissingArtifact : public Error {
 public:
  MissingArtifact(const std::string& what, const std::string& path, const std::string& producer);
};

struct RunConfig {
  SyntheticSpec data;
  PretrainConfig pretrain;
  std::uint64_t model_seed = 3;
  /// Empty selects <run root>/models/<key>/model.bin.
  std::string model_path;
  bool adversarial = true;
  AttackConfig attack;
  PipelineConfig pipeline;
  std::uint64_t seed = 2024;
  std::size_t limit = 500;
  std::size_t workers = 1;
  /// Empty selects <run root>/<command>-<hash>.
  std::string out;
  std::vector<double> eps_grid{1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};
  std::vector<std::size_t> view_grid{16, 32, 64};
  std::vector<double> stability_eps{1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
  std::size_t stability_samples = 20;
  std::size_t stability_entries = 10;
  std::size_t grad_instances = 20;
};

/// Applies one `key = value` setting. Unknown keys and bad values throw
/// ConfigError naming the key.
void set_option(RunConfig& cfg, const std::string& key, const std::string& value);
/// Parses line-based `key = value` text; `#` starts a comment.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::string& path, RunConfig base = {});
std::vector<std::string> option_keys();

nlohmann::json to_json(const RunConfig& cfg);
/// Hash of everything that affects results; workers and output paths excluded.
std::string config_hash(const RunConfig& cfg, const std::string& command);

// ---- artifacts ------------------------------------------------------------

/// ATPT_RUN_ROOT or ./runs.
std::string run_root();
std::string model_file(const RunConfig& cfg);
std::string run_dir(const RunConfig& cfg, const std::string& command);

struct ModelArtifact {
  Model model;
  std::string path;
  std::string hash;
  nlohmann::json manifest;
};

/// Trains and saves the model unless it exists (or `force`).
ModelArtifact ensure_model(const RunConfig& cfg, bool force = false);
/// Throws MissingArtifact when the model file is absent.
ModelArtifact load_model_artifact(const RunConfig& cfg);

/// The first `limit` test samples; the evaluation set of every subcommand.
std::vector<Sample> evaluation_set(const RunConfig& cfg);

std::string attack_file(const RunConfig& cfg, const ModelArtifact& model, const AttackConfig& attack,
                        std::size_t count);
std::vector<Tensor> ensure_attacks(const RunConfig& cfg, const ModelArtifact& model,
                                   const std::vector<Sample>& samples, const AttackConfig& attack,
                                   bool force = false);
std::vector<Tensor> load_attacks(const RunConfig& cfg, const ModelArtifact& model,
                                 const std::vector<Sample>& samples, const AttackConfig& attack);

// ---- evaluation -----------------------------------------------------------

struct Method {
  std::string name;
  bool zero_shot = false;
  PipelineConfig pipeline;
};

/// Name from the component flags: tpt-ensemble, a-tpt or a '+'-joined subset.
std::string method_name(const PipelineConfig& pipeline);
Method zero_shot_method();
Method pipeline_method(const PipelineConfig& pipeline);
/// All three components off.
Method baseline_method(const PipelineConfig& pipeline);
/// The six flag combinations of the ablation table, baseline first.
std::vector<Method> ablation_methods(const PipelineConfig& pipeline);

struct SampleOutcome {
  std::size_t prediction = 0;
  bool correct = false;
  double seconds = 0.0;
  /// Weight-averaged localization over selected views; NaN without maps.
  double localization = 0.0;
  /// Mean localization of views with w > 2/|B| and of the rest; NaN if a group is empty.
  double localization_high = 0.0, localization_low = 0.0;
  nlohmann::json detail;
};

struct MethodResult {
  Method method;
  std::vector<SampleOutcome> clean, adversarial;  // adversarial empty without attack
};

struct EvalRow {
  std::string method;
  bool a_refine = false, a_aug = false, a_tv = false;
  std::string attack = "none";
  double eps = 0.0;
  std::size_t n_views = 0;
  double clean_acc = 0.0, adv_acc = 0.0, mean_localization = 0.0, wall_seconds = 0.0;
};

/// Paired evaluation of every method on the same samples and attacked inputs.
/// `adversarial` may be null for a clean-only run; `clean` false skips clean inputs.
std::vector<MethodResult> evaluate(const Model& model, const std::vector<Sample>& samples,
                                   const std::vector<Tensor>* adversarial, const std::vector<Method>& methods,
                                   const RunConfig& cfg, bool clean = true);

EvalRow summarize(const MethodResult& r, const RunConfig& cfg);

std::string csv_header();
std::string csv_line(const EvalRow& row, const std::string& run_hash, std::uint64_t dataset_seed);
void write_csv(const std::string& path, const std::vector<EvalRow>& rows, const std::string& run_hash,
               std::uint64_t dataset_seed);
/// One JSON object per (method, input kind, sample).
void write_details(const std::string& path, const std::vector<MethodResult>& results);

// ---- diagnostics ----------------------------------------------------------

struct DivergenceReport {
  std::size_t samples = 0;
  double eps = 0.0;
  double mean_cos_adversarial = 0.0;
  double mean_cos_noise = 0.0;
  /// Fraction with the true label among the top K, K = 1..5.
  std::vector<double> topk_clean, topk_adversarial, topk_noise;
};

/// Compares clean features with attacked and with random-sign perturbations of
/// the same budget.
DivergenceReport feature_divergence_report(const Model& model, const std::vector<Sample>& samples,
                                           const std::vector<Tensor>& adversarial, double eps,
                                           std::uint64_t seed);
nlohmann::json to_json(const DivergenceReport& r);

struct EntryProbe {
  std::size_t sample = 0, block = 0, head = 0, row = 0, col = 0;
  double phi = 0.0;
  std::vector<double> phi_change, weight_change;  // per eps under the aligned step
  double phi_slope = 0.0, phi_constant = 0.0, weight_constant = 0.0;
};

struct StabilityReport {
  std::vector<double> eps;
  /// Per eps, sup over samples under a fixed random sign direction.
  std::vector<double> phi_change, weight_change, residual;
  double phi_slope = 0.0, weight_slope = 0.0, residual_slope = 0.0;
  /// Empirical stand-ins: sup |dW|/eps, min token-score mass, sup |dphi|/eps, sup residual/eps^2.
  double lipschitz_weight = 0.0, min_score_mass = 0.0, lipschitz_phi = 0.0, residual_constant = 0.0;
  std::vector<EntryProbe> entries;
  /// Entries whose aligned slope lies in [0.8, 1.2] with phi_constant > weight_constant.
  double aligned_fraction = 0.0;
  std::size_t samples = 0, excluded = 0;
};

StabilityReport verify_stability(const Model& model, const std::vector<Sample>& samples,
                                 const std::vector<double>& eps, std::size_t entries_per_sample,
                                 std::uint64_t seed);
nlohmann::json to_json(const StabilityReport& r);

/// Least-squares slope of log(y) against log(x) over positive pairs.
double loglog_fit(const std::vector<double>& x, const std::vector<double>& y);

struct GradCheck {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;  // worst instance, |analytic - numeric|_inf / |numeric|_inf
};

/// Backward against Richardson-extrapolated central differences for every
/// primitive and for the model-level gradients the method uses.
std::vector<GradCheck> gradient_checks(const Model& model, std::size_t instances, std::uint64_t seed);

}  // namespace atpt
