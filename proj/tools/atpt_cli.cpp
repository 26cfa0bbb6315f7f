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

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "atpt/attribution.hpp"
#include "atpt/checkpoint.hpp"
#include "atpt/harness.hpp"
#include "atpt/image.hpp"
#include "atpt/log.hpp"

using namespace atpt;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  bool force = false;
  std::size_t workers = 0;
  std::string out, model;
  std::size_t limit = 0, views = 0;
  std::string eps, a_refine, a_aug, a_tv;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", c.sets, "override, key=value (repeatable)");
  cmd->add_flag("--force", c.force, "recompute even if the run directory exists");
  cmd->add_option("--workers", c.workers, "sample-level worker threads");
  cmd->add_option("--out", c.out, "run directory (default: <run root>/<command>-<hash>)");
  cmd->add_option("--model", c.model, "model checkpoint path");
  cmd->add_option("--limit", c.limit, "evaluation samples");
  cmd->add_option("--views", c.views, "augmented views N");
  cmd->add_option("--eps", c.eps, "attack budget, e.g. 4/255");
  cmd->add_option("--a-refine", c.a_refine, "on|off");
  cmd->add_option("--a-aug", c.a_aug, "on|off");
  cmd->add_option("--a-tv", c.a_tv, "on|off");
  cmd->add_flag("-v,--verbose", c.verbose, "progress logging");
}

RunConfig build_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_run_config(c.config);
  for (const std::string& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_option(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.workers) cfg.workers = c.workers;
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.model.empty()) cfg.model_path = c.model;
  if (c.limit) cfg.limit = c.limit;
  if (c.views) set_option(cfg, "views", std::to_string(c.views));
  if (!c.eps.empty()) set_option(cfg, "eps", c.eps);
  if (!c.a_refine.empty()) set_option(cfg, "a_refine", c.a_refine);
  if (!c.a_aug.empty()) set_option(cfg, "a_aug", c.a_aug);
  if (!c.a_tv.empty()) set_option(cfg, "a_tv", c.a_tv);
  return cfg;
}

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Run-directory contract: a finished run leaves manifest.json; reruns with
// the same hash stop early unless forced.
struct Run {
  std::string command, dir, hash;
  RunConfig cfg;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  std::string path(const std::string& name) const { return (fs::path(dir) / name).string(); }

  void finish(const nlohmann::json& summary) const {
    nlohmann::json m{{"command", command},
                     {"config_hash", hash},
                     {"config", to_json(cfg)},
                     {"finished", now_utc()},
                     {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
                     {"summary", summary}};
    write_json(path("manifest.json"), m);
    std::printf("results in %s\n", dir.c_str());
  }
};

std::optional<Run> open_run(const std::string& command, const Common& c) {
  Run r;
  r.command = command;
  r.cfg = build_config(c);
  r.hash = config_hash(r.cfg, command);
  r.dir = run_dir(r.cfg, command);
  if (!c.force && fs::exists(fs::path(r.dir) / "manifest.json")) {
    std::printf("up to date: %s (use --force to recompute)\n", r.dir.c_str());
    return std::nullopt;
  }
  fs::create_directories(r.dir);
  return r;
}

std::vector<Tensor> attacks_for(const Run& run, const ModelArtifact& model, const std::vector<Sample>& samples) {
  if (!run.cfg.adversarial) return {};
  return load_attacks(run.cfg, model, samples, run.cfg.attack);
}

void write_eval(const Run& run, const std::vector<MethodResult>& results, nlohmann::json& summary) {
  std::vector<EvalRow> rows;
  for (const auto& r : results) rows.push_back(summarize(r, run.cfg));
  write_csv(run.path("results.csv"), rows, run.hash, run.cfg.data.seed);
  write_details(run.path("details.jsonl"), results);
  std::printf("%s\n", csv_header().c_str());
  for (const auto& row : rows) std::printf("%s\n", csv_line(row, run.hash, run.cfg.data.seed).c_str());
  summary["rows"] = rows.size();
}

int cmd_gen_data(const Common& c) {
  auto run = open_run("gen-data", c);
  if (!run) return 0;
  const DatasetPair data = generate(run->cfg.data);
  std::vector<std::size_t> counts(run->cfg.data.classes);
  for (const Sample& s : data.train.samples) ++counts[s.label];
  std::vector<Tensor> first;
  for (std::size_t i = 0; i < std::min<std::size_t>(run->cfg.data.classes * 2, data.test.size()); ++i)
    first.push_back(data.test.samples[i].image);
  write_pgm(run->path("test_samples.pgm"), contact_sheet(first, run->cfg.data.classes));
  TensorArchive archive;
  archive.config = to_json(run->cfg.data);
  for (std::size_t i = 0; i < data.test.size(); ++i)
    archive.tensors.emplace_back("test/" + std::to_string(i), data.test.samples[i].image);
  write_archive(run->path("test.bin"), archive);
  run->finish({{"spec_hash", run->cfg.data.hash()},
               {"train", data.train.size()},
               {"test", data.test.size()},
               {"train_per_class", counts}});
  std::printf("%zu train, %zu test samples (spec %s)\n", data.train.size(), data.test.size(), run->cfg.data.hash().c_str());
  return 0;
}

int cmd_pretrain(const Common& c) {
  const RunConfig cfg = build_config(c);
  const ModelArtifact a = ensure_model(cfg, c.force);
  std::printf("model %s hash %s\n", a.path.c_str(), a.hash.c_str());
  if (a.manifest.contains("test_accuracy"))
    std::printf("zero-shot test accuracy %.4f, glyph-erased %.4f\n", a.manifest["test_accuracy"].get<double>(),
                a.manifest["erased_accuracy"].get<double>());
  return 0;
}

int cmd_attack(const Common& c) {
  const RunConfig cfg = build_config(c);
  const ModelArtifact model = load_model_artifact(cfg);
  const std::vector<Sample> samples = evaluation_set(cfg);
  const std::vector<Tensor> adv = ensure_attacks(cfg, model, samples, cfg.attack, c.force);
  std::size_t clean = 0, attacked = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& emb = model.model.default_class_embeddings;
    clean += argmax(predict_probs(encode_image(model.model, samples[i].image), emb, model.model.config.tau).data()) ==
             samples[i].label;
    attacked +=
        argmax(predict_probs(encode_image(model.model, adv[i]), emb, model.model.config.tau).data()) == samples[i].label;
  }
  const double n = static_cast<double>(samples.size());
  std::printf("%s: %s\nzero-shot clean %.4f adversarial %.4f over %zu samples\n", cfg.attack.name().c_str(),
              attack_file(cfg, model, cfg.attack, samples.size()).c_str(), clean / n, attacked / n, samples.size());
  return 0;
}

int cmd_eval(const Common& c, const std::string& method) {
  auto run = open_run("eval-" + method, c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<Sample> samples = evaluation_set(run->cfg);
  const std::vector<Tensor> adv = attacks_for(*run, model, samples);
  std::vector<Method> methods{zero_shot_method()};
  if (method == "baseline") methods.push_back(baseline_method(run->cfg.pipeline));
  else if (method == "atpt") methods.push_back(pipeline_method(run->cfg.pipeline));
  const auto results = evaluate(model.model, samples, run->cfg.adversarial ? &adv : nullptr, methods, run->cfg);
  nlohmann::json summary;
  write_eval(*run, results, summary);
  run->finish(summary);
  return 0;
}

int cmd_ablate(const Common& c) {
  auto run = open_run("ablate", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<Sample> samples = evaluation_set(run->cfg);
  const std::vector<Tensor> adv = attacks_for(*run, model, samples);
  std::vector<Method> methods = ablation_methods(run->cfg.pipeline);
  methods.insert(methods.begin(), zero_shot_method());
  const auto results = evaluate(model.model, samples, run->cfg.adversarial ? &adv : nullptr, methods, run->cfg);
  nlohmann::json summary;
  write_eval(*run, results, summary);
  run->finish(summary);
  return 0;
}

int cmd_sweep_views(const Common& c) {
  auto run = open_run("sweep-views", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<Sample> samples = evaluation_set(run->cfg);
  const std::vector<Tensor> adv = attacks_for(*run, model, samples);
  std::vector<MethodResult> results;
  for (std::size_t views : run->cfg.view_grid) {
    PipelineConfig p = run->cfg.pipeline;
    p.views = views;
    auto r = evaluate(model.model, samples, run->cfg.adversarial ? &adv : nullptr, {pipeline_method(p)}, run->cfg);
    results.push_back(std::move(r[0]));
  }
  nlohmann::json summary;
  write_eval(*run, results, summary);
  run->finish(summary);
  return 0;
}

int cmd_sweep_eps(const Common& c) {
  auto run = open_run("sweep-eps", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<Sample> samples = evaluation_set(run->cfg);
  std::vector<EvalRow> rows;
  std::vector<MethodResult> all;
  nlohmann::json success = nlohmann::json::array();
  for (double eps : run->cfg.eps_grid) {
    RunConfig cfg = run->cfg;
    cfg.attack.eps = eps;
    cfg.adversarial = true;
    const std::vector<Tensor> adv = ensure_attacks(cfg, model, samples, cfg.attack);
    auto results = evaluate(model.model, samples, &adv, {zero_shot_method(), pipeline_method(cfg.pipeline)}, cfg);
    std::size_t correct = 0, flipped = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      correct += results[0].clean[i].correct;
      flipped += results[0].clean[i].correct && !results[0].adversarial[i].correct;
    }
    success.push_back({{"eps", eps}, {"attack_success_rate", correct ? static_cast<double>(flipped) / correct : 0.0}});
    for (auto& r : results) {
      rows.push_back(summarize(r, cfg));
      all.push_back(std::move(r));
    }
  }
  write_csv(run->path("results.csv"), rows, run->hash, run->cfg.data.seed);
  write_details(run->path("details.jsonl"), all);
  std::printf("%s\n", csv_header().c_str());
  for (const auto& row : rows) std::printf("%s\n", csv_line(row, run->hash, run->cfg.data.seed).c_str());
  bool monotone = true;
  for (std::size_t i = 1; i < success.size(); ++i)
    monotone &= success[i]["attack_success_rate"].get<double>() >= success[i - 1]["attack_success_rate"].get<double>();
  for (const auto& s : success)
    std::printf("eps %.5f attack success rate %.4f\n", s["eps"].get<double>(), s["attack_success_rate"].get<double>());
  std::printf("success rate %s in eps\n", monotone ? "non-decreasing" : "NOT monotone");
  run->finish({{"attack_success", success}, {"monotone", monotone}});
  return 0;
}

int cmd_attribution_dump(const Common& c, std::size_t count) {
  auto run = open_run("attribution-dump", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<Sample> samples = evaluation_set(run->cfg);
  std::vector<Tensor> adv;
  if (run->cfg.adversarial) adv = load_attacks(run->cfg, model, samples, run->cfg.attack);
  const std::size_t size = model.model.config.encoder.image_size;
  nlohmann::json summary = nlohmann::json::array();
  std::vector<Tensor> sheet;
  for (std::size_t i = 0; i < std::min(count, samples.size()); ++i) {
    std::vector<std::pair<std::string, const Tensor*>> inputs{{"clean", &samples[i].image}};
    if (!adv.empty()) inputs.emplace_back("adv", &adv[i]);
    for (const auto& [kind, image] : inputs) {
      const ImagePass pass = target_logit(model.model, *image, model.model.default_class_embeddings);
      sheet.push_back(*image);
      for (MapVariant v : {MapVariant::Gar, MapVariant::Refined}) {
        const Tensor grid = rollout(pass.capture, v, run->cfg.pipeline.rollout).grid;
        const std::string stem = "sample" + std::to_string(i) + "_" + kind + "_" + to_string(v);
        write_map_csv(run->path(stem + ".csv"), grid);
        write_pgm(run->path(stem + ".pgm"), upsample_nearest(grid, size / grid.dim(0)));
        sheet.push_back(upsample_nearest(grid, size / grid.dim(0)));
        summary.push_back({{"sample", i},
                           {"input", kind},
                           {"variant", to_string(v)},
                           {"target", pass.target},
                           {"localization", localization_score(grid, samples[i].box, size)}});
      }
    }
  }
  write_pgm(run->path("sheet.pgm"), contact_sheet(sheet, 3));
  run->finish(summary);
  return 0;
}

int cmd_diverge(const Common& c) {
  auto run = open_run("diverge", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<Sample> samples = evaluation_set(run->cfg);
  const std::vector<Tensor> adv = load_attacks(run->cfg, model, samples, run->cfg.attack);
  const DivergenceReport r = feature_divergence_report(model.model, samples, adv, run->cfg.attack.eps, run->cfg.seed);
  write_json(run->path("divergence.json"), to_json(r));
  std::printf("mean cos(clean, pgd) %.4f, mean cos(clean, noise) %.4f\n", r.mean_cos_adversarial, r.mean_cos_noise);
  for (std::size_t k = 0; k < r.topk_clean.size(); ++k)
    std::printf("top-%zu true-label ratio: clean %.3f pgd %.3f noise %.3f\n", k + 1, r.topk_clean[k],
                r.topk_adversarial[k], r.topk_noise[k]);
  run->finish(to_json(r));
  return 0;
}

int cmd_verify_stability(const Common& c) {
  auto run = open_run("verify-stability", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  std::vector<Sample> samples = evaluation_set(run->cfg);
  if (samples.size() > run->cfg.stability_samples) samples.resize(run->cfg.stability_samples);
  const StabilityReport r =
      verify_stability(model.model, samples, run->cfg.stability_eps, run->cfg.stability_entries, run->cfg.seed);
  write_json(run->path("stability.json"), to_json(r));
  std::printf("eps        sup|dphi|    sup|dW|      residual\n");
  for (std::size_t e = 0; e < r.eps.size(); ++e)
    std::printf("%-10.3g %-12.4e %-12.4e %-12.4e\n", r.eps[e], r.phi_change[e], r.weight_change[e], r.residual[e]);
  std::printf("slopes: phi %.3f, token weights %.3f, residual %.3f; aligned entries %.2f; excluded %zu/%zu\n",
              r.phi_slope, r.weight_slope, r.residual_slope, r.aligned_fraction, r.excluded, r.samples);
  run->finish({{"phi_slope", r.phi_slope},
               {"weight_slope", r.weight_slope},
               {"residual_slope", r.residual_slope},
               {"aligned_fraction", r.aligned_fraction}});
  return 0;
}

int cmd_grad_check(const Common& c) {
  auto run = open_run("grad-check", c);
  if (!run) return 0;
  const ModelArtifact model = load_model_artifact(run->cfg);
  const std::vector<GradCheck> checks = gradient_checks(model.model, run->cfg.grad_instances, run->cfg.seed);
  std::ofstream csv(run->path("grad_check.csv"));
  csv << "check,instances,max_relative_error\n";
  bool ok = true;
  for (const GradCheck& g : checks) {
    csv << g.name << ',' << g.instances << ',' << g.max_error << '\n';
    std::printf("%-20s %3zu  %.3e%s\n", g.name.c_str(), g.instances, g.max_error, g.max_error < 1e-4 ? "" : "  FAIL");
    ok &= g.max_error < 1e-4;
  }
  run->finish({{"all_below_1e-4", ok}});
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"A-TPT desk-scale toolkit. Artifacts live under $ATPT_RUN_ROOT (default ./runs)."};
  app.require_subcommand(1);
  Common common;
  std::string method = "atpt";
  std::size_t dump_count = 4;

  std::vector<std::pair<CLI::App*, std::function<int()>>> commands;
  auto add = [&](const char* name, const char* help, std::function<int()> fn) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, common);
    commands.emplace_back(cmd, std::move(fn));
    return cmd;
  };
  add("gen-data", "generate the synthetic dataset and a preview sheet", [&] { return cmd_gen_data(common); });
  add("pretrain", "train the toy dual encoder (cached by config)", [&] { return cmd_pretrain(common); });
  add("attack", "build the adversarial cache for the evaluation set", [&] { return cmd_attack(common); });
  add("eval", "evaluate one method against zero-shot", [&] { return cmd_eval(common, method); })
      ->add_option("--method", method, "atpt (flags from config) or baseline (all components off)")
      ->check(CLI::IsMember({"atpt", "baseline"}));
  add("ablate", "the six component combinations plus zero-shot", [&] { return cmd_ablate(common); });
  add("sweep-views", "A-TPT over the view grid", [&] { return cmd_sweep_views(common); });
  add("sweep-eps", "zero-shot and A-TPT over the eps grid", [&] { return cmd_sweep_eps(common); });
  add("attribution-dump", "GAR and refined maps as CSV and PGM", [&] { return cmd_attribution_dump(common, dump_count); })
      ->add_option("--count", dump_count, "samples to dump");
  add("diverge", "feature cosine and top-K diagnostics under attack", [&] { return cmd_diverge(common); });
  add("verify-stability", "first- and second-order perturbation probes", [&] { return cmd_verify_stability(common); });
  add("grad-check", "backward against finite differences", [&] { return cmd_grad_check(common); });

  CLI11_PARSE(app, argc, argv);
  logger().set_level(common.verbose ? spdlog::level::info : spdlog::level::warn);
  try {
    for (auto& [cmd, fn] : commands)
      if (cmd->parsed()) return fn();
  } catch (const MissingArtifact& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
