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

#include "atpt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "atpt/augment.hpp"
#include "atpt/checkpoint.hpp"
#include "atpt/graph.hpp"
#include "atpt/log.hpp"
#include "atpt/rng.hpp"

namespace atpt {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  // Accepts fractions such as 4/255.
  const auto slash = v.find('/');
  try {
    std::size_t used = 0;
    if (slash != std::string::npos) {
      const double num = std::stod(v.substr(0, slash), &used);
      if (used != slash) throw std::invalid_argument(v);
      const std::string rest = v.substr(slash + 1);
      const double den = std::stod(rest, &used);
      if (used != rest.size() || den == 0.0) throw std::invalid_argument(v);
      return num / den;
    }
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("option '" + key + "': expected a number, got '" + v + "'");
  }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("option '" + key + "': expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(std::stoull(v));
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("option '" + key + "': expected on/off, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream s(v);
  std::string item;
  while (std::getline(s, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter size_field(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    c.*field = static_cast<T>(parse_size(k, v));
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto num = [](auto get) -> Setter {
      return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_double(k, v); };
    };
    auto cnt = [](auto get) -> Setter {
      return [get](RunConfig& c, const std::string& k, const std::string& v) {
        get(c) = static_cast<std::remove_reference_t<decltype(get(c))>>(parse_size(k, v));
      };
    };
    auto flag = [](auto get) -> Setter {
      return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); };
    };
    t["data_seed"] = cnt([](RunConfig& c) -> std::uint64_t& { return c.data.seed; });
    t["train_per_class"] = cnt([](RunConfig& c) -> std::size_t& { return c.data.train_per_class; });
    t["test_per_class"] = cnt([](RunConfig& c) -> std::size_t& { return c.data.test_per_class; });
    t["glyph_contrast"] = num([](RunConfig& c) -> double& { return c.data.glyph_contrast; });
    t["noise"] = num([](RunConfig& c) -> double& { return c.data.noise; });
    t["epochs"] = cnt([](RunConfig& c) -> std::size_t& { return c.pretrain.epochs; });
    t["batch"] = cnt([](RunConfig& c) -> std::size_t& { return c.pretrain.batch; });
    t["pretrain_lr"] = num([](RunConfig& c) -> double& { return c.pretrain.lr; });
    t["augmix_prob"] = num([](RunConfig& c) -> double& { return c.pretrain.augmix_prob; });
    t["pretrain_seed"] = cnt([](RunConfig& c) -> std::uint64_t& { return c.pretrain.seed; });
    t["model_seed"] = size_field(&RunConfig::model_seed);
    t["model"] = [](RunConfig& c, const std::string&, const std::string& v) { c.model_path = v; };
    t["attack"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "none") {
        c.adversarial = false;
      } else if (v == "pgd" || v == "fgsm") {
        c.adversarial = true;
        c.attack.kind = v == "pgd" ? AttackConfig::Kind::Pgd : AttackConfig::Kind::Fgsm;
      } else {
        throw ConfigError("option '" + k + "': expected pgd, fgsm or none, got '" + v + "'");
      }
    };
    t["eps"] = num([](RunConfig& c) -> double& { return c.attack.eps; });
    t["attack_steps"] = cnt([](RunConfig& c) -> std::size_t& { return c.attack.steps; });
    t["attack_alpha"] = num([](RunConfig& c) -> double& { return c.attack.alpha; });
    t["random_init"] = flag([](RunConfig& c) -> bool& { return c.attack.random_init; });
    t["attack_seed"] = cnt([](RunConfig& c) -> std::uint64_t& { return c.attack.seed; });
    t["views"] = cnt([](RunConfig& c) -> std::size_t& { return c.pipeline.views; });
    t["ratio"] = num([](RunConfig& c) -> double& { return c.pipeline.ratio; });
    t["m_high"] = num([](RunConfig& c) -> double& { return c.pipeline.m_high; });
    t["m_low"] = num([](RunConfig& c) -> double& { return c.pipeline.m_low; });
    t["rho"] = num([](RunConfig& c) -> double& { return c.pipeline.rho; });
    t["steps"] = cnt([](RunConfig& c) -> std::size_t& { return c.pipeline.optimizer.steps; });
    t["lr"] = num([](RunConfig& c) -> double& { return c.pipeline.optimizer.lr; });
    t["weight_decay"] = num([](RunConfig& c) -> double& { return c.pipeline.optimizer.weight_decay; });
    t["optimizer"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "adam") c.pipeline.optimizer.kind = OptimizerConfig::Kind::Adam;
      else if (v == "sgd") c.pipeline.optimizer.kind = OptimizerConfig::Kind::Sgd;
      else throw ConfigError("option '" + k + "': expected adam or sgd, got '" + v + "'");
    };
    t["a_refine"] = flag([](RunConfig& c) -> bool& { return c.pipeline.refine; });
    t["a_aug"] = flag([](RunConfig& c) -> bool& { return c.pipeline.guided; });
    t["a_tv"] = flag([](RunConfig& c) -> bool& { return c.pipeline.tv_weight; });
    t["swap_mix_strengths"] = flag([](RunConfig& c) -> bool& { return c.pipeline.swap_mix_strengths; });
    t["tv_on_raw"] = flag([](RunConfig& c) -> bool& { return c.pipeline.tv_on_raw; });
    t["normalize_rows"] = flag([](RunConfig& c) -> bool& { return c.pipeline.rollout.normalize_rows; });
    t["seed"] = size_field(&RunConfig::seed);
    t["limit"] = size_field(&RunConfig::limit);
    t["workers"] = size_field(&RunConfig::workers);
    t["out"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; };
    t["eps_grid"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.eps_grid.clear();
      for (const auto& s : split_list(v)) c.eps_grid.push_back(parse_double(k, s));
    };
    t["view_grid"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.view_grid.clear();
      for (const auto& s : split_list(v)) c.view_grid.push_back(parse_size(k, s));
    };
    t["stability_eps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stability_eps.clear();
      for (const auto& s : split_list(v)) c.stability_eps.push_back(parse_double(k, s));
    };
    t["stability_samples"] = size_field(&RunConfig::stability_samples);
    t["stability_entries"] = size_field(&RunConfig::stability_entries);
    t["grad_instances"] = size_field(&RunConfig::grad_instances);
    return t;
  }();
  return table;
}

nlohmann::json pipeline_json(const PipelineConfig& p) {
  return {{"views", p.views},
          {"ratio", p.ratio},
          {"m_high", p.m_high},
          {"m_low", p.m_low},
          {"swap_mix_strengths", p.swap_mix_strengths},
          {"a_refine", p.refine},
          {"a_aug", p.guided},
          {"a_tv", p.tv_weight},
          {"tv_on_raw", p.tv_on_raw},
          {"normalize_rows", p.rollout.normalize_rows},
          {"rho", p.rho},
          {"optimizer", p.optimizer.kind == OptimizerConfig::Kind::Adam ? "adam" : "sgd"},
          {"steps", p.optimizer.steps},
          {"lr", p.optimizer.lr},
          {"beta1", p.optimizer.beta1},
          {"beta2", p.optimizer.beta2},
          {"adam_eps", p.optimizer.eps},
          {"weight_decay", p.optimizer.weight_decay}};
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_json(const nlohmann::json& j) {
  const std::string s = j.dump();
  return hex16(fnv1a(s.data(), s.size()));
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Runs fn(i) for i in [0, n); each index is visited once, results go to
// caller-owned slots so the worker count never changes the output.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

MissingArtifact::MissingArtifact(const std::string& what, const std::string& path, const std::string& producer)
    : Error(what + " not found at " + path + "; run `atpt " + producer + "` with the same config first") {}

void set_option(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown option '" + key + "'");
  it->second(cfg, key, trim(value));
}

std::vector<std::string> option_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::stringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'");
    try {
      set_option(base, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream s;
  s << in.rdbuf();
  return parse_run_config(s.str(), std::move(base));
}

nlohmann::json to_json(const RunConfig& cfg) {
  return {{"data", to_json(cfg.data)},
          {"pretrain", to_json(cfg.pretrain)},
          {"model_seed", cfg.model_seed},
          {"model_path", cfg.model_path},
          {"adversarial", cfg.adversarial},
          {"attack", to_json(cfg.attack)},
          {"pipeline", pipeline_json(cfg.pipeline)},
          {"seed", cfg.seed},
          {"limit", cfg.limit},
          {"workers", cfg.workers},
          {"out", cfg.out},
          {"eps_grid", cfg.eps_grid},
          {"view_grid", cfg.view_grid},
          {"stability_eps", cfg.stability_eps},
          {"stability_samples", cfg.stability_samples},
          {"stability_entries", cfg.stability_entries},
          {"grad_instances", cfg.grad_instances}};
}

std::string config_hash(const RunConfig& cfg, const std::string& command) {
  nlohmann::json j = to_json(cfg);
  j.erase("workers");
  j.erase("out");
  j["command"] = command;
  return hash_json(j);
}

std::string run_root() {
  const char* env = std::getenv("ATPT_RUN_ROOT");
  return env && *env ? env : "runs";
}

std::string model_file(const RunConfig& cfg) {
  if (!cfg.model_path.empty()) return cfg.model_path;
  const nlohmann::json key{{"data", to_json(cfg.data)},
                           {"pretrain", to_json(cfg.pretrain)},
                           {"model", to_json(ModelConfig{})},
                           {"seed", cfg.model_seed}};
  return (fs::path(run_root()) / "models" / hash_json(key) / "model.bin").string();
}

std::string run_dir(const RunConfig& cfg, const std::string& command) {
  if (!cfg.out.empty()) return cfg.out;
  return (fs::path(run_root()) / (command + "-" + config_hash(cfg, command))).string();
}

ModelArtifact load_model_artifact(const RunConfig& cfg) {
  const std::string path = model_file(cfg);
  if (!fs::exists(path)) throw MissingArtifact("model", path, "pretrain");
  ModelArtifact a{load_model(path), path, file_hash(path), {}};
  if (fs::exists(path + ".json")) a.manifest = read_json(path + ".json");
  return a;
}

ModelArtifact ensure_model(const RunConfig& cfg, bool force) {
  const std::string path = model_file(cfg);
  if (!force && fs::exists(path)) return load_model_artifact(cfg);
  fs::create_directories(fs::path(path).parent_path());
  const DatasetPair data = generate(cfg.data);
  Model model = init_model(ModelConfig{}, cfg.model_seed);
  logger().info("pretraining on {} samples for {} epochs", data.train.size(), cfg.pretrain.epochs);
  const auto start = std::chrono::steady_clock::now();
  nlohmann::json history = nlohmann::json::array();
  pretrain(model, data.train, cfg.pretrain, [&](const EpochStats& s) {
    logger().info("epoch {} loss {:.4f} train accuracy {:.4f} ({:.0f}s)", s.epoch, s.loss, s.train_accuracy,
                  seconds_since(start));
    history.push_back({{"epoch", s.epoch}, {"loss", s.loss}, {"train_accuracy", s.train_accuracy}});
  });
  const double test_acc = zero_shot_accuracy(model, data.test);
  const double erased_acc = zero_shot_accuracy(model, generate_split(cfg.data, "test", true));
  logger().info("test accuracy {:.4f}, glyph-erased accuracy {:.4f}", test_acc, erased_acc);
  save_model(path, model,
             {{"data", to_json(cfg.data)},
              {"pretrain", to_json(cfg.pretrain)},
              {"model_seed", cfg.model_seed},
              {"history", history},
              {"test_accuracy", test_acc},
              {"erased_accuracy", erased_acc}});
  return load_model_artifact(cfg);
}

std::vector<Sample> evaluation_set(const RunConfig& cfg) {
  Dataset test = generate_split(cfg.data, "test");
  if (cfg.limit > 0 && cfg.limit < test.samples.size()) test.samples.resize(cfg.limit);
  return std::move(test.samples);
}

namespace {

nlohmann::json attack_manifest(const RunConfig& cfg, const ModelArtifact& model, const AttackConfig& attack,
                               std::size_t count) {
  return {{"key", attack_cache_key(cfg.data.seed, model.hash, attack, count)},
          {"dataset", cfg.data.hash()},
          {"model_hash", model.hash},
          {"attack", to_json(attack)},
          {"count", count}};
}

}  // namespace

std::string attack_file(const RunConfig& cfg, const ModelArtifact& model, const AttackConfig& attack,
                        std::size_t count) {
  return (fs::path(run_root()) / "attacks" / (attack_cache_key(cfg.data.seed, model.hash, attack, count) + ".bin"))
      .string();
}

std::vector<Tensor> load_attacks(const RunConfig& cfg, const ModelArtifact& model,
                                 const std::vector<Sample>& samples, const AttackConfig& attack) {
  const std::string path = attack_file(cfg, model, attack, samples.size());
  std::vector<Tensor> images = load_attack_cache(path, attack_manifest(cfg, model, attack, samples.size()));
  if (images.empty()) throw MissingArtifact("attack cache", path, "attack");
  return images;
}

std::vector<Tensor> ensure_attacks(const RunConfig& cfg, const ModelArtifact& model,
                                   const std::vector<Sample>& samples, const AttackConfig& attack, bool force) {
  const std::string path = attack_file(cfg, model, attack, samples.size());
  const nlohmann::json manifest = attack_manifest(cfg, model, attack, samples.size());
  if (!force) {
    std::vector<Tensor> cached = load_attack_cache(path, manifest);
    if (!cached.empty()) return cached;
  }
  attack.validate();
  logger().info("attacking {} samples with {} eps {:.5f}", samples.size(), attack.name(), attack.eps);
  std::vector<Tensor> images(samples.size());
  parallel_for(samples.size(), cfg.workers, [&](std::size_t i) {
    images[i] = run_attack(model.model, samples[i].image, samples[i].label, attack);
  });
  fs::create_directories(fs::path(path).parent_path());
  save_attack_cache(path, images, manifest);
  return images;
}

Method zero_shot_method() {
  Method m;
  m.name = "zero-shot";
  m.zero_shot = true;
  return m;
}

std::string method_name(const PipelineConfig& p) {
  if (!p.refine && !p.guided && !p.tv_weight) return "tpt-ensemble";
  if (p.refine && p.guided && p.tv_weight) return "a-tpt";
  std::string name;
  for (const auto& [on, part] : {std::pair{p.refine, "refine"}, {p.guided, "aug"}, {p.tv_weight, "tv"}})
    if (on) name += (name.empty() ? "" : "+") + std::string(part);
  return name;
}

Method pipeline_method(const PipelineConfig& pipeline) { return {method_name(pipeline), false, pipeline}; }

Method baseline_method(const PipelineConfig& pipeline) {
  PipelineConfig p = pipeline;
  p.refine = p.guided = p.tv_weight = false;
  return pipeline_method(p);
}

std::vector<Method> ablation_methods(const PipelineConfig& pipeline) {
  static const bool rows[][3] = {{false, false, false}, {true, false, false}, {false, true, true},
                                 {true, false, true},   {true, true, false},  {true, true, true}};
  std::vector<Method> out;
  for (const auto& r : rows) {
    PipelineConfig p = pipeline;
    p.refine = r[0];
    p.guided = r[1];
    p.tv_weight = r[2];
    out.push_back(pipeline_method(p));
  }
  return out;
}

namespace {

void localize(const InferResult& r, const PreparedViews& pv, const Sample& sample, std::size_t size,
              SampleOutcome& o) {
  o.localization = o.localization_high = o.localization_low = kNaN;
  if (r.maps.empty() || r.weights.size() != r.maps.size()) return;
  const double cut = 2.0 / static_cast<double>(r.selected.size());
  double wsum = 0.0, lsum = 0.0, hs = 0.0, ls = 0.0;
  std::size_t hn = 0, ln = 0;
  for (std::size_t k = 0; k < r.selected.size(); ++k) {
    const Box box = apply_base_view(sample.box, pv.params[r.selected[k]], size);
    if (box.area() == 0) continue;
    const double loc = localization_score(r.maps[k], box, size);
    wsum += r.weights[k];
    lsum += r.weights[k] * loc;
    if (r.weights[k] > cut) {
      hs += loc;
      ++hn;
    } else {
      ls += loc;
      ++ln;
    }
  }
  if (wsum > 0.0) o.localization = lsum / wsum;
  if (hn) o.localization_high = hs / static_cast<double>(hn);
  if (ln) o.localization_low = ls / static_cast<double>(ln);
}

nlohmann::json nullable(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace

std::vector<MethodResult> evaluate(const Model& model, const std::vector<Sample>& samples,
                                   const std::vector<Tensor>* adversarial, const std::vector<Method>& methods,
                                   const RunConfig& cfg, bool clean) {
  if (adversarial && adversarial->size() != samples.size())
    throw Error("evaluate: " + std::to_string(adversarial->size()) + " attacked inputs for " +
                std::to_string(samples.size()) + " samples");
  std::vector<MethodResult> results;
  for (const Method& m : methods) results.push_back({m, {}, {}});
  const std::size_t size = model.config.encoder.image_size;

  auto run_kind = [&](bool attacked) {
    const char* kind = attacked ? "adversarial" : "clean";
    std::vector<std::vector<SampleOutcome>> out(methods.size(), std::vector<SampleOutcome>(samples.size()));
    std::atomic<std::size_t> done{0};
    parallel_for(samples.size(), cfg.workers, [&](std::size_t i) {
      const Sample& sample = samples[i];
      const Tensor& x = attacked ? (*adversarial)[i] : sample.image;
      const std::uint64_t seed = split_seed(cfg.seed, i);
      // Views are shared between methods that agree on the count and rollout.
      std::map<std::pair<std::size_t, bool>, std::pair<PreparedViews, double>> prepared;
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const Method& method = methods[m];
        SampleOutcome& o = out[m][i];
        o.localization = o.localization_high = o.localization_low = kNaN;
        if (method.zero_shot) {
          const auto start = std::chrono::steady_clock::now();
          const Tensor p = predict_probs(encode_image(model, x), model.default_class_embeddings, model.config.tau);
          o.prediction = argmax(p.data());
          o.seconds = seconds_since(start);
          o.detail = {{"probs", p.vec()}};
        } else {
          const PipelineConfig& pc = method.pipeline;
          const auto key = std::make_pair(pc.views, pc.rollout.normalize_rows);
          auto it = prepared.find(key);
          if (it == prepared.end()) {
            bool maps = false;
            for (const Method& other : methods)
              maps |= !other.zero_shot && other.pipeline.views == pc.views &&
                      other.pipeline.rollout.normalize_rows == pc.rollout.normalize_rows && other.pipeline.guided;
            const auto start = std::chrono::steady_clock::now();
            PreparedViews pv = prepare_views(x, model, pc.views, seed, maps, pc.rollout);
            it = prepared.emplace(key, std::make_pair(std::move(pv), seconds_since(start))).first;
          }
          const auto start = std::chrono::steady_clock::now();
          const InferResult r = run_variant(it->second.first, model, pc);
          o.seconds = it->second.second + seconds_since(start);
          o.prediction = r.prediction;
          localize(r, it->second.first, sample, size, o);
          o.detail = to_json(r, pc);
        }
        o.correct = o.prediction == sample.label;
        o.detail["method"] = method.name;
        o.detail["input"] = kind;
        o.detail["sample"] = i;
        o.detail["label"] = sample.label;
        o.detail["prediction"] = o.prediction;
        o.detail["correct"] = o.correct;
        o.detail["localization"] = nullable(o.localization);
        o.detail["localization_high"] = nullable(o.localization_high);
        o.detail["localization_low"] = nullable(o.localization_low);
      }
      const std::size_t n = ++done;
      if (n % 25 == 0 || n == samples.size()) logger().info("{} inputs: {}/{}", kind, n, samples.size());
    });
    for (std::size_t m = 0; m < methods.size(); ++m)
      (attacked ? results[m].adversarial : results[m].clean) = std::move(out[m]);
  };
  if (clean) run_kind(false);
  if (adversarial) run_kind(true);
  return results;
}

EvalRow summarize(const MethodResult& r, const RunConfig& cfg) {
  auto accuracy = [](const std::vector<SampleOutcome>& v) {
    if (v.empty()) return kNaN;
    std::size_t c = 0;
    for (const auto& o : v) c += o.correct;
    return static_cast<double>(c) / static_cast<double>(v.size());
  };
  const auto& main = r.adversarial.empty() ? r.clean : r.adversarial;
  double loc = 0.0, secs = 0.0;
  std::size_t n = 0;
  for (const auto& o : main) {
    secs += o.seconds;
    if (std::isfinite(o.localization)) {
      loc += o.localization;
      ++n;
    }
  }
  EvalRow row;
  row.method = r.method.name;
  if (!r.method.zero_shot) {
    row.a_refine = r.method.pipeline.refine;
    row.a_aug = r.method.pipeline.guided;
    row.a_tv = r.method.pipeline.tv_weight;
    row.n_views = r.method.pipeline.views;
  }
  if (!r.adversarial.empty()) {
    row.attack = cfg.attack.name();
    row.eps = cfg.attack.eps;
  }
  row.clean_acc = accuracy(r.clean);
  row.adv_acc = accuracy(r.adversarial);
  row.mean_localization = n ? loc / static_cast<double>(n) : kNaN;
  row.wall_seconds = main.empty() ? kNaN : secs / static_cast<double>(main.size());
  return row;
}

std::string csv_header() {
  return "run_hash,dataset_seed,method,a_refine,a_aug,a_tv,attack,eps,n_views,clean_acc,adv_acc,"
         "mean_localization,wall_seconds";
}

std::string csv_line(const EvalRow& row, const std::string& run_hash, std::uint64_t dataset_seed) {
  std::ostringstream s;
  s << run_hash << ',' << dataset_seed << ',' << row.method << ',' << row.a_refine << ',' << row.a_aug << ','
    << row.a_tv << ',' << row.attack << ',' << fmt(row.eps) << ',' << row.n_views << ',' << fmt(row.clean_acc)
    << ',' << fmt(row.adv_acc) << ',' << fmt(row.mean_localization) << ',' << fmt(row.wall_seconds);
  return s.str();
}

void write_csv(const std::string& path, const std::vector<EvalRow>& rows, const std::string& run_hash,
               std::uint64_t dataset_seed) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << csv_header() << '\n';
  for (const EvalRow& r : rows) out << csv_line(r, run_hash, dataset_seed) << '\n';
}

void write_details(const std::string& path, const std::vector<MethodResult>& results) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (const MethodResult& r : results) {
    for (const auto& o : r.clean) out << o.detail.dump() << '\n';
    for (const auto& o : r.adversarial) out << o.detail.dump() << '\n';
  }
}

// ---- diagnostics ------------------------------------------------------------

namespace {

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Position of `label` when classes are sorted by descending probability.
std::size_t rank_of(const Tensor& probs, std::size_t label) {
  std::size_t rank = 0;
  for (std::size_t c = 0; c < probs.size(); ++c)
    if (probs[c] > probs[label] || (probs[c] == probs[label] && c < label)) ++rank;
  return rank;
}

}  // namespace

DivergenceReport feature_divergence_report(const Model& model, const std::vector<Sample>& samples,
                                           const std::vector<Tensor>& adversarial, double eps,
                                           std::uint64_t seed) {
  if (adversarial.size() != samples.size()) throw Error("feature_divergence_report: unpaired inputs");
  DivergenceReport r;
  r.samples = samples.size();
  r.eps = eps;
  constexpr std::size_t kMaxK = 5;
  r.topk_clean.assign(kMaxK, 0.0);
  r.topk_adversarial.assign(kMaxK, 0.0);
  r.topk_noise.assign(kMaxK, 0.0);
  if (samples.empty()) return r;
  const Tensor& emb = model.default_class_embeddings;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng(split_seed(seed, i));
    Tensor noisy = samples[i].image;
    for (double& v : noisy.data()) v = std::clamp(v + (rng.bernoulli(0.5) ? eps : -eps), 0.0, 1.0);
    const Tensor fc = encode_image(model, samples[i].image);
    const Tensor fa = encode_image(model, adversarial[i]);
    const Tensor fn = encode_image(model, noisy);
    r.mean_cos_adversarial += cosine(fc, fa);
    r.mean_cos_noise += cosine(fc, fn);
    const std::size_t label = samples[i].label;
    const std::size_t rc = rank_of(predict_probs(fc, emb, model.config.tau), label);
    const std::size_t ra = rank_of(predict_probs(fa, emb, model.config.tau), label);
    const std::size_t rn = rank_of(predict_probs(fn, emb, model.config.tau), label);
    for (std::size_t k = 0; k < kMaxK; ++k) {
      r.topk_clean[k] += rc <= k;
      r.topk_adversarial[k] += ra <= k;
      r.topk_noise[k] += rn <= k;
    }
  }
  const double n = static_cast<double>(samples.size());
  r.mean_cos_adversarial /= n;
  r.mean_cos_noise /= n;
  for (std::size_t k = 0; k < kMaxK; ++k) {
    r.topk_clean[k] /= n;
    r.topk_adversarial[k] /= n;
    r.topk_noise[k] /= n;
  }
  return r;
}

nlohmann::json to_json(const DivergenceReport& r) {
  return {{"samples", r.samples},
          {"eps", r.eps},
          {"mean_cos_adversarial", r.mean_cos_adversarial},
          {"mean_cos_noise", r.mean_cos_noise},
          {"topk_clean", r.topk_clean},
          {"topk_adversarial", r.topk_adversarial},
          {"topk_noise", r.topk_noise}};
}

double loglog_fit(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < std::min(x.size(), y.size()); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) continue;
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n < 2) return kNaN;
  const double d = static_cast<double>(n) * sxx - sx * sx;
  return d == 0.0 ? kNaN : (static_cast<double>(n) * sxy - sx * sy) / d;
}

namespace {

// Blocks whose token weights enter the refined rollout.
struct Probe {
  std::vector<std::size_t> blocks;
  std::vector<Tensor> phi, attention, weights;
  double mass = 0.0;
};

Probe probe(const Model& model, const Tensor& image, std::size_t target) {
  PassOptions opt;
  opt.target = target;
  const ImagePass pass = image_pass(model, image, model.default_class_embeddings, opt);
  const EncoderCapture& cap = pass.capture;
  Probe p;
  p.mass = std::numeric_limits<double>::infinity();
  const std::size_t b0 = cap.blocks() >= 2 ? cap.blocks() - 2 : 0;
  for (std::size_t b = b0; b < cap.blocks(); ++b) {
    p.blocks.push_back(b);
    p.phi.push_back(cap.grad_attention[b]);
    p.attention.push_back(cap.attention[b]);
    double mass = 0.0;
    const Tensor& t = cap.tokens[b];
    const Tensor& g = cap.grad_tokens[b];
    for (std::size_t v = 0; v < t.dim(0); ++v) {
      double q = 0.0;
      for (std::size_t j = 0; j < t.dim(1); ++j) q += t.at(v, j) * g.at(v, j);
      mass += std::max(q, 0.0);
    }
    p.mass = std::min(p.mass, mass);
    p.weights.push_back(mass < 1e-12 ? Tensor({t.dim(0)}) : token_weights(t, g));
  }
  return p;
}

double sup_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor head_mean(const Tensor& a) {
  const std::size_t h = a.dim(0), s = a.dim(1);
  Tensor out({s, s});
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < s * s; ++i) out[i] += a[k * s * s + i];
  for (double& v : out.data()) v /= static_cast<double>(h);
  return out;
}

// sup_ij |dB_ij - (dA_ij W_j + A_ij dW_j)| with B = mean_h(A) diag(W).
double decomposition_residual(const Probe& p, const Probe& q) {
  double worst = 0.0;
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const Tensor a = head_mean(p.attention[k]), a2 = head_mean(q.attention[k]);
    const Tensor& w = p.weights[k];
    const Tensor& w2 = q.weights[k];
    const std::size_t s = w.size();
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        const double db = a2.at(i, j) * w2[j] - a.at(i, j) * w[j];
        const double first = (a2.at(i, j) - a.at(i, j)) * w[j] + a.at(i, j) * (w2[j] - w[j]);
        worst = std::max(worst, std::abs(db - first));
      }
  }
  return worst;
}

double geometric_rate(const std::vector<double>& eps, const std::vector<double>& change) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t e = 0; e < eps.size(); ++e) {
    if (!(eps[e] > 0.0 && change[e] > 0.0)) continue;
    s += std::log(change[e] / eps[e]);
    ++n;
  }
  return n ? std::exp(s / static_cast<double>(n)) : 0.0;
}

// Gradient of phi_u = dS/dA_u with respect to the input, from a central
// difference of input gradients under an offset of the attention entry.
Tensor phi_input_gradient(const Model& model, const Tensor& image, std::size_t target, const EntryProbe& u,
                          const Shape& attention_shape) {
  constexpr double h = 1e-4;
  auto input_grad = [&](double offset) {
    Tensor bump(attention_shape);
    bump.at(u.head, u.row, u.col) = offset;
    EncodeHooks hooks;
    hooks.attention = [&](Graph& g, std::size_t b, Var a) { return b == u.block ? add(a, g.constant(bump)) : a; };
    PassOptions opt;
    opt.target = target;
    opt.capture = false;
    opt.input_gradient = true;
    opt.hooks = &hooks;
    return image_pass(model, image, model.default_class_embeddings, opt).input_grad;
  };
  const Tensor plus = input_grad(h), minus = input_grad(-h);
  Tensor out(plus.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (plus[i] - minus[i]) / (2.0 * h);
  return out;
}

}  // namespace

StabilityReport verify_stability(const Model& model, const std::vector<Sample>& samples,
                                 const std::vector<double>& eps, std::size_t entries_per_sample,
                                 std::uint64_t seed) {
  StabilityReport r;
  r.eps = eps;
  r.phi_change.assign(eps.size(), 0.0);
  r.weight_change.assign(eps.size(), 0.0);
  r.residual.assign(eps.size(), 0.0);
  r.min_score_mass = std::numeric_limits<double>::infinity();
  r.samples = samples.size();
  std::size_t aligned = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& x = samples[i].image;
    const std::size_t target = argmax(
        predict_probs(encode_image(model, x), model.default_class_embeddings, model.config.tau).data());
    const Probe base = probe(model, x, target);
    if (base.mass < 1e-12) {
      ++r.excluded;
      logger().warn("verify_stability: sample {} has no positive token score, excluded", i);
      continue;
    }
    r.min_score_mass = std::min(r.min_score_mass, base.mass);
    Rng rng(split_seed(seed, i));
    Tensor direction(x.shape());
    for (double& v : direction.data()) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
    for (std::size_t e = 0; e < eps.size(); ++e) {
      Tensor xe = x;
      for (std::size_t k = 0; k < xe.size(); ++k) xe[k] += eps[e] * direction[k];
      const Probe moved = probe(model, xe, target);
      for (std::size_t k = 0; k < base.blocks.size(); ++k) {
        r.phi_change[e] = std::max(r.phi_change[e], sup_diff(base.phi[k], moved.phi[k]));
        r.weight_change[e] = std::max(r.weight_change[e], sup_diff(base.weights[k], moved.weights[k]));
      }
      r.residual[e] = std::max(r.residual[e], decomposition_residual(base, moved));
    }

    // Entries of the captured attention gradients with non-negligible size.
    const std::size_t last = base.blocks.size() - 1;
    const Tensor& phi = base.phi[last];
    double biggest = 0.0;
    for (double v : phi.data()) biggest = std::max(biggest, std::abs(v));
    std::vector<std::size_t> candidates;
    for (std::size_t k = 0; k < phi.size(); ++k)
      if (std::abs(phi[k]) >= 1e-3 * biggest && biggest > 0.0) candidates.push_back(k);
    const std::size_t s = phi.dim(1);
    for (std::size_t n = 0; n < entries_per_sample && !candidates.empty(); ++n) {
      const std::size_t pick =
          candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
      EntryProbe u;
      u.sample = i;
      u.block = base.blocks[last];
      u.head = pick / (s * s);
      u.row = pick / s % s;
      u.col = pick % s;
      u.phi = phi[pick];
      const Tensor g = phi_input_gradient(model, x, target, u, phi.shape());
      for (double e : eps) {
        Tensor xe = x;
        for (std::size_t k = 0; k < xe.size(); ++k) xe[k] += e * (g[k] > 0.0 ? 1.0 : g[k] < 0.0 ? -1.0 : 0.0);
        const Probe moved = probe(model, xe, target);
        u.phi_change.push_back(std::abs(moved.phi[last][pick] - u.phi));
        u.weight_change.push_back(sup_diff(base.weights[last], moved.weights[last]));
      }
      u.phi_slope = loglog_fit(eps, u.phi_change);
      u.phi_constant = geometric_rate(eps, u.phi_change);
      u.weight_constant = geometric_rate(eps, u.weight_change);
      aligned += u.phi_slope >= 0.8 && u.phi_slope <= 1.2 && u.phi_constant > u.weight_constant;
      r.entries.push_back(std::move(u));
    }
  }
  r.phi_slope = loglog_fit(eps, r.phi_change);
  r.weight_slope = loglog_fit(eps, r.weight_change);
  r.residual_slope = loglog_fit(eps, r.residual);
  for (std::size_t e = 0; e < eps.size(); ++e) {
    if (!(eps[e] > 0.0)) continue;
    r.lipschitz_weight = std::max(r.lipschitz_weight, r.weight_change[e] / eps[e]);
    r.lipschitz_phi = std::max(r.lipschitz_phi, r.phi_change[e] / eps[e]);
    r.residual_constant = std::max(r.residual_constant, r.residual[e] / (eps[e] * eps[e]));
  }
  if (!std::isfinite(r.min_score_mass)) r.min_score_mass = 0.0;
  r.aligned_fraction = r.entries.empty() ? 0.0 : static_cast<double>(aligned) / static_cast<double>(r.entries.size());
  return r;
}

nlohmann::json to_json(const StabilityReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const EntryProbe& u : r.entries)
    entries.push_back({{"sample", u.sample},
                       {"block", u.block},
                       {"head", u.head},
                       {"row", u.row},
                       {"col", u.col},
                       {"phi", u.phi},
                       {"phi_change", u.phi_change},
                       {"weight_change", u.weight_change},
                       {"phi_slope", nullable(u.phi_slope)},
                       {"phi_constant", u.phi_constant},
                       {"weight_constant", u.weight_constant}});
  return {{"eps", r.eps},
          {"phi_change", r.phi_change},
          {"weight_change", r.weight_change},
          {"residual", r.residual},
          {"phi_slope", nullable(r.phi_slope)},
          {"weight_slope", nullable(r.weight_slope)},
          {"residual_slope", nullable(r.residual_slope)},
          {"lipschitz_weight", r.lipschitz_weight},
          {"min_score_mass", r.min_score_mass},
          {"lipschitz_phi", r.lipschitz_phi},
          {"residual_constant", r.residual_constant},
          {"aligned_fraction", r.aligned_fraction},
          {"samples", r.samples},
          {"excluded", r.excluded},
          {"entries", entries}};
}

// ---- gradient checks ----------------------------------------------------------

namespace {

Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Richardson-extrapolated central difference of f at 0.
double derivative(const std::function<double(double)>& f, double h) {
  auto central = [&](double s) { return (f(s) - f(-s)) / (2.0 * s); };
  return (4.0 * central(h / 2.0) - central(h)) / 3.0;
}

double normwise_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / std::max(scale, 1e-8);
}

using Op = std::function<Var(std::span<const Var>)>;
using Maker = std::function<std::vector<Tensor>(Rng&)>;

// sum(op(args) * R) differentiated with respect to every argument.
double check_primitive(const Op& op, const std::vector<Tensor>& args, Rng& rng) {
  Tensor weights;
  auto loss = [&](Graph& g, const std::vector<Var>& vars) {
    Var y = op(vars);
    if (weights.empty()) weights = uniform(rng, y.shape(), -1.0, 1.0);
    return sum_all(hadamard(y, g.constant(weights))).value().item();
  };
  Graph g;
  std::vector<Var> leaves;
  for (const Tensor& a : args) leaves.push_back(g.leaf(a));
  Var y = op(leaves);
  weights = uniform(rng, y.shape(), -1.0, 1.0);
  const Gradients grads = g.backward(sum_all(hadamard(y, g.constant(weights))));
  std::vector<double> analytic, numeric;
  for (std::size_t a = 0; a < args.size(); ++a) {
    const Tensor& ga = grad_of(grads, leaves[a]);
    for (std::size_t k = 0; k < args[a].size(); ++k) {
      analytic.push_back(ga[k]);
      numeric.push_back(derivative(
          [&](double h) {
            Graph f;
            std::vector<Var> vars;
            for (std::size_t b = 0; b < args.size(); ++b) {
              Tensor t = args[b];
              if (b == a) t[k] += h;
              vars.push_back(f.constant(std::move(t)));
            }
            return loss(f, vars);
          },
          1e-3));
    }
  }
  return normwise_error(analytic, numeric);
}

std::size_t dim(Rng& rng, int hi = 5) { return static_cast<std::size_t>(rng.uniform_int(1, hi)); }

// Magnitudes kept away from the clamp kink.
Tensor off_kink(Rng& rng, Shape shape) {
  Tensor t = uniform(rng, std::move(shape), 0.1, 1.0);
  for (double& v : t.data()) v = rng.bernoulli(0.5) ? v : -v;
  return t;
}

std::vector<std::pair<std::string, std::pair<Op, Maker>>> primitive_cases() {
  std::vector<std::pair<std::string, std::pair<Op, Maker>>> c;
  auto unary = [](double lo, double hi) -> Maker {
    return [lo, hi](Rng& r) { return std::vector<Tensor>{uniform(r, {dim(r), dim(r, 6)}, lo, hi)}; };
  };
  auto same2 = [](Rng& r) {
    const Shape s{dim(r), dim(r, 6)};
    return std::vector<Tensor>{uniform(r, s, -1, 1), uniform(r, s, -1, 1)};
  };
  c.push_back({"matmul", {[](std::span<const Var> v) { return matmul(v[0], v[1]); }, [](Rng& r) {
                            const std::size_t m = dim(r), k = dim(r), n = dim(r);
                            return std::vector<Tensor>{uniform(r, {m, k}, -1, 1), uniform(r, {k, n}, -1, 1)};
                          }}});
  c.push_back({"add", {[](std::span<const Var> v) { return add(v[0], v[1]); }, same2}});
  c.push_back({"sub", {[](std::span<const Var> v) { return sub(v[0], v[1]); }, same2}});
  c.push_back({"hadamard", {[](std::span<const Var> v) { return hadamard(v[0], v[1]); }, same2}});
  c.push_back({"scale", {[](std::span<const Var> v) { return scale(v[0], -2.5); }, unary(-1, 1)}});
  c.push_back({"transpose", {[](std::span<const Var> v) { return transpose(v[0]); }, unary(-1, 1)}});
  c.push_back({"softmax_rows", {[](std::span<const Var> v) { return softmax_rows(v[0]); }, unary(-3, 3)}});
  c.push_back({"layer_norm", {[](std::span<const Var> v) { return layer_norm(v[0], v[1], v[2]); }, [](Rng& r) {
                                const std::size_t m = dim(r), n = static_cast<std::size_t>(r.uniform_int(2, 6));
                                return std::vector<Tensor>{uniform(r, {m, n}, -2, 2), uniform(r, {n}, 0.5, 1.5),
                                                           uniform(r, {n}, -1, 1)};
                              }}});
  c.push_back({"gelu", {[](std::span<const Var> v) { return gelu(v[0]); }, unary(-3, 3)}});
  c.push_back({"mean_axis0", {[](std::span<const Var> v) { return mean_axis(v[0], 0); }, unary(-1, 1)}});
  c.push_back({"mean_axis1", {[](std::span<const Var> v) { return mean_axis(v[0], 1); }, unary(-1, 1)}});
  c.push_back({"sum_axis0", {[](std::span<const Var> v) { return sum_axis(v[0], 0); }, unary(-1, 1)}});
  c.push_back({"sum_axis1", {[](std::span<const Var> v) { return sum_axis(v[0], 1); }, unary(-1, 1)}});
  c.push_back({"clamp_min0", {[](std::span<const Var> v) { return clamp_min0(v[0]); },
                              [](Rng& r) { return std::vector<Tensor>{off_kink(r, {dim(r), dim(r, 6)})}; }}});
  c.push_back({"log", {[](std::span<const Var> v) { return log(v[0]); }, unary(0.5, 2.0)}});
  c.push_back({"exp", {[](std::span<const Var> v) { return exp(v[0]); }, unary(-1, 1)}});
  c.push_back({"cosine_similarity", {[](std::span<const Var> v) { return cosine_similarity(v[0], v[1]); },
                                     [](Rng& r) {
                                       const std::size_t d = static_cast<std::size_t>(r.uniform_int(2, 6));
                                       return std::vector<Tensor>{uniform(r, {dim(r), d}, -1, 1),
                                                                  uniform(r, {dim(r), d}, -1, 1)};
                                     }}});
  c.push_back({"add_row_bias", {[](std::span<const Var> v) { return add_row_bias(v[0], v[1]); }, [](Rng& r) {
                                  const std::size_t m = dim(r), n = dim(r);
                                  return std::vector<Tensor>{uniform(r, {m, n}, -1, 1), uniform(r, {n}, -1, 1)};
                                }}});
  c.push_back({"reshape", {[](std::span<const Var> v) { return reshape(v[0], {v[0].shape()[0] * v[0].shape()[1]}); },
                           unary(-1, 1)}});
  c.push_back({"slice_rows", {[](std::span<const Var> v) { return slice_rows(v[0], 1, 2); }, [](Rng& r) {
                                return std::vector<Tensor>{uniform(r, {4, dim(r)}, -1, 1)};
                              }}});
  c.push_back({"slice_cols", {[](std::span<const Var> v) { return slice_cols(v[0], 1, 2); }, [](Rng& r) {
                                return std::vector<Tensor>{uniform(r, {dim(r), 4}, -1, 1)};
                              }}});
  c.push_back({"concat_rows", {[](std::span<const Var> v) { return concat_rows(v); }, [](Rng& r) {
                                 const std::size_t n = dim(r);
                                 return std::vector<Tensor>{uniform(r, {dim(r), n}, -1, 1),
                                                            uniform(r, {dim(r), n}, -1, 1)};
                               }}});
  c.push_back({"concat_cols", {[](std::span<const Var> v) { return concat_cols(v); }, [](Rng& r) {
                                 const std::size_t m = dim(r);
                                 return std::vector<Tensor>{uniform(r, {m, dim(r)}, -1, 1),
                                                            uniform(r, {m, dim(r)}, -1, 1)};
                               }}});
  c.push_back({"stack", {[](std::span<const Var> v) { return stack(v); }, same2}});
  c.push_back({"select", {[](std::span<const Var> v) { return select(v[0], 1); }, [](Rng& r) {
                            return std::vector<Tensor>{uniform(r, {3, dim(r), dim(r)}, -1, 1)};
                          }}});
  c.push_back({"patchify", {[](std::span<const Var> v) { return patchify(v[0], 2); }, [](Rng& r) {
                              return std::vector<Tensor>{uniform(r, {4, 4}, -1, 1)};
                            }}});
  return c;
}

// Coordinates to probe: the largest analytic entries plus random ones.
std::vector<std::size_t> probe_coordinates(const Tensor& analytic, Rng& rng, std::size_t count) {
  std::vector<std::size_t> idx(analytic.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t top = std::min(count / 2, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                    [&](std::size_t a, std::size_t b) { return std::abs(analytic[a]) > std::abs(analytic[b]); });
  std::vector<std::size_t> out(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top));
  while (out.size() < count && out.size() < analytic.size())
    out.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(analytic.size()) - 1)));
  return out;
}

double check_coordinates(const Tensor& analytic, const std::function<double(std::size_t, double)>& f, Rng& rng,
                         double step, std::size_t count = 12) {
  std::vector<double> a, n;
  for (std::size_t k : probe_coordinates(analytic, rng, count)) {
    a.push_back(analytic[k]);
    n.push_back(derivative([&](double h) { return f(k, h); }, step));
  }
  return normwise_error(a, n);
}

}  // namespace

std::vector<GradCheck> gradient_checks(const Model& model, std::size_t instances, std::uint64_t seed) {
  std::vector<GradCheck> out;
  Rng rng(seed);
  for (const auto& [name, test] : primitive_cases()) {
    GradCheck c{name, instances, 0.0};
    for (std::size_t i = 0; i < instances; ++i)
      c.max_error = std::max(c.max_error, check_primitive(test.first, test.second(rng), rng));
    out.push_back(c);
  }

  const Tensor& emb = model.default_class_embeddings;
  const std::size_t size = model.config.encoder.image_size;
  const std::size_t blocks = model.config.encoder.blocks;
  GradCheck attention{"d S / d attention", instances, 0.0}, tokens{"d S / d tokens", instances, 0.0};
  GradCheck prompts{"d L_H / d prompts", instances, 0.0}, input{"d CE / d input", instances, 0.0};
  for (std::size_t i = 0; i < instances; ++i) {
    const Tensor x = uniform(rng, {size, size}, 0.05, 0.95);
    const ImagePass pass = target_logit(model, x, emb);
    const std::size_t block = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(blocks) - 1));
    auto hooked = [&](bool on_attention, std::size_t k, double h) {
      const Shape shape = on_attention ? pass.capture.attention[block].shape() : pass.capture.tokens[block].shape();
      Tensor bump(shape);
      bump[k] = h;
      EncodeHooks hooks;
      auto shift = [&](Graph& g, std::size_t b, Var v) { return b == block ? add(v, g.constant(bump)) : v; };
      if (on_attention) hooks.attention = shift;
      else hooks.tokens = shift;
      PassOptions opt;
      opt.target = pass.target;
      opt.capture = false;
      opt.hooks = &hooks;
      return image_pass(model, x, emb, opt).objective;
    };
    attention.max_error = std::max(
        attention.max_error,
        check_coordinates(pass.capture.grad_attention[block],
                          [&](std::size_t k, double h) { return hooked(true, k, h); }, rng, 1e-3));
    tokens.max_error = std::max(
        tokens.max_error, check_coordinates(pass.capture.grad_tokens[block],
                                            [&](std::size_t k, double h) { return hooked(false, k, h); }, rng, 1e-3));

    Tensor features({6, model.config.encoder.feature_dim});
    for (std::size_t v = 0; v < 6; ++v) {
      const Tensor f = encode_image(model, uniform(rng, {size, size}, 0.0, 1.0));
      for (std::size_t j = 0; j < f.size(); ++j) features.at(v, j) = f[j];
    }
    Tensor p = model.default_prompts;
    for (double& v : p.data()) v += rng.uniform(-0.05, 0.05);
    Tensor grad;
    prompt_entropy_grad(model, p, features, grad);
    prompts.max_error = std::max(prompts.max_error, check_coordinates(
                                                        grad,
                                                        [&](std::size_t k, double h) {
                                                          Tensor q = p;
                                                          q[k] += h;
                                                          return prompt_entropy_loss(model, q, features);
                                                        },
                                                        rng, 1e-3, 24));

    const std::size_t label = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(emb.dim(0)) - 1));
    const Tensor gx = ce_input_gradient(model, x, label, emb);
    input.max_error = std::max(input.max_error, check_coordinates(
                                                    gx,
                                                    [&](std::size_t k, double h) {
                                                      Tensor xh = x;
                                                      xh[k] += h;
                                                      PassOptions opt;
                                                      opt.objective = Objective::CrossEntropy;
                                                      opt.target = label;
                                                      opt.capture = false;
                                                      return image_pass(model, xh, emb, opt).objective;
                                                    },
                                                    rng, 1e-3));
  }
  out.push_back(attention);
  out.push_back(tokens);
  out.push_back(prompts);
  out.push_back(input);
  return out;
}

}  // namespace atpt
