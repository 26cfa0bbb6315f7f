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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "atpt/harness.hpp"

using namespace atpt;

namespace {

std::string strip_wall(const std::string& line) { return line.substr(0, line.rfind(',')); }

struct Tiny {
  Model model = init_model(ModelConfig{}, 3);
  RunConfig cfg;
  std::vector<Sample> samples;

  Tiny() {
    cfg.data.test_per_class = 1;
    cfg.data.train_per_class = 1;
    cfg.limit = 4;
    cfg.pipeline.views = 8;
    samples = evaluation_set(cfg);
  }
};

}  // namespace

TEST(RunConfig, ParsesKeysFractionsAndComments) {
  const RunConfig cfg = parse_run_config(
      "# comment\n"
      "eps = 8/255\n"
      "views = 32   # trailing\n"
      "a_tv = off\n"
      "attack = fgsm\n"
      "view_grid = 4, 8\n");
  EXPECT_DOUBLE_EQ(cfg.attack.eps, 8.0 / 255.0);
  EXPECT_EQ(cfg.pipeline.views, 32u);
  EXPECT_FALSE(cfg.pipeline.tv_weight);
  EXPECT_EQ(cfg.attack.kind, AttackConfig::Kind::Fgsm);
  EXPECT_EQ(cfg.view_grid, (std::vector<std::size_t>{4, 8}));
}

TEST(RunConfig, RejectsBadInput) {
  RunConfig cfg;
  EXPECT_THROW(set_option(cfg, "no_such_key", "1"), ConfigError);
  EXPECT_THROW(set_option(cfg, "views", "many"), ConfigError);
  EXPECT_THROW(set_option(cfg, "eps", "4/0"), ConfigError);
  EXPECT_THROW(set_option(cfg, "a_refine", "maybe"), ConfigError);
  EXPECT_THROW(parse_run_config("views 32\n"), ConfigError);
}

TEST(RunConfig, HashIgnoresWorkersAndOutput) {
  EXPECT_FALSE(option_keys().empty());
  RunConfig a, b;
  b.workers = 7;
  b.out = "/elsewhere";
  EXPECT_EQ(config_hash(a, "eval"), config_hash(b, "eval"));
  EXPECT_NE(config_hash(a, "eval"), config_hash(a, "ablate"));
  b.pipeline.views = 16;
  EXPECT_NE(config_hash(a, "eval"), config_hash(b, "eval"));
}

TEST(Methods, NamesFollowFlags) {
  PipelineConfig p;
  EXPECT_EQ(method_name(p), "a-tpt");
  p.refine = p.guided = p.tv_weight = false;
  EXPECT_EQ(method_name(p), "tpt-ensemble");
  p.refine = p.tv_weight = true;
  EXPECT_EQ(method_name(p), "refine+tv");
  EXPECT_EQ(pipeline_method(p).name, "refine+tv");
}

TEST(Methods, BaselineIsTheAllOffPipeline) {
  PipelineConfig p;
  p.views = 16;
  const Method b = baseline_method(p);
  p.refine = p.guided = p.tv_weight = false;
  EXPECT_EQ(b.name, pipeline_method(p).name);
  EXPECT_FALSE(b.pipeline.refine || b.pipeline.guided || b.pipeline.tv_weight);
  EXPECT_EQ(b.pipeline.views, 16u);
}

TEST(Methods, AblationRowsAreDistinct) {
  const auto rows = ablation_methods(PipelineConfig{});
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows.front().name, "tpt-ensemble");
  EXPECT_EQ(rows.back().name, "a-tpt");
  std::set<std::string> names;
  for (const auto& m : rows) names.insert(m.name);
  EXPECT_EQ(names.size(), 6u);
}

TEST(LogLogFit, RecoversPowerLaw) {
  const std::vector<double> x{1e-4, 1e-3, 1e-2, 1e-1};
  std::vector<double> y;
  for (double v : x) y.push_back(3.0 * v * v);
  EXPECT_NEAR(loglog_fit(x, y), 2.0, 1e-12);
}

TEST(Evaluate, DeterministicAcrossWorkers) {
  Tiny t;
  const std::vector<Method> methods{zero_shot_method(), pipeline_method(t.cfg.pipeline)};
  const auto a = evaluate(t.model, t.samples, nullptr, methods, t.cfg);
  t.cfg.workers = 2;
  const auto b = evaluate(t.model, t.samples, nullptr, methods, t.cfg);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t m = 0; m < a.size(); ++m) {
    EXPECT_TRUE(a[m].adversarial.empty());
    const std::string la = csv_line(summarize(a[m], t.cfg), "h", 1);
    const std::string lb = csv_line(summarize(b[m], t.cfg), "h", 1);
    EXPECT_EQ(strip_wall(la), strip_wall(lb));
    for (std::size_t i = 0; i < t.samples.size(); ++i)
      EXPECT_EQ(a[m].clean[i].prediction, b[m].clean[i].prediction);
  }
}

TEST(Evaluate, CsvHasOneFieldPerHeaderColumn) {
  EvalRow row;
  row.method = "a-tpt";
  row.mean_localization = std::nan("");
  const auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(count(csv_header()), count(csv_line(row, "h", 1)));
  EXPECT_NE(csv_line(row, "h", 1).find("nan"), std::string::npos);
}

TEST(Divergence, IdenticalInputsGiveUnitCosine) {
  Tiny t;
  std::vector<Tensor> same;
  for (const Sample& s : t.samples) same.push_back(s.image);
  const DivergenceReport r = feature_divergence_report(t.model, t.samples, same, 0.0, 1);
  EXPECT_NEAR(r.mean_cos_adversarial, 1.0, 1e-12);
  EXPECT_NEAR(r.mean_cos_noise, 1.0, 1e-12);
  ASSERT_EQ(r.topk_clean.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(r.topk_clean[k], r.topk_adversarial[k]);
  for (std::size_t k = 1; k < 5; ++k) EXPECT_GE(r.topk_clean[k], r.topk_clean[k - 1]);
}

TEST(Artifacts, MissingModelNamesTheProducer) {
  RunConfig cfg;
  cfg.model_path = "/nonexistent/model.bin";
  try {
    load_model_artifact(cfg);
    FAIL() << "expected MissingArtifact";
  } catch (const MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain"), std::string::npos);
  }
}

TEST(Stability, ZeroBudgetChangesNothing) {
  Tiny t;
  const std::vector<Sample> one(t.samples.begin(), t.samples.begin() + 1);
  const StabilityReport r = verify_stability(t.model, one, {0.0}, 2, 5);
  ASSERT_EQ(r.phi_change.size(), 1u);
  EXPECT_EQ(r.phi_change[0], 0.0);
  EXPECT_EQ(r.weight_change[0], 0.0);
  EXPECT_EQ(r.residual[0], 0.0);
}
