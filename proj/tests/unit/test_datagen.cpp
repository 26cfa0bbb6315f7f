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

#include <set>

#include "atpt/datagen.hpp"
#include "atpt/image.hpp"
#include "oracles.hpp"

using namespace atpt;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train_per_class = 6;
  s.test_per_class = 3;
  return s;
}

}  // namespace

TEST(Glyphs, DistinctMirrorSymmetricAndSmall) {
  std::set<std::vector<double>> seen;
  for (std::size_t c = 0; c < kGlyphClasses; ++c) {
    const Tensor g = glyph_pattern(c, 8);
    EXPECT_TRUE(seen.insert(g.vec()).second) << "class " << c;
    EXPECT_EQ(flip_horizontal(g), g) << "class " << c;
    EXPECT_GT(sum(g), 0.0);
  }
  EXPECT_THROW(glyph_pattern(kGlyphClasses, 8), Error);
  const SyntheticSpec s;
  EXPECT_LE(static_cast<double>(s.glyph_size * s.glyph_size),
            0.1 * static_cast<double>(s.image_size * s.image_size));
}

TEST(Generate, DeterministicBalancedAndInRange) {
  const SyntheticSpec spec = small_spec();
  const DatasetPair a = generate(spec), b = generate(spec);
  ASSERT_EQ(a.train.size(), 60u);
  ASSERT_EQ(a.test.size(), 30u);
  std::vector<std::size_t> counts(spec.classes);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.samples[i].image, b.train.samples[i].image);
    ++counts[a.train.samples[i].label];
    const Box& box = a.train.samples[i].box;
    EXPECT_EQ(box.area(), spec.glyph_size * spec.glyph_size);
    EXPECT_LE(box.row1, spec.image_size);
    for (double v : a.train.samples[i].image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  for (std::size_t c : counts) EXPECT_EQ(c, 6u);
  EXPECT_NE(a.train.samples[0].image, a.test.samples[0].image);
  EXPECT_EQ(a.train.spec_hash, spec.hash());
}

TEST(Generate, EraseKeepsBackgroundOnly) {
  const SyntheticSpec spec = small_spec();
  const Sample with = render_sample(spec, 3, 11), without = render_sample(spec, 3, 11, true);
  EXPECT_EQ(with.box.row0, without.box.row0);
  for (std::size_t r = 0; r < spec.image_size; ++r)
    for (std::size_t c = 0; c < spec.image_size; ++c)
      if (!with.box.contains(r, c)) {
        EXPECT_EQ(with.image.at(r, c), without.image.at(r, c));
      }
  EXPECT_NE(with.image, without.image);
}

TEST(Generate, RejectsBadSpecs) {
  SyntheticSpec s;
  s.glyph_size = 40;
  EXPECT_THROW(s.validate(), Error);
  s = SyntheticSpec{};
  s.classes = 1;
  EXPECT_THROW(s.validate(), Error);
  s = SyntheticSpec{};
  EXPECT_EQ(synthetic_spec_from_json(to_json(s)).hash(), s.hash());
}

TEST(Pretrain, ZeroEpochsIsIdentity) {
  ModelConfig mc;
  mc.encoder.blocks = 2;
  Model m = init_model(mc, 1);
  const Model before = m;
  PretrainConfig pc;
  pc.epochs = 0;
  EXPECT_TRUE(pretrain(m, generate_split(small_spec(), "train"), pc).empty());
  for (std::size_t i = 0; i < named_tensors(m).size(); ++i)
    EXPECT_EQ(*named_tensors(m)[i].second, *named_tensors(before)[i].second);
}

TEST(Pretrain, LossDecreasesOnASmallSet) {
  ModelConfig mc;
  mc.encoder.blocks = 2;
  mc.encoder.embed_dim = 32;
  Model m = init_model(mc, 2);
  SyntheticSpec spec = small_spec();
  spec.classes = 3;
  spec.train_per_class = 12;
  PretrainConfig pc;
  pc.epochs = 5;
  pc.batch = 12;
  pc.augment = false;
  pc.lr = 3e-3;
  pc.warmup_epochs = 0;
  const auto history = pretrain(m, generate_split(spec, "train"), pc);
  ASSERT_EQ(history.size(), 5u);
  EXPECT_LT(history.back().loss, history.front().loss);
}

TEST(Localization, Examples) {
  const Box box{8, 8, 16, 16};
  Tensor inside({8, 8});
  inside.at(2, 2) = 1.0;
  inside.at(3, 3) = 2.0;
  EXPECT_DOUBLE_EQ(localization_score(inside, box, 32), 1.0);
  EXPECT_DOUBLE_EQ(localization_score(Tensor({8, 8}, 1.0), box, 32), 64.0 / 1024.0);
  EXPECT_EQ(localization_score(Tensor({8, 8}), box, 32), 0.0);
  EXPECT_THROW(localization_score(inside, Box{30, 30, 40, 40}, 32), Error);

  Rng rng(3);
  for (int it = 0; it < 50; ++it) {
    const Tensor g = oracle::random_tensor(rng, {8, 8}, 0.0, 1.0);
    const Box b{4, 3, 12, 14};
    EXPECT_NEAR(localization_score(g, b, 32), localization_score(flip_horizontal(g), flip_horizontal(b, 32), 32),
                1e-12);
  }
}
