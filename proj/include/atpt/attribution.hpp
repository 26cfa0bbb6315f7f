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
#include <string>

#include "atpt/model.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

enum class MapVariant { Gar, Refined };

const char* to_string(MapVariant v);

/// Nonnegative G x G CLS-to-patch attribution grid.
struct AttentionMap {
  Tensor grid;
  std::size_t view = 0;
  MapVariant variant = MapVariant::Refined;
};

struct RolloutOptions {
  bool normalize_rows = true;
};

/// I + mean_h(grad ⊙ A)^+, optionally row-normalized. Both inputs h x s x s.
Tensor gar_transition(const Tensor& attention, const Tensor& grad_attention,
                      const RolloutOptions& options = {});

/// W_v = [<T_v, dT_v>]_+ / sum. Falls back to uniform when no q_v is positive;
/// `degenerate` reports whether that happened.
Tensor token_weights(const Tensor& tokens, const Tensor& grad_tokens, bool* degenerate = nullptr);

/// I + mean_h(A diag(W))^+, optionally row-normalized.
Tensor refined_transition(const Tensor& attention, const Tensor& weights,
                          const RolloutOptions& options = {});

/// Row 0 of an s x s rollout without its self entry, as G x G.
Tensor cls_grid(const Tensor& rollout);

/// Product of all block transitions in block order.
Tensor gar_product(const EncoderCapture& capture, const RolloutOptions& options = {});
/// A^(B) * (A^(B-1) + A^(B)) / 2 from the last two refined transitions.
Tensor refined_product(const EncoderCapture& capture, const RolloutOptions& options = {});

AttentionMap gar_rollout(const EncoderCapture& capture, const RolloutOptions& options = {});
AttentionMap refined_rollout(const EncoderCapture& capture, const RolloutOptions& options = {});
AttentionMap rollout(const EncoderCapture& capture, MapVariant variant,
                     const RolloutOptions& options = {});

/// Map divided by its sum; uniform when the sum is zero.
Tensor l1_normalized(const Tensor& map);

/// l1 distance between l1-normalized maps, in [0, 2].
double attention_distance(const Tensor& a, const Tensor& b);

void write_map_csv(const std::string& path, const Tensor& grid);

}  // namespace atpt
