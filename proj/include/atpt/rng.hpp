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

#include <cstdint>
#include <random>
#include <vector>

namespace atpt {

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Child seed for stream `index` of `master`. Independent of evaluation order.
std::uint64_t split_seed(std::uint64_t master, std::uint64_t index);

/// Thin wrapper over mt19937_64 with the distributions the pipeline needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Integer in [lo, hi].
  int uniform_int(int lo, int hi);
  bool bernoulli(double p);
  double gamma(double shape);
  double beta(double a, double b);
  std::vector<double> dirichlet(const std::vector<double>& alpha);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace atpt
