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
#include <vector>

#include "atpt/tensor.hpp"

namespace atpt {

/// Rectangle [row0, row1) x [col0, col1) in pixel units.
struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  std::size_t area() const { return (row1 - row0) * (col1 - col0); }
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row0 && r < row1 && c >= col0 && c < col1;
  }
};

void check_image(const Tensor& image, const char* op);

Tensor flip_horizontal(const Tensor& image);
Box flip_horizontal(const Box& box, std::size_t width);

/// Bilinear sample with edge clamping.
double sample_bilinear(const Tensor& image, double y, double x);

/// Centered square crop of side scale*H resized back to H x W by bilinear
/// interpolation. scale == 1 returns the input bitwise.
Tensor center_crop_resize(const Tensor& image, double scale);

void clip01(Tensor& image);

/// Nearest-neighbour upsampling by an integer factor.
Tensor upsample_nearest(const Tensor& grid, std::size_t factor);

/// 8-bit binary PGM, min-max normalized unless the range is empty.
void write_pgm(const std::string& path, const Tensor& image, bool normalize = true);

/// Images tiled left to right, top to bottom with a one pixel gutter.
Tensor contact_sheet(const std::vector<Tensor>& images, std::size_t columns);

}  // namespace atpt
