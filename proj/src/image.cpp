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

#include "atpt/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace atpt {

void check_image(const Tensor& image, const char* op) {
  if (image.rank() != 2) throw ShapeError(op, "expected a rank-2 image, got " + shape_str(image.shape()));
}

Tensor flip_horizontal(const Tensor& image) {
  check_image(image, "flip_horizontal");
  const std::size_t h = image.dim(0), w = image.dim(1);
  Tensor out(image.shape());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out.at(r, c) = image.at(r, w - 1 - c);
  return out;
}

Box flip_horizontal(const Box& box, std::size_t width) {
  return {box.row0, width - box.col1, box.row1, width - box.col0};
}

double sample_bilinear(const Tensor& image, double y, double x) {
  const double hmax = static_cast<double>(image.dim(0) - 1);
  const double wmax = static_cast<double>(image.dim(1) - 1);
  y = std::clamp(y, 0.0, hmax);
  x = std::clamp(x, 0.0, wmax);
  const auto r0 = static_cast<std::size_t>(std::floor(y));
  const auto c0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t r1 = std::min(r0 + 1, image.dim(0) - 1);
  const std::size_t c1 = std::min(c0 + 1, image.dim(1) - 1);
  const double ty = y - static_cast<double>(r0), tx = x - static_cast<double>(c0);
  if (ty == 0.0 && tx == 0.0) return image.at(r0, c0);
  const double top = image.at(r0, c0) * (1.0 - tx) + image.at(r0, c1) * tx;
  const double bottom = image.at(r1, c0) * (1.0 - tx) + image.at(r1, c1) * tx;
  return top * (1.0 - ty) + bottom * ty;
}

Tensor center_crop_resize(const Tensor& image, double scale) {
  check_image(image, "center_crop_resize");
  if (!(scale > 0.0 && scale <= 1.0)) throw Error("center_crop_resize: scale must be in (0, 1]");
  if (scale == 1.0) return image;
  const std::size_t h = image.dim(0), w = image.dim(1);
  const double ch = scale * static_cast<double>(h), cw = scale * static_cast<double>(w);
  const double top = (static_cast<double>(h) - ch) / 2.0;
  const double left = (static_cast<double>(w) - cw) / 2.0;
  Tensor out(image.shape());
  for (std::size_t r = 0; r < h; ++r) {
    const double y = top + (static_cast<double>(r) + 0.5) * ch / static_cast<double>(h) - 0.5;
    for (std::size_t c = 0; c < w; ++c) {
      const double x = left + (static_cast<double>(c) + 0.5) * cw / static_cast<double>(w) - 0.5;
      out.at(r, c) = sample_bilinear(image, y, x);
    }
  }
  clip01(out);
  return out;
}

void clip01(Tensor& image) {
  for (double& v : image.data()) v = std::clamp(v, 0.0, 1.0);
}

Tensor upsample_nearest(const Tensor& grid, std::size_t factor) {
  check_image(grid, "upsample_nearest");
  if (factor == 0) throw Error("upsample_nearest: factor must be positive");
  const std::size_t h = grid.dim(0) * factor, w = grid.dim(1) * factor;
  Tensor out({h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out.at(r, c) = grid.at(r / factor, c / factor);
  return out;
}

void write_pgm(const std::string& path, const Tensor& image, bool normalize) {
  check_image(image, "write_pgm");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_pgm: cannot open " + path);
  const auto [lo_it, hi_it] = std::minmax_element(image.data().begin(), image.data().end());
  double lo = 0.0, hi = 1.0;
  if (normalize && *hi_it > *lo_it) {
    lo = *lo_it;
    hi = *hi_it;
  }
  out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  for (double v : image.data()) {
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
}

Tensor contact_sheet(const std::vector<Tensor>& images, std::size_t columns) {
  if (images.empty() || columns == 0) throw Error("contact_sheet: nothing to tile");
  const std::size_t h = images.front().dim(0), w = images.front().dim(1);
  const std::size_t cols = std::min(columns, images.size());
  const std::size_t rows = (images.size() + cols - 1) / cols;
  Tensor sheet({rows * (h + 1) - 1, cols * (w + 1) - 1}, 1.0);
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].shape() != images.front().shape())
      throw ShapeError("contact_sheet", images[k].shape(), images.front().shape());
    const std::size_t r0 = (k / cols) * (h + 1), c0 = (k % cols) * (w + 1);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) sheet.at(r0 + r, c0 + c) = images[k].at(r, c);
  }
  return sheet;
}

}  // namespace atpt
