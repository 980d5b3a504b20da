// Feature-grid and pyramid bookkeeping shared by the head, the assignment
// logic, and the losses.
#pragma once

#include <string>
#include <vector>

#include "orfnet/autodiff.hpp"
#include "orfnet/errors.hpp"
#include "orfnet/geometry.hpp"

namespace orfnet {

struct LevelSpec {
  int stride = 1;
  int height = 1;
  int width = 1;
  int cells() const { return height * width; }
  // Image-space center of cell (row, col).
  geom::Point cell_center(int row, int col) const {
    return geom::Point{(col + 0.5) * stride, (row + 0.5) * stride};
  }
};

struct PyramidSpec {
  std::vector<LevelSpec> levels;

  int total_cells() const {
    int n = 0;
    for (const auto& l : levels) n += l.cells();
    return n;
  }

  static PyramidSpec for_image(int image_h, int image_w, const std::vector<int>& strides) {
    if (strides.empty()) throw ConfigError("pyramid: no strides given");
    PyramidSpec spec;
    int prev = 0;
    for (int s : strides) {
      if (s < 1) throw ConfigError("pyramid: stride must be >= 1");
      if (s <= prev) throw ConfigError("pyramid: strides must be strictly increasing");
      prev = s;
    }
    int max_stride = strides.back();
    if (image_h % max_stride != 0 || image_w % max_stride != 0)
      throw ShapeError("pyramid: image " + std::to_string(image_h) + "x" +
                       std::to_string(image_w) + " not divisible by largest stride " +
                       std::to_string(max_stride));
    for (int s : strides) spec.levels.push_back(LevelSpec{s, image_h / s, image_w / s});
    return spec;
  }
};

// One dense map at one pyramid level, tracked on a tape (c = 1).
template <class T>
struct FeatureGrid {
  int level_index = 0;
  int stride = 1;
  ad::Grid<T> data;

  int height() const { return data.dims().h; }
  int width() const { return data.dims().w; }
};

// Untracked per-level map of floats (guidance values, masks).
struct PlainGrid {
  int height = 0, width = 0;
  std::vector<float> v;

  PlainGrid() = default;
  PlainGrid(int h, int w, float fill = 0.f) : height(h), width(w), v(size_t(h) * w, fill) {}
  float& at(int row, int col) { return v[size_t(row) * width + col]; }
  float at(int row, int col) const { return v[size_t(row) * width + col]; }
  int cells() const { return height * width; }
};

// Location of one cell across the pyramid.
struct CellRef {
  int level = 0;
  int row = 0;
  int col = 0;
  bool operator==(const CellRef&) const = default;
};

}  // namespace orfnet
