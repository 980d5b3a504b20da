// The omni-supervised data model: every sample is box-labeled, dot-labeled,
// or unlabeled. Annotation form determines which grid regions have a certain
// positive/negative identity and which must be assigned dynamically.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "orfnet/errors.hpp"
#include "orfnet/geometry.hpp"
#include "orfnet/grid.hpp"

namespace orfnet {

enum class SupervisionKind : uint8_t { Box = 0, Dot = 1, Unlabeled = 2 };

inline const char* to_string(SupervisionKind k) {
  switch (k) {
    case SupervisionKind::Box:
      return "box";
    case SupervisionKind::Dot:
      return "dot";
    case SupervisionKind::Unlabeled:
      return "unlabeled";
  }
  return "?";
}

struct ImageBuffer {
  int height = 0, width = 0, channels = 1;
  std::vector<float> v;  // [c][y][x]

  float& at(int c, int y, int x) { return v[(size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return v[(size_t(c) * height + y) * width + x]; }
};

struct Sample {
  std::string id;
  ImageBuffer image;
  SupervisionKind kind = SupervisionKind::Unlabeled;
  std::vector<geom::Box> boxes;   // box-labeled only
  std::vector<geom::Point> dots;  // dot-labeled only
  // Ground truth of the synthetic generator. Present on every synthetic
  // sample; evaluation-only. Training consumes TrainingView, which has no
  // path to this field.
  std::vector<geom::Box> hidden_truth;
};

// What the training loop is allowed to see.
struct TrainingView {
  const ImageBuffer* image = nullptr;
  SupervisionKind kind = SupervisionKind::Unlabeled;
  const std::vector<geom::Box>* boxes = nullptr;
  const std::vector<geom::Point>* dots = nullptr;
};

inline TrainingView view_of(const Sample& s) {
  return TrainingView{&s.image, s.kind, &s.boxes, &s.dots};
}

enum class RegionLabel : uint8_t { CertainNegative = 0, CertainPositive = 1, Uncertain = 2 };

// Per-level grid of region labels.
struct RegionMask {
  std::vector<PlainGrid> levels;  // values are RegionLabel casts

  RegionLabel at(const CellRef& c) const {
    return RegionLabel(uint8_t(levels[size_t(c.level)].at(c.row, c.col)));
  }
};

// Region identity per annotation form:
//  - box-labeled: inside any annotated box -> uncertain, everywhere else is
//    certain negative;
//  - dot-labeled: the cell nearest each dot (per level) is certain positive,
//    everything else is uncertain;
//  - unlabeled: everything is uncertain.
// A cell counts as inside a box iff its center is strictly inside. Dot ties
// break in row-major order.
inline RegionMask build_region_mask(const TrainingView& sample, const PyramidSpec& pyramid) {
  RegionMask mask;
  mask.levels.reserve(pyramid.levels.size());
  const int img_h = sample.image->height;
  const int img_w = sample.image->width;
  if (sample.kind == SupervisionKind::Dot) {
    for (const auto& d : *sample.dots) {
      if (!(d.x >= 0 && d.x < img_w && d.y >= 0 && d.y < img_h))
        throw DataError("dot (" + std::to_string(d.x) + "," + std::to_string(d.y) +
                        ") outside image " + std::to_string(img_w) + "x" + std::to_string(img_h));
    }
  }
  for (const auto& lvl : pyramid.levels) {
    PlainGrid g(lvl.height, lvl.width, float(uint8_t(RegionLabel::Uncertain)));
    switch (sample.kind) {
      case SupervisionKind::Box: {
        for (int r = 0; r < lvl.height; ++r)
          for (int c = 0; c < lvl.width; ++c) {
            auto p = lvl.cell_center(r, c);
            bool inside = false;
            for (const auto& b : *sample.boxes)
              if (geom::contains(b, p.x, p.y)) {
                inside = true;
                break;
              }
            if (!inside) g.at(r, c) = float(uint8_t(RegionLabel::CertainNegative));
          }
        break;
      }
      case SupervisionKind::Dot: {
        for (const auto& d : *sample.dots) {
          double best = std::numeric_limits<double>::infinity();
          int br = 0, bc = 0;
          for (int r = 0; r < lvl.height; ++r)
            for (int c = 0; c < lvl.width; ++c) {
              auto p = lvl.cell_center(r, c);
              double dx = p.x - d.x, dy = p.y - d.y;
              double dist = dx * dx + dy * dy;
              if (dist < best) {
                best = dist;
                br = r;
                bc = c;
              }
            }
          g.at(br, bc) = float(uint8_t(RegionLabel::CertainPositive));
        }
        break;
      }
      case SupervisionKind::Unlabeled:
        break;
    }
    mask.levels.push_back(std::move(g));
  }
  return mask;
}

namespace detail {
// Mirror x across the image width; a result landing exactly on the right edge
// is nudged inward so point invariants (x < width) survive the flip.
inline double flip_coord(double x, int width) {
  double fx = double(width) - x;
  if (fx >= double(width)) fx = std::nextafter(double(width), 0.0);
  return fx;
}
}  // namespace detail

// Horizontal mirror of image and all annotations. Generator coordinates are
// dyadic, so applying this twice returns the original sample bit-exactly.
inline Sample flip_augment(const Sample& s) {
  Sample out;
  out.id = s.id;
  out.kind = s.kind;
  out.image.height = s.image.height;
  out.image.width = s.image.width;
  out.image.channels = s.image.channels;
  out.image.v.resize(s.image.v.size());
  for (int c = 0; c < s.image.channels; ++c)
    for (int y = 0; y < s.image.height; ++y)
      for (int x = 0; x < s.image.width; ++x)
        out.image.at(c, y, x) = s.image.at(c, y, s.image.width - 1 - x);
  const int w = s.image.width;
  auto flip_box = [w](const geom::Box& b) {
    return geom::Box{double(w) - b.x_max, b.y_min, double(w) - b.x_min, b.y_max};
  };
  for (const auto& b : s.boxes) out.boxes.push_back(flip_box(b));
  for (const auto& d : s.dots)
    out.dots.push_back(geom::Point{detail::flip_coord(d.x, w), d.y});
  for (const auto& b : s.hidden_truth) out.hidden_truth.push_back(flip_box(b));
  return out;
}

}  // namespace orfnet
