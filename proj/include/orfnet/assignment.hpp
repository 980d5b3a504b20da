// Dynamic label assignment. Confidence maps guide which uncertain grid cells
// act as positives or negatives for each annotation form:
//  - inter-guided: geometric mean of the other two branches' predictions,
//  - self-guided: the branch's own prediction (ablation variant),
//  - center-region: fixed rule marking the central half of each box (warm-up
//    and plain supervised baseline).
// Maps are min-max normalized over the uncertain region: per annotated box
// for box-labeled data, per pyramid level otherwise. Guidance is computed
// from prediction values only and never carries gradients back into the
// branches that produced it.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "orfnet/annotations.hpp"
#include "orfnet/errors.hpp"
#include "orfnet/geometry.hpp"
#include "orfnet/grid.hpp"

namespace orfnet {

enum class GuidanceSource : uint8_t { InterGuided = 0, SelfGuided = 1, CenterRegion = 2 };

struct BoxGuidance {
  std::vector<CellRef> cells;  // candidates: centers strictly inside the box, (level,row,col) order
  std::vector<float> w;        // normalized guidance per candidate
};

struct GuidanceMap {
  GuidanceSource source = GuidanceSource::InterGuided;
  std::vector<PlainGrid> levels;      // per-cell W in [0,1]; overlapping boxes keep the max
  std::vector<BoxGuidance> per_box;   // box-labeled form only
};

enum class AssignLabel : uint8_t { Negative = 0, Positive = 1, Ignore = 2 };

struct AssignmentResult {
  std::vector<PlainGrid> labels;     // AssignLabel per cell
  std::vector<PlainGrid> weight;     // guidance W per cell
  std::vector<PlainGrid> uncertain;  // 1 where the region mask is uncertain

  struct BoxPositives {
    std::vector<CellRef> cells;
  };
  std::vector<BoxPositives> box_positives;  // per annotated box, in input order
  std::vector<long> per_box_pos_count;

  long positives = 0;          // dot cells / T_p
  long negatives = 0;          // S_n / R_n / T_n
  long ignored = 0;

  AssignLabel label_at(const CellRef& c) const {
    return AssignLabel(uint8_t(labels[size_t(c.level)].at(c.row, c.col)));
  }
};

// Min-max rescale to [0,1] over one region. A constant region maps to all
// zeros; the per-box fallback in assign() guarantees a positive anyway.
inline void normalize_in_place(std::span<double> vals) {
  if (vals.empty()) throw DataError("normalize: empty region");
  double lo = vals[0], hi = vals[0];
  for (double v : vals) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    for (double& v : vals) v = 0.0;
    return;
  }
  const double inv = 1.0 / (hi - lo);
  for (double& v : vals) v = (v - lo) * inv;
}

// Builds the normalized guidance map from raw (pre-normalization) values.
// Raw values are consumed only on the uncertain region.
inline GuidanceMap guidance_from_raw(GuidanceSource source, SupervisionKind kind,
                                     const std::vector<std::vector<double>>& raw,
                                     const RegionMask& mask, const std::vector<geom::Box>* boxes,
                                     const PyramidSpec& pyramid) {
  if (raw.size() != pyramid.levels.size())
    throw ShapeError("guidance: raw level count " + std::to_string(raw.size()) +
                     " != pyramid levels " + std::to_string(pyramid.levels.size()));
  GuidanceMap out;
  out.source = source;
  out.levels.reserve(pyramid.levels.size());
  for (const auto& lvl : pyramid.levels) out.levels.emplace_back(lvl.height, lvl.width, 0.f);

  if (kind == SupervisionKind::Box) {
    if (!boxes) throw DataError("guidance: box form without boxes");
    out.per_box.resize(boxes->size());
    for (size_t j = 0; j < boxes->size(); ++j) {
      const auto& b = (*boxes)[j];
      BoxGuidance& bg = out.per_box[j];
      std::vector<double> vals;
      for (size_t l = 0; l < pyramid.levels.size(); ++l) {
        const auto& lvl = pyramid.levels[l];
        for (int r = 0; r < lvl.height; ++r)
          for (int c = 0; c < lvl.width; ++c) {
            auto p = lvl.cell_center(r, c);
            if (geom::contains(b, p.x, p.y)) {
              bg.cells.push_back(CellRef{int(l), r, c});
              vals.push_back(raw[l][size_t(r) * lvl.width + c]);
            }
          }
      }
      if (!vals.empty()) normalize_in_place(vals);
      bg.w.resize(vals.size());
      for (size_t i = 0; i < vals.size(); ++i) {
        bg.w[i] = float(vals[i]);
        auto& g = out.levels[size_t(bg.cells[i].level)];
        float& cell = g.at(bg.cells[i].row, bg.cells[i].col);
        cell = std::max(cell, bg.w[i]);
      }
    }
  } else {
    // Dot / unlabeled: normalize over the uncertain cells of each level.
    for (size_t l = 0; l < pyramid.levels.size(); ++l) {
      const auto& lvl = pyramid.levels[l];
      std::vector<double> vals;
      std::vector<int> idx;
      for (int i = 0; i < lvl.cells(); ++i) {
        if (RegionLabel(uint8_t(mask.levels[l].v[size_t(i)])) == RegionLabel::Uncertain) {
          idx.push_back(i);
          vals.push_back(raw[l][size_t(i)]);
        }
      }
      if (vals.empty()) continue;
      normalize_in_place(vals);
      for (size_t i = 0; i < idx.size(); ++i) out.levels[l].v[size_t(idx[i])] = float(vals[i]);
    }
  }
  return out;
}

namespace detail {

template <class T>
std::vector<std::vector<double>> check_and_extract(const std::vector<FeatureGrid<T>>& g,
                                                   const PyramidSpec& pyramid) {
  if (g.size() != pyramid.levels.size())
    throw ShapeError("guidance: prediction level count mismatch");
  std::vector<std::vector<double>> out(g.size());
  for (size_t l = 0; l < g.size(); ++l) {
    const auto& lvl = pyramid.levels[l];
    if (g[l].height() != lvl.height || g[l].width() != lvl.width)
      throw ShapeError("guidance: level " + std::to_string(l) + " is " +
                       std::to_string(g[l].height()) + "x" + std::to_string(g[l].width()) +
                       ", expected " + std::to_string(lvl.height) + "x" +
                       std::to_string(lvl.width));
    auto vals = g[l].data.values();
    out[l].assign(vals.begin(), vals.end());
  }
  return out;
}

}  // namespace detail

// W = N(sqrt(Pa * Pb)) over the uncertain region, where Pa and Pb are the two
// branches other than the one being supervised. Values only; detached.
template <class T>
GuidanceMap inter_guided_map(SupervisionKind kind, const std::vector<FeatureGrid<T>>& guide_a,
                             const std::vector<FeatureGrid<T>>& guide_b, const RegionMask& mask,
                             const std::vector<geom::Box>* boxes, const PyramidSpec& pyramid) {
  auto pa = detail::check_and_extract(guide_a, pyramid);
  auto pb = detail::check_and_extract(guide_b, pyramid);
  std::vector<std::vector<double>> raw(pa.size());
  for (size_t l = 0; l < pa.size(); ++l) {
    raw[l].resize(pa[l].size());
    for (size_t i = 0; i < pa[l].size(); ++i) raw[l][i] = std::sqrt(pa[l][i] * pb[l][i]);
  }
  return guidance_from_raw(GuidanceSource::InterGuided, kind, raw, mask, boxes, pyramid);
}

// Ablation variant: guidance from the branch's own prediction.
template <class T>
GuidanceMap self_guided_map(SupervisionKind kind, const std::vector<FeatureGrid<T>>& own,
                            const RegionMask& mask, const std::vector<geom::Box>* boxes,
                            const PyramidSpec& pyramid) {
  auto raw = detail::check_and_extract(own, pyramid);
  return guidance_from_raw(GuidanceSource::SelfGuided, kind, raw, mask, boxes, pyramid);
}

// Fixed rule for warm-up and the plain supervised baseline: candidates inside
// the central half of each box get weight 1, the rest 0. Box form only.
inline GuidanceMap center_region_guidance(const std::vector<geom::Box>& boxes,
                                          const PyramidSpec& pyramid) {
  GuidanceMap out;
  out.source = GuidanceSource::CenterRegion;
  out.levels.reserve(pyramid.levels.size());
  for (const auto& lvl : pyramid.levels) out.levels.emplace_back(lvl.height, lvl.width, 0.f);
  out.per_box.resize(boxes.size());
  for (size_t j = 0; j < boxes.size(); ++j) {
    const auto& b = boxes[j];
    const double cx = 0.5 * (b.x_min + b.x_max);
    const double cy = 0.5 * (b.y_min + b.y_max);
    const double qw = 0.25 * (b.x_max - b.x_min);
    const double qh = 0.25 * (b.y_max - b.y_min);
    const geom::Box central{cx - qw, cy - qh, cx + qw, cy + qh};
    BoxGuidance& bg = out.per_box[j];
    for (size_t l = 0; l < pyramid.levels.size(); ++l) {
      const auto& lvl = pyramid.levels[l];
      for (int r = 0; r < lvl.height; ++r)
        for (int c = 0; c < lvl.width; ++c) {
          auto p = lvl.cell_center(r, c);
          if (!geom::contains(b, p.x, p.y)) continue;
          bg.cells.push_back(CellRef{int(l), r, c});
          float w = geom::contains(central, p.x, p.y) ? 1.f : 0.f;
          bg.w.push_back(w);
          auto& g = out.levels[l];
          g.at(r, c) = std::max(g.at(r, c), w);
        }
    }
  }
  return out;
}

// Partition of the grid into positives / negatives / ignored.
//  - box: positives are candidates with W >= t inside each box (every box is
//    guaranteed at least one positive via the fallback), negatives are the
//    certain-negative region, remaining uncertain cells are ignored;
//  - dot: positives are the annotated cells, negatives the uncertain cells
//    with W < t, the rest ignored;
//  - unlabeled: W >= t positive, the rest negative, nothing ignored.
// Fallback: a box with no candidate above threshold promotes its single
// maximal-guidance candidate; ties prefer the cell nearest the box center,
// then (level,row,col) order.
inline AssignmentResult assign(SupervisionKind kind, const GuidanceMap& guidance,
                               const RegionMask& mask, const std::vector<geom::Box>* boxes,
                               double t, const PyramidSpec& pyramid) {
  if (!(t > 0.0 && t < 1.0)) throw ConfigError("assign: threshold t must be in (0,1)");
  AssignmentResult res;
  const size_t n_levels = pyramid.levels.size();
  res.labels.reserve(n_levels);
  res.weight = guidance.levels;
  res.uncertain.reserve(n_levels);
  for (size_t l = 0; l < n_levels; ++l) {
    const auto& lvl = pyramid.levels[l];
    res.labels.emplace_back(lvl.height, lvl.width, float(uint8_t(AssignLabel::Ignore)));
    res.uncertain.emplace_back(lvl.height, lvl.width, 0.f);
    for (int i = 0; i < lvl.cells(); ++i)
      if (RegionLabel(uint8_t(mask.levels[l].v[size_t(i)])) == RegionLabel::Uncertain)
        res.uncertain[l].v[size_t(i)] = 1.f;
  }

  switch (kind) {
    case SupervisionKind::Box: {
      if (!boxes) throw DataError("assign: box form without boxes");
      if (guidance.per_box.size() != boxes->size())
        throw ShapeError("assign: guidance boxes " + std::to_string(guidance.per_box.size()) +
                         " != annotation boxes " + std::to_string(boxes->size()));
      res.box_positives.resize(boxes->size());
      res.per_box_pos_count.assign(boxes->size(), 0);
      for (size_t l = 0; l < n_levels; ++l)
        for (int i = 0; i < pyramid.levels[l].cells(); ++i)
          if (RegionLabel(uint8_t(mask.levels[l].v[size_t(i)])) == RegionLabel::CertainNegative) {
            res.labels[l].v[size_t(i)] = float(uint8_t(AssignLabel::Negative));
            ++res.negatives;
          }
      for (size_t j = 0; j < boxes->size(); ++j) {
        const auto& bg = guidance.per_box[j];
        if (bg.cells.empty())
          throw DataError("assign: annotated box " + std::to_string(j) +
                          " contains no cell centers at any pyramid level");
        auto& pos = res.box_positives[j].cells;
        for (size_t i = 0; i < bg.cells.size(); ++i)
          if (bg.w[i] >= float(t)) pos.push_back(bg.cells[i]);
        if (pos.empty()) {
          const auto& b = (*boxes)[j];
          const double cx = 0.5 * (b.x_min + b.x_max);
          const double cy = 0.5 * (b.y_min + b.y_max);
          size_t best = 0;
          double best_d = 0;
          for (size_t i = 0; i < bg.cells.size(); ++i) {
            const auto& lvl = pyramid.levels[size_t(bg.cells[i].level)];
            auto p = lvl.cell_center(bg.cells[i].row, bg.cells[i].col);
            double d = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
            if (i == 0 || bg.w[i] > bg.w[best] || (bg.w[i] == bg.w[best] && d < best_d)) {
              best = i;
              best_d = d;
            }
          }
          pos.push_back(bg.cells[best]);
        }
        res.per_box_pos_count[j] = long(pos.size());
        for (const auto& c : pos)
          res.labels[size_t(c.level)].at(c.row, c.col) = float(uint8_t(AssignLabel::Positive));
      }
      for (size_t l = 0; l < n_levels; ++l)
        for (float v : res.labels[l].v)
          if (AssignLabel(uint8_t(v)) == AssignLabel::Positive) ++res.positives;
      break;
    }
    case SupervisionKind::Dot: {
      for (size_t l = 0; l < n_levels; ++l)
        for (int i = 0; i < pyramid.levels[l].cells(); ++i) {
          auto region = RegionLabel(uint8_t(mask.levels[l].v[size_t(i)]));
          if (region == RegionLabel::CertainPositive) {
            res.labels[l].v[size_t(i)] = float(uint8_t(AssignLabel::Positive));
            ++res.positives;
          } else if (region == RegionLabel::Uncertain &&
                     guidance.levels[l].v[size_t(i)] < float(t)) {
            res.labels[l].v[size_t(i)] = float(uint8_t(AssignLabel::Negative));
            ++res.negatives;
          }
        }
      break;
    }
    case SupervisionKind::Unlabeled: {
      for (size_t l = 0; l < n_levels; ++l)
        for (int i = 0; i < pyramid.levels[l].cells(); ++i) {
          if (guidance.levels[l].v[size_t(i)] >= float(t)) {
            res.labels[l].v[size_t(i)] = float(uint8_t(AssignLabel::Positive));
            ++res.positives;
          } else {
            res.labels[l].v[size_t(i)] = float(uint8_t(AssignLabel::Negative));
            ++res.negatives;
          }
        }
      break;
    }
  }
  for (size_t l = 0; l < n_levels; ++l)
    for (float v : res.labels[l].v)
      if (AssignLabel(uint8_t(v)) == AssignLabel::Ignore) ++res.ignored;
  return res;
}

}  // namespace orfnet
