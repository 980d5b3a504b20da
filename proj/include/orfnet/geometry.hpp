// Boxes, points, IoU/GIoU, distance-to-edge regression targets, and NMS.
// Boxes are half-open in continuous coordinates: area = (x1-x0)*(y1-y0),
// no +1 pixel convention. The IoU/GIoU math is generic over the value type
// so it also runs on tracked autodiff scalars for the regression loss.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "orfnet/autodiff.hpp"
#include "orfnet/errors.hpp"

namespace orfnet::geom {

template <class S>
struct BoxT {
  S x_min, y_min, x_max, y_max;
};

using Box = BoxT<double>;

struct Point {
  double x = 0, y = 0;
};

// Distances in pixels from a grid-cell center to the four box edges.
struct RegressionTarget {
  double left = 0, top = 0, right = 0, bottom = 0;
};

struct Detection {
  Box box;
  double score = 0;
};

inline void validate_box(const Box& b, const char* where = "box") {
  if (!(std::isfinite(b.x_min) && std::isfinite(b.y_min) && std::isfinite(b.x_max) &&
        std::isfinite(b.y_max)))
    throw std::invalid_argument(std::string(where) + ": non-finite coordinates");
  if (!(b.x_max > b.x_min && b.y_max > b.y_min))
    throw std::invalid_argument(std::string(where) + ": degenerate box [" +
                                std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," +
                                std::to_string(b.x_max) + "," + std::to_string(b.y_max) + "]");
}

inline double area(const Box& b) { return (b.x_max - b.x_min) * (b.y_max - b.y_min); }

inline bool contains(const Box& b, double x, double y) {
  return x > b.x_min && x < b.x_max && y > b.y_min && y < b.y_max;
}

inline double iou(const Box& a, const Box& b) {
  validate_box(a, "iou lhs");
  validate_box(b, "iou rhs");
  double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double uni = area(a) + area(b) - inter;
  return inter / uni;
}

namespace detail {
inline double vmax2(double a, double b) { return a > b ? a : b; }
inline double vmin2(double a, double b) { return a < b ? a : b; }
inline double relu0(double a) { return a > 0 ? a : 0; }
template <class T>
ad::Scalar<T> vmax2(const ad::Scalar<T>& a, const ad::Scalar<T>& b) {
  return ad::vmax(a, b);
}
template <class T>
ad::Scalar<T> vmin2(const ad::Scalar<T>& a, const ad::Scalar<T>& b) {
  return ad::vmin(a, b);
}
template <class T>
ad::Scalar<T> relu0(const ad::Scalar<T>& a) {
  return ad::vmax(a, 0.0);
}
}  // namespace detail

// giou_loss = 1 - GIoU, GIoU = IoU - (C - U)/C with C the area of the
// smallest enclosing box and U the union area. Range of GIoU is (-1, 1].
template <class S>
S giou_loss_generic(const BoxT<S>& pred, const BoxT<S>& truth) {
  using detail::relu0;
  using detail::vmax2;
  using detail::vmin2;
  S iw = relu0(vmin2(pred.x_max, truth.x_max) - vmax2(pred.x_min, truth.x_min));
  S ih = relu0(vmin2(pred.y_max, truth.y_max) - vmax2(pred.y_min, truth.y_min));
  S inter = iw * ih;
  S area_p = (pred.x_max - pred.x_min) * (pred.y_max - pred.y_min);
  S area_t = (truth.x_max - truth.x_min) * (truth.y_max - truth.y_min);
  S uni = area_p + area_t - inter;
  S iou_v = inter / uni;
  S cw = vmax2(pred.x_max, truth.x_max) - vmin2(pred.x_min, truth.x_min);
  S ch = vmax2(pred.y_max, truth.y_max) - vmin2(pred.y_min, truth.y_min);
  S carea = cw * ch;
  S giou = iou_v - (carea - uni) / carea;
  return 1.0 - giou;
}

inline double giou_loss(const Box& pred, const Box& truth) {
  validate_box(pred, "giou pred");
  validate_box(truth, "giou truth");
  return giou_loss_generic(pred, truth);
}

template <class T>
ad::Scalar<T> giou_loss(const BoxT<ad::Scalar<T>>& pred, const Box& truth) {
  validate_box(Box{double(pred.x_min.value()), double(pred.y_min.value()),
                   double(pred.x_max.value()), double(pred.y_max.value())},
               "giou pred");
  validate_box(truth, "giou truth");
  ad::Tape<T>& tp = *pred.x_min.tape();
  BoxT<ad::Scalar<T>> t{tp.constant(T(truth.x_min)), tp.constant(T(truth.y_min)),
                        tp.constant(T(truth.x_max)), tp.constant(T(truth.y_max))};
  return giou_loss_generic(pred, t);
}

// FCOS-style distance parameterization around a grid-cell center.
inline RegressionTarget encode_targets(const Box& box, const Point& location) {
  validate_box(box, "encode");
  if (!contains(box, location.x, location.y))
    throw std::invalid_argument("encode: location (" + std::to_string(location.x) + "," +
                                std::to_string(location.y) + ") not strictly inside box");
  return RegressionTarget{location.x - box.x_min, location.y - box.y_min, box.x_max - location.x,
                          box.y_max - location.y};
}

inline Box decode_targets(const RegressionTarget& t, const Point& location) {
  return Box{location.x - t.left, location.y - t.top, location.x + t.right,
             location.y + t.bottom};
}

template <class T>
BoxT<ad::Scalar<T>> decode_targets(const ad::Scalar<T>& left, const ad::Scalar<T>& top,
                                   const ad::Scalar<T>& right, const ad::Scalar<T>& bottom,
                                   const Point& location) {
  return BoxT<ad::Scalar<T>>{location.x - left, location.y - top, location.x + right,
                             location.y + bottom};
}

// Greedy NMS: repeatedly keep the highest-scoring detection and drop everything
// with IoU >= threshold against it. Ties on score go to the earlier input
// index. Output is sorted by descending score.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < dets.size(); ++i) order[i] = int(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[size_t(a)].score > dets[size_t(b)].score; });
  std::vector<Detection> kept;
  std::vector<char> removed(dets.size(), 0);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    int i = order[oi];
    if (removed[size_t(i)]) continue;
    kept.push_back(dets[size_t(i)]);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      int j = order[oj];
      if (removed[size_t(j)]) continue;
      if (iou(dets[size_t(i)].box, dets[size_t(j)].box) >= iou_threshold) removed[size_t(j)] = 1;
    }
  }
  return kept;
}

}  // namespace orfnet::geom
