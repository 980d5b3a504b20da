// Training objectives. Classification branches use focal terms over the
// assigned partition; the localization branch uses GIoU over the positive
// cells of box-labeled samples. The confidence-aware variant replaces the
// focal log arguments on uncertain cells with P*(1-W) forms; certain cells
// always keep the plain focal form. All terms are raw sums by default; an
// optional mode divides each form by its positive count.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "orfnet/assignment.hpp"
#include "orfnet/autodiff.hpp"
#include "orfnet/errors.hpp"
#include "orfnet/geometry.hpp"
#include "orfnet/grid.hpp"

namespace orfnet {

struct LossConfig {
  double gamma = 2.0;      // focal exponent
  double threshold = 0.5;  // assignment threshold t
  double lambda = 1.0;     // dot-form weight
  double beta = 1.0;       // unlabeled-form weight
  bool ca_enabled = false;
  // The confidence-aware positive term as printed uses log(P*(1-W)); this
  // flag switches to the log(P*W) reading instead. Off by default.
  bool ca_alternate_positive = false;
  double epsilon = ad::kClampFloor;  // log clamp
  bool normalize_by_count = false;

  void validate() const {
    if (gamma < 0) throw ConfigError("loss: gamma must be >= 0");
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("loss: threshold must be in (0,1)");
    if (lambda < 0 || beta < 0) throw ConfigError("loss: lambda and beta must be >= 0");
    if (!(epsilon > 0 && epsilon < 1)) throw ConfigError("loss: epsilon must be in (0,1)");
  }
};

// Scalar values of every term for one step, plus sample counts.
struct LossReport {
  double reg = 0, box_pos = 0, box_neg = 0;
  double dot_pos = 0, dot_neg = 0;
  double unl_pos = 0, unl_neg = 0;
  double total = 0;
  long n_reg = 0, n_box_pos = 0, n_box_neg = 0;
  long n_dot_pos = 0, n_dot_neg = 0;
  long n_unl_pos = 0, n_unl_neg = 0;
};

template <class T>
struct ClsLossTerms {
  ad::Scalar<T> pos, neg;
  long n_pos = 0, n_neg = 0;
};

template <class T>
struct RegLossTerm {
  ad::Scalar<T> value;
  long n_cells = 0;
};

namespace detail {

// -sum_i w_i (1-P_i)^g log(clamp(P_i)), the plain focal positive term.
template <class T>
ad::Scalar<T> focal_pos(const ad::Grid<T>& p, std::span<const double> w, const LossConfig& cfg) {
  auto lg = ad::log_(ad::clamp_(p, cfg.epsilon, 1.0));
  auto mod = ad::pow_const(ad::affine(p, -1.0, 1.0), cfg.gamma);
  return -ad::weighted_sum(ad::mul(mod, lg), w);
}

// -sum_i w_i P_i^g log(clamp(1-P_i)), the plain focal negative term.
template <class T>
ad::Scalar<T> focal_neg(const ad::Grid<T>& p, std::span<const double> w, const LossConfig& cfg) {
  auto lg = ad::log_(ad::clamp_(ad::affine(p, -1.0, 1.0), cfg.epsilon, 1.0));
  auto mod = ad::pow_const(p, cfg.gamma);
  return -ad::weighted_sum(ad::mul(mod, lg), w);
}

// -sum_i w_i (1-P_i)^g log(clamp(P_i * wa_i)), wa = 1-W (or W, alternate).
template <class T>
ad::Scalar<T> ca_pos(const ad::Grid<T>& p, const ad::Grid<T>& wa, std::span<const double> w,
                     const LossConfig& cfg) {
  auto lg = ad::log_(ad::clamp_(ad::mul(p, wa), cfg.epsilon, 1.0));
  auto mod = ad::pow_const(ad::affine(p, -1.0, 1.0), cfg.gamma);
  return -ad::weighted_sum(ad::mul(mod, lg), w);
}

// -sum_i w_i P_i^g log(clamp(1 - P_i * wa_i)), wa = 1-W.
template <class T>
ad::Scalar<T> ca_neg(const ad::Grid<T>& p, const ad::Grid<T>& wa, std::span<const double> w,
                     const LossConfig& cfg) {
  auto lg = ad::log_(ad::clamp_(ad::affine(ad::mul(p, wa), -1.0, 1.0), cfg.epsilon, 1.0));
  auto mod = ad::pow_const(p, cfg.gamma);
  return -ad::weighted_sum(ad::mul(mod, lg), w);
}

inline bool all_zero(std::span<const double> w) {
  for (double v : w)
    if (v != 0.0) return false;
  return true;
}

// Untracked leaf holding 1-W (or W under the alternate reading).
template <class T>
ad::Grid<T> ca_weight_grid(ad::Tape<T>& tape, const PlainGrid& w_map, bool alternate) {
  std::vector<T> vals(size_t(w_map.cells()));
  for (int i = 0; i < w_map.cells(); ++i)
    vals[size_t(i)] = alternate ? T(w_map.v[size_t(i)]) : T(1.0 - double(w_map.v[size_t(i)]));
  return tape.leaf(ad::GridDims{1, w_map.height, w_map.width}, vals, false);
}

}  // namespace detail

// Confidence-aware terms over the uncertain cells of one level:
//   L_p = -sum_{W>=t} (1-P)^g log(P(1-W)),  L_n = -sum_{W<t} P^g log(1-P(1-W)).
// Log arguments are clamped to [eps, 1]. W enters as a constant.
template <class T>
ClsLossTerms<T> ca_terms(const FeatureGrid<T>& p, const PlainGrid& w_map,
                         const PlainGrid& uncertain, const LossConfig& cfg) {
  ad::Tape<T>& tape = *p.data.tape();
  const int n = w_map.cells();
  std::vector<double> wp(size_t(n), 0.0), wn(size_t(n), 0.0);
  ClsLossTerms<T> out;
  for (int i = 0; i < n; ++i) {
    if (uncertain.v[size_t(i)] == 0.f) continue;
    if (double(w_map.v[size_t(i)]) >= cfg.threshold) {
      wp[size_t(i)] = 1.0;
      ++out.n_pos;
    } else {
      wn[size_t(i)] = 1.0;
      ++out.n_neg;
    }
  }
  auto wa = detail::ca_weight_grid(tape, w_map, cfg.ca_alternate_positive);
  auto wa_neg = cfg.ca_alternate_positive ? detail::ca_weight_grid(tape, w_map, false) : wa;
  out.pos = out.n_pos ? detail::ca_pos(p.data, wa, wp, cfg) : tape.constant(T(0));
  out.neg = out.n_neg ? detail::ca_neg(p.data, wa_neg, wn, cfg) : tape.constant(T(0));
  return out;
}

// Box-form classification: positives are the per-box selected cells (counted
// once per box that selected them), negatives the certain-negative region.
// Positives sit in uncertain territory, so the CA form applies to them when
// enabled; certain negatives always use the plain focal form.
template <class T>
ClsLossTerms<T> box_cls_loss(const std::vector<FeatureGrid<T>>& p, const AssignmentResult& as,
                             const LossConfig& cfg) {
  cfg.validate();
  ad::Tape<T>& tape = *p[0].data.tape();
  ClsLossTerms<T> out;
  out.pos = tape.constant(T(0));
  out.neg = tape.constant(T(0));
  std::vector<std::vector<double>> pos_w(p.size());
  for (size_t l = 0; l < p.size(); ++l)
    pos_w[l].assign(size_t(as.labels[l].cells()), 0.0);
  for (const auto& bp : as.box_positives)
    for (const auto& c : bp.cells) {
      pos_w[size_t(c.level)][size_t(c.row) * as.labels[size_t(c.level)].width + c.col] += 1.0;
      ++out.n_pos;
    }
  for (size_t l = 0; l < p.size(); ++l) {
    const int n = as.labels[l].cells();
    std::vector<double> neg_w(size_t(n), 0.0);
    for (int i = 0; i < n; ++i)
      if (AssignLabel(uint8_t(as.labels[l].v[size_t(i)])) == AssignLabel::Negative) {
        neg_w[size_t(i)] = 1.0;
        ++out.n_neg;
      }
    if (!detail::all_zero(pos_w[l])) {
      if (cfg.ca_enabled) {
        auto wa = detail::ca_weight_grid(tape, as.weight[l], cfg.ca_alternate_positive);
        out.pos = out.pos + detail::ca_pos(p[l].data, wa, pos_w[l], cfg);
      } else {
        out.pos = out.pos + detail::focal_pos(p[l].data, pos_w[l], cfg);
      }
    }
    if (!detail::all_zero(neg_w)) out.neg = out.neg + detail::focal_neg(p[l].data, neg_w, cfg);
  }
  return out;
}

// Dot-form classification: annotated cells are certain positives (always
// plain focal); negatives are uncertain cells with W < t (CA form when
// enabled); remaining uncertain cells contribute nothing.
template <class T>
ClsLossTerms<T> dot_cls_loss(const std::vector<FeatureGrid<T>>& p, const AssignmentResult& as,
                             const LossConfig& cfg) {
  cfg.validate();
  ad::Tape<T>& tape = *p[0].data.tape();
  ClsLossTerms<T> out;
  out.pos = tape.constant(T(0));
  out.neg = tape.constant(T(0));
  for (size_t l = 0; l < p.size(); ++l) {
    const int n = as.labels[l].cells();
    std::vector<double> wp(size_t(n), 0.0), wn(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
      auto lab = AssignLabel(uint8_t(as.labels[l].v[size_t(i)]));
      if (lab == AssignLabel::Positive) {
        wp[size_t(i)] = 1.0;
        ++out.n_pos;
      } else if (lab == AssignLabel::Negative) {
        wn[size_t(i)] = 1.0;
        ++out.n_neg;
      }
    }
    if (!detail::all_zero(wp)) out.pos = out.pos + detail::focal_pos(p[l].data, wp, cfg);
    if (!detail::all_zero(wn)) {
      if (cfg.ca_enabled) {
        auto wa = detail::ca_weight_grid(tape, as.weight[l], false);
        out.neg = out.neg + detail::ca_neg(p[l].data, wa, wn, cfg);
      } else {
        out.neg = out.neg + detail::focal_neg(p[l].data, wn, cfg);
      }
    }
  }
  return out;
}

// Unlabeled-form classification: the whole grid is uncertain; W >= t cells
// are positives, the rest negatives. CA forms apply to both when enabled.
template <class T>
ClsLossTerms<T> unlabeled_cls_loss(const std::vector<FeatureGrid<T>>& p,
                                   const AssignmentResult& as, const LossConfig& cfg) {
  cfg.validate();
  ad::Tape<T>& tape = *p[0].data.tape();
  ClsLossTerms<T> out;
  out.pos = tape.constant(T(0));
  out.neg = tape.constant(T(0));
  for (size_t l = 0; l < p.size(); ++l) {
    const int n = as.labels[l].cells();
    std::vector<double> wp(size_t(n), 0.0), wn(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
      auto lab = AssignLabel(uint8_t(as.labels[l].v[size_t(i)]));
      if (lab == AssignLabel::Positive) {
        wp[size_t(i)] = 1.0;
        ++out.n_pos;
      } else if (lab == AssignLabel::Negative) {
        wn[size_t(i)] = 1.0;
        ++out.n_neg;
      }
    }
    if (cfg.ca_enabled) {
      auto wa = detail::ca_weight_grid(tape, as.weight[l], cfg.ca_alternate_positive);
      auto wa_neg = cfg.ca_alternate_positive ? detail::ca_weight_grid(tape, as.weight[l], false) : wa;
      if (!detail::all_zero(wp)) out.pos = out.pos + detail::ca_pos(p[l].data, wa, wp, cfg);
      if (!detail::all_zero(wn)) out.neg = out.neg + detail::ca_neg(p[l].data, wa_neg, wn, cfg);
    } else {
      if (!detail::all_zero(wp)) out.pos = out.pos + detail::focal_pos(p[l].data, wp, cfg);
      if (!detail::all_zero(wn)) out.neg = out.neg + detail::focal_neg(p[l].data, wn, cfg);
    }
  }
  return out;
}

// GIoU regression over the positive cells of each annotated box. `distances`
// holds per-level 4-channel grids of positive left/top/right/bottom
// distances in pixels. Only box-labeled samples reach this loss.
template <class T>
RegLossTerm<T> box_reg_loss(const std::vector<ad::Grid<T>>& distances,
                            const std::vector<geom::Box>& boxes, const AssignmentResult& as,
                            const PyramidSpec& pyramid) {
  ad::Tape<T>& tape = *distances[0].tape();
  RegLossTerm<T> out;
  out.value = tape.constant(T(0));
  if (as.box_positives.size() != boxes.size())
    throw ShapeError("box_reg_loss: assignment has " + std::to_string(as.box_positives.size()) +
                     " boxes, annotations " + std::to_string(boxes.size()));
  for (size_t j = 0; j < boxes.size(); ++j) {
    for (const auto& cell : as.box_positives[j].cells) {
      const auto& lvl = pyramid.levels[size_t(cell.level)];
      const auto& g = distances[size_t(cell.level)];
      const int hw = lvl.height * lvl.width;
      const int base = cell.row * lvl.width + cell.col;
      auto left = ad::at(g, 0 * hw + base);
      auto top = ad::at(g, 1 * hw + base);
      auto right = ad::at(g, 2 * hw + base);
      auto bottom = ad::at(g, 3 * hw + base);
      auto pred = geom::decode_targets(left, top, right, bottom, lvl.cell_center(cell.row, cell.col));
      out.value = out.value + geom::giou_loss<T>(pred, boxes[j]);
      ++out.n_cells;
    }
  }
  return out;
}

// L_total = L_reg + L_box_pos + L_box_neg + lambda*(dot) + beta*(unlabeled).
// Absent forms contribute nothing. In normalize_by_count mode each form is
// divided by its positive count before weighting, and the report carries the
// normalized values.
template <class T>
ad::Scalar<T> total_loss(ad::Tape<T>& tape, const RegLossTerm<T>* reg, const ClsLossTerms<T>* box,
                         const ClsLossTerms<T>* dot, const ClsLossTerms<T>* unl,
                         const LossConfig& cfg, LossReport* report = nullptr) {
  cfg.validate();
  auto total = tape.constant(T(0));
  LossReport rep;
  if (reg) {
    auto v = cfg.normalize_by_count ? (reg->value * (1.0 / double(std::max(1l, reg->n_cells))))
                                    : reg->value;
    total = total + v;
    rep.reg = double(v.value());
    rep.n_reg = reg->n_cells;
  }
  if (box) {
    double inv = cfg.normalize_by_count ? 1.0 / double(std::max(1l, box->n_pos)) : 1.0;
    auto p = cfg.normalize_by_count ? box->pos * inv : box->pos;
    auto n = cfg.normalize_by_count ? box->neg * inv : box->neg;
    total = total + p;
    total = total + n;
    rep.box_pos = double(p.value());
    rep.box_neg = double(n.value());
    rep.n_box_pos = box->n_pos;
    rep.n_box_neg = box->n_neg;
  }
  if (dot) {
    double inv = cfg.normalize_by_count ? 1.0 / double(std::max(1l, dot->n_pos)) : 1.0;
    auto p = cfg.normalize_by_count ? dot->pos * inv : dot->pos;
    auto n = cfg.normalize_by_count ? dot->neg * inv : dot->neg;
    total = total + (p + n) * cfg.lambda;
    rep.dot_pos = double(p.value());
    rep.dot_neg = double(n.value());
    rep.n_dot_pos = dot->n_pos;
    rep.n_dot_neg = dot->n_neg;
  }
  if (unl) {
    double inv = cfg.normalize_by_count ? 1.0 / double(std::max(1l, unl->n_pos)) : 1.0;
    auto p = cfg.normalize_by_count ? unl->pos * inv : unl->pos;
    auto n = cfg.normalize_by_count ? unl->neg * inv : unl->neg;
    total = total + (p + n) * cfg.beta;
    rep.unl_pos = double(p.value());
    rep.unl_neg = double(n.value());
    rep.n_unl_pos = unl->n_pos;
    rep.n_unl_neg = unl->n_neg;
  }
  rep.total = double(total.value());
  if (report) *report = rep;
  return total;
}

}  // namespace orfnet
