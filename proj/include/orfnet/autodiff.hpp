// Reverse-mode automatic differentiation over dense grids.
//
// The tape records whole-grid operations (not individual scalars): each node
// owns a flat value buffer with a (channels, height, width) shape and a
// backward closure that scatters adjoints into its inputs. Scalars are 1x1x1
// nodes with operator sugar. The scalar type is a template parameter: float
// for training (32-bit storage, 64-bit reduction accumulators), double for
// finite-difference reference checks.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "orfnet/errors.hpp"

namespace orfnet::ad {

// Lower clamp applied to log/sqrt arguments: loss terms take logs of products
// of probabilities that can reach zero exactly.
inline constexpr double kClampFloor = 1e-7;

struct GridDims {
  int c = 1, h = 1, w = 1;
  int size() const { return c * h * w; }
  bool operator==(const GridDims&) const = default;
};

inline std::string to_string(const GridDims& d) {
  return std::to_string(d.c) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

template <class T>
class Tape;

// Cheap handle to one tape node.
template <class T>
class Grid {
 public:
  Grid() = default;
  Grid(Tape<T>* t, int id) : tape_(t), id_(id) {}
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const GridDims& dims() const;
  std::span<const T> values() const;
  std::span<const T> grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Tracked scalar: a 1x1x1 node.
template <class T>
class Scalar {
 public:
  Scalar() = default;
  Scalar(Tape<T>* t, int id) : tape_(t), id_(id) {}
  explicit Scalar(const Grid<T>& g) : tape_(g.tape()), id_(g.id()) {}
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  T value() const;
  T grad() const;
  Grid<T> as_grid() const { return Grid<T>(tape_, id_); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <class T>
class Tape {
 public:
  struct Node {
    GridDims dims;
    std::vector<T> val;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  Grid<T> leaf(const GridDims& d, std::span<const T> data, bool requires_grad) {
    if (int(data.size()) != d.size())
      throw ShapeError("leaf: data size " + std::to_string(data.size()) +
                       " does not match dims " + to_string(d));
    int id = new_node(d, requires_grad);
    nodes_[id].val.assign(data.begin(), data.end());
    return Grid<T>(this, id);
  }

  Grid<T> leaf_fill(const GridDims& d, T fill, bool requires_grad) {
    int id = new_node(d, requires_grad);
    nodes_[id].val.assign(size_t(d.size()), fill);
    return Grid<T>(this, id);
  }

  Scalar<T> constant(T v) {
    int id = new_node(GridDims{1, 1, 1}, false);
    nodes_[id].val.assign(1, v);
    return Scalar<T>(this, id);
  }

  Scalar<T> scalar_leaf(T v, bool requires_grad) {
    int id = new_node(GridDims{1, 1, 1}, requires_grad);
    nodes_[id].val.assign(1, v);
    return Scalar<T>(this, id);
  }

  // Populates grad buffers of every node reachable from `loss`, in exact
  // reverse recording order. A second call without a fresh tape is an error.
  void backward(const Scalar<T>& loss) {
    if (loss.tape() != this) throw std::logic_error("backward: scalar from another tape");
    if (nodes_[loss.id()].dims.size() != 1)
      throw ShapeError("backward: loss must be a single scalar");
    if (backward_done_) throw std::logic_error("backward() called twice without re-recording");
    backward_done_ = true;
    for (auto& n : nodes_) n.grad.assign(n.val.size(), T(0));
    nodes_[loss.id()].grad[0] = T(1);
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.back && n.requires_grad) n.back(*this);
    }
  }

  bool backward_done() const { return backward_done_; }
  size_t node_count() const { return nodes_.size(); }

  // --- op-implementation interface ---
  int new_node(const GridDims& d, bool requires_grad) {
    nodes_.push_back(Node{d, {}, {}, requires_grad, nullptr});
    nodes_.back().val.resize(size_t(d.size()));
    return int(nodes_.size()) - 1;
  }
  Node& node(int id) { return nodes_[size_t(id)]; }
  const Node& node(int id) const { return nodes_[size_t(id)]; }
  std::vector<T>& val(int id) { return nodes_[size_t(id)].val; }
  std::vector<T>& grad(int id) { return nodes_[size_t(id)].grad; }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <class T>
const GridDims& Grid<T>::dims() const {
  return tape_->node(id_).dims;
}
template <class T>
std::span<const T> Grid<T>::values() const {
  return tape_->node(id_).val;
}
template <class T>
std::span<const T> Grid<T>::grad() const {
  return tape_->node(id_).grad;
}
template <class T>
T Scalar<T>::value() const {
  return tape_->node(id_).val[0];
}
template <class T>
T Scalar<T>::grad() const {
  return tape_->node(id_).grad[0];
}

namespace detail {

template <class T>
void check_same_shape(const char* op, const Grid<T>& a, const Grid<T>& b) {
  if (!(a.dims() == b.dims()))
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.dims()) + " vs " +
                     to_string(b.dims()));
  if (a.tape() != b.tape()) throw std::logic_error(std::string(op) + ": grids from different tapes");
}

// Generic elementwise unary op. DFn(x, y) returns dy/dx given input x and output y.
template <class T, class FFn, class DFn>
Grid<T> unary(const Grid<T>& a, FFn f, DFn df) {
  Tape<T>& tp = *a.tape();
  int out = tp.new_node(a.dims(), tp.node(a.id()).requires_grad);
  const auto& av = tp.val(a.id());
  auto& ov = tp.val(out);
  for (size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
  if (tp.node(out).requires_grad) {
    int aid = a.id();
    tp.node(out).back = [out, aid, df](Tape<T>& t) {
      const auto& g = t.grad(out);
      const auto& x = t.val(aid);
      const auto& y = t.val(out);
      auto& ga = t.grad(aid);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    };
  }
  return Grid<T>(&tp, out);
}

}  // namespace detail

template <class T>
Grid<T> add(const Grid<T>& a, const Grid<T>& b) {
  detail::check_same_shape("add", a, b);
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad || tp.node(b.id()).requires_grad;
  int out = tp.new_node(a.dims(), rg);
  const auto& av = tp.val(a.id());
  const auto& bv = tp.val(b.id());
  auto& ov = tp.val(out);
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
  if (rg) {
    int aid = a.id(), bid = b.id();
    tp.node(out).back = [out, aid, bid](Tape<T>& t) {
      const auto& g = t.grad(out);
      if (t.node(aid).requires_grad) {
        auto& ga = t.grad(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.node(bid).requires_grad) {
        auto& gb = t.grad(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  return Grid<T>(&tp, out);
}

template <class T>
Grid<T> mul(const Grid<T>& a, const Grid<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad || tp.node(b.id()).requires_grad;
  int out = tp.new_node(a.dims(), rg);
  const auto& av = tp.val(a.id());
  const auto& bv = tp.val(b.id());
  auto& ov = tp.val(out);
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
  if (rg) {
    int aid = a.id(), bid = b.id();
    tp.node(out).back = [out, aid, bid](Tape<T>& t) {
      const auto& g = t.grad(out);
      const auto& av2 = t.val(aid);
      const auto& bv2 = t.val(bid);
      if (t.node(aid).requires_grad) {
        auto& ga = t.grad(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (t.node(bid).requires_grad) {
        auto& gb = t.grad(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      }
    };
  }
  return Grid<T>(&tp, out);
}

// k * x + m with double-precision coefficients.
template <class T>
Grid<T> affine(const Grid<T>& a, double k, double m) {
  return detail::unary(
      a, [k, m](T x) { return T(k * double(x) + m); },
      [k](T, T) { return T(k); });
}

template <class T>
Grid<T> scalar_mul(const Grid<T>& a, double k) {
  return affine(a, k, 0.0);
}

// sqrt with the argument clamped below at kClampFloor. The derivative is zero
// in the clamped region.
template <class T>
Grid<T> sqrt_(const Grid<T>& a) {
  const T eps = T(kClampFloor);
  return detail::unary(
      a, [eps](T x) { return std::sqrt(x < eps ? eps : x); },
      [eps](T x, T y) { return x < eps ? T(0) : T(0.5) / y; });
}

// log with the argument clamped below at kClampFloor.
template <class T>
Grid<T> log_(const Grid<T>& a) {
  const T eps = T(kClampFloor);
  return detail::unary(
      a, [eps](T x) { return std::log(x < eps ? eps : x); },
      [eps](T x, T) { return x < eps ? T(0) : T(1) / x; });
}

template <class T>
Grid<T> clamp_(const Grid<T>& a, double lo, double hi) {
  const T l = T(lo), h = T(hi);
  return detail::unary(
      a, [l, h](T x) { return x < l ? l : (x > h ? h : x); },
      [l, h](T x, T) { return (x >= l && x <= h) ? T(1) : T(0); });
}

template <class T>
Grid<T> sigmoid_(const Grid<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) {
          T e = std::exp(-x);
          return T(1) / (T(1) + e);
        }
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Grid<T> exp_(const Grid<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Grid<T> relu(const Grid<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// x^p for constant p >= 0, with x clamped below at zero. For p < 1 the
// derivative is evaluated no closer to zero than 1e-12.
template <class T>
Grid<T> pow_const(const Grid<T>& a, double p) {
  if (p < 0) throw std::invalid_argument("pow_const: negative exponent");
  return detail::unary(
      a,
      [p](T x) {
        if (p == 0.0) return T(1);
        T xm = x < T(0) ? T(0) : x;
        return T(std::pow(double(xm), p));
      },
      [p](T x, T) {
        if (p == 0.0) return T(0);
        double xm = x < T(0) ? 0.0 : double(x);
        if (p < 1.0 && xm < 1e-12) xm = 1e-12;
        return T(p * std::pow(xm, p - 1.0));
      });
}

// Weighted sum reduction to a scalar; accumulates in double.
template <class T>
Scalar<T> weighted_sum(const Grid<T>& a, std::span<const double> w) {
  Tape<T>& tp = *a.tape();
  if (int(w.size()) != a.dims().size())
    throw ShapeError("weighted_sum: weight count " + std::to_string(w.size()) +
                     " does not match grid " + to_string(a.dims()));
  bool rg = tp.node(a.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  const auto& av = tp.val(a.id());
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) acc += double(av[i]) * w[i];
  tp.val(out)[0] = T(acc);
  if (rg) {
    int aid = a.id();
    std::vector<double> wcopy(w.begin(), w.end());
    tp.node(out).back = [out, aid, wcopy = std::move(wcopy)](Tape<T>& t) {
      const T g = t.grad(out)[0];
      auto& ga = t.grad(aid);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * T(wcopy[i]);
    };
  }
  return Scalar<T>(&tp, out);
}

template <class T>
Scalar<T> sum(const Grid<T>& a) {
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  const auto& av = tp.val(a.id());
  double acc = 0.0;
  for (T v : av) acc += double(v);
  tp.val(out)[0] = T(acc);
  if (rg) {
    int aid = a.id();
    tp.node(out).back = [out, aid](Tape<T>& t) {
      const T g = t.grad(out)[0];
      auto& ga = t.grad(aid);
      for (auto& gi : ga) gi += g;
    };
  }
  return Scalar<T>(&tp, out);
}

// Extracts one element as a tracked scalar (backward scatter-adds).
template <class T>
Scalar<T> at(const Grid<T>& a, int flat_index) {
  Tape<T>& tp = *a.tape();
  if (flat_index < 0 || flat_index >= a.dims().size())
    throw std::out_of_range("at: index " + std::to_string(flat_index) + " out of " +
                            to_string(a.dims()));
  bool rg = tp.node(a.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  tp.val(out)[0] = tp.val(a.id())[size_t(flat_index)];
  if (rg) {
    int aid = a.id();
    tp.node(out).back = [out, aid, flat_index](Tape<T>& t) {
      t.grad(aid)[size_t(flat_index)] += t.grad(out)[0];
    };
  }
  return Scalar<T>(&tp, out);
}

// --- dispatch surface used by tests and generic callers ---

enum class OpKind { Add, Mul, Sqrt, Sigmoid, Log, Clamp, ScalarMul };

template <class T>
Grid<T> elementwise(OpKind kind, const Grid<T>& a, const Grid<T>* b = nullptr, double c0 = 0.0,
                    double c1 = 1.0) {
  switch (kind) {
    case OpKind::Add:
      if (!b) throw std::invalid_argument("elementwise: add needs two operands");
      return add(a, *b);
    case OpKind::Mul:
      if (!b) throw std::invalid_argument("elementwise: mul needs two operands");
      return mul(a, *b);
    case OpKind::Sqrt:
      return sqrt_(a);
    case OpKind::Sigmoid:
      return sigmoid_(a);
    case OpKind::Log:
      return log_(a);
    case OpKind::Clamp:
      return clamp_(a, c0, c1);
    case OpKind::ScalarMul:
      return scalar_mul(a, c0);
  }
  throw std::invalid_argument("elementwise: unknown op kind");
}

// --- scalar arithmetic ---

namespace detail {

template <class T, class FFn, class DaFn, class DbFn>
Scalar<T> binary_scalar(const Scalar<T>& a, const Scalar<T>& b, FFn f, DaFn da, DbFn db) {
  if (a.tape() != b.tape()) throw std::logic_error("scalar op: different tapes");
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad || tp.node(b.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  T va = a.value(), vb = b.value();
  tp.val(out)[0] = f(va, vb);
  if (rg) {
    int aid = a.id(), bid = b.id();
    tp.node(out).back = [out, aid, bid, da, db](Tape<T>& t) {
      const T g = t.grad(out)[0];
      T x = t.val(aid)[0], y = t.val(bid)[0];
      if (t.node(aid).requires_grad) t.grad(aid)[0] += g * da(x, y);
      if (t.node(bid).requires_grad) t.grad(bid)[0] += g * db(x, y);
    };
  }
  return Scalar<T>(&tp, out);
}

}  // namespace detail

template <class T>
Scalar<T> operator+(const Scalar<T>& a, const Scalar<T>& b) {
  return detail::binary_scalar(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}
template <class T>
Scalar<T> operator-(const Scalar<T>& a, const Scalar<T>& b) {
  return detail::binary_scalar(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}
template <class T>
Scalar<T> operator*(const Scalar<T>& a, const Scalar<T>& b) {
  return detail::binary_scalar(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}
template <class T>
Scalar<T> operator/(const Scalar<T>& a, const Scalar<T>& b) {
  return detail::binary_scalar(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Scalar<T> scalar_affine(const Scalar<T>& a, double k, double m) {
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  tp.val(out)[0] = T(k * double(a.value()) + m);
  if (rg) {
    int aid = a.id();
    tp.node(out).back = [out, aid, k](Tape<T>& t) { t.grad(aid)[0] += t.grad(out)[0] * T(k); };
  }
  return Scalar<T>(&tp, out);
}

template <class T>
Scalar<T> operator+(const Scalar<T>& a, double m) {
  return scalar_affine(a, 1.0, m);
}
template <class T>
Scalar<T> operator+(double m, const Scalar<T>& a) {
  return scalar_affine(a, 1.0, m);
}
template <class T>
Scalar<T> operator-(const Scalar<T>& a, double m) {
  return scalar_affine(a, 1.0, -m);
}
template <class T>
Scalar<T> operator-(double m, const Scalar<T>& a) {
  return scalar_affine(a, -1.0, m);
}
template <class T>
Scalar<T> operator*(const Scalar<T>& a, double k) {
  return scalar_affine(a, k, 0.0);
}
template <class T>
Scalar<T> operator*(double k, const Scalar<T>& a) {
  return scalar_affine(a, k, 0.0);
}
template <class T>
Scalar<T> operator-(const Scalar<T>& a) {
  return scalar_affine(a, -1.0, 0.0);
}

// max/min pass the adjoint to the larger/smaller operand; ties go to the first.
template <class T>
Scalar<T> vmax(const Scalar<T>& a, const Scalar<T>& b) {
  return detail::binary_scalar(
      a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y) { return x >= y ? T(1) : T(0); },
      [](T x, T y) { return x >= y ? T(0) : T(1); });
}
template <class T>
Scalar<T> vmin(const Scalar<T>& a, const Scalar<T>& b) {
  return detail::binary_scalar(
      a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) { return x <= y ? T(1) : T(0); },
      [](T x, T y) { return x <= y ? T(0) : T(1); });
}
template <class T>
Scalar<T> vmax(const Scalar<T>& a, double m) {
  return vmax(a, a.tape()->constant(T(m)));
}

template <class T>
Scalar<T> exp_s(const Scalar<T>& a) {
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  tp.val(out)[0] = std::exp(a.value());
  if (rg) {
    int aid = a.id();
    tp.node(out).back = [out, aid](Tape<T>& t) {
      t.grad(aid)[0] += t.grad(out)[0] * t.val(out)[0];
    };
  }
  return Scalar<T>(&tp, out);
}

template <class T>
Scalar<T> log_s(const Scalar<T>& a) {
  Tape<T>& tp = *a.tape();
  bool rg = tp.node(a.id()).requires_grad;
  int out = tp.new_node(GridDims{1, 1, 1}, rg);
  const T eps = T(kClampFloor);
  T x = a.value();
  tp.val(out)[0] = std::log(x < eps ? eps : x);
  if (rg) {
    int aid = a.id();
    tp.node(out).back = [out, aid, eps](Tape<T>& t) {
      T xv = t.val(aid)[0];
      if (xv >= eps) t.grad(aid)[0] += t.grad(out)[0] / xv;
    };
  }
  return Scalar<T>(&tp, out);
}

}  // namespace orfnet::ad
