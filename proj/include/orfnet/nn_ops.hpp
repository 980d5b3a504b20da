// Tracked conv / upsample ops for the backbone and head. Weights for a kxk
// conv are stored as a (C_out, C_in, k*k) grid, biases as (C, 1, 1).
#pragma once

#include <vector>

#include "orfnet/autodiff.hpp"
#include "orfnet/errors.hpp"

namespace orfnet::ad {

// 2D convolution with square kernel k in {1,3}, padding k/2, stride 1 or 2.
template <class T>
Grid<T> conv2d(const Grid<T>& in, const Grid<T>& w, const Grid<T>& b, int k, int stride) {
  Tape<T>& tp = *in.tape();
  const auto din = in.dims();
  const auto dw = w.dims();
  if (dw.h != din.c || dw.w != k * k)
    throw ShapeError("conv2d: weight " + to_string(dw) + " incompatible with input " +
                     to_string(din) + " and kernel " + std::to_string(k));
  if (b.dims().c != dw.c || b.dims().h != 1 || b.dims().w != 1)
    throw ShapeError("conv2d: bias " + to_string(b.dims()) + " does not match " +
                     std::to_string(dw.c) + " output channels");
  const int pad = k / 2;
  const int cout = dw.c, cin = din.c, H = din.h, W = din.w;
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  bool rg = tp.node(in.id()).requires_grad || tp.node(w.id()).requires_grad ||
            tp.node(b.id()).requires_grad;
  int out = tp.new_node(GridDims{cout, Ho, Wo}, rg);

  const auto& iv = tp.val(in.id());
  const auto& wv = tp.val(w.id());
  const auto& bv = tp.val(b.id());
  auto& ov = tp.val(out);
  for (int oc = 0; oc < cout; ++oc) {
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        double acc = double(bv[size_t(oc)]);
        for (int ic = 0; ic < cin; ++ic) {
          const T* ip = &iv[size_t(ic) * H * W];
          const T* wp = &wv[(size_t(oc) * cin + ic) * k * k];
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = x * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              acc += double(ip[iy * W + ix]) * double(wp[ky * k + kx]);
            }
          }
        }
        ov[(size_t(oc) * Ho + y) * Wo + x] = T(acc);
      }
    }
  }

  if (rg) {
    int in_id = in.id(), w_id = w.id(), b_id = b.id();
    tp.node(out).back = [out, in_id, w_id, b_id, k, stride, pad, cout, cin, H, W, Ho,
                         Wo](Tape<T>& t) {
      const auto& g = t.grad(out);
      const auto& iv2 = t.val(in_id);
      const auto& wv2 = t.val(w_id);
      const bool need_in = t.node(in_id).requires_grad;
      const bool need_w = t.node(w_id).requires_grad;
      const bool need_b = t.node(b_id).requires_grad;
      auto* gin = need_in ? &t.grad(in_id) : nullptr;
      auto* gw = need_w ? &t.grad(w_id) : nullptr;
      auto* gb = need_b ? &t.grad(b_id) : nullptr;
      for (int oc = 0; oc < cout; ++oc) {
        for (int y = 0; y < Ho; ++y) {
          for (int x = 0; x < Wo; ++x) {
            const T go = g[(size_t(oc) * Ho + y) * Wo + x];
            if (go == T(0)) continue;
            if (gb) (*gb)[size_t(oc)] += go;
            for (int ic = 0; ic < cin; ++ic) {
              const size_t ibase = size_t(ic) * H * W;
              const size_t wbase = (size_t(oc) * cin + ic) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = y * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = x * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  if (gin) (*gin)[ibase + size_t(iy) * W + ix] += go * wv2[wbase + size_t(ky) * k + kx];
                  if (gw) (*gw)[wbase + size_t(ky) * k + kx] += go * iv2[ibase + size_t(iy) * W + ix];
                }
              }
            }
          }
        }
      }
    };
  }
  return Grid<T>(&tp, out);
}

// Nearest-neighbor 2x upsample.
template <class T>
Grid<T> upsample2x(const Grid<T>& in) {
  Tape<T>& tp = *in.tape();
  const auto d = in.dims();
  bool rg = tp.node(in.id()).requires_grad;
  int out = tp.new_node(GridDims{d.c, d.h * 2, d.w * 2}, rg);
  const auto& iv = tp.val(in.id());
  auto& ov = tp.val(out);
  const int Ho = d.h * 2, Wo = d.w * 2;
  for (int c = 0; c < d.c; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int x = 0; x < Wo; ++x)
        ov[(size_t(c) * Ho + y) * Wo + x] = iv[(size_t(c) * d.h + y / 2) * d.w + x / 2];
  if (rg) {
    int in_id = in.id();
    int c_ = d.c, h_ = d.h, w_ = d.w;
    tp.node(out).back = [out, in_id, c_, h_, w_](Tape<T>& t) {
      const auto& g = t.grad(out);
      auto& gi = t.grad(in_id);
      const int Ho2 = h_ * 2, Wo2 = w_ * 2;
      for (int c = 0; c < c_; ++c)
        for (int y = 0; y < Ho2; ++y)
          for (int x = 0; x < Wo2; ++x)
            gi[(size_t(c) * h_ + y / 2) * w_ + x / 2] += g[(size_t(c) * Ho2 + y) * Wo2 + x];
    };
  }
  return Grid<T>(&tp, out);
}

// Slices one channel out of a multi-channel grid as a (1,h,w) view node.
template <class T>
Grid<T> channel(const Grid<T>& in, int c) {
  Tape<T>& tp = *in.tape();
  const auto d = in.dims();
  if (c < 0 || c >= d.c) throw ShapeError("channel: index out of range");
  bool rg = tp.node(in.id()).requires_grad;
  int out = tp.new_node(GridDims{1, d.h, d.w}, rg);
  const auto& iv = tp.val(in.id());
  auto& ov = tp.val(out);
  const size_t n = size_t(d.h) * d.w;
  for (size_t i = 0; i < n; ++i) ov[i] = iv[size_t(c) * n + i];
  if (rg) {
    int in_id = in.id();
    tp.node(out).back = [out, in_id, c, n](Tape<T>& t) {
      const auto& g = t.grad(out);
      auto& gi = t.grad(in_id);
      for (size_t i = 0; i < n; ++i) gi[size_t(c) * n + i] += g[i];
    };
  }
  return Grid<T>(&tp, out);
}

}  // namespace orfnet::ad
