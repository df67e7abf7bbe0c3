#pragma once

#include <vector>

#include "vangogh/ops.hpp"
#include "vangogh/video.hpp"

namespace vangogh {

// Coarse-to-fine Horn-Schunck over all colour channels. Every step is built
// from differentiable ops, so the estimate can sit inside a training loss.
struct FlowConfig {
  int levels = 3;
  int warps = 2;         // re-linearisations per level
  int iterations = 20;   // Jacobi sweeps per warp
  double alpha = 0.1;    // smoothness weight
  int64_t min_side = 8;  // no pyramid level smaller than this
};

template <class T>
struct Flow {
  Var<T> u, v;  // [H, W], displacement in pixels: frame1(x) ~ frame2(x + (u, v))
};

namespace detail {

// 3x3 Horn-Schunck neighbour average, edges replicated. x: [H, W].
template <class T>
Var<T> hs_average(const Var<T>& x) {
  static const std::vector<double> k = {1.0 / 12, 1.0 / 6, 1.0 / 12, 1.0 / 6, 0.0, 1.0 / 6, 1.0 / 12, 1.0 / 6, 1.0 / 12};
  Tensor<T> w({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) w[i] = static_cast<T>(k[i]);
  const int64_t H = x.size(0), W = x.size(1);
  Var<T> p = pad_replicate(reshape(x, {1, 1, H, W}), 1);
  return reshape(conv2d(p, constant(std::move(w)), Var<T>{}, 1, 0), {H, W});
}

// Central differences with replicated edges. img: [C, H, W].
template <class T>
std::pair<Var<T>, Var<T>> central_gradient(const Var<T>& img) {
  const int64_t H = img.size(1), W = img.size(2);
  Var<T> p = pad_replicate(img, 1);
  Var<T> mid_rows = slice(p, 1, 1, H);
  Var<T> mid_cols = slice(p, 2, 1, W);
  Var<T> gx = (slice(mid_rows, 2, 2, W) - slice(mid_rows, 2, 0, W)) * T(0.5);
  Var<T> gy = (slice(mid_cols, 1, 2, H) - slice(mid_cols, 1, 0, H)) * T(0.5);
  return {gx, gy};
}

template <class T>
void refine_flow(const Var<T>& i1, const Var<T>& i2, Flow<T>& f, bool zero_init, const FlowConfig& cfg) {
  const T a2 = static_cast<T>(cfg.alpha * cfg.alpha);
  for (int w = 0; w < cfg.warps; ++w) {
    // The first pass on the coarsest level starts from exactly zero flow, where
    // warping is the identity; skipping it keeps the map smooth in the images.
    Var<T> i2w = (zero_init && w == 0) ? i2 : warp_bilinear(i2, f.u, f.v);
    auto [gx1, gy1] = central_gradient(i1);
    auto [gx2, gy2] = central_gradient(i2w);
    Var<T> ix = (gx1 + gx2) * T(0.5);
    Var<T> iy = (gy1 + gy2) * T(0.5);
    Var<T> it = i2w - i1;
    Var<T> j11 = sum(ix * ix, 0) + a2;
    Var<T> j22 = sum(iy * iy, 0) + a2;
    Var<T> j12 = sum(ix * iy, 0);
    Var<T> b1 = sum(ix * it, 0);
    Var<T> b2 = sum(iy * it, 0);
    Var<T> det = j11 * j22 - j12 * j12;
    Var<T> u = f.u, v = f.v;
    for (int k = 0; k < cfg.iterations; ++k) {
      Var<T> r1 = (hs_average(u) - f.u) * a2 - b1;
      Var<T> r2 = (hs_average(v) - f.v) * a2 - b2;
      Var<T> du = (j22 * r1 - j12 * r2) / det;
      Var<T> dv = (j11 * r2 - j12 * r1) / det;
      u = f.u + du;
      v = f.v + dv;
    }
    f.u = u;
    f.v = v;
  }
}

}  // namespace detail

// Flow from frame1 to frame2, both [C, H, W].
template <class T>
Flow<T> estimate_flow(const Var<T>& frame1, const Var<T>& frame2, const FlowConfig& cfg = {}) {
  require(frame1.shape() == frame2.shape() && frame1.dim() == 3, Errc::shape_mismatch,
          "flow frames must share a [C,H,W] shape, got " + shape_str(frame1.shape()) + " and " +
              shape_str(frame2.shape()));
  const int64_t C = frame1.size(0);
  std::vector<Var<T>> p1{frame1}, p2{frame2};
  while (static_cast<int>(p1.size()) < cfg.levels) {
    const int64_t H = p1.back().size(1), W = p1.back().size(2);
    if (H % 2 || W % 2 || H / 2 < cfg.min_side || W / 2 < cfg.min_side) break;
    p1.push_back(reshape(avg_pool2x(reshape(p1.back(), {1, C, H, W})), {C, H / 2, W / 2}));
    p2.push_back(reshape(avg_pool2x(reshape(p2.back(), {1, C, H, W})), {C, H / 2, W / 2}));
  }
  Flow<T> f;
  for (int l = static_cast<int>(p1.size()) - 1; l >= 0; --l) {
    const int64_t H = p1[l].size(1), W = p1[l].size(2);
    const bool coarsest = l == static_cast<int>(p1.size()) - 1;
    if (coarsest) {
      f.u = constant(Tensor<T>({H, W}));
      f.v = constant(Tensor<T>({H, W}));
    } else {
      f.u = reshape(upsample_nearest2x(reshape(f.u, {1, 1, H / 2, W / 2})), {H, W}) * T(2);
      f.v = reshape(upsample_nearest2x(reshape(f.v, {1, 1, H / 2, W / 2})), {H, W}) * T(2);
    }
    detail::refine_flow(p1[l], p2[l], f, coarsest, cfg);
  }
  return f;
}

struct FlowField {
  int64_t height = 0, width = 0;
  std::vector<float> u, v;
};

template <class T>
Var<T> frame_var(const Frame& f) {
  const int64_t H = f.height(), W = f.width();
  Tensor<T> t({3, H, W});
  for (int c = 0; c < 3; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) t[(c * H + y) * W + x] = static_cast<T>(f.at(y, x, c));
  return Var<T>(std::move(t));
}

// Non-differentiable convenience wrapper on frames.
inline FlowField flow_estimate(const Frame& f1, const Frame& f2, const FlowConfig& cfg = {}) {
  require(f1.height() == f2.height() && f1.width() == f2.width(), Errc::shape_mismatch, "flow frames differ in size");
  NoGradGuard guard;
  Flow<double> f = estimate_flow(frame_var<double>(f1), frame_var<double>(f2), cfg);
  FlowField out{f1.height(), f1.width(), {}, {}};
  out.u.assign(f.u.value().span().begin(), f.u.value().span().end());
  out.v.assign(f.v.value().span().begin(), f.v.value().span().end());
  return out;
}

}  // namespace vangogh
