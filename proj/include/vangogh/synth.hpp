#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vangogh/rng.hpp"
#include "vangogh/video.hpp"

namespace vangogh {

// Smooth colour texture: per-channel uniform noise blurred with a separable
// Gaussian and stretched to [lo, hi]. Row-major HWC.
inline std::vector<float> smooth_texture(int64_t h, int64_t w, uint64_t seed, double sigma = 2.5, double lo = 0.05,
                                         double hi = 0.95) {
  Rng rng(seed);
  std::vector<double> a(static_cast<size_t>(h * w * 3));
  for (double& v : a) v = rng.uniform();
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-i * i / (2 * sigma * sigma));
  for (double& v : k) v /= ks;
  std::vector<double> b(a.size());
  auto idx = [w](int64_t y, int64_t x, int c) { return static_cast<size_t>((y * w + x) * 3 + c); };
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * a[idx(y, std::clamp<int64_t>(x + i, 0, w - 1), c)];
        b[idx(y, x, c)] = s;
      }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * b[idx(std::clamp<int64_t>(y + i, 0, h - 1), x, c)];
        a[idx(y, x, c)] = s;
      }
  std::vector<float> out(a.size());
  for (int c = 0; c < 3; ++c) {
    double mn = 1e9, mx = -1e9;
    for (size_t i = c; i < a.size(); i += 3) {
      mn = std::min(mn, a[i]);
      mx = std::max(mx, a[i]);
    }
    const double span = std::max(mx - mn, 1e-12);
    for (size_t i = c; i < a.size(); i += 3) out[i] = static_cast<float>(lo + (hi - lo) * (a[i] - mn) / span);
  }
  return out;
}

// Clip whose content moves by (dx, dy) whole pixels per frame: frame t shows
// the window of a larger texture offset by (-t*dx, -t*dy), so
// frame_t(x, y) = frame_0(x - t*dx, y - t*dy) exactly.
inline Video translating_clip(int64_t frames, int64_t h, int64_t w, int64_t dx, int64_t dy, uint64_t seed,
                              double sigma = 2.5, double fps = 24.0) {
  const int64_t mx = std::abs(dx) * (frames - 1), my = std::abs(dy) * (frames - 1);
  const int64_t H = h + my, W = w + mx;
  const auto tex = smooth_texture(H, W, seed, sigma);
  const int64_t x0 = dx > 0 ? mx : 0, y0 = dy > 0 ? my : 0;
  std::vector<Frame> out;
  out.reserve(static_cast<size_t>(frames));
  for (int64_t t = 0; t < frames; ++t) {
    Frame f(h, w);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          f.at(y, x, c) = tex[static_cast<size_t>(((y0 - t * dy + y) * W + (x0 - t * dx + x)) * 3 + c)];
    out.push_back(std::move(f));
  }
  return Video(std::move(out), fps);
}

}  // namespace vangogh
