#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "vangogh/color.hpp"
#include "vangogh/flow.hpp"
#include "vangogh/rng.hpp"

namespace vangogh {

using Rgb = std::array<float, 3>;

struct SuperpixelMap {
  int64_t height = 0, width = 0;
  std::vector<int32_t> labels;     // H*W, contiguous ids 0..S-1
  std::vector<Rgb> mean_colors;    // per id, mean of member pixels
  int64_t num_segments() const { return static_cast<int64_t>(mean_colors.size()); }
};

namespace detail {

inline std::vector<Rgb> segment_means(const Frame& f, const std::vector<int32_t>& labels, int32_t n) {
  std::vector<std::array<double, 3>> acc(static_cast<size_t>(n), {0, 0, 0});
  std::vector<int64_t> cnt(static_cast<size_t>(n), 0);
  const auto& px = f.pixels();
  for (size_t i = 0; i < labels.size(); ++i) {
    for (int c = 0; c < 3; ++c) acc[labels[i]][c] += px[3 * i + c];
    ++cnt[labels[i]];
  }
  std::vector<Rgb> out(static_cast<size_t>(n));
  for (int32_t s = 0; s < n; ++s)
    for (int c = 0; c < 3; ++c) out[s][c] = static_cast<float>(acc[s][c] / static_cast<double>(cnt[s]));
  return out;
}

// Relabels 4-connected components; components smaller than min_size join the
// previously visited neighbouring component. Output ids are contiguous.
inline std::vector<int32_t> enforce_connectivity(const std::vector<int32_t>& labels, int64_t H, int64_t W,
                                                 int64_t min_size) {
  const int64_t N = H * W;
  std::vector<int32_t> out(static_cast<size_t>(N), -1);
  std::vector<int64_t> comp;
  const int dy[4] = {-1, 0, 1, 0}, dx[4] = {0, -1, 0, 1};
  int32_t next = 0;
  for (int64_t start = 0; start < N; ++start) {
    if (out[start] >= 0) continue;
    // Neighbour label that a too-small component will be merged into.
    int32_t adjacent = -1;
    const int64_t sy = start / W, sx = start % W;
    for (int k = 0; k < 4; ++k) {
      const int64_t ny = sy + dy[k], nx = sx + dx[k];
      if (ny >= 0 && ny < H && nx >= 0 && nx < W && out[ny * W + nx] >= 0) adjacent = out[ny * W + nx];
    }
    comp.clear();
    comp.push_back(start);
    out[start] = next;
    for (size_t q = 0; q < comp.size(); ++q) {
      const int64_t y = comp[q] / W, x = comp[q] % W;
      for (int k = 0; k < 4; ++k) {
        const int64_t ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
        const int64_t j = ny * W + nx;
        if (out[j] < 0 && labels[j] == labels[start]) {
          out[j] = next;
          comp.push_back(j);
        }
      }
    }
    if (static_cast<int64_t>(comp.size()) < min_size && adjacent >= 0) {
      for (int64_t j : comp) out[j] = adjacent;
    } else {
      ++next;
    }
  }
  return out;
}

}  // namespace detail

// SLIC superpixels in CIELAB. Centres start on a regular grid and are nudged
// to the lowest-gradient pixel of their 3x3 neighbourhood.
inline SuperpixelMap slic_segment(const Frame& f, int64_t num_segments, double compactness = 10.0, int iters = 10) {
  require(num_segments >= 1 && iters >= 1, Errc::invalid_argument, "slic needs num_segments >= 1 and iters >= 1");
  const int64_t H = f.height(), W = f.width(), N = H * W;
  const LabFrame lab = rgb_to_lab(f);
  auto feat = [&](int64_t i) { return std::array<double, 3>{lab.L[i], lab.a[i], lab.b[i]}; };

  const int64_t nx = std::max<int64_t>(1, std::llround(std::sqrt(static_cast<double>(num_segments * W) / H)));
  const int64_t ny = std::max<int64_t>(1, std::llround(static_cast<double>(num_segments) / nx));
  const double step = std::sqrt(static_cast<double>(N) / static_cast<double>(nx * ny));

  struct Center {
    double L, a, b, y, x;
  };
  std::vector<Center> centers;
  auto grad_at = [&](int64_t y, int64_t x) {
    auto at = [&](int64_t yy, int64_t xx) {
      return feat(std::clamp<int64_t>(yy, 0, H - 1) * W + std::clamp<int64_t>(xx, 0, W - 1));
    };
    double g = 0;
    for (int c = 0; c < 3; ++c) {
      const double gx = at(y, x + 1)[c] - at(y, x - 1)[c];
      const double gy = at(y + 1, x)[c] - at(y - 1, x)[c];
      g += gx * gx + gy * gy;
    }
    return g;
  };
  for (int64_t j = 0; j < ny; ++j)
    for (int64_t i = 0; i < nx; ++i) {
      int64_t cy = std::min<int64_t>(H - 1, static_cast<int64_t>((j + 0.5) * H / ny));
      int64_t cx = std::min<int64_t>(W - 1, static_cast<int64_t>((i + 0.5) * W / nx));
      int64_t by = cy, bx = cx;
      double best = grad_at(cy, cx);
      for (int64_t yy = cy - 1; yy <= cy + 1; ++yy)
        for (int64_t xx = cx - 1; xx <= cx + 1; ++xx) {
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const double g = grad_at(yy, xx);
          if (g < best) best = g, by = yy, bx = xx;
        }
      const auto c = feat(by * W + bx);
      centers.push_back({c[0], c[1], c[2], static_cast<double>(by), static_cast<double>(bx)});
    }

  std::vector<int32_t> labels(static_cast<size_t>(N), 0);
  std::vector<double> dist(static_cast<size_t>(N));
  const double m2 = compactness * compactness, s2 = step * step;
  const int64_t radius = static_cast<int64_t>(std::ceil(step));
  for (int it = 0; it < iters; ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(c.y) - radius);
      const int64_t y1 = std::min<int64_t>(H - 1, static_cast<int64_t>(c.y) + radius);
      const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(c.x) - radius);
      const int64_t x1 = std::min<int64_t>(W - 1, static_cast<int64_t>(c.x) + radius);
      for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) {
          const int64_t i = y * W + x;
          const double dl = lab.L[i] - c.L, da = lab.a[i] - c.a, db = lab.b[i] - c.b;
          const double sy = y - c.y, sx = x - c.x;
          const double d = dl * dl + da * da + db * db + (sy * sy + sx * sx) / s2 * m2;
          if (d < dist[i]) {
            dist[i] = d;
            labels[i] = static_cast<int32_t>(k);
          }
        }
    }
    std::vector<std::array<double, 6>> acc(centers.size(), {0, 0, 0, 0, 0, 0});
    for (int64_t i = 0; i < N; ++i) {
      auto& a = acc[labels[i]];
      a[0] += lab.L[i], a[1] += lab.a[i], a[2] += lab.b[i], a[3] += i / W, a[4] += i % W, a[5] += 1;
    }
    for (size_t k = 0; k < centers.size(); ++k)
      if (acc[k][5] > 0) {
        const double n = acc[k][5];
        centers[k] = {acc[k][0] / n, acc[k][1] / n, acc[k][2] / n, acc[k][3] / n, acc[k][4] / n};
      }
  }

  // Pixels never reached by any window keep label 0 from initialisation; the
  // connectivity pass folds any resulting fragments into neighbours.
  const int64_t min_size = std::max<int64_t>(1, N / (nx * ny) / 4);
  SuperpixelMap out;
  out.height = H;
  out.width = W;
  out.labels = detail::enforce_connectivity(labels, H, W, min_size);
  const int32_t n = *std::max_element(out.labels.begin(), out.labels.end()) + 1;
  out.mean_colors = detail::segment_means(f, out.labels, n);
  return out;
}

inline Frame paint_superpixels(const SuperpixelMap& sp) {
  Frame out(sp.height, sp.width);
  for (size_t i = 0; i < sp.labels.size(); ++i)
    for (int c = 0; c < 3; ++c) out.pixels()[3 * i + c] = sp.mean_colors[sp.labels[i]][c];
  return out;
}

inline Video superpixel_video(const Video& v, int64_t num_segments, double compactness = 10.0, int iters = 10) {
  std::vector<Frame> frames;
  frames.reserve(v.frames().size());
  for (const auto& f : v.frames()) frames.push_back(paint_superpixels(slic_segment(f, num_segments, compactness, iters)));
  return Video(std::move(frames), v.fps());
}

struct HintAnchor {
  int64_t frame = 0;
  int64_t x = 0, y = 0;
  Rgb color{0, 0, 0};
  bool operator==(const HintAnchor&) const = default;
};

struct TrackPoint {
  int64_t frame = 0;
  double x = 0, y = 0;
  bool operator==(const TrackPoint&) const = default;
};

struct HintSet {
  int64_t cell_side = 10;
  std::vector<HintAnchor> anchors;
  std::vector<std::vector<TrackPoint>> trajectories;  // one per anchor, T points each once tracked
  bool empty() const { return anchors.empty(); }
  bool operator==(const HintSet&) const = default;
};

struct HintSampling {
  int64_t k_max = 150;
  int64_t d_min = 10;
  int64_t d_max = 20;
};

// Exactly K anchors with the given cell side, uniform over the first frame,
// colours read from the superpixel video.
inline HintSet sample_hints_fixed(const Video& v_sp, Rng& rng, int64_t K, int64_t cell_side) {
  require(K >= 0 && cell_side >= 1, Errc::invalid_argument, "bad hint count or cell side");
  HintSet h;
  h.cell_side = cell_side;
  const Frame& f = v_sp[0];
  for (int64_t k = 0; k < K; ++k) {
    HintAnchor a;
    a.x = rng.uniform_int(0, f.width() - 1);
    a.y = rng.uniform_int(0, f.height() - 1);
    for (int c = 0; c < 3; ++c) a.color[c] = f.at(a.y, a.x, c);
    h.anchors.push_back(a);
  }
  return h;
}

// K ~ U{0..k_max}, cell side ~ U{d_min..d_max}.
inline HintSet sample_hints(const Video& v_sp, Rng& rng, const HintSampling& s = {}) {
  require(s.k_max >= 0 && s.d_min >= 1 && s.d_max >= s.d_min, Errc::invalid_argument, "bad hint sampling range");
  const int64_t K = rng.uniform_int(0, s.k_max);
  const int64_t side = rng.uniform_int(s.d_min, s.d_max);
  return sample_hints_fixed(v_sp, rng, K, side);
}

inline HintSet sample_hints(const Video& v_sp, uint64_t seed, const HintSampling& s = {}) {
  Rng rng(seed);
  return sample_hints(v_sp, rng, s);
}

// Frame-to-frame flows of a video, both directions. forward[t]: t -> t+1,
// backward[t]: t+1 -> t.
struct FlowChain {
  std::vector<FlowField> forward, backward;
};

inline FlowChain compute_flow_chain(const Video& v, const FlowConfig& cfg = {}) {
  FlowChain c;
  for (int64_t t = 0; t + 1 < v.num_frames(); ++t) {
    c.forward.push_back(flow_estimate(v[t], v[t + 1], cfg));
    c.backward.push_back(flow_estimate(v[t + 1], v[t], cfg));
  }
  return c;
}

namespace detail {
inline std::pair<double, double> sample_flow(const FlowField& f, double x, double y) {
  const int64_t W = f.width, H = f.height;
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  const int64_t x0 = static_cast<int64_t>(std::floor(x)), y0 = static_cast<int64_t>(std::floor(y));
  const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double fx = x - x0, fy = y - y0;
  auto bil = [&](const std::vector<float>& g) {
    return (1 - fy) * ((1 - fx) * g[y0 * W + x0] + fx * g[y0 * W + x1]) +
           fy * ((1 - fx) * g[y1 * W + x0] + fx * g[y1 * W + x1]);
  };
  return {bil(f.u), bil(f.v)};
}
}  // namespace detail

// Trajectories by chaining flow forward and backward from each anchor's frame,
// positions clamped to the frame.
inline HintSet track_hints(HintSet h, const FlowChain& chain, int64_t num_frames, int64_t H, int64_t W) {
  h.trajectories.clear();
  auto clampx = [W](double x) { return std::clamp(x, 0.0, static_cast<double>(W - 1)); };
  auto clampy = [H](double y) { return std::clamp(y, 0.0, static_cast<double>(H - 1)); };
  for (const auto& a : h.anchors) {
    require(a.frame >= 0 && a.frame < num_frames, Errc::out_of_range, "hint anchor frame outside the video");
    std::vector<TrackPoint> traj(static_cast<size_t>(num_frames));
    traj[a.frame] = {a.frame, clampx(static_cast<double>(a.x)), clampy(static_cast<double>(a.y))};
    for (int64_t t = a.frame; t + 1 < num_frames; ++t) {
      auto [u, v] = detail::sample_flow(chain.forward[t], traj[t].x, traj[t].y);
      traj[t + 1] = {t + 1, clampx(traj[t].x + u), clampy(traj[t].y + v)};
    }
    for (int64_t t = a.frame; t > 0; --t) {
      auto [u, v] = detail::sample_flow(chain.backward[t - 1], traj[t].x, traj[t].y);
      traj[t - 1] = {t - 1, clampx(traj[t].x + u), clampy(traj[t].y + v)};
    }
    h.trajectories.push_back(std::move(traj));
  }
  return h;
}

inline HintSet track_hints(const HintSet& h, const Video& gray, const FlowConfig& cfg = {}) {
  if (h.anchors.empty()) {
    HintSet out = h;
    out.trajectories.clear();
    return out;
  }
  return track_hints(h, compute_flow_chain(gray, cfg), gray.num_frames(), gray.height(), gray.width());
}

struct HintsTensorPair {
  int64_t frames = 0, height = 0, width = 0;
  std::vector<uint8_t> mask;  // T*H*W, 0 or 1
  Video canvas;
  uint8_t at(int64_t t, int64_t y, int64_t x) const { return mask[static_cast<size_t>((t * height + y) * width + x)]; }
};

// Half-open pixel span of a cell of side d centred on c, clipped to [0, n).
inline std::pair<int64_t, int64_t> cell_span(double c, int64_t d, int64_t n) {
  const int64_t lo = static_cast<int64_t>(std::llround(c)) - d / 2;
  return {std::max<int64_t>(0, lo), std::min<int64_t>(n, lo + d)};
}

// Mask of all trajectory cells, one layer per frame. Untracked anchors only
// mark their own frame.
inline std::vector<uint8_t> hint_mask(const HintSet& h, int64_t T, int64_t H, int64_t W) {
  std::vector<uint8_t> m(static_cast<size_t>(T * H * W), 0);
  auto mark = [&](int64_t t, double x, double y) {
    if (t < 0 || t >= T) return;
    auto [y0, y1] = cell_span(y, h.cell_side, H);
    auto [x0, x1] = cell_span(x, h.cell_side, W);
    for (int64_t yy = y0; yy < y1; ++yy)
      for (int64_t xx = x0; xx < x1; ++xx) m[static_cast<size_t>((t * H + yy) * W + xx)] = 1;
  };
  for (size_t k = 0; k < h.anchors.size(); ++k) {
    if (k < h.trajectories.size() && !h.trajectories[k].empty()) {
      for (const auto& p : h.trajectories[k]) mark(p.frame, p.x, p.y);
    } else {
      mark(h.anchors[k].frame, static_cast<double>(h.anchors[k].x), static_cast<double>(h.anchors[k].y));
    }
  }
  return m;
}

// canvas = M * I_sp + (1 - M) * I_g, per channel.
inline HintsTensorPair synthesize_mask_canvas(const HintSet& h, const Video& v_sp, const Video& gray) {
  require(v_sp.num_frames() == gray.num_frames() && v_sp.height() == gray.height() && v_sp.width() == gray.width(),
          Errc::shape_mismatch, "superpixel and gray videos differ in shape");
  HintsTensorPair out;
  out.frames = gray.num_frames();
  out.height = gray.height();
  out.width = gray.width();
  out.mask = hint_mask(h, out.frames, out.height, out.width);
  std::vector<Frame> frames;
  const int64_t HW = out.height * out.width;
  for (int64_t t = 0; t < out.frames; ++t) {
    Frame f = gray[t];
    const auto& sp = v_sp[t].pixels();
    for (int64_t i = 0; i < HW; ++i)
      if (out.mask[static_cast<size_t>(t * HW + i)])
        for (int c = 0; c < 3; ++c) f.pixels()[3 * i + c] = sp[3 * i + c];
    frames.push_back(std::move(f));
  }
  out.canvas = Video(std::move(frames), gray.fps());
  return out;
}

// Inference-time colour source: every cell along a trajectory carries its
// anchor's colour; elsewhere the gray video shows through.
inline Video anchor_color_video(const HintSet& h, const Video& gray) {
  Video out = gray;
  const int64_t T = gray.num_frames(), H = gray.height(), W = gray.width();
  for (size_t k = 0; k < h.anchors.size(); ++k) {
    HintSet single;
    single.cell_side = h.cell_side;
    single.anchors = {h.anchors[k]};
    if (k < h.trajectories.size()) single.trajectories = {h.trajectories[k]};
    const auto m = hint_mask(single, T, H, W);
    for (int64_t t = 0; t < T; ++t)
      for (int64_t i = 0; i < H * W; ++i)
        if (m[static_cast<size_t>(t * H * W + i)])
          for (int c = 0; c < 3; ++c) out[t].pixels()[3 * i + c] = h.anchors[k].color[c];
  }
  return out;
}

// Latent-aligned mask: frames 0, s, 2s, ... and max-pooling by f.
// Returns [T', 1, H/f, W/f].
inline Tensor<float> downsample_mask(const std::vector<uint8_t>& m, int64_t T, int64_t H, int64_t W, int64_t factor,
                                     int64_t stride) {
  require(static_cast<int64_t>(m.size()) == T * H * W, Errc::shape_mismatch, "mask size does not match T*H*W");
  require(factor >= 1 && H % factor == 0 && W % factor == 0, Errc::shape_mismatch,
          "mask H, W must be divisible by the spatial factor");
  require(stride >= 1 && (T - 1) % stride == 0, Errc::shape_mismatch,
          "mask length " + std::to_string(T) + " is not stride*(T'-1)+1 for stride " + std::to_string(stride));
  const int64_t Tp = (T - 1) / stride + 1, Hp = H / factor, Wp = W / factor;
  Tensor<float> out({Tp, 1, Hp, Wp});
  for (int64_t k = 0; k < Tp; ++k) {
    const uint8_t* src = m.data() + k * stride * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        if (src[y * W + x]) out[(k * Hp + y / factor) * Wp + x / factor] = 1.0f;
  }
  return out;
}

inline nlohmann::json to_json(const HintSet& h) {
  nlohmann::json anchors = nlohmann::json::array(), traj = nlohmann::json::array();
  for (const auto& a : h.anchors)
    anchors.push_back({{"frame", a.frame}, {"x", a.x}, {"y", a.y}, {"color", {a.color[0], a.color[1], a.color[2]}}});
  for (const auto& t : h.trajectories) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : t) pts.push_back({p.frame, p.x, p.y});
    traj.push_back(std::move(pts));
  }
  return {{"v", 1}, {"cell_side", h.cell_side}, {"anchors", anchors}, {"trajectories", traj}};
}

inline HintSet hints_from_json(const nlohmann::json& j) {
  auto bad = [](const std::string& m) { fail(Errc::invalid_argument, "hint set: " + m); };
  if (!j.is_object()) bad("expected an object");
  if (j.contains("v") && j["v"] != 1) bad("unsupported schema version");
  HintSet h;
  if (j.contains("cell_side")) {
    if (!j["cell_side"].is_number_integer() || j["cell_side"].get<int64_t>() < 1) bad("cell_side must be a positive integer");
    h.cell_side = j["cell_side"].get<int64_t>();
  }
  if (j.contains("anchors")) {
    if (!j["anchors"].is_array()) bad("anchors must be an array");
    for (const auto& a : j["anchors"]) {
      if (!a.is_object() || !a.contains("x") || !a.contains("y") || !a.contains("color")) bad("anchor needs x, y, color");
      if (!a["x"].is_number_integer() || !a["y"].is_number_integer()) bad("anchor x, y must be integers");
      HintAnchor h0;
      h0.frame = a.value("frame", int64_t{0});
      h0.x = a["x"].get<int64_t>();
      h0.y = a["y"].get<int64_t>();
      const auto& c = a["color"];
      if (!c.is_array() || c.size() != 3) bad("color must be [r,g,b]");
      for (int k = 0; k < 3; ++k) {
        if (!c[k].is_number()) bad("color entries must be numbers");
        const double v = c[k].get<double>();
        if (!(v >= 0.0 && v <= 1.0)) bad("color entries must lie in [0,1]");
        h0.color[k] = static_cast<float>(v);
      }
      h.anchors.push_back(h0);
    }
  }
  if (j.contains("trajectories")) {
    if (!j["trajectories"].is_array()) bad("trajectories must be an array");
    for (const auto& t : j["trajectories"]) {
      std::vector<TrackPoint> pts;
      for (const auto& p : t) {
        if (!p.is_array() || p.size() != 3) bad("trajectory point must be [frame,x,y]");
        pts.push_back({p[0].get<int64_t>(), p[1].get<double>(), p[2].get<double>()});
      }
      h.trajectories.push_back(std::move(pts));
    }
  }
  return h;
}

// Rejects anchors outside a T x H x W video.
inline void validate_hints(const HintSet& h, int64_t T, int64_t H, int64_t W) {
  for (const auto& a : h.anchors)
    require(a.frame >= 0 && a.frame < T && a.x >= 0 && a.x < W && a.y >= 0 && a.y < H, Errc::out_of_range,
            "hint anchor (" + std::to_string(a.frame) + ", " + std::to_string(a.x) + ", " + std::to_string(a.y) +
                ") outside video");
}

}  // namespace vangogh
