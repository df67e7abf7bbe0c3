#pragma once

#include <cmath>
#include <vector>

#include "vangogh/conditioning.hpp"
#include "vangogh/hints.hpp"
#include "vangogh/nn.hpp"
#include "vangogh/video.hpp"

namespace vangogh {

inline constexpr int64_t kLatentChannels = 4;
inline constexpr int64_t kSpatialFactor = 8;
inline constexpr int64_t kTemporalStride = 4;
inline constexpr int64_t kUNetInputChannels = 13;

inline int64_t latent_frames(int64_t T) { return (T - 1) / kTemporalStride + 1; }

// Frames [first, first + count) that latent group g summarises. Group 0 is
// frame 0 on its own; group g > 0 covers 4g-3 .. 4g.
inline std::pair<int64_t, int64_t> group_frames(int64_t g) {
  return g == 0 ? std::pair<int64_t, int64_t>{0, 1} : std::pair<int64_t, int64_t>{4 * g - 3, 4};
}

inline void check_vae_shape(int64_t T, int64_t H, int64_t W) {
  require(H % kSpatialFactor == 0 && W % kSpatialFactor == 0, Errc::shape_incompatible,
          "frame size " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by 8");
  require(T >= 1 && (T - 1) % kTemporalStride == 0, Errc::shape_incompatible,
          "clip length " + std::to_string(T) + " is not 1 mod 4");
}

// ---------------------------------------------------------------------------
// Causal video VAE stand-in. A per-frame conv encoder reduces each frame by
// 8 in space; the four frame slots of a temporal group are stacked along
// channels and mixed into 4 latent channels. Group 0 replicates frame 0 into
// every slot. The decoder mirrors this and squashes to [0, 1].
template <class T>
class CausalVAE {
 public:
  static constexpr int64_t kFeat = 64;

  CausalVAE() = default;
  explicit CausalVAE(const Scope<T>& scope) {
    const Scope<T> s = scope.in_group(ParamGroup::vae);
    e1_ = Conv2d<T>(s.sub("enc1"), 3, 16, 3, 2);
    e2_ = Conv2d<T>(s.sub("enc2"), 16, 32, 3, 2);
    e3_ = Conv2d<T>(s.sub("enc3"), 32, kFeat, 3, 2);
    emix_ = Conv2d<T>(s.sub("enc_mix"), 4 * kFeat, kFeat, 1);
    eout_ = Conv2d<T>(s.sub("enc_out"), kFeat, kLatentChannels, 3);
    din_ = Conv2d<T>(s.sub("dec_in"), kLatentChannels, kFeat, 3);
    dmix_ = Conv2d<T>(s.sub("dec_mix"), kFeat, 4 * kFeat, 1);
    d1_ = Conv2d<T>(s.sub("dec1"), kFeat, 48, 3);
    d2_ = Conv2d<T>(s.sub("dec2"), 48, 32, 3);
    d3_ = Conv2d<T>(s.sub("dec3"), 32, 16, 3);
    dout_ = Conv2d<T>(s.sub("dec_out"), 16, 3, 3);
  }

  // x: [T, 3, H, W] in [0, 1] -> [T', 4, H/8, W/8].
  Var<T> encode(const Var<T>& x) const {
    const int64_t T_ = x.size(0), H = x.size(2), W = x.size(3);
    check_vae_shape(T_, H, W);
    Var<T> f = silu(e3_(silu(e2_(silu(e1_(x - T(0.5)))))));  // [T, F, h, w]
    const int64_t Tp = latent_frames(T_);
    std::vector<Var<T>> groups;
    for (int64_t g = 0; g < Tp; ++g) {
      auto [first, count] = group_frames(g);
      std::vector<Var<T>> slots;
      if (count == 1) {
        Var<T> f0 = slice(f, 0, 0, 1);
        slots = {f0, f0, f0, f0};
      } else {
        for (int64_t k = 0; k < 4; ++k) slots.push_back(slice(f, 0, first + k, 1));
      }
      groups.push_back(concat(slots, 1));  // [1, 4F, h, w]
    }
    Var<T> stacked = concat(groups, 0);
    return eout_(silu(emix_(stacked)));
  }

  // z: [T', 4, h, w] -> [T, 3, 8h, 8w] with T = 4(T'-1)+1.
  Var<T> decode(const Var<T>& z) const {
    require(z.dim() == 4 && z.size(1) == kLatentChannels, Errc::shape_mismatch,
            "decode expects [T', 4, h, w], got " + shape_str(z.shape()));
    const int64_t Tp = z.size(0), h = z.size(2), w = z.size(3);
    Var<T> slots = dmix_(silu(din_(z)));  // [T', 4F, h, w]
    slots = reshape(slots, {Tp * 4, kFeat, h, w});
    // frame order: group 0 keeps only its last slot, later groups keep all four
    std::vector<Var<T>> frames{slice(slots, 0, 3, 1)};
    if (Tp > 1) frames.push_back(slice(slots, 0, 4, (Tp - 1) * 4));
    Var<T> f = silu(concat(frames, 0));
    f = silu(d1_(upsample_nearest2x(f)));
    f = silu(d2_(upsample_nearest2x(f)));
    f = silu(d3_(upsample_nearest2x(f)));
    return sigmoid(dout_(f));
  }

 private:
  Conv2d<T> e1_, e2_, e3_, emix_, eout_, din_, dmix_, d1_, d2_, d3_, dout_;
};

// ---------------------------------------------------------------------------
// Depth

// Toy depth estimator: normalised inverse row index (the bottom of the frame
// is near), mixed with a little blurred luma and scaled to [0, 1].
inline Video synthetic_depth(const Video& v) {
  const int64_t H = v.height(), W = v.width();
  std::vector<Frame> out;
  for (const auto& f : v.frames()) {
    std::vector<double> d(static_cast<size_t>(H * W));
    for (int64_t y = 0; y < H; ++y) {
      const double row = 1.0 / (1.0 + static_cast<double>(H - 1 - y) / static_cast<double>(H) * 4.0);
      for (int64_t x = 0; x < W; ++x) {
        const double luma = (f.at(y, x, 0) + f.at(y, x, 1) + f.at(y, x, 2)) / 3.0;
        d[static_cast<size_t>(y * W + x)] = 0.8 * row + 0.2 * luma;
      }
    }
    // 3x3 box blur with clamped borders
    std::vector<double> b(d.size());
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double s = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += d[static_cast<size_t>(std::clamp<int64_t>(y + dy, 0, H - 1) * W + std::clamp<int64_t>(x + dx, 0, W - 1))];
        b[static_cast<size_t>(y * W + x)] = s / 9.0;
      }
    const auto [lo, hi] = std::minmax_element(b.begin(), b.end());
    const double span = std::max(*hi - *lo, 1e-12);
    Frame g(H, W);
    for (int64_t i = 0; i < H * W; ++i) {
      const float val = static_cast<float>((b[static_cast<size_t>(i)] - *lo) / span);
      for (int c = 0; c < 3; ++c) g.pixels()[static_cast<size_t>(3 * i + c)] = val;
    }
    out.push_back(std::move(g));
  }
  return Video(std::move(out), v.fps());
}

// Single-channel depth at the latent frame positions 0, 4, 8, ...: [T', 1, H, W].
template <class T>
Tensor<T> depth_tensor(const Video& depth) {
  const int64_t T_ = depth.num_frames(), H = depth.height(), W = depth.width();
  const int64_t Tp = latent_frames(T_);
  Tensor<T> out({Tp, 1, H, W});
  for (int64_t k = 0; k < Tp; ++k) {
    const Frame& f = depth[k * kTemporalStride];
    for (int64_t i = 0; i < H * W; ++i) out[k * H * W + i] = static_cast<T>(f.pixels()[static_cast<size_t>(3 * i)]);
  }
  return out;
}

template <class T>
class DepthGuider {
 public:
  DepthGuider() = default;
  explicit DepthGuider(const Scope<T>& scope) {
    const Scope<T> s = scope.in_group(ParamGroup::conditioning);
    c1_ = Conv2d<T>(s.sub("conv1"), 1, 16, 3, 2);
    c2_ = Conv2d<T>(s.sub("conv2"), 16, 32, 3, 2);
    c3_ = Conv2d<T>(s.sub("conv3"), 32, kLatentChannels, 3, 2);
  }

  // d: [T', 1, H, W] -> [T', 4, H/8, W/8].
  Var<T> operator()(const Var<T>& d) const {
    require(d.dim() == 4 && d.size(1) == 1, Errc::shape_mismatch, "depth guider expects [T', 1, H, W]");
    require(d.size(2) % kSpatialFactor == 0 && d.size(3) % kSpatialFactor == 0, Errc::shape_mismatch,
            "depth size not divisible by 8");
    return c3_(silu(c2_(silu(c1_(d - T(0.5))))));
  }

 private:
  Conv2d<T> c1_, c2_, c3_;
};

// ---------------------------------------------------------------------------
// Noise schedule and forward process

class NoiseSchedule {
 public:
  explicit NoiseSchedule(int64_t steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2)
      : betas_(static_cast<size_t>(steps)), alpha_bar_(static_cast<size_t>(steps)) {
    require(steps >= 2, Errc::invalid_argument, "schedule needs at least two steps");
    double prod = 1.0;
    for (int64_t i = 0; i < steps; ++i) {
      betas_[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
      prod *= 1.0 - betas_[i];
      alpha_bar_[i] = prod;
    }
  }

  int64_t steps() const { return static_cast<int64_t>(betas_.size()); }
  double beta(int64_t t) const { return betas_[check(t)]; }
  double alpha_bar(int64_t t) const { return alpha_bar_[check(t)]; }

  size_t check(int64_t t) const {
    require(t >= 0 && t < steps(), Errc::invalid_timestep,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    return static_cast<size_t>(t);
  }

  // Evenly spaced descending subsequence of `n` timesteps, ending at 0.
  std::vector<int64_t> respaced(int64_t n) const {
    require(n >= 1, Errc::invalid_argument, "sampling needs at least one step");
    n = std::min(n, steps());
    std::vector<int64_t> ts;
    for (int64_t i = 0; i < n; ++i) {
      const double pos = n == 1 ? 0.0 : static_cast<double>(steps() - 1) * (n - 1 - i) / (n - 1);
      ts.push_back(static_cast<int64_t>(std::llround(pos)));
    }
    return ts;
  }

 private:
  std::vector<double> betas_, alpha_bar_;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise. `t` holds one timestep per
// leading-axis block of `rows_per_t` rows.
template <class T>
Var<T> q_sample(const NoiseSchedule& s, const Var<T>& z0, const std::vector<int64_t>& t, const Var<T>& noise,
                int64_t rows_per_t = -1) {
  require(z0.shape() == noise.shape(), Errc::shape_mismatch, "q_sample noise shape differs from z0");
  const int64_t N = z0.size(0);
  if (rows_per_t < 0) rows_per_t = N / static_cast<int64_t>(t.size());
  require(rows_per_t * static_cast<int64_t>(t.size()) == N, Errc::shape_mismatch, "timestep count does not divide batch");
  Shape cs(z0.dim(), 1);
  cs[0] = N;
  Tensor<T> a(cs), b(cs);
  for (int64_t n = 0; n < N; ++n) {
    const double ab = s.alpha_bar(t[static_cast<size_t>(n / rows_per_t)]);
    a[n] = static_cast<T>(std::sqrt(ab));
    b[n] = static_cast<T>(std::sqrt(1.0 - ab));
  }
  return z0 * constant(std::move(a)) + noise * constant(std::move(b));
}

template <class T>
Var<T> q_sample(const NoiseSchedule& s, const Var<T>& z0, int64_t t, const Var<T>& noise) {
  return q_sample(s, z0, std::vector<int64_t>{t}, noise, z0.size(0));
}

// ---------------------------------------------------------------------------
// 13-channel input

// [noisy 4 | mask 1 | canvas 4 | gray 4] along the channel axis.
template <class T>
Var<T> assemble_channels(const Var<T>& z_t, const Var<T>& mask, const Var<T>& canvas, const Var<T>& gray) {
  const Shape& s = z_t.shape();
  require(s.size() == 4 && s[1] == kLatentChannels, Errc::shape_mismatch, "noisy latent must be [N, 4, h, w]");
  require(mask.shape() == Shape{s[0], 1, s[2], s[3]}, Errc::shape_mismatch,
          "mask " + shape_str(mask.shape()) + " does not match latent " + shape_str(s));
  require(canvas.shape() == s && gray.shape() == s, Errc::shape_mismatch, "canvas/gray latents do not match");
  return concat<T>({z_t, mask, canvas, gray}, 1);
}

struct ChannelSlices {
  int64_t start, len;
};
inline constexpr ChannelSlices kNoisySlice{0, 4}, kMaskSlice{4, 1}, kCanvasSlice{5, 4}, kGraySlice{9, 4};

// ---------------------------------------------------------------------------
// Denoising UNet

struct UNetConfig {
  int64_t channels = 64;
  int64_t context_dim = 128;
  int64_t heads = 4;
  int64_t time_dim = 128;
  int64_t groups = 8;
};

template <class T>
Tensor<T> timestep_embedding(const std::vector<int64_t>& t, int64_t dim) {
  const int64_t half = dim / 2;
  Tensor<T> out({static_cast<int64_t>(t.size()), dim});
  for (size_t n = 0; n < t.size(); ++n)
    for (int64_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[static_cast<int64_t>(n) * dim + i] = static_cast<T>(std::sin(static_cast<double>(t[n]) * f));
      out[static_cast<int64_t>(n) * dim + half + i] = static_cast<T>(std::cos(static_cast<double>(t[n]) * f));
    }
  return out;
}

template <class T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const Scope<T>& s, int64_t in, int64_t out, int64_t time_dim, int64_t groups) {
    n1_ = GroupNorm<T>(s.sub("norm1"), groups, in);
    c1_ = Conv2d<T>(s.sub("conv1"), in, out, 3);
    temb_ = Linear<T>(s.sub("temb"), time_dim, out);
    n2_ = GroupNorm<T>(s.sub("norm2"), groups, out);
    c2_ = Conv2d<T>(s.sub("conv2"), out, out, 3);
    if (in != out) skip_ = Conv2d<T>(s.sub("skip"), in, out, 1);
    has_skip_ = in != out;
  }

  // emb: [N, time_dim]
  Var<T> operator()(const Var<T>& x, const Var<T>& emb) const {
    Var<T> h = c1_(silu(n1_(x)));
    Var<T> e = temb_(silu(emb));
    h = h + reshape(e, {e.size(0), e.size(1), 1, 1});
    h = c2_(silu(n2_(h)));
    return (has_skip_ ? skip_(x) : x) + h;
  }

 private:
  GroupNorm<T> n1_, n2_;
  Conv2d<T> c1_, c2_, skip_;
  Linear<T> temb_;
  bool has_skip_ = false;
};

// Per-frame self-attention over positions and cross-attention onto the fused
// queries.
template <class T>
class SpatialTransformer {
 public:
  SpatialTransformer() = default;
  SpatialTransformer(const Scope<T>& s, int64_t c, int64_t context_dim, int64_t heads, int64_t groups) : c_(c) {
    norm_ = GroupNorm<T>(s.sub("norm"), groups, c);
    proj_in_ = Linear<T>(s.sub("proj_in"), c, c);
    ln1_ = LayerNorm<T>(s.sub("ln1"), c);
    self_ = Attention<T>(s.sub("self_attn"), c, c, heads);
    ln2_ = LayerNorm<T>(s.sub("ln2"), c);
    cross_ = Attention<T>(s.sub("cross_attn"), c, context_dim, heads);
    ln3_ = LayerNorm<T>(s.sub("ln3"), c);
    ff_ = FeedForward<T>(s.sub("ff"), c, 2);
    proj_out_ = Linear<T>(s.sub("proj_out"), c, c, true, true);
  }

  // x: [N, C, H, W]; context: [N, Q, D]
  Var<T> operator()(const Var<T>& x, const Var<T>& context) const {
    const int64_t N = x.size(0), H = x.size(2), W = x.size(3);
    Var<T> h = transpose(reshape(norm_(x), {N, c_, H * W}), 1, 2);
    h = proj_in_(h);
    Var<T> a = ln1_(h);
    h = h + self_(a, a);
    h = h + cross_(ln2_(h), context);
    h = h + ff_(ln3_(h));
    h = proj_out_(h);
    return x + reshape(transpose(h, 1, 2), {N, c_, H, W});
  }

 private:
  int64_t c_ = 0;
  GroupNorm<T> norm_;
  Linear<T> proj_in_, proj_out_;
  LayerNorm<T> ln1_, ln2_, ln3_;
  Attention<T> self_, cross_;
  FeedForward<T> ff_;
};

// Attention across the T' frames at every spatial position. No positional
// bias, so it is equivariant to frame permutations. The output projection
// starts at zero, which makes a freshly added block an identity.
template <class T>
class TemporalAttention {
 public:
  TemporalAttention() = default;
  TemporalAttention(const Scope<T>& scope, int64_t c, int64_t heads) : c_(c) {
    const Scope<T> s = scope.in_group(ParamGroup::temporal);
    ln_ = LayerNorm<T>(s.sub("ln"), c);
    attn_ = Attention<T>(s.sub("attn"), c, c, heads, true);
  }

  Var<T> operator()(const Var<T>& x, int64_t batch, int64_t frames) const {
    const int64_t H = x.size(2), W = x.size(3);
    Var<T> h = permute(reshape(x, {batch, frames, c_, H, W}), {0, 3, 4, 1, 2});  // [B, H, W, T', C]
    h = reshape(h, {batch * H * W, frames, c_});
    Var<T> a = ln_(h);
    h = attn_(a, a);
    h = permute(reshape(h, {batch, H, W, frames, c_}), {0, 3, 4, 1, 2});
    return x + reshape(h, x.shape());
  }

 private:
  int64_t c_ = 0;
  LayerNorm<T> ln_;
  Attention<T> attn_;
};

template <class T>
class UNet {
 public:
  UNet() = default;
  UNet(const Scope<T>& scope, const UNetConfig& cfg) : cfg_(cfg) {
    const Scope<T> s = scope.in_group(ParamGroup::spatial);
    const int64_t C = cfg.channels, C2 = 2 * C, td = cfg.time_dim, g = cfg.groups;
    t1_ = Linear<T>(s.sub("time1"), td, td);
    t2_ = Linear<T>(s.sub("time2"), td, td);
    conv_in_ = Conv2d<T>(s.sub("conv_in"), kUNetInputChannels, C, 3);
    res_a_ = ResBlock<T>(s.sub("down0.res"), C, C, td, g);
    st_a_ = SpatialTransformer<T>(s.sub("down0.attn"), C, cfg.context_dim, cfg.heads, g);
    tb_a_ = TemporalAttention<T>(s.sub("down0.temporal"), C, cfg.heads);
    down_ = Conv2d<T>(s.sub("down0.downsample"), C, C, 3, 2);
    res_b_ = ResBlock<T>(s.sub("down1.res"), C, C2, td, g);
    st_b_ = SpatialTransformer<T>(s.sub("down1.attn"), C2, cfg.context_dim, cfg.heads, g);
    tb_b_ = TemporalAttention<T>(s.sub("down1.temporal"), C2, cfg.heads);
    res_m_ = ResBlock<T>(s.sub("mid.res"), C2, C2, td, g);
    tb_m_ = TemporalAttention<T>(s.sub("mid.temporal"), C2, cfg.heads);
    up_ = Conv2d<T>(s.sub("up0.upsample"), C2, C, 3);
    res_c_ = ResBlock<T>(s.sub("up0.res"), C2, C, td, g);
    st_c_ = SpatialTransformer<T>(s.sub("up0.attn"), C, cfg.context_dim, cfg.heads, g);
    tb_c_ = TemporalAttention<T>(s.sub("up0.temporal"), C, cfg.heads);
    norm_out_ = GroupNorm<T>(s.sub("norm_out"), g, C);
    conv_out_ = Conv2d<T>(s.sub("conv_out"), C, kLatentChannels, 3);
  }

  const UNetConfig& config() const { return cfg_; }

  // channels: [B*T', 13, h, w]; t: one timestep per clip; context: [B, Q, D];
  // depth: [B*T', 4, h, w] added to the noisy latent, or undefined.
  // Returns predicted noise [B*T', 4, h, w].
  Var<T> operator()(const Var<T>& channels, const std::vector<int64_t>& t, const NoiseSchedule& sched,
                    const Var<T>& context, const Var<T>& depth, int64_t batch) const {
    require(channels.dim() == 4 && channels.size(1) == kUNetInputChannels, Errc::shape_mismatch,
            "unet expects [N, 13, h, w], got " + shape_str(channels.shape()));
    require(static_cast<int64_t>(t.size()) == batch && channels.size(0) % batch == 0, Errc::shape_mismatch,
            "unet batch does not divide the frame axis");
    require(context.dim() == 3 && context.size(0) == batch && context.size(2) == cfg_.context_dim,
            Errc::shape_mismatch, "unet context must be [B, Q, D]");
    require(channels.size(2) % 2 == 0 && channels.size(3) % 2 == 0, Errc::shape_mismatch,
            "latent size must be even");
    for (int64_t ti : t) sched.check(ti);
    const int64_t N = channels.size(0), frames = N / batch;

    Var<T> x = channels;
    if (depth.defined()) {
      require(depth.shape() == Shape{N, kLatentChannels, channels.size(2), channels.size(3)}, Errc::shape_mismatch,
              "depth features do not match the latent");
      x = concat<T>({slice(channels, 1, 0, kLatentChannels) + depth,
                     slice(channels, 1, kLatentChannels, kUNetInputChannels - kLatentChannels)},
                    1);
    }
    std::vector<int64_t> per_frame;
    for (int64_t b = 0; b < batch; ++b) per_frame.insert(per_frame.end(), static_cast<size_t>(frames), t[b]);
    Var<T> emb = t2_(silu(t1_(constant(timestep_embedding<T>(per_frame, cfg_.time_dim)))));
    Var<T> ctx = repeat_frames(context, frames);

    Var<T> h = conv_in_(x);
    Var<T> s1 = tb_a_(st_a_(res_a_(h, emb), ctx), batch, frames);
    h = down_(s1);
    h = tb_b_(st_b_(res_b_(h, emb), ctx), batch, frames);
    h = tb_m_(res_m_(h, emb), batch, frames);
    h = up_(upsample_nearest2x(h));
    h = concat<T>({h, s1}, 1);
    h = tb_c_(st_c_(res_c_(h, emb), ctx), batch, frames);
    return conv_out_(silu(norm_out_(h)));
  }

  // [B, Q, D] -> [B*frames, Q, D]
  static Var<T> repeat_frames(const Var<T>& c, int64_t frames) {
    if (frames == 1) return c;
    const int64_t B = c.size(0), Q = c.size(1), D = c.size(2);
    Var<T> r = reshape(c, {B, 1, Q, D}) + constant(Tensor<T>({B, frames, Q, D}));
    return reshape(r, {B * frames, Q, D});
  }

 private:
  UNetConfig cfg_;
  Linear<T> t1_, t2_;
  Conv2d<T> conv_in_, down_, up_, conv_out_;
  ResBlock<T> res_a_, res_b_, res_m_, res_c_;
  SpatialTransformer<T> st_a_, st_b_, st_c_;
  TemporalAttention<T> tb_a_, tb_b_, tb_m_, tb_c_;
  GroupNorm<T> norm_out_;
};

// One ancestral step from t to t_prev (t_prev = -1 for the final step) on a
// respaced chain. Posterior variance is used for the injected noise. With
// x0_clip > 0 the implied x0 is clamped to [-x0_clip, x0_clip] before the
// posterior mean is formed.
template <class T>
Tensor<T> ancestral_step(const NoiseSchedule& s, const Tensor<T>& x, const Tensor<T>& eps, int64_t t, int64_t t_prev,
                         Rng& rng, double x0_clip = 0.0) {
  const double ab = s.alpha_bar(t);
  const double ab_prev = t_prev >= 0 ? s.alpha_bar(t_prev) : 1.0;
  const double alpha = ab / ab_prev;
  const double beta = 1.0 - alpha;
  const double c_eps = beta / std::sqrt(1.0 - ab);
  const double sigma = t_prev >= 0 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
  const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab), ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double xi = static_cast<double>(x[i]), ei = static_cast<double>(eps[i]);
    double mean;
    if (x0_clip > 0) {
      const double x0 = std::clamp((xi - std::sqrt(1.0 - ab) * ei) / std::sqrt(ab), -x0_clip, x0_clip);
      mean = c0 * x0 + ct * xi;
    } else {
      mean = (xi - c_eps * ei) / std::sqrt(alpha);
    }
    out[i] = static_cast<T>(mean + (sigma > 0 ? sigma * rng.normal() : 0.0));
  }
  return out;
}

// x0 estimate from an epsilon prediction, per leading-axis block.
template <class T>
Var<T> predict_x0(const NoiseSchedule& s, const Var<T>& z_t, const Var<T>& eps, const std::vector<int64_t>& t) {
  const int64_t N = z_t.size(0), rows = N / static_cast<int64_t>(t.size());
  Shape cs(z_t.dim(), 1);
  cs[0] = N;
  Tensor<T> a(cs), b(cs);
  for (int64_t n = 0; n < N; ++n) {
    const double ab = s.alpha_bar(t[static_cast<size_t>(n / rows)]);
    a[n] = static_cast<T>(1.0 / std::sqrt(ab));
    b[n] = static_cast<T>(std::sqrt(1.0 - ab) / std::sqrt(ab));
  }
  return z_t * constant(std::move(a)) - eps * constant(std::move(b));
}

}  // namespace vangogh
