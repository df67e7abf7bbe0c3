#pragma once

#include <nlohmann/json.hpp>
#include <functional>
#include <optional>

#include "vangogh/backbone.hpp"
#include "vangogh/color.hpp"
#include "vangogh/conditioning.hpp"

namespace vangogh {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CondConfig, dim, queries, blocks, heads, text_len, vocab, image_size,
                                                encoder_layers)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(UNetConfig, channels, context_dim, heads, time_dim, groups)

struct ModelConfig {
  CondConfig cond;
  UNetConfig unet;
  int64_t schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  uint64_t seed = 0;  // parameter initialisation
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, cond, unet, schedule_steps, beta_start, beta_end, seed)

struct SampleOptions {
  int64_t steps = 50;
  uint64_t seed = 0;
  bool replace_luma = true;
  std::function<void(int64_t done, int64_t total)> progress;
};

// Everything the denoiser sees for one clip, already at latent resolution.
template <class T>
struct LatentConditions {
  Var<T> mask;    // [T', 1, h, w]
  Var<T> canvas;  // [T', 4, h, w]
  Var<T> gray;    // [T', 4, h, w]
  Var<T> depth;   // [T', 4, h, w] or undefined
  Var<T> context; // [1, Q, D]
};

template <class T>
class VanGoghModel {
 public:
  explicit VanGoghModel(const ModelConfig& cfg = {})
      : cfg_(cfg),
        rng_(cfg.seed),
        sched_(cfg.schedule_steps, cfg.beta_start, cfg.beta_end) {
    require(cfg.unet.context_dim == cfg.cond.dim, Errc::invalid_argument,
            "unet context_dim must equal the conditioning width");
    Scope<T> root{&store_, "", ParamGroup::spatial, &rng_};
    cond_ = Conditioner<T>(root.sub("cond"), cfg.cond);
    vae_ = CausalVAE<T>(root.sub("vae"));
    depth_ = DepthGuider<T>(root.sub("depth_guider"));
    unet_ = UNet<T>(root.sub("unet"), cfg.unet);
  }

  VanGoghModel(const VanGoghModel&) = delete;
  VanGoghModel& operator=(const VanGoghModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  const Conditioner<T>& conditioner() const { return cond_; }
  const CausalVAE<T>& vae() const { return vae_; }
  const DepthGuider<T>& depth_guider() const { return depth_; }
  const UNet<T>& unet() const { return unet_; }
  const NoiseSchedule& schedule() const { return sched_; }

  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }
  // Bound on |x0| estimates while sampling; 0 disables clipping.
  double latent_clip() const { return latent_clip_; }
  void set_latent_clip(double c) { latent_clip_ = c; }

  Var<T> encode(const Var<T>& x) const { return vae_.encode(x) * static_cast<T>(latent_scale_); }
  Var<T> decode(const Var<T>& z) const { return vae_.decode(z * static_cast<T>(1.0 / latent_scale_)); }

  Var<T> encode(const Video& v) const {
    NoGradGuard ng;
    return encode(constant(to_tensor<T>(v)));
  }
  Video decode_video(const Var<T>& z, double fps = 24.0) const {
    NoGradGuard ng;
    return from_tensor(decode(z).value(), fps);
  }

  Var<T> depth_features(const std::optional<Video>& depth) const {
    if (!depth) return {};
    return depth_(constant(depth_tensor<T>(*depth)));
  }

  LatentConditions<T> latent_conditions(const ConditionBundle<T>& b, const Video& gray) const {
    NoGradGuard ng;
    check_vae_shape(gray.num_frames(), gray.height(), gray.width());
    LatentConditions<T> c;
    c.gray = encode(gray);
    c.canvas = encode(b.hints.canvas);
    c.mask = constant(downsample_mask(b.hints.mask, gray.num_frames(), gray.height(), gray.width(), kSpatialFactor,
                                      kTemporalStride)
                          .template cast<T>());
    c.depth = depth_features(b.depth);
    c.context = b.fused.l_fuse;
    return c;
  }

  // Predicted noise for one or more clips sharing the frame count.
  Var<T> denoise(const Var<T>& z_t, const std::vector<int64_t>& t, const Var<T>& mask, const Var<T>& canvas,
                 const Var<T>& gray, const Var<T>& depth, const Var<T>& context) const {
    return unet_(assemble_channels(z_t, mask, canvas, gray), t, sched_, context, depth,
                 static_cast<int64_t>(t.size()));
  }

  // Ancestral sampling from pure noise, then (by default) luma replacement.
  Video sample(const ConditionBundle<T>& b, const Video& gray, const SampleOptions& opt = {}) const {
    NoGradGuard ng;
    const LatentConditions<T> c = latent_conditions(b, gray);
    Rng rng(opt.seed);
    Tensor<T> x = rng.normal_tensor<T>(c.gray.shape());
    const auto ts = sched_.respaced(opt.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
      const int64_t t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
      Var<T> eps = denoise(constant(x), {t}, c.mask, c.canvas, c.gray, c.depth, c.context);
      x = ancestral_step(sched_, x, eps.value(), t, t_prev, rng, latent_clip_);
      if (opt.progress) opt.progress(static_cast<int64_t>(i + 1), static_cast<int64_t>(ts.size()));
    }
    Video decoded = decode_video(constant(std::move(x)), gray.fps());
    if (!opt.replace_luma) return decoded;
    Video out = replace_luma(decoded, gray);
    out.set_fps(gray.fps());
    return out;
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  Rng rng_;
  NoiseSchedule sched_;
  Conditioner<T> cond_;
  CausalVAE<T> vae_;
  DepthGuider<T> depth_;
  UNet<T> unet_;
  double latent_scale_ = 1.0;
  double latent_clip_ = 0.0;
};

}  // namespace vangogh
