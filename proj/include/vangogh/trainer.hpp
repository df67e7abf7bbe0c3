#pragma once

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vangogh/checkpoint.hpp"
#include "vangogh/losses.hpp"
#include "vangogh/model.hpp"

namespace vangogh {

// ---------------------------------------------------------------------------
// Condition dropout

struct DropoutInterval {
  double lo, hi;
  ConditionFlags kept;
  const char* label;
};

// Half-open intervals except the last, which is closed at 1.
inline constexpr std::array<DropoutInterval, 8> kDropoutSchedule{{
    {0.00, 0.30, {false, true, false}, "exemplar"},
    {0.30, 0.50, {true, false, false}, "text"},
    {0.50, 0.80, {false, false, true}, "hints"},
    {0.80, 0.83, {false, true, true}, "exemplar+hints"},
    {0.83, 0.86, {true, false, true}, "text+hints"},
    {0.86, 0.90, {true, true, false}, "exemplar+text"},
    {0.90, 0.95, {true, true, true}, "all"},
    {0.95, 1.00, {false, false, false}, "none"},
}};

inline size_t dropout_interval(double x) {
  require(x >= 0.0 && x <= 1.0, Errc::out_of_range, "condition draw " + std::to_string(x) + " outside [0, 1]");
  for (size_t i = 0; i + 1 < kDropoutSchedule.size(); ++i)
    if (x < kDropoutSchedule[i].hi) return i;
  return kDropoutSchedule.size() - 1;
}

inline ConditionFlags draw_conditions(double x) { return kDropoutSchedule[dropout_interval(x)].kept; }

struct AuditRow {
  std::string label;
  double frequency;
};

inline std::vector<AuditRow> dropout_frequency_audit(int64_t n, uint64_t seed) {
  require(n >= 1000, Errc::invalid_argument, "audit needs at least 1000 draws");
  Rng rng(seed);
  std::array<int64_t, kDropoutSchedule.size()> counts{};
  for (int64_t i = 0; i < n; ++i) ++counts[dropout_interval(rng.uniform())];
  std::vector<AuditRow> out;
  for (size_t i = 0; i < counts.size(); ++i)
    out.push_back({kDropoutSchedule[i].label, static_cast<double>(counts[i]) / static_cast<double>(n)});
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, h, level_weights, gamma, lambda_ldm, w_ctx, w_flow)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HintSampling, k_max, d_min, d_max)

struct TrainConfig {
  ModelConfig model;
  int64_t height = 64, width = 64;
  uint64_t seed = 0;

  double lr = 1e-5;
  double weight_decay = 1e-2;
  double grad_clip = 1.0;

  int64_t vae_steps = 1500;
  double vae_lr = 1e-3;

  int64_t image_steps = 2000;
  int64_t image_batch = 8;
  int64_t video_steps = 1000;
  int64_t video_batch = 1;
  int64_t clip_len = 9;
  bool video_unfreeze_all = false;

  LossWeights loss;
  HintSampling hints{12, 3, 6};
  int64_t superpixels = 64;
  int64_t aux_t_max = 400;  // auxiliary losses only on samples with t <= this
  double latent_clip_quantile = 0.99;  // 0 leaves sampling unclipped
  double lambda1 = 1.0, lambda2 = 1.0;

  int64_t checkpoint_every = 500;
  std::vector<int64_t> eval_at{50};

  void validate() const {
    require(lr > 0 && vae_lr > 0, Errc::invalid_argument, "learning rates must be positive");
    require(image_batch >= 1 && video_batch >= 1, Errc::invalid_argument, "batch sizes must be positive");
    require(clip_len >= 1 && (clip_len - 1) % kTemporalStride == 0, Errc::invalid_argument,
            "clip_len must be 1 mod 4");
    require(height % kSpatialFactor == 0 && width % kSpatialFactor == 0 && height >= kMinFrameSide &&
                width >= kMinFrameSide,
            Errc::invalid_argument, "resolution must be a multiple of 8");
    require(vae_steps >= 0 && image_steps >= 0 && video_steps >= 0, Errc::invalid_argument, "negative step count");
    require(latent_clip_quantile >= 0 && latent_clip_quantile <= 1, Errc::invalid_argument,
            "latent_clip_quantile must be in [0, 1]");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, model, height, width, seed, lr, weight_decay, grad_clip,
                                                vae_steps, vae_lr, image_steps, image_batch, video_steps, video_batch,
                                                clip_len, video_unfreeze_all, loss, hints, superpixels, aux_t_max,
                                                latent_clip_quantile,
                                                lambda1, lambda2, checkpoint_every, eval_at)

inline TrainConfig load_train_config(const std::filesystem::path& p) {
  const auto bytes = read_file_bytes(p);
  try {
    TrainConfig c = nlohmann::json::parse(bytes.begin(), bytes.end()).get<TrainConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_argument, "bad train config " + p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Data

struct ClipData {
  std::string name;
  Video video;
  std::optional<std::string> caption;
};

// Every sub-directory holding PNG frames is one clip; an optional caption.txt
// next to the frames supplies the text prompt. Frames are resized to H x W.
inline std::vector<ClipData> load_dataset(const std::filesystem::path& root, int64_t H, int64_t W) {
  require(std::filesystem::is_directory(root), Errc::missing_directory, "no dataset directory " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<ClipData> out;
  for (const auto& d : dirs) {
    bool has_png = false;
    for (const auto& e : std::filesystem::directory_iterator(d)) has_png = has_png || detail::is_png_name(e.path());
    if (!has_png) continue;
    ClipData c;
    c.name = d.filename().string();
    c.video = load_video(d);
    if (c.video.height() != H || c.video.width() != W) c.video = resize_video(c.video, H, W);
    if (std::filesystem::is_regular_file(d / "caption.txt")) {
      const auto b = read_file_bytes(d / "caption.txt");
      std::string s(b.begin(), b.end());
      const auto first = s.find_first_not_of(" \t\r\n");
      const auto last = s.find_last_not_of(" \t\r\n");
      if (first != std::string::npos) c.caption = s.substr(first, last - first + 1);
    }
    out.push_back(std::move(c));
  }
  require(!out.empty(), Errc::data_exhausted, "dataset " + root.string() + " contains no clips");
  return out;
}

// ---------------------------------------------------------------------------
// Training samples

// Inputs shared by every sample drawn from one clip window.
struct ClipView {
  const Video* target;
  const Video* gray;
  const Video* superpixels;
  const Video* depth;
  const FlowChain* chain;  // gray-frame flows, for hint tracking; may be null for 1-frame clips
  std::optional<std::string> caption;
};

struct TrainingSample {
  Video gray;
  Video depth;
  std::optional<std::string> prompt;
  std::optional<Frame> exemplar;
  HintSet hints;
  HintsTensorPair pair;
  ConditionFlags flags;
};

// Draw order: condition variable, exemplar frame, then hints.
inline TrainingSample build_training_sample(const ClipView& v, Stage stage, Rng& rng, const TrainConfig& cfg) {
  const int64_t T = v.target->num_frames();
  const int64_t need = stage == Stage::image ? 1 : cfg.clip_len;
  require(T >= need, Errc::clip_too_short,
          "clip has " + std::to_string(T) + " frames, stage needs " + std::to_string(need));
  TrainingSample s;
  s.gray = *v.gray;
  s.depth = *v.depth;
  const ConditionFlags kept = draw_conditions(rng.uniform());
  const int64_t ex = stage == Stage::image ? 0 : rng.uniform_int(0, T - 1);
  if (kept.exemplar) {
    s.exemplar = (*v.target)[ex];
    s.flags.exemplar = true;
  }
  if (kept.text && v.caption) {
    s.prompt = v.caption;
    s.flags.text = true;
  }
  if (kept.hints) {
    HintSet h = sample_hints(*v.superpixels, rng, cfg.hints);
    if (T > 1 && !h.anchors.empty()) {
      require(v.chain != nullptr, Errc::invalid_argument, "multi-frame hints need a flow chain");
      h = track_hints(h, *v.chain, T, v.target->height(), v.target->width());
    }
    s.hints = std::move(h);
    s.flags.hints = !s.hints.anchors.empty();
  }
  s.pair = synthesize_mask_canvas(s.hints, *v.superpixels, *v.gray);
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

enum class Phase { vae, image, video };

inline const char* phase_name(Phase p) { return p == Phase::vae ? "vae" : p == Phase::image ? "image" : "video"; }

inline bool trainable_in(Phase p, ParamGroup g, bool unfreeze_all) {
  switch (p) {
    case Phase::vae: return g == ParamGroup::vae;
    case Phase::image: return g == ParamGroup::spatial || g == ParamGroup::conditioning;
    case Phase::video:
      return g == ParamGroup::temporal || g == ParamGroup::conditioning || (unfreeze_all && g == ParamGroup::spatial);
  }
  return false;
}

struct LossRow {
  int64_t step = 0;  // global: image steps first, then video steps
  Phase phase = Phase::image;
  double ldm = 0;
  std::optional<double> contextual, flow;
  double total = 0;
  double grad_norm = 0;
  double temporal_grad_norm = 0;  // before clipping, whether or not the group trains
};

struct EvalRow {
  int64_t step;
  Phase phase;
  double ldm;
};

inline std::string format_loss_row(const LossRow& r) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.8g", *v);
    return std::string(buf);
  };
  return std::to_string(r.step) + "," + num(r.ldm) + "," + num(r.contextual) + "," + num(r.flow) + "," + num(r.total);
}

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<ClipData> data, std::unique_ptr<VanGoghModel<float>> model = nullptr)
      : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    require(!data_.empty(), Errc::data_exhausted, "no training clips");
    for (auto& c : data_) {
      require(c.video.height() == cfg_.height && c.video.width() == cfg_.width, Errc::shape_mismatch,
              "clip " + c.name + " is not " + std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
    }
    model_ = model ? std::move(model) : std::make_unique<VanGoghModel<float>>(cfg_.model);
    prepare_clips();
  }

  VanGoghModel<float>& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<LossRow>& history() const { return history_; }
  const std::vector<EvalRow>& evals() const { return evals_; }
  std::function<void(const LossRow&)> on_step;

  void set_output_dir(std::filesystem::path dir) {
    out_ = std::move(dir);
    std::filesystem::create_directories(out_);
  }

  // Resume bookkeeping from a checkpoint produced by this trainer.
  void resume_from(const LoadedCheckpoint& ck) {
    resume_phase_ = ck.info.stage;
    resume_step_ = ck.info.step;
    if (ck.has_optimizer) resume_opt_ = ck.optimizer;
  }

  int64_t global_offset(Phase p) const { return p == Phase::video ? cfg_.image_steps : 0; }

  void set_trainable(Phase p) {
    model_->store().set_trainable(
        [&](const auto& e) { return trainable_in(p, e.group, cfg_.video_unfreeze_all); });
  }

  // All configured phases in order.
  void run() {
    run_phase(Phase::vae);
    run_phase(Phase::image);
    run_phase(Phase::video);
  }

  void run_phase(Phase p) {
    const int64_t steps = p == Phase::vae ? cfg_.vae_steps : p == Phase::image ? cfg_.image_steps : cfg_.video_steps;
    AdamWConfig oc;
    oc.lr = p == Phase::vae ? cfg_.vae_lr : cfg_.lr;
    oc.weight_decay = cfg_.weight_decay;
    AdamW<float> opt(oc);
    int64_t start = 0;
    if (resume_phase_ == phase_name(p)) {
      start = resume_step_;
      if (resume_opt_) {
        opt.slots() = resume_opt_->slots();
        opt.set_steps(resume_opt_->steps());
      }
    } else if (phase_done(p)) {
      return;
    }
    set_trainable(p);
    for (int64_t s = start; s < steps; ++s) {
      LossRow row = p == Phase::vae ? vae_step(s, opt) : diffusion_step(p, s, opt);
      history_.push_back(row);
      log_row(row);
      if (on_step) on_step(row);
      const int64_t done = s + 1;
      if (p != Phase::vae)
        for (int64_t e : cfg_.eval_at)
          if (e == done + global_offset(p)) record_eval(p, done + global_offset(p));
      if (!out_.empty() && cfg_.checkpoint_every > 0 && done % cfg_.checkpoint_every == 0 && done < steps)
        save(out_ / "latest.ckpt", p, done, &opt);
    }
    if (p == Phase::vae) calibrate_latent_scale();
    if (p != Phase::vae && steps > start) record_eval(p, steps + global_offset(p));
    if (!out_.empty()) save(out_ / (std::string(phase_name(p)) + ".ckpt"), p, steps, nullptr);
    completed_.push_back(p);
  }

  void save(const std::filesystem::path& path, Phase p, int64_t step, const AdamW<float>* opt) const {
    CheckpointInfo info{phase_name(p), step, nlohmann::json(cfg_)};
    save_checkpoint(path, *model_, info, opt);
  }

  // Fixed-set denoising loss: every clip's first window, a fixed grid of
  // timesteps, noise and condition draws from a fixed seed.
  double evaluate() const {
    NoGradGuard ng;
    Rng rng(0xe7a1);
    double acc = 0;
    int64_t n = 0;
    const int64_t len = std::min<int64_t>(cfg_.clip_len, min_clip_len_);
    const int64_t use_len = ((len - 1) / kTemporalStride) * kTemporalStride + 1;
    for (size_t c = 0; c < data_.size(); ++c) {
      const Window& w = window(c, 0, use_len);
      for (int64_t t : {50, 200, 400, 600, 800}) {
        TrainingSample s = build_training_sample(w.view(data_[c].caption), use_len == 1 ? Stage::image : Stage::video,
                                                 rng, cfg_);
        auto [mask, canvas, gray, depth, ctx] = latent_inputs(s, w, use_len);
        Var<float> noise = constant(rng.normal_tensor<float>(w.latent.shape()));
        Var<float> zt = q_sample(model_->schedule(), w.latent, t, noise);
        Var<float> eps = model_->denoise(zt, {t}, mask, canvas, gray, depth, ctx);
        acc += ldm_loss(eps, noise).item();
        ++n;
      }
    }
    return acc / static_cast<double>(n);
  }

 private:
  // Cached per-window data. Latents depend on the VAE, so they are refreshed
  // after the VAE phase.
  struct Window {
    Video target, gray, sp, depth;
    FlowChain chain;                 // gray flows for hint tracking
    std::vector<Flow<float>> gt;     // colour flows i -> i+1 for the flow loss
    Var<float> latent, gray_latent;  // [T', 4, h, w]
    Tensor<float> depth_input;       // [T', 1, H, W]
    ClipView view(const std::optional<std::string>& caption) const {
      return {&target, &gray, &sp, &depth, target.num_frames() > 1 ? &chain : nullptr, caption};
    }
  };

  struct LatentInputs {
    Var<float> mask, canvas, gray, depth, context;
  };

  void prepare_clips() {
    min_clip_len_ = INT64_MAX;
    for (const auto& c : data_) min_clip_len_ = std::min(min_clip_len_, c.video.num_frames());
    for (size_t c = 0; c < data_.size(); ++c) {
      grays_.push_back(to_grayscale(data_[c].video));
      sps_.push_back(superpixel_video(data_[c].video, cfg_.superpixels));
      depths_.push_back(synthetic_depth(data_[c].video));
      for (int64_t f = 0; f < data_[c].video.num_frames(); ++f) frames_.push_back({c, f});
    }
  }

  bool phase_done(Phase p) const { return std::find(completed_.begin(), completed_.end(), p) != completed_.end(); }

  const Window& window(size_t clip, int64_t start, int64_t len) const {
    const auto key = std::make_tuple(clip, start, len);
    auto it = windows_.find(key);
    if (it != windows_.end() && it->second.latent_version == latent_version_) return it->second.w;
    auto sub = [&](const Video& v) {
      std::vector<Frame> f(v.frames().begin() + start, v.frames().begin() + start + len);
      return Video(std::move(f), v.fps());
    };
    Cached& slot = windows_[key];
    Window& w = slot.w;
    if (!w.target.num_frames()) {
      w.target = sub(data_[clip].video);
      w.gray = sub(grays_[clip]);
      w.sp = sub(sps_[clip]);
      w.depth = sub(depths_[clip]);
      if (len > 1) {
        w.chain = compute_flow_chain(w.gray);
        for (int64_t i = 0; i + 1 < len; ++i) {
          NoGradGuard ng;
          w.gt.push_back(estimate_flow(frame_var<float>(w.target[i]), frame_var<float>(w.target[i + 1])));
        }
      }
      w.depth_input = depth_tensor<float>(w.depth);
    }
    w.latent = model_->encode(w.target);
    w.gray_latent = model_->encode(w.gray);
    slot.latent_version = latent_version_;
    return w;
  }

  LatentInputs latent_inputs(const TrainingSample& s, const Window& w, int64_t len) const {
    LatentInputs r;
    {
      NoGradGuard ng;
      r.mask = constant(
          downsample_mask(s.pair.mask, len, cfg_.height, cfg_.width, kSpatialFactor, kTemporalStride));
      r.canvas = s.flags.hints ? model_->encode(s.pair.canvas) : w.gray_latent;
    }
    r.gray = w.gray_latent;
    r.depth = model_->depth_guider()(constant(w.depth_input));
    r.context = model_->conditioner()
                    .fuse(s.prompt, s.exemplar, cfg_.lambda1, cfg_.lambda2)
                    .l_fuse;
    return r;
  }

  Rng step_rng(Phase p, int64_t step) const {
    uint64_t h = cfg_.seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(p) * 0xbf58476d1ce4e5b9ull;
    h ^= static_cast<uint64_t>(step) * 0x94d049bb133111ebull;
    return Rng(h);
  }

  void check_finite(const LossRow& r) const {
    auto bad = [](std::optional<double> v) { return v && !std::isfinite(*v); };
    if (!std::isfinite(r.total) || !std::isfinite(r.ldm) || bad(r.contextual) || bad(r.flow))
      fail(Errc::non_finite_loss, std::string(phase_name(r.phase)) + " step " + std::to_string(r.step) +
                                      ": " + format_loss_row(r));
  }

  LossRow vae_step(int64_t step, AdamW<float>& opt) {
    Rng rng = step_rng(Phase::vae, step);
    // one clip window at the configured length, plus a single frame for the 1-frame path
    const int64_t len = std::min<int64_t>(cfg_.clip_len, ((min_clip_len_ - 1) / kTemporalStride) * kTemporalStride + 1);
    const size_t c = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(data_.size()) - 1));
    const int64_t start = rng.uniform_int(0, data_[c].video.num_frames() - len);
    std::vector<Frame> fr(data_[c].video.frames().begin() + start, data_[c].video.frames().begin() + start + len);
    const auto& one = frames_[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(frames_.size()) - 1))];
    Var<float> x = constant(to_tensor<float>(Video(std::move(fr))));
    Var<float> x1 = constant(to_tensor<float>(Video({data_[one.first].video[one.second]})));
    const auto& vae = model_->vae();
    Var<float> loss = mse(vae.decode(vae.encode(x)), x) + mse(vae.decode(vae.encode(x1)), x1);
    LossRow row;
    row.step = step + 1;
    row.phase = Phase::vae;
    row.ldm = 0;
    row.total = loss.item();
    check_finite(row);
    loss.backward();
    row.grad_norm = clip_grad_norm(model_->store(), cfg_.grad_clip);
    opt.step(model_->store());
    model_->store().zero_grad();
    return row;
  }

  // Unit-variance latents, and a sampling clip bound at a high quantile of |z|.
  void calibrate_latent_scale() {
    NoGradGuard ng;
    double s = 0, s2 = 0;
    std::vector<double> mags;
    for (const auto& c : data_) {
      const int64_t len = ((c.video.num_frames() - 1) / kTemporalStride) * kTemporalStride + 1;
      std::vector<Frame> fr(c.video.frames().begin(), c.video.frames().begin() + len);
      Var<float> z = model_->vae().encode(constant(to_tensor<float>(Video(std::move(fr)))));
      for (float v : z.value().span()) s += v, s2 += static_cast<double>(v) * v, mags.push_back(std::abs(v));
    }
    const double n = static_cast<double>(mags.size());
    const double mean = s / n;
    const double sd = std::sqrt(std::max(s2 / n - mean * mean, 1e-12));
    model_->set_latent_scale(1.0 / sd);
    if (cfg_.latent_clip_quantile > 0) {
      const auto k = static_cast<size_t>(cfg_.latent_clip_quantile * (n - 1));
      std::nth_element(mags.begin(), mags.begin() + static_cast<int64_t>(k), mags.end());
      model_->set_latent_clip(mags[k] / sd);
    }
    ++latent_version_;
  }

  LossRow diffusion_step(Phase p, int64_t step, AdamW<float>& opt) {
    Rng rng = step_rng(p, step);
    const Stage stage = p == Phase::image ? Stage::image : Stage::video;
    const int64_t B = p == Phase::image ? cfg_.image_batch : cfg_.video_batch;
    const int64_t len = p == Phase::image ? 1 : cfg_.clip_len;
    std::vector<size_t> usable;
    for (size_t c = 0; c < data_.size(); ++c)
      if (data_[c].video.num_frames() >= len) usable.push_back(c);
    require(!usable.empty(), Errc::data_exhausted,
            "no clip has the " + std::to_string(len) + " frames the " + phase_name(p) + " stage needs");

    std::vector<const Window*> wins;
    std::vector<Var<float>> z0s, masks, canvases, grays, depths, ctxs;
    std::vector<int64_t> ts;
    for (int64_t b = 0; b < B; ++b) {
      size_t clip;
      int64_t start;
      if (p == Phase::image) {
        const auto& f = frames_[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(frames_.size()) - 1))];
        clip = f.first;
        start = f.second;
      } else {
        clip = usable[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(usable.size()) - 1))];
        start = rng.uniform_int(0, data_[clip].video.num_frames() - len);
      }
      const Window& w = window(clip, start, len);
      TrainingSample s = build_training_sample(w.view(data_[clip].caption), stage, rng, cfg_);
      LatentInputs in = latent_inputs(s, w, len);
      wins.push_back(&w);
      z0s.push_back(w.latent);
      masks.push_back(in.mask);
      canvases.push_back(in.canvas);
      grays.push_back(in.gray);
      depths.push_back(in.depth);
      ctxs.push_back(in.context);
      ts.push_back(rng.uniform_int(0, model_->schedule().steps() - 1));
    }
    const int64_t Tp = latent_frames(len);
    Var<float> z0 = concat(z0s, 0);
    Var<float> noise = constant(rng.normal_tensor<float>(z0.shape()));
    Var<float> zt = q_sample(model_->schedule(), z0, ts, noise, Tp);
    Var<float> eps = model_->denoise(zt, ts, concat(masks, 0), concat(canvases, 0), concat(grays, 0),
                                     concat(depths, 0), concat(ctxs, 0));
    Var<float> ldm = ldm_loss(eps, noise);

    // auxiliary terms on decoded x0 estimates of low-noise samples
    std::vector<int64_t> gated;
    for (int64_t b = 0; b < B; ++b)
      if (ts[static_cast<size_t>(b)] <= cfg_.aux_t_max) gated.push_back(b);
    Var<float> ctx_loss, flow_loss;
    if (!gated.empty()) {
      Var<float> x0 = predict_x0(model_->schedule(), zt, eps, ts);
      std::vector<Var<float>> preds, targets;
      std::vector<Var<float>> flows;
      for (int64_t b : gated) {
        Var<float> frames = model_->decode(slice(x0, 0, b * Tp, Tp));  // [len, 3, H, W]
        const Window& w = *wins[static_cast<size_t>(b)];
        if (p == Phase::image) {
          preds.push_back(frames);
          targets.push_back(constant(to_tensor<float>(w.target)));
        } else {
          const int64_t i = sample_flow_pair(rng, len);
          auto frame = [&](int64_t k) { return reshape(slice(frames, 0, k, 1), {3, cfg_.height, cfg_.width}); };
          flows.push_back(optical_flow_loss_against(frame(i), frame(i + 1), w.gt[static_cast<size_t>(i)],
                                                    cfg_.loss.gamma));
        }
      }
      if (p == Phase::image) {
        ctx_loss = contextual_loss(concat(preds, 0), concat(targets, 0), features_, cfg_.loss);
      } else {
        flow_loss = flows[0];
        for (size_t k = 1; k < flows.size(); ++k) flow_loss = flow_loss + flows[k];
        flow_loss = flow_loss * (1.0f / static_cast<float>(flows.size()));
      }
    }
    LossTerms<float> terms = total_loss(stage, ldm, ctx_loss, flow_loss, cfg_.loss);
    LossRow row;
    row.step = step + 1 + global_offset(p);
    row.phase = p;
    row.ldm = terms.ldm;
    row.contextual = terms.contextual;
    row.flow = terms.flow;
    row.total = terms.total.item();
    check_finite(row);
    terms.total.backward();
    double tsq = 0;
    for (const auto& e : model_->store().entries())
      if (e.group == ParamGroup::temporal && e.var.grad().allocated())
        for (float g : e.var.grad().span()) tsq += static_cast<double>(g) * g;
    row.temporal_grad_norm = std::sqrt(tsq);
    row.grad_norm = clip_grad_norm(model_->store(), cfg_.grad_clip);
    opt.step(model_->store());
    model_->store().zero_grad();
    return row;
  }

  void record_eval(Phase p, int64_t global_step) {
    evals_.push_back({global_step, p, evaluate()});
    if (out_.empty()) return;
    const auto path = out_ / "eval.csv";
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream os(path, std::ios::app);
    if (fresh) os << "step,stage,ldm\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.8g", evals_.back().ldm);
    os << global_step << ',' << phase_name(p) << ',' << buf << '\n';
  }

  void log_row(const LossRow& r) {
    if (out_.empty()) return;
    const bool vae = r.phase == Phase::vae;
    const auto path = out_ / (vae ? "vae_loss.csv" : "loss.csv");
    auto& os = vae ? vae_log_ : loss_log_;
    if (!os.is_open()) {
      const bool fresh = !std::filesystem::exists(path);
      os.open(path, std::ios::app);
      require(os.good(), Errc::unwritable_path, "cannot write " + path.string());
      if (fresh) os << (vae ? "step,recon\n" : "step,ldm,contextual,flow,total\n");
    }
    if (vae) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.8g", r.total);
      os << r.step << ',' << buf << '\n';
    } else {
      os << format_loss_row(r) << '\n';
    }
    os.flush();
  }

  struct Cached {
    Window w;
    int64_t latent_version = -1;
  };

  TrainConfig cfg_;
  std::vector<ClipData> data_;
  std::unique_ptr<VanGoghModel<float>> model_;
  FeaturePyramid<float> features_;
  std::vector<Video> grays_, sps_, depths_;
  std::vector<std::pair<size_t, int64_t>> frames_;
  int64_t min_clip_len_ = 1;
  mutable std::map<std::tuple<size_t, int64_t, int64_t>, Cached> windows_;
  int64_t latent_version_ = 0;
  std::vector<LossRow> history_;
  std::vector<EvalRow> evals_;
  std::vector<Phase> completed_;
  std::filesystem::path out_;
  std::ofstream loss_log_, vae_log_;
  std::string resume_phase_;
  int64_t resume_step_ = 0;
  std::optional<AdamW<float>> resume_opt_;
};

}  // namespace vangogh
