#pragma once

#include <filesystem>
#include <fstream>

#include "vangogh/synth.hpp"
#include "vangogh/trainer.hpp"

namespace vangogh {

// Desk-scale training setup: three 9-frame 64x64 clips, a narrow model and
// the full step budget (vae, 2k image, 1k video).
inline TrainConfig toy_train_config() {
  TrainConfig c;
  auto& m = c.model;
  m.cond.dim = 32;
  m.cond.queries = 4;
  m.cond.heads = 2;
  m.cond.text_len = 8;
  m.cond.vocab = 256;
  m.cond.image_size = 32;
  m.unet.channels = 16;
  m.unet.context_dim = 32;
  m.unet.heads = 2;
  m.unet.time_dim = 16;
  m.unet.groups = 4;
  m.seed = 7;
  c.height = c.width = 64;
  c.lr = 2e-3;
  c.weight_decay = 0;
  c.vae_steps = 300;
  c.vae_lr = 3e-3;
  c.image_steps = 2000;
  c.image_batch = 8;
  c.video_steps = 1000;
  c.video_batch = 1;
  c.clip_len = 9;
  c.superpixels = 48;
  c.checkpoint_every = 500;
  c.eval_at = {50};
  return c;
}

inline std::vector<ClipData> toy_dataset(int64_t frames = 9, int64_t side = 64) {
  std::vector<ClipData> d;
  d.push_back({"clip_a", translating_clip(frames, side, side, 1, 0, 101, 3.0), std::string("a red kite over a field")});
  d.push_back({"clip_b", translating_clip(frames, side, side, 0, 1, 202, 3.0), std::string("blue water at dusk")});
  d.push_back({"clip_c", translating_clip(frames, side, side, -1, 1, 303, 3.0), std::nullopt});
  return d;
}

// Writes the toy clips as <root>/<name>/NNNN.png plus caption.txt.
inline void write_toy_dataset(const std::filesystem::path& root) {
  for (const auto& c : toy_dataset()) {
    const auto dir = root / c.name;
    save_video(c.video, dir);
    if (c.caption) std::ofstream(dir / "caption.txt") << *c.caption << "\n";
  }
}

}  // namespace vangogh
