#pragma once

#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vangogh/hints.hpp"
#include "vangogh/nn.hpp"

namespace vangogh {

struct CondConfig {
  int64_t dim = 128;
  int64_t queries = 16;
  int64_t blocks = 2;       // cross-attention + FFN blocks per query branch
  int64_t heads = 4;
  int64_t text_len = 32;    // tokens kept after truncation
  int64_t vocab = 1024;
  int64_t image_size = 64;  // exemplars are resized to image_size x image_size
  int64_t encoder_layers = 1;

  static constexpr int64_t kMaxPromptChars = 256;

  // Patch sides for the three scales, coarse to fine.
  std::array<int64_t, 3> patch_sides() const { return {image_size / 4, image_size / 8, image_size / 16}; }
  int64_t color_tokens() const { return 16 + 64 + 256; }
};

// Lowercase, whitespace split, hashed into [2, vocab). 0 and 1 are reserved.
inline std::vector<int64_t> tokenize(std::string_view prompt, const CondConfig& cfg) {
  require(static_cast<int64_t>(prompt.size()) <= CondConfig::kMaxPromptChars, Errc::prompt_too_long,
          "prompt has " + std::to_string(prompt.size()) + " characters, limit is " +
              std::to_string(CondConfig::kMaxPromptChars));
  std::string lower(prompt);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::istringstream is(lower);
  std::vector<int64_t> ids;
  std::string word;
  while (is >> word && static_cast<int64_t>(ids.size()) < cfg.text_len) {
    uint64_t h = 1469598103934665603ull;
    for (char c : word) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
    ids.push_back(2 + static_cast<int64_t>(h % static_cast<uint64_t>(cfg.vocab - 2)));
  }
  return ids;
}

// tokens: [1, L, D]; mask[i] = 1 for real tokens, 0 for padding.
template <class T>
struct TextEmbedding {
  Var<T> tokens;
  std::vector<uint8_t> mask;
  bool is_null = false;
};

template <class T>
struct ColorFeatures {
  Var<T> tokens;  // [1, N, D]
  bool is_null = false;
};

template <class T>
struct FusedQueries {
  Var<T> l_text, l_color, l_fuse;  // [1, Q, D]
  double lambda1 = 1.0, lambda2 = 1.0;
};

template <class T>
Var<T> key_bias_from_mask(const std::vector<uint8_t>& mask) {
  Tensor<T> b({1, static_cast<int64_t>(mask.size())});
  for (size_t i = 0; i < mask.size(); ++i) b[static_cast<int64_t>(i)] = mask[i] ? T(0) : T(-1e9);
  return constant(std::move(b));
}

// Appends `extra` masked rows of arbitrary content to a text embedding.
template <class T>
TextEmbedding<T> pad_text(const TextEmbedding<T>& e, int64_t extra, T fill = T(0)) {
  TextEmbedding<T> r = e;
  const int64_t D = e.tokens.size(2);
  r.tokens = concat<T>({e.tokens, constant(Tensor<T>({1, extra, D}, fill))}, 1);
  r.mask.insert(r.mask.end(), static_cast<size_t>(extra), 0);
  return r;
}

template <class T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const Scope<T>& s, const CondConfig& cfg) : cfg_(cfg) {
    table_ = s.uniform("table", {cfg.vocab, cfg.dim}, 0.5);
    pos_ = s.uniform("pos", {cfg.text_len, cfg.dim}, 0.1);
    null_ = s.uniform("null", {1, cfg.dim}, 0.5);
    for (int64_t i = 0; i < cfg.encoder_layers; ++i)
      layers_.emplace_back(s.sub("layer" + std::to_string(i)), cfg.dim, cfg.heads);
    ln_ = LayerNorm<T>(s.sub("ln"), cfg.dim);
  }

  TextEmbedding<T> null_embedding() const {
    return {reshape(null_, {1, 1, cfg_.dim}), {1}, true};
  }

  TextEmbedding<T> operator()(std::string_view prompt) const {
    const auto ids = tokenize(prompt, cfg_);
    if (ids.empty()) return null_embedding();
    const int64_t L = static_cast<int64_t>(ids.size());
    Var<T> x = embedding(table_, ids) + slice(pos_, 0, 0, L);
    x = reshape(x, {1, L, cfg_.dim});
    for (const auto& l : layers_) x = l(x);
    return {ln_(x), std::vector<uint8_t>(static_cast<size_t>(L), 1), false};
  }

 private:
  CondConfig cfg_;
  Var<T> table_, pos_, null_;
  std::vector<TransformerLayer<T>> layers_;
  LayerNorm<T> ln_;
};

// Patch embedding for one scale: non-overlapping p x p patches projected to
// D channels, then a residual block of 1x1 convolutions, so each embedding
// depends only on its own patch.
template <class T>
class PatchScale {
 public:
  PatchScale() = default;
  PatchScale(const Scope<T>& s, int64_t patch, int64_t dim) : patch_(patch), dim_(dim) {
    proj_ = Conv2d<T>(s.sub("proj"), 3, dim, patch, patch, 0);
    c1_ = Conv2d<T>(s.sub("res1"), dim, dim, 1);
    c2_ = Conv2d<T>(s.sub("res2"), dim, dim, 1);
  }

  // x: [1, 3, S, S] -> [1, n, D] in row-major patch order.
  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = proj_(x);
    h = h + c2_(silu(c1_(silu(h))));
    const int64_t n = h.size(2) * h.size(3);
    return transpose(reshape(h, {1, dim_, n}), 1, 2);
  }

 private:
  int64_t patch_ = 0, dim_ = 0;
  Conv2d<T> proj_, c1_, c2_;
};

template <class T>
class ColorProjector {
 public:
  ColorProjector() = default;
  ColorProjector(const Scope<T>& s, const CondConfig& cfg) : cfg_(cfg) {
    const auto sides = cfg.patch_sides();
    for (int i = 0; i < 3; ++i) scales_[i] = PatchScale<T>(s.sub("scale" + std::to_string(i)), sides[i], cfg.dim);
    pos_ = s.uniform("pos", {cfg.color_tokens(), cfg.dim}, 0.1);
    null_ = s.uniform("null", {1, 1, cfg.dim}, 0.5);
    for (int64_t i = 0; i < cfg.encoder_layers; ++i)
      layers_.emplace_back(s.sub("layer" + std::to_string(i)), cfg.dim, cfg.heads);
    ln_ = LayerNorm<T>(s.sub("ln"), cfg.dim);
  }

  Var<T> image_tensor(const Frame& exemplar) const {
    Frame f = resize_frame(exemplar, cfg_.image_size, cfg_.image_size);
    require(f.height() == f.width(), Errc::invalid_argument, "exemplar not square after resize");
    return constant(to_tensor<T>(Video({f})));
  }

  // Per-scale patch embeddings before the encoder, coarse to fine.
  std::array<Var<T>, 3> patch_embeddings(const Frame& exemplar) const {
    const Var<T> x = image_tensor(exemplar) - T(0.5);
    return {scales_[0](x), scales_[1](x), scales_[2](x)};
  }

  ColorFeatures<T> null_features() const { return {null_, true}; }

  ColorFeatures<T> operator()(const Frame& exemplar) const {
    auto p = patch_embeddings(exemplar);
    Var<T> x = concat<T>({p[0], p[1], p[2]}, 1);
    require(x.size(1) == cfg_.color_tokens(), Errc::shape_mismatch, "unexpected colour token count");
    x = x + pos_;
    for (const auto& l : layers_) x = l(x);
    return {ln_(x), false};
  }

 private:
  CondConfig cfg_;
  std::array<PatchScale<T>, 3> scales_;
  Var<T> pos_, null_;
  std::vector<TransformerLayer<T>> layers_;
  LayerNorm<T> ln_;
};

// Learnable queries refined by blocks of pre-norm cross-attention onto the
// modality tokens followed by an FFN.
template <class T>
class QueryBranch {
 public:
  QueryBranch() = default;
  QueryBranch(const Scope<T>& s, const CondConfig& cfg) : cfg_(cfg) {
    queries_ = s.uniform("queries", {1, cfg.queries, cfg.dim}, 0.5);
    for (int64_t i = 0; i < cfg.blocks; ++i) {
      auto b = s.sub("block" + std::to_string(i));
      blocks_.push_back({LayerNorm<T>(b.sub("ln_q"), cfg.dim), LayerNorm<T>(b.sub("ln_kv"), cfg.dim),
                         Attention<T>(b.sub("xattn"), cfg.dim, cfg.dim, cfg.heads),
                         LayerNorm<T>(b.sub("ln_ff"), cfg.dim), FeedForward<T>(b.sub("ff"), cfg.dim)});
    }
    ln_out_ = LayerNorm<T>(s.sub("ln_out"), cfg.dim);
  }

  Var<T> operator()(const Var<T>& tokens, const Var<T>& key_bias = {}) const {
    Var<T> q = queries_;
    for (const auto& b : blocks_) {
      const Var<T> kv = b.ln_kv(tokens);
      q = q + b.attn(b.ln_q(q), kv, key_bias);
      q = q + b.ff(b.ln_ff(q));
    }
    return ln_out_(q);
  }

 private:
  struct Block {
    LayerNorm<T> ln_q, ln_kv;
    Attention<T> attn;
    LayerNorm<T> ln_ff;
    FeedForward<T> ff;
  };
  CondConfig cfg_;
  Var<T> queries_;
  std::vector<Block> blocks_;
  LayerNorm<T> ln_out_;
};

template <class T>
Var<T> fuse_queries(const Var<T>& l_text, const Var<T>& l_color, const Var<T>& lambda1, const Var<T>& lambda2) {
  return l_text * lambda1 + l_color * lambda2;
}

template <class T>
class DualQFormer {
 public:
  DualQFormer() = default;
  DualQFormer(const Scope<T>& s, const CondConfig& cfg) : text_(s.sub("text"), cfg), color_(s.sub("color"), cfg) {}

  FusedQueries<T> operator()(const TextEmbedding<T>& text, const ColorFeatures<T>& color, double lambda1,
                             double lambda2) const {
    require(std::isfinite(lambda1) && std::isfinite(lambda2), Errc::invalid_argument, "fusion scales must be finite");
    FusedQueries<T> r;
    r.l_text = text_(text.tokens, key_bias_from_mask<T>(text.mask));
    r.l_color = color_(color.tokens);
    r.lambda1 = lambda1;
    r.lambda2 = lambda2;
    r.l_fuse = fuse_queries(r.l_text, r.l_color, constant(Tensor<T>::scalar(static_cast<T>(lambda1))),
                            constant(Tensor<T>::scalar(static_cast<T>(lambda2))));
    return r;
  }

 private:
  QueryBranch<T> text_, color_;
};

struct ConditionFlags {
  bool text = false, exemplar = false, hints = false;
  friend bool operator==(const ConditionFlags&, const ConditionFlags&) = default;
};

// Text encoder, colour projector and dual query former. All parameters live
// in the conditioning group.
template <class T>
class Conditioner {
 public:
  Conditioner() = default;
  Conditioner(const Scope<T>& s, const CondConfig& cfg)
      : cfg_(cfg),
        text_(s.in_group(ParamGroup::conditioning).sub("text_encoder"), cfg),
        color_(s.in_group(ParamGroup::conditioning).sub("color_projector"), cfg),
        qformer_(s.in_group(ParamGroup::conditioning).sub("qformer"), cfg) {}

  const CondConfig& config() const { return cfg_; }
  const TextEncoder<T>& text_encoder() const { return text_; }
  const ColorProjector<T>& color_projector() const { return color_; }
  const DualQFormer<T>& qformer() const { return qformer_; }

  FusedQueries<T> fuse(const std::optional<std::string>& prompt, const std::optional<Frame>& exemplar,
                       double lambda1, double lambda2) const {
    TextEmbedding<T> te = prompt ? text_(*prompt) : text_.null_embedding();
    ColorFeatures<T> cf = exemplar ? color_(*exemplar) : color_.null_features();
    return qformer_(te, cf, lambda1, lambda2);
  }

 private:
  CondConfig cfg_;
  TextEncoder<T> text_;
  ColorProjector<T> color_;
  DualQFormer<T> qformer_;
};

template <class T>
struct ConditionBundle {
  FusedQueries<T> fused;
  HintsTensorPair hints;
  std::optional<Video> depth;  // single-channel stack stored in all three channels
  ConditionFlags flags;
};

// An empty prompt counts as absent text. Hints without trajectories are
// tracked through the grayscale clip first; hint colours come from the
// anchors themselves.
template <class T>
ConditionBundle<T> build_condition_bundle(const Conditioner<T>& cond, const Video& gray,
                                          const std::optional<std::string>& prompt,
                                          const std::optional<Frame>& exemplar, const std::optional<HintSet>& hints,
                                          const std::optional<Video>& depth, double lambda1, double lambda2) {
  ConditionBundle<T> b;
  const bool has_text = prompt && !tokenize(*prompt, cond.config()).empty();
  b.flags.text = has_text;
  b.flags.exemplar = exemplar.has_value();
  b.fused = cond.fuse(has_text ? prompt : std::nullopt, exemplar, lambda1, lambda2);
  if (hints && !hints->anchors.empty()) {
    validate_hints(*hints, gray.num_frames(), gray.height(), gray.width());
    HintSet h = hints->trajectories.empty() ? track_hints(*hints, gray) : *hints;
    b.hints = synthesize_mask_canvas(h, anchor_color_video(h, gray), gray);
    b.flags.hints = true;
  } else {
    b.hints = synthesize_mask_canvas(HintSet{}, gray, gray);
  }
  if (depth) {
    require(depth->num_frames() == gray.num_frames() && depth->height() == gray.height() &&
                depth->width() == gray.width(),
            Errc::shape_mismatch, "depth stack does not match the clip");
    b.depth = depth;
  }
  return b;
}

}  // namespace vangogh
