#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vangogh/ops.hpp"
#include "vangogh/rng.hpp"

namespace vangogh {

// Which part of the model a parameter belongs to. The trainer freezes and
// unfreezes whole groups; `temporal` marks the layers that mix information
// across frames.
enum class ParamGroup { spatial, temporal, conditioning, vae };

constexpr std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::spatial: return "spatial";
    case ParamGroup::temporal: return "temporal";
    case ParamGroup::conditioning: return "conditioning";
    case ParamGroup::vae: return "vae";
  }
  return "?";
}

inline std::optional<ParamGroup> parse_group(std::string_view s) {
  for (auto g : {ParamGroup::spatial, ParamGroup::temporal, ParamGroup::conditioning, ParamGroup::vae})
    if (group_name(g) == s) return g;
  return std::nullopt;
}

template <class T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    ParamGroup group;
  };

  Var<T> add(std::string name, Tensor<T> init, ParamGroup group) {
    require(find(name) == nullptr, Errc::invalid_argument, "duplicate parameter " + name);
    Var<T> v(std::move(init), true);
    entries_.push_back({std::move(name), v, group});
    return v;
  }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  const Entry* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  void set_trainable(const std::function<bool(const Entry&)>& pred) {
    for (auto& e : entries_) e.var.set_requires_grad(pred(e));
  }

  // Drops the buffers rather than zeroing them, so a parameter no step
  // touched has no gradient and the optimiser leaves it alone.
  void zero_grad() {
    for (auto& e : entries_) e.var.release_grad();
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.var.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
};

// Construction context handed down the module tree: where parameters go,
// under which name prefix and group, and which stream initialises them.
template <class T>
struct Scope {
  ParameterStore<T>* store;
  std::string prefix;
  ParamGroup group;
  Rng* rng;

  Scope sub(std::string_view name) const {
    return Scope{store, prefix.empty() ? std::string(name) : prefix + "." + std::string(name), group, rng};
  }
  Scope in_group(ParamGroup g) const { return Scope{store, prefix, g, rng}; }

  Var<T> param(std::string_view name, Tensor<T> init) const {
    return store->add(sub(name).prefix, std::move(init), group);
  }
  Var<T> uniform(std::string_view name, Shape shape, double bound) const {
    return param(name, rng->uniform_tensor<T>(std::move(shape), -bound, bound));
  }
  Var<T> zeros(std::string_view name, Shape shape) const { return param(name, Tensor<T>(std::move(shape))); }
  Var<T> ones(std::string_view name, Shape shape) const {
    return param(name, Tensor<T>(std::move(shape), T(1)));
  }
};

// Repeats x along a new leading batch axis: [..] -> [B, ..].
template <class T>
Var<T> expand_batch(const Var<T>& x, int64_t batch) {
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  Shape zs(s.size(), 1);
  zs[0] = batch;
  return reshape(x, s) + constant(Tensor<T>(zs));
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const Scope<T>& s, int64_t in, int64_t out, bool bias = true, bool zero_init = false)
      : in_(in), out_(out) {
    const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    w_ = zero_init ? s.zeros("weight", {in, out}) : s.uniform("weight", {in, out}, bound);
    if (bias) b_ = zero_init ? s.zeros("bias", {out}) : s.uniform("bias", {out}, bound);
  }

  Var<T> operator()(const Var<T>& x) const {
    require(x.size(-1) == in_, Errc::shape_mismatch,
            "linear expects last dim " + std::to_string(in_) + ", got " + shape_str(x.shape()));
    Shape os = x.shape();
    os.back() = out_;
    Var<T> y = matmul(reshape(x, {x.numel() / in_, in_}), w_);
    if (b_.defined()) y = y + b_;
    return reshape(y, os);
  }

  const Var<T>& weight() const { return w_; }

 private:
  int64_t in_ = 0, out_ = 0;
  Var<T> w_, b_;
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const Scope<T>& s, int64_t in, int64_t out, int64_t k, int64_t stride = 1,
         int64_t pad = -1, bool zero_init = false)
      : stride_(stride), pad_(pad < 0 ? k / 2 : pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    w_ = zero_init ? s.zeros("weight", {out, in, k, k}) : s.uniform("weight", {out, in, k, k}, bound);
    b_ = zero_init ? s.zeros("bias", {out}) : s.uniform("bias", {out}, bound);
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w_, b_, stride_, pad_); }

 private:
  int64_t stride_ = 1, pad_ = 0;
  Var<T> w_, b_;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const Scope<T>& s, int64_t dim) {
    gamma_ = s.ones("gamma", {dim});
    beta_ = s.zeros("beta", {dim});
  }
  Var<T> operator()(const Var<T>& x) const { return normalize_last(x) * gamma_ + beta_; }

 private:
  Var<T> gamma_, beta_;
};

template <class T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const Scope<T>& s, int64_t groups, int64_t channels) : groups_(groups), channels_(channels) {
    require(channels % groups == 0, Errc::invalid_argument, "channels not divisible by groups");
    gamma_ = s.ones("gamma", {1, channels, 1, 1});
    beta_ = s.zeros("beta", {1, channels, 1, 1});
  }
  Var<T> operator()(const Var<T>& x) const {
    const Shape s = x.shape();
    Var<T> y = reshape(normalize_last(reshape(x, {s[0], groups_, -1})), s);
    return y * gamma_ + beta_;
  }

 private:
  int64_t groups_ = 1, channels_ = 0;
  Var<T> gamma_, beta_;
};

// Multi-head scaled dot-product attention. Queries x: [B, Nq, q_dim];
// context: [B, Nk, kv_dim]; key_bias: additive [B or 1, Nk] (0 keeps a key,
// a large negative value masks it).
template <class T>
class Attention {
 public:
  Attention() = default;
  Attention(const Scope<T>& s, int64_t q_dim, int64_t kv_dim, int64_t heads, bool zero_out = false)
      : heads_(heads), inner_(q_dim) {
    require(q_dim % heads == 0, Errc::invalid_argument, "attention width not divisible by heads");
    to_q_ = Linear<T>(s.sub("to_q"), q_dim, inner_, false);
    to_k_ = Linear<T>(s.sub("to_k"), kv_dim, inner_, false);
    to_v_ = Linear<T>(s.sub("to_v"), kv_dim, inner_, false);
    to_out_ = Linear<T>(s.sub("to_out"), inner_, q_dim, true, zero_out);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& context, const Var<T>& key_bias = {}) const {
    const int64_t B = x.size(0), Nq = x.size(1), Nk = context.size(1);
    const int64_t d = inner_ / heads_;
    auto split = [&](const Var<T>& t, int64_t n) {
      return permute(reshape(t, {B, n, heads_, d}), {0, 2, 1, 3});
    };
    Var<T> q = split(to_q_(x), Nq);
    Var<T> kt = permute(reshape(to_k_(context), {B, Nk, heads_, d}), {0, 2, 3, 1});
    Var<T> v = split(to_v_(context), Nk);
    Var<T> scores = matmul(q, kt) * static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    if (key_bias.defined()) scores = scores + reshape(key_bias, {key_bias.size(0), 1, 1, Nk});
    Var<T> o = matmul(softmax(scores), v);
    return to_out_(reshape(permute(o, {0, 2, 1, 3}), {B, Nq, inner_}));
  }

 private:
  int64_t heads_ = 1, inner_ = 0;
  Linear<T> to_q_, to_k_, to_v_, to_out_;
};

template <class T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const Scope<T>& s, int64_t dim, int64_t mult = 4, bool zero_out = false) {
    fc1_ = Linear<T>(s.sub("fc1"), dim, dim * mult);
    fc2_ = Linear<T>(s.sub("fc2"), dim * mult, dim, true, zero_out);
  }
  Var<T> operator()(const Var<T>& x) const { return fc2_(gelu(fc1_(x))); }

 private:
  Linear<T> fc1_, fc2_;
};

// Pre-norm self-attention block used by the small encoder stand-ins.
template <class T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(const Scope<T>& s, int64_t dim, int64_t heads)
      : ln1_(s.sub("ln1"), dim), attn_(s.sub("attn"), dim, dim, heads), ln2_(s.sub("ln2"), dim),
        ff_(s.sub("ff"), dim) {}

  Var<T> operator()(const Var<T>& x, const Var<T>& key_bias = {}) const {
    Var<T> h = ln1_(x);
    Var<T> y = x + attn_(h, h, key_bias);
    return y + ff_(ln2_(y));
  }

 private:
  LayerNorm<T> ln1_;
  Attention<T> attn_;
  LayerNorm<T> ln2_;
  FeedForward<T> ff_;
};

}  // namespace vangogh
