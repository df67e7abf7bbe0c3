#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "vangogh/flow.hpp"
#include "vangogh/nn.hpp"

namespace vangogh {

struct LossWeights {
  double h = 0.1;                                  // contextual bandwidth
  std::array<double, 3> level_weights{2, 4, 8};    // levels 3, 4, 5
  double gamma = 1.0;                              // flow loss weight inside the flow term
  double lambda_ldm = 1.0;
  double w_ctx = 1.0;
  double w_flow = 1.0;
};

template <class T>
Var<T> ldm_loss(const Var<T>& eps_hat, const Var<T>& eps) {
  require(eps_hat.shape() == eps.shape(), Errc::shape_mismatch,
          "ldm_loss shapes " + shape_str(eps_hat.shape()) + " vs " + shape_str(eps.shape()));
  return mse(eps_hat, eps);
}

// Frozen random ReLU conv pyramid standing in for a pretrained perceptual
// network. Three stride-2 stages give the levels l = 3, 4, 5 at 1/2, 1/4 and
// 1/8 of the input resolution (never below 1x1). Weights are drawn in double
// from a fixed seed, so the float and double instances agree.
template <class T>
class FeaturePyramid {
 public:
  static constexpr std::array<int64_t, 4> kWidths{3, 16, 32, 64};

  explicit FeaturePyramid(uint64_t seed = 0x5eed) {
    Rng rng(seed);
    for (int l = 0; l < 3; ++l) {
      const int64_t cin = kWidths[l], cout = kWidths[l + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(cin * 9));
      w_[l] = constant(rng.uniform_tensor<double>({cout, cin, 3, 3}, -bound, bound).template cast<T>());
      b_[l] = constant(rng.uniform_tensor<double>({cout}, -0.05, 0.05).template cast<T>());
    }
  }

  // x: [B, 3, H, W] in [0, 1]. Returns the three levels, finest first.
  std::array<Var<T>, 3> operator()(const Var<T>& x) const {
    std::array<Var<T>, 3> out;
    Var<T> h = x - T(0.5);
    for (int l = 0; l < 3; ++l) {
      h = relu(conv2d(h, w_[l], b_[l], 2, 1));
      out[l] = h;
    }
    return out;
  }

 private:
  std::array<Var<T>, 3> w_, b_;
};

// Row-stochastic affinity between target feature points i and predicted
// feature points j. target, pred: [C, H, W]. Returns A: [N, N].
template <class T>
Var<T> contextual_affinity(const Var<T>& target, const Var<T>& pred, double h) {
  require(target.shape() == pred.shape(), Errc::shape_mismatch, "contextual feature shapes differ");
  const int64_t C = target.size(0), N = target.size(1) * target.size(2);
  Var<T> t = transpose(reshape(target, {C, N}), 0, 1);  // [N, C]
  Var<T> p = transpose(reshape(pred, {C, N}), 0, 1);
  Var<T> mu = mean(t, 0, true);
  auto unit = [](const Var<T>& x) { return x / sqrt(sum(x * x, 1, true) + T(1e-12)); };
  Var<T> tn = unit(t - mu), pn = unit(p - mu);
  Var<T> dist = T(1) - matmul(tn, transpose(pn, 0, 1));     // cosine distance [N, N]
  Var<T> rel = dist / (min(dist, 1, true) + T(1e-5));       // normalised per target point
  return softmax((T(1) - rel) / static_cast<T>(h));
}

template <class T>
Var<T> contextual_level(const Var<T>& target, const Var<T>& pred, double h) {
  Var<T> a = contextual_affinity(target, pred, h);
  return -log(mean(max(a, 1)));
}

// Weighted contextual loss over the pyramid, averaged over the batch.
// pred, target: [B, 3, H, W].
template <class T>
Var<T> contextual_loss(const Var<T>& pred, const Var<T>& target, const FeaturePyramid<T>& features,
                       const LossWeights& w = {}) {
  require(pred.shape() == target.shape(), Errc::shape_mismatch,
          "contextual_loss shapes " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const auto fp = features(pred);
  const auto ft = features(target);
  const int64_t B = pred.size(0);
  Var<T> total;
  for (int l = 0; l < 3; ++l)
    for (int64_t b = 0; b < B; ++b) {
      auto pick = [&](const Var<T>& f) {
        return reshape(slice(f, 0, b, 1), {f.size(1), f.size(2), f.size(3)});
      };
      Var<T> term = contextual_level(pick(ft[l]), pick(fp[l]), w.h) * static_cast<T>(w.level_weights[l] / B);
      total = total.defined() ? total + term : term;
    }
  return total;
}

// gamma * mean over pixels of |V_pred - V_gt|^2 against a precomputed
// ground-truth flow, which is treated as a constant. Frames: [3, H, W].
template <class T>
Var<T> optical_flow_loss_against(const Var<T>& pred1, const Var<T>& pred2, const Flow<T>& gt, double gamma,
                                 const FlowConfig& cfg = {}) {
  Flow<T> p = estimate_flow(pred1, pred2, cfg);
  Var<T> gu = detach(gt.u), gv = detach(gt.v);
  return (mean(square(p.u - gu)) + mean(square(p.v - gv))) * static_cast<T>(gamma);
}

// Same, estimating the ground-truth flow from gt1 -> gt2 without gradient.
template <class T>
Var<T> optical_flow_loss(const Var<T>& pred1, const Var<T>& pred2, const Var<T>& gt1, const Var<T>& gt2, double gamma,
                         const FlowConfig& cfg = {}) {
  require(pred1.shape() == pred2.shape() && pred1.shape() == gt1.shape() && gt1.shape() == gt2.shape(),
          Errc::shape_mismatch, "optical_flow_loss frame shapes differ");
  Flow<T> g;
  {
    NoGradGuard guard;
    g = estimate_flow(gt1, gt2, cfg);
  }
  return optical_flow_loss_against(pred1, pred2, g, gamma, cfg);
}

// Frame pair (i, i+1) for the flow term, uniform over the clip.
inline int64_t sample_flow_pair(Rng& rng, int64_t num_frames) {
  require(num_frames >= 2, Errc::clip_too_short, "flow loss needs at least two frames");
  return rng.uniform_int(0, num_frames - 2);
}

enum class Stage { image, video };

inline std::string_view stage_name(Stage s) { return s == Stage::image ? "image" : "video"; }

template <class T>
struct LossTerms {
  Var<T> total;
  double ldm = 0.0;
  std::optional<double> contextual;  // image stage only
  std::optional<double> flow;        // video stage only
};

// Image stage: ldm + w_ctx * contextual. Video stage: ldm + w_flow * flow.
// A term passed as undefined counts as absent.
template <class T>
LossTerms<T> total_loss(Stage stage, const Var<T>& ldm, const Var<T>& contextual, const Var<T>& flow,
                        const LossWeights& w) {
  LossTerms<T> r;
  r.ldm = static_cast<double>(ldm.item());
  r.total = ldm * static_cast<T>(w.lambda_ldm);
  if (stage == Stage::image && contextual.defined()) {
    r.contextual = static_cast<double>(contextual.item());
    r.total = r.total + contextual * static_cast<T>(w.w_ctx);
  }
  if (stage == Stage::video && flow.defined()) {
    r.flow = static_cast<double>(flow.item());
    r.total = r.total + flow * static_cast<T>(w.w_flow);
  }
  return r;
}

}  // namespace vangogh
