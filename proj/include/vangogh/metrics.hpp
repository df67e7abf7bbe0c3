#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "vangogh/color.hpp"
#include "vangogh/video.hpp"

namespace vangogh {

inline constexpr double kPsnrCap = 99.0;

namespace detail {

inline void check_same_shape(const Video& a, const Video& b, const char* what) {
  require(a.num_frames() == b.num_frames() && a.height() == b.height() && a.width() == b.width(),
          Errc::shape_mismatch, std::string(what) + ": videos differ in shape");
}

inline std::vector<double> luma_plane(const Frame& f) {
  std::vector<double> y(static_cast<size_t>(f.height() * f.width()));
  const auto& px = f.pixels();
  for (size_t i = 0; i < y.size(); ++i)
    y[i] = gray_level(px[3 * i], px[3 * i + 1], px[3 * i + 2], LumaStandard::rec601);
  return y;
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<size_t>(size));
  double s = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    k[static_cast<size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
    s += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Separable 'valid' filtering: output is (H-k+1) x (W-k+1).
inline std::vector<double> filter_valid(const std::vector<double>& src, int64_t H, int64_t W,
                                        const std::vector<double>& k) {
  const int64_t K = static_cast<int64_t>(k.size()), oh = H - K + 1, ow = W - K + 1;
  std::vector<double> rows(static_cast<size_t>(H * ow));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (int64_t i = 0; i < K; ++i) s += k[static_cast<size_t>(i)] * src[static_cast<size_t>(y * W + x + i)];
      rows[static_cast<size_t>(y * ow + x)] = s;
    }
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (int64_t i = 0; i < K; ++i) s += k[static_cast<size_t>(i)] * rows[static_cast<size_t>((y + i) * ow + x)];
      out[static_cast<size_t>(y * ow + x)] = s;
    }
  return out;
}

}  // namespace detail

// Mean SSIM of one frame pair on rec.601 luma, Gaussian window 11, sigma 1.5,
// K1 = 0.01, K2 = 0.03, dynamic range 1. Frames smaller than the window use
// the largest odd window that fits.
inline double ssim(const Frame& a, const Frame& b) {
  require(a.height() == b.height() && a.width() == b.width(), Errc::shape_mismatch, "ssim: frames differ in size");
  const int64_t H = a.height(), W = a.width();
  int size = static_cast<int>(std::min<int64_t>(11, std::min(H, W)));
  if (size % 2 == 0) --size;
  const auto k = detail::gaussian_kernel(size, 1.5);
  const auto x = detail::luma_plane(a), y = detail::luma_plane(b);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = detail::filter_valid(x, H, W, k), my = detail::filter_valid(y, H, W, k);
  const auto sxx = detail::filter_valid(xx, H, W, k), syy = detail::filter_valid(yy, H, W, k),
             sxy = detail::filter_valid(xy, H, W, k);
  const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double acc = 0;
  for (size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    acc += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
  }
  return acc / static_cast<double>(mx.size());
}

inline double ssim(const Video& a, const Video& b) {
  detail::check_same_shape(a, b, "ssim");
  double acc = 0;
  for (int64_t t = 0; t < a.num_frames(); ++t) acc += ssim(a[t], b[t]);
  return acc / static_cast<double>(a.num_frames());
}

inline double psnr_from_mse(double mse) { return mse <= 0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)); }

inline double mse(const Video& a, const Video& b) {
  detail::check_same_shape(a, b, "mse");
  double acc = 0;
  size_t n = 0;
  for (int64_t t = 0; t < a.num_frames(); ++t) {
    const auto &pa = a[t].pixels(), &pb = b[t].pixels();
    for (size_t i = 0; i < pa.size(); ++i) {
      const double d = static_cast<double>(pa[i]) - pb[i];
      acc += d * d;
    }
    n += pa.size();
  }
  return acc / static_cast<double>(n);
}

// Over all pixels and frames with peak 1; identical inputs give kPsnrCap.
inline double psnr(const Video& a, const Video& b) { return psnr_from_mse(mse(a, b)); }

inline double colorfulness_per_fvmd(double colorfulness, double fvmd) {
  require(fvmd > 0 && std::isfinite(fvmd), Errc::non_positive_fvmd,
          "FVMD must be positive, got " + std::to_string(fvmd));
  return colorfulness / fvmd;
}

struct FrameMetrics {
  double ssim, psnr, colorfulness;
};

struct MetricReport {
  double ssim = 0, psnr = 0, colorfulness = 0;
  std::optional<double> fvmd, colorfulness_per_fvmd;
  std::vector<FrameMetrics> per_frame;
};

// fvmd is an externally computed scalar. Zero leaves the ratio absent; a
// negative value is rejected.
inline MetricReport evaluate(const Video& pred, const Video& gt, std::optional<double> fvmd = std::nullopt) {
  detail::check_same_shape(pred, gt, "evaluate");
  MetricReport r;
  r.ssim = ssim(pred, gt);
  r.psnr = psnr(pred, gt);
  r.colorfulness = colorfulness(pred);
  for (int64_t t = 0; t < pred.num_frames(); ++t) {
    const Video a({pred[t]}), b({gt[t]});
    r.per_frame.push_back({ssim(pred[t], gt[t]), psnr(a, b), colorfulness(pred[t])});
  }
  if (fvmd) {
    require(*fvmd >= 0 && std::isfinite(*fvmd), Errc::non_positive_fvmd,
            "FVMD must be non-negative, got " + std::to_string(*fvmd));
    r.fvmd = fvmd;
    if (*fvmd > 0) r.colorfulness_per_fvmd = colorfulness_per_fvmd(r.colorfulness, *fvmd);
  }
  return r;
}

inline const char* kReportCsvHeader = "video_id,ssim,psnr,colorfulness,fvmd,colorfulness_per_fvmd,lpips_external";

// Absent values are empty fields. LPIPS is never computed here; the column
// carries an externally supplied value when one is given.
inline std::string report_csv_row(const std::string& video_id, const MetricReport& r,
                                  std::optional<double> lpips_external = std::nullopt) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  require(video_id.find_first_of(",\"\n") == std::string::npos, Errc::invalid_argument,
          "video id may not contain commas, quotes or newlines");
  return video_id + "," + num(r.ssim) + "," + num(r.psnr) + "," + num(r.colorfulness) + "," + num(r.fvmd) + "," +
         num(r.colorfulness_per_fvmd) + "," + num(lpips_external);
}

}  // namespace vangogh
