#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string_view>
#include <vector>

#include "vangogh/video.hpp"

namespace vangogh {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

namespace detail {

inline Vec3 mul(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

inline Mat3 inverse(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r;
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

// Linear sRGB -> XYZ built from the Rec.709 primaries and the D65 white point,
// scaled so that RGB (1,1,1) maps to Y = 1.
struct SrgbTables {
  Mat3 to_xyz, from_xyz;
  Vec3 white;

  SrgbTables() {
    const double xy[4][2] = {{0.64, 0.33}, {0.30, 0.60}, {0.15, 0.06}, {0.3127, 0.3290}};
    Mat3 p;
    for (int c = 0; c < 3; ++c) {
      p[0][c] = xy[c][0] / xy[c][1];
      p[1][c] = 1.0;
      p[2][c] = (1.0 - xy[c][0] - xy[c][1]) / xy[c][1];
    }
    const Vec3 w = {xy[3][0] / xy[3][1], 1.0, (1.0 - xy[3][0] - xy[3][1]) / xy[3][1]};
    const Vec3 s = mul(inverse(p), w);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) to_xyz[r][c] = p[r][c] * s[c];
    from_xyz = inverse(to_xyz);
    for (int r = 0; r < 3; ++r) white[r] = to_xyz[r][0] + to_xyz[r][1] + to_xyz[r][2];
  }
};

inline const SrgbTables& srgb() {
  static const SrgbTables t;
  return t;
}

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}
inline double linear_to_srgb(double c) {
  return c <= 0.0031308 ? c * 12.92 : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

constexpr double kDelta = 6.0 / 29.0;
inline double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}
inline double lab_finv(double f) {
  return f > kDelta ? f * f * f : 3.0 * kDelta * kDelta * (f - 4.0 / 29.0);
}

}  // namespace detail

// CIELAB (D65) of one sRGB triple in [0,1].
inline Vec3 rgb_to_lab(const Vec3& rgb) {
  const auto& t = detail::srgb();
  const Vec3 lin = {detail::srgb_to_linear(rgb[0]), detail::srgb_to_linear(rgb[1]), detail::srgb_to_linear(rgb[2])};
  const Vec3 xyz = detail::mul(t.to_xyz, lin);
  const double fx = detail::lab_f(xyz[0] / t.white[0]);
  const double fy = detail::lab_f(xyz[1] / t.white[1]);
  const double fz = detail::lab_f(xyz[2] / t.white[2]);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

// Inverse conversion without clamping; out-of-gamut colours leave [0,1].
inline Vec3 lab_to_rgb_unclamped(const Vec3& lab) {
  const auto& t = detail::srgb();
  const double fy = (lab[0] + 16.0) / 116.0;
  const double fx = fy + lab[1] / 500.0;
  const double fz = fy - lab[2] / 200.0;
  const Vec3 xyz = {t.white[0] * detail::lab_finv(fx), t.white[1] * detail::lab_finv(fy),
                    t.white[2] * detail::lab_finv(fz)};
  const Vec3 lin = detail::mul(t.from_xyz, xyz);
  Vec3 out;
  for (int c = 0; c < 3; ++c) out[c] = lin[c] < 0 ? -detail::linear_to_srgb(-lin[c]) : detail::linear_to_srgb(lin[c]);
  return out;
}

inline Vec3 lab_to_rgb(const Vec3& lab) {
  Vec3 rgb = lab_to_rgb_unclamped(lab);
  for (double& c : rgb) c = std::clamp(c, 0.0, 1.0);
  return rgb;
}

struct LabFrame {
  int64_t height = 0, width = 0;
  std::vector<double> L, a, b;
};

inline LabFrame rgb_to_lab(const Frame& f) {
  LabFrame out{f.height(), f.width(), {}, {}, {}};
  const size_t n = static_cast<size_t>(f.height() * f.width());
  out.L.resize(n);
  out.a.resize(n);
  out.b.resize(n);
  const auto& px = f.pixels();
  for (size_t i = 0; i < n; ++i) {
    const Vec3 lab = rgb_to_lab(Vec3{px[3 * i], px[3 * i + 1], px[3 * i + 2]});
    out.L[i] = lab[0];
    out.a[i] = lab[1];
    out.b[i] = lab[2];
  }
  return out;
}

inline Frame lab_to_rgb(const LabFrame& lf) {
  Frame out(lf.height, lf.width);
  auto& px = out.pixels();
  for (size_t i = 0; i < lf.L.size(); ++i) {
    const Vec3 rgb = lab_to_rgb(Vec3{lf.L[i], lf.a[i], lf.b[i]});
    for (int c = 0; c < 3; ++c) px[3 * i + c] = static_cast<float>(rgb[c]);
  }
  return out;
}

// How colour is reduced to gray. rec601 and rec709 weight the gamma-encoded
// channels; cie_lightness picks the gray whose CIELAB L equals the pixel's L,
// which makes luma replacement with the colour source an exact identity.
enum class LumaStandard { rec601, rec709, cie_lightness };

inline Vec3 luma_weights(LumaStandard s) {
  return s == LumaStandard::rec601 ? Vec3{0.299, 0.587, 0.114} : Vec3{0.2126, 0.7152, 0.0722};
}

inline std::optional<LumaStandard> parse_luma_standard(std::string_view s) {
  if (s == "rec601") return LumaStandard::rec601;
  if (s == "rec709") return LumaStandard::rec709;
  if (s == "cie_lightness") return LumaStandard::cie_lightness;
  return std::nullopt;
}

inline std::string_view luma_standard_name(LumaStandard s) {
  switch (s) {
    case LumaStandard::rec601: return "rec601";
    case LumaStandard::rec709: return "rec709";
    case LumaStandard::cie_lightness: return "cie_lightness";
  }
  return "?";
}

inline double gray_level(double r, double g, double b, LumaStandard s) {
  if (s == LumaStandard::cie_lightness) {
    const auto& t = detail::srgb();
    const double y = t.to_xyz[1][0] * detail::srgb_to_linear(r) + t.to_xyz[1][1] * detail::srgb_to_linear(g) +
                     t.to_xyz[1][2] * detail::srgb_to_linear(b);
    return std::clamp(detail::linear_to_srgb(y / t.white[1]), 0.0, 1.0);
  }
  const Vec3 w = luma_weights(s);
  return std::clamp(w[0] * r + w[1] * g + w[2] * b, 0.0, 1.0);
}

inline Frame to_grayscale(const Frame& f, LumaStandard s = LumaStandard::rec601) {
  Frame out(f.height(), f.width());
  const auto& in = f.pixels();
  auto& px = out.pixels();
  for (size_t i = 0; i < in.size(); i += 3) {
    float y;
    if (in[i] == in[i + 1] && in[i] == in[i + 2]) {
      y = in[i];  // keep gray input bit-exact
    } else {
      y = static_cast<float>(gray_level(in[i], in[i + 1], in[i + 2], s));
    }
    px[i] = px[i + 1] = px[i + 2] = y;
  }
  return out;
}

inline Video to_grayscale(const Video& v, LumaStandard s = LumaStandard::rec601) {
  std::vector<Frame> frames;
  frames.reserve(v.frames().size());
  for (const auto& f : v.frames()) frames.push_back(to_grayscale(f, s));
  return Video(std::move(frames), v.fps());
}

inline bool is_grayscale(const Frame& f, float tol = 1e-4f) {
  const auto& px = f.pixels();
  for (size_t i = 0; i < px.size(); i += 3)
    if (std::abs(px[i] - px[i + 1]) > tol || std::abs(px[i] - px[i + 2]) > tol) return false;
  return true;
}

// Combines L with (a, b). When that colour is outside the sRGB gamut the
// chroma is shortened along the same hue until it fits, so L survives the
// trip back to RGB instead of being distorted by per-channel clamping.
inline Vec3 combine_luma_chroma(double L, double a, double b) {
  auto fits = [](const Vec3& rgb) {
    for (double c : rgb)
      if (c < -1e-9 || c > 1.0 + 1e-9) return false;
    return true;
  };
  Vec3 rgb = lab_to_rgb_unclamped({L, a, b});
  if (!fits(rgb)) {
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 50; ++it) {
      const double mid = 0.5 * (lo + hi);
      (fits(lab_to_rgb_unclamped({L, a * mid, b * mid})) ? lo : hi) = mid;
    }
    rgb = lab_to_rgb_unclamped({L, a * lo, b * lo});
  }
  for (double& c : rgb) c = std::clamp(c, 0.0, 1.0);
  return rgb;
}

inline Frame replace_luma(const Frame& colorized, const Frame& gray) {
  require(colorized.height() == gray.height() && colorized.width() == gray.width(), Errc::shape_mismatch,
          "replace_luma frame sizes differ");
  require(is_grayscale(gray), Errc::not_grayscale, "luma source is not grayscale");
  Frame out(gray.height(), gray.width());
  const auto& cp = colorized.pixels();
  const auto& gp = gray.pixels();
  auto& op = out.pixels();
  for (size_t i = 0; i < cp.size(); i += 3) {
    const double L = rgb_to_lab(Vec3{gp[i], gp[i + 1], gp[i + 2]})[0];
    const Vec3 lab = rgb_to_lab(Vec3{cp[i], cp[i + 1], cp[i + 2]});
    const Vec3 rgb = combine_luma_chroma(L, lab[1], lab[2]);
    for (int c = 0; c < 3; ++c) op[i + c] = static_cast<float>(rgb[c]);
  }
  return out;
}

inline Video replace_luma(const Video& colorized, const Video& gray) {
  require(colorized.num_frames() == gray.num_frames() && colorized.height() == gray.height() &&
              colorized.width() == gray.width(),
          Errc::shape_mismatch, "replace_luma video shapes differ");
  std::vector<Frame> frames;
  frames.reserve(gray.frames().size());
  for (int64_t t = 0; t < gray.num_frames(); ++t) frames.push_back(replace_luma(colorized[t], gray[t]));
  return Video(std::move(frames), gray.fps());
}

// Hasler-Suesstrunk colourfulness on the 0-255 scale.
inline double colorfulness(const Frame& f) {
  const auto& px = f.pixels();
  const size_t n = px.size() / 3;
  std::vector<double> rg(n), yb(n);
  double m_rg = 0, m_yb = 0;
  for (size_t i = 0; i < n; ++i) {
    const double r = px[3 * i] * 255.0, g = px[3 * i + 1] * 255.0, b = px[3 * i + 2] * 255.0;
    rg[i] = r - g;
    yb[i] = 0.5 * (r + g) - b;
    m_rg += rg[i];
    m_yb += yb[i];
  }
  m_rg /= static_cast<double>(n);
  m_yb /= static_cast<double>(n);
  double v_rg = 0, v_yb = 0;
  for (size_t i = 0; i < n; ++i) {
    v_rg += (rg[i] - m_rg) * (rg[i] - m_rg);
    v_yb += (yb[i] - m_yb) * (yb[i] - m_yb);
  }
  v_rg /= static_cast<double>(n);
  v_yb /= static_cast<double>(n);
  return std::sqrt(v_rg + v_yb) + 0.3 * std::sqrt(m_rg * m_rg + m_yb * m_yb);
}

inline double colorfulness(const Video& v) {
  double acc = 0;
  for (const auto& f : v.frames()) acc += colorfulness(f);
  return acc / static_cast<double>(v.num_frames());
}

}  // namespace vangogh
