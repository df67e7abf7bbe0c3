#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vangogh/error.hpp"
#include "vangogh/png.hpp"
#include "vangogh/tensor.hpp"

namespace vangogh {

inline constexpr int64_t kMinFrameSide = 8;

// One RGB frame, row-major HWC floats in [0, 1].
class Frame {
 public:
  Frame() = default;
  Frame(int64_t height, int64_t width, float fill = 0.0f) : h_(height), w_(width) {
    require(height >= kMinFrameSide && width >= kMinFrameSide, Errc::invalid_dimensions,
            "frame must be at least 8x8, got " + std::to_string(height) + "x" + std::to_string(width));
    px_.assign(static_cast<size_t>(height * width * 3), fill);
  }
  Frame(int64_t height, int64_t width, std::vector<float> pixels) : Frame(height, width) {
    require(pixels.size() == px_.size(), Errc::shape_mismatch, "frame pixel count mismatch");
    px_ = std::move(pixels);
    clamp();
  }

  int64_t height() const noexcept { return h_; }
  int64_t width() const noexcept { return w_; }
  float& at(int64_t y, int64_t x, int c) { return px_[static_cast<size_t>((y * w_ + x) * 3 + c)]; }
  float at(int64_t y, int64_t x, int c) const { return px_[static_cast<size_t>((y * w_ + x) * 3 + c)]; }
  std::vector<float>& pixels() noexcept { return px_; }
  const std::vector<float>& pixels() const noexcept { return px_; }

  void clamp() {
    for (float& v : px_) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool operator==(const Frame&) const = default;

 private:
  int64_t h_ = 0, w_ = 0;
  std::vector<float> px_;
};

class Video {
 public:
  Video() = default;
  explicit Video(std::vector<Frame> frames, double fps = 24.0) : frames_(std::move(frames)), fps_(fps) {
    validate();
  }

  int64_t num_frames() const noexcept { return static_cast<int64_t>(frames_.size()); }
  int64_t height() const { return frames_.empty() ? 0 : frames_[0].height(); }
  int64_t width() const { return frames_.empty() ? 0 : frames_[0].width(); }
  double fps() const noexcept { return fps_; }
  void set_fps(double fps) { fps_ = fps; }
  bool empty() const noexcept { return frames_.empty(); }

  Frame& operator[](int64_t t) { return frames_[static_cast<size_t>(t)]; }
  const Frame& operator[](int64_t t) const { return frames_[static_cast<size_t>(t)]; }
  std::vector<Frame>& frames() noexcept { return frames_; }
  const std::vector<Frame>& frames() const noexcept { return frames_; }

  void validate() const {
    require(!frames_.empty(), Errc::missing_frames, "video has no frames");
    require(fps_ > 0.0, Errc::invalid_argument, "fps must be positive");
    for (const auto& f : frames_)
      require(f.height() == height() && f.width() == width(), Errc::inconsistent_dimensions,
              "frames differ in size");
  }

  bool operator==(const Video& o) const { return frames_ == o.frames_; }

 private:
  std::vector<Frame> frames_;
  double fps_ = 24.0;
};

// [T, 3, H, W] planar tensor.
template <class T = float>
Tensor<T> to_tensor(const Video& v) {
  const int64_t n = v.num_frames(), H = v.height(), W = v.width();
  Tensor<T> t({n, 3, H, W});
  for (int64_t f = 0; f < n; ++f)
    for (int c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) t[((f * 3 + c) * H + y) * W + x] = static_cast<T>(v[f].at(y, x, c));
  return t;
}

template <class T>
Video from_tensor(const Tensor<T>& t, double fps = 24.0) {
  require(t.dim() == 4 && t.size(1) == 3, Errc::shape_mismatch, "expected [T,3,H,W], got " + shape_str(t.shape()));
  const int64_t n = t.size(0), H = t.size(2), W = t.size(3);
  std::vector<Frame> frames;
  frames.reserve(static_cast<size_t>(n));
  for (int64_t f = 0; f < n; ++f) {
    Frame fr(H, W);
    for (int c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          fr.at(y, x, c) = std::clamp(static_cast<float>(t[((f * 3 + c) * H + y) * W + x]), 0.0f, 1.0f);
    frames.push_back(std::move(fr));
  }
  return Video(std::move(frames), fps);
}

// Half-pixel-centred bilinear resize of one plane (align_corners = false).
// Source coordinates are clamped to the image, so borders replicate.
inline std::vector<float> resize_bilinear(const float* src, int64_t h, int64_t w, int64_t oh, int64_t ow,
                                          int64_t stride = 1) {
  std::vector<float> out(static_cast<size_t>(oh * ow));
  auto coord = [](int64_t d, int64_t in, int64_t outn, int64_t& i0, int64_t& i1, double& f) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int64_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (int64_t y = 0; y < oh; ++y) {
    int64_t y0, y1;
    double fy;
    coord(y, h, oh, y0, y1, fy);
    for (int64_t x = 0; x < ow; ++x) {
      int64_t x0, x1;
      double fx;
      coord(x, w, ow, x0, x1, fx);
      auto p = [&](int64_t yy, int64_t xx) { return static_cast<double>(src[(yy * w + xx) * stride]); };
      const double top = p(y0, x0) * (1 - fx) + p(y0, x1) * fx;
      const double bot = p(y1, x0) * (1 - fx) + p(y1, x1) * fx;
      out[static_cast<size_t>(y * ow + x)] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
  return out;
}

inline Frame resize_frame(const Frame& f, int64_t h, int64_t w) {
  require(h >= kMinFrameSide && w >= kMinFrameSide, Errc::invalid_dimensions,
          "resize target must be at least 8x8, got " + std::to_string(h) + "x" + std::to_string(w));
  if (h == f.height() && w == f.width()) return f;
  Frame out(h, w);
  for (int c = 0; c < 3; ++c) {
    auto plane = resize_bilinear(f.pixels().data() + c, f.height(), f.width(), h, w, 3);
    for (int64_t i = 0; i < h * w; ++i) out.pixels()[static_cast<size_t>(i * 3 + c)] = plane[static_cast<size_t>(i)];
  }
  out.clamp();
  return out;
}

inline Video resize_video(const Video& v, int64_t h, int64_t w) {
  require(h >= kMinFrameSide && w >= kMinFrameSide, Errc::invalid_dimensions,
          "resize target must be at least 8x8, got " + std::to_string(h) + "x" + std::to_string(w));
  std::vector<Frame> frames;
  frames.reserve(v.frames().size());
  for (const auto& f : v.frames()) frames.push_back(resize_frame(f, h, w));
  return Video(std::move(frames), v.fps());
}

inline uint8_t quantize8(float v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<uint8_t> encode_frame_png(const Frame& f) {
  Rgb8Image img{f.height(), f.width(), {}};
  img.rgb.resize(f.pixels().size());
  std::transform(f.pixels().begin(), f.pixels().end(), img.rgb.begin(), quantize8);
  return encode_png(img);
}

inline std::optional<Frame> decode_frame_png(const std::vector<uint8_t>& bytes) {
  auto img = decode_png(bytes);
  if (!img || img->height < kMinFrameSide || img->width < kMinFrameSide) return std::nullopt;
  std::vector<float> px(img->rgb.size());
  std::transform(img->rgb.begin(), img->rgb.end(), px.begin(), [](uint8_t b) { return b / 255.0f; });
  return Frame(img->height, img->width, std::move(px));
}

namespace detail {
inline bool is_png_name(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}
}  // namespace detail

// Reads every *.png in `dir` in lexicographic filename order. fps comes from
// meta.json when present.
inline Video load_video(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  require(fs::is_directory(dir, ec), Errc::missing_directory, "not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && detail::is_png_name(e.path())) files.push_back(e.path());
  require(!files.empty(), Errc::missing_frames, "no frames in " + dir.string());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  std::vector<Frame> frames;
  frames.reserve(files.size());
  for (const auto& p : files) {
    auto f = decode_frame_png(read_file_bytes(p.string()));
    require(f.has_value(), Errc::undecodable_frame, "cannot decode frame " + p.filename().string());
    if (!frames.empty())
      require(f->height() == frames[0].height() && f->width() == frames[0].width(),
              Errc::inconsistent_dimensions,
              p.filename().string() + " is " + std::to_string(f->height()) + "x" + std::to_string(f->width()) +
                  ", expected " + std::to_string(frames[0].height()) + "x" + std::to_string(frames[0].width()));
    frames.push_back(std::move(*f));
  }

  double fps = 24.0;
  const fs::path meta = dir / "meta.json";
  if (fs::exists(meta)) {
    std::ifstream in(meta);
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.contains("fps") && j["fps"].is_number() && j["fps"].get<double>() > 0)
      fps = j["fps"].get<double>();
  }
  return Video(std::move(frames), fps);
}

inline std::string frame_filename(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld.png", static_cast<long long>(index));
  return buf;
}

// Writes %06d.png frames plus meta.json. Stale frame files from a previous,
// longer save into the same directory are removed; other files are left alone.
inline void save_video(const Video& v, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  v.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(fs::is_directory(dir, ec), Errc::unwritable_path, "cannot create " + dir.string());
  static const std::regex frame_re(R"(\d{6}\.png)");
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, frame_re) && std::stoll(name.substr(0, 6)) >= v.num_frames()) fs::remove(e.path(), ec);
  }
  for (int64_t t = 0; t < v.num_frames(); ++t)
    write_file_bytes((dir / frame_filename(t)).string(), encode_frame_png(v[t]));
  nlohmann::json meta = {{"v", 1},
                         {"fps", v.fps()},
                         {"height", v.height()},
                         {"width", v.width()},
                         {"num_frames", v.num_frames()}};
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  require(static_cast<bool>(out), Errc::unwritable_path, "cannot write meta.json in " + dir.string());
  out << meta.dump(2) << '\n';
}

}  // namespace vangogh
