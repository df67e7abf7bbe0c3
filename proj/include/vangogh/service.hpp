#pragma once

#include <openssl/evp.h>
#include <zlib.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "vangogh/checkpoint.hpp"
#include "vangogh/model.hpp"

namespace vangogh {

// ---------------------------------------------------------------------------
// Zip archives (stored and deflated members; no zip64, no encryption)

struct ZipEntry {
  std::string name;
  std::vector<uint8_t> data;
};

namespace detail {

inline uint32_t le32(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
inline uint16_t le16(const uint8_t* p) { return static_cast<uint16_t>(p[0] | p[1] << 8); }

inline std::vector<uint8_t> inflate_raw(const uint8_t* src, size_t n, size_t expected) {
  std::vector<uint8_t> out(expected);
  z_stream zs{};
  require(inflateInit2(&zs, -MAX_WBITS) == Z_OK, Errc::io_error, "zlib init failed");
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const size_t produced = zs.total_out;
  inflateEnd(&zs);
  require(rc == Z_STREAM_END && produced == expected, Errc::io_error, "corrupt deflate stream in zip");
  return out;
}

}  // namespace detail

inline std::vector<ZipEntry> read_zip(const std::vector<uint8_t>& z) {
  auto bad = [](const std::string& m) { fail(Errc::io_error, "zip: " + m); };
  if (z.size() < 22) bad("too short");
  // end of central directory, searched backwards past an optional comment
  size_t eocd = std::string::npos;
  for (size_t i = z.size() - 22 + 1; i-- > 0 && z.size() - i <= 22 + 0xffff;)
    if (detail::le32(&z[i]) == 0x06054b50) {
      eocd = i;
      break;
    }
  if (eocd == std::string::npos) bad("no end-of-central-directory record");
  const uint16_t count = detail::le16(&z[eocd + 10]);
  size_t at = detail::le32(&z[eocd + 16]);
  std::vector<ZipEntry> out;
  for (uint16_t k = 0; k < count; ++k) {
    if (at + 46 > z.size() || detail::le32(&z[at]) != 0x02014b50) bad("bad central directory");
    const uint16_t method = detail::le16(&z[at + 10]);
    const uint32_t crc = detail::le32(&z[at + 16]);
    const uint32_t csize = detail::le32(&z[at + 20]), usize = detail::le32(&z[at + 24]);
    const uint16_t nlen = detail::le16(&z[at + 28]), xlen = detail::le16(&z[at + 30]), clen = detail::le16(&z[at + 32]);
    const uint32_t local = detail::le32(&z[at + 42]);
    if (at + 46 + nlen > z.size()) bad("truncated name");
    ZipEntry e;
    e.name.assign(reinterpret_cast<const char*>(&z[at + 46]), nlen);
    at += 46 + nlen + xlen + clen;
    if (!e.name.empty() && e.name.back() == '/') continue;
    if (local + 30 > z.size() || detail::le32(&z[local]) != 0x04034b50) bad("bad local header for " + e.name);
    const size_t data = local + 30 + detail::le16(&z[local + 26]) + detail::le16(&z[local + 28]);
    if (data + csize > z.size()) bad("truncated member " + e.name);
    if (method == 0) {
      if (csize != usize) bad("stored size mismatch for " + e.name);
      e.data.assign(z.begin() + static_cast<int64_t>(data), z.begin() + static_cast<int64_t>(data + csize));
    } else if (method == 8) {
      e.data = detail::inflate_raw(&z[data], csize, usize);
    } else {
      bad("unsupported compression method " + std::to_string(method) + " for " + e.name);
    }
    if (crc32(0L, e.data.data(), static_cast<uInt>(e.data.size())) != crc) bad("checksum mismatch for " + e.name);
    out.push_back(std::move(e));
  }
  return out;
}

// Frames are the PNG members, ordered by file name (directories ignored).
inline Video video_from_zip(const std::vector<uint8_t>& zip) {
  auto entries = read_zip(zip);
  std::vector<ZipEntry*> pngs;
  for (auto& e : entries) {
    const auto base = std::filesystem::path(e.name).filename();
    if (detail::is_png_name(base) && base.string().rfind("._", 0) != 0) pngs.push_back(&e);
  }
  require(!pngs.empty(), Errc::missing_frames, "zip holds no PNG frames");
  std::sort(pngs.begin(), pngs.end(), [](auto* a, auto* b) { return a->name < b->name; });
  std::vector<Frame> frames;
  for (auto* e : pngs) {
    auto f = decode_frame_png(e->data);
    require(f.has_value(), Errc::undecodable_frame, "cannot decode " + e->name);
    require(frames.empty() || (f->height() == frames[0].height() && f->width() == frames[0].width()),
            Errc::inconsistent_dimensions, e->name + " differs in size from the first frame");
    frames.push_back(std::move(*f));
  }
  return Video(std::move(frames));
}

inline std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Colorization pipeline shared by the CLI and the HTTP service

struct ColorizeInputs {
  Video gray;
  std::optional<std::string> prompt;
  std::optional<Frame> exemplar;
  std::optional<HintSet> hints;
  double lambda1 = 1.0, lambda2 = 1.0;
  SampleOptions sample;
};

inline Video as_gray(const Video& v) {
  for (const auto& f : v.frames())
    if (!is_grayscale(f)) return to_grayscale(v);
  return v;
}

inline int64_t valid_frame_count(int64_t T) { return ((T - 1 + kTemporalStride - 1) / kTemporalStride) * kTemporalStride + 1; }

// The backbone halves the latent once, so sides go to multiples of 16.
inline int64_t valid_side(int64_t s) {
  constexpr int64_t m = 2 * kSpatialFactor;
  return std::max<int64_t>(m, (s + m / 2) / m * m);
}

// Colour input is reduced to rec.601 gray first. Frame counts that are not
// 1 mod 4 are padded with the last frame and trimmed afterwards; sides that
// are not multiples of 16 are resized for sampling and resized back before
// the luma is replaced.
inline Video colorize(const VanGoghModel<float>& model, const ColorizeInputs& in) {
  require(in.gray.num_frames() >= 1, Errc::missing_frames, "empty input video");
  require(in.sample.steps >= 1, Errc::invalid_argument, "steps must be positive");
  require(std::isfinite(in.lambda1) && std::isfinite(in.lambda2), Errc::invalid_argument, "lambda must be finite");
  const Video gray = as_gray(in.gray);
  const int64_t T0 = gray.num_frames(), H0 = gray.height(), W0 = gray.width();
  const int64_t T = valid_frame_count(T0), H = valid_side(H0), W = valid_side(W0);
  std::vector<Frame> frames = gray.frames();
  while (static_cast<int64_t>(frames.size()) < T) frames.push_back(frames.back());
  Video work(std::move(frames), gray.fps());
  if (H != H0 || W != W0) work = resize_video(work, H, W);

  std::optional<HintSet> hints = in.hints;
  if (hints) {
    validate_hints(*hints, T0, H0, W0);
    hints->trajectories.clear();
    if (H != H0 || W != W0)
      for (auto& a : hints->anchors) {
        a.x = std::clamp<int64_t>(std::llround((a.x + 0.5) * W / W0 - 0.5), 0, W - 1);
        a.y = std::clamp<int64_t>(std::llround((a.y + 0.5) * H / H0 - 0.5), 0, H - 1);
      }
  }
  const ConditionBundle<float> b = build_condition_bundle<float>(model.conditioner(), work, in.prompt, in.exemplar,
                                                                 hints, synthetic_depth(work), in.lambda1, in.lambda2);
  SampleOptions opt = in.sample;
  opt.replace_luma = false;
  Video out = model.sample(b, work, opt);
  if (H != H0 || W != W0) out = resize_video(out, H0, W0);
  std::vector<Frame> trimmed(out.frames().begin(), out.frames().begin() + T0);
  Video result(std::move(trimmed), gray.fps());
  if (in.sample.replace_luma) result = replace_luma(result, gray);
  return result;
}

// Tracked hints plus one overlay frame per input frame: the gray video with
// every tracked cell painted in its anchor colour.
struct HintPreview {
  HintSet tracked;
  Video overlay;
};

inline HintPreview preview_hints(const Video& video, const HintSet& h) {
  const Video gray = as_gray(video);
  validate_hints(h, gray.num_frames(), gray.height(), gray.width());
  HintPreview p;
  p.tracked = track_hints(h, gray);
  p.overlay = anchor_color_video(p.tracked, gray);
  return p;
}

// ---------------------------------------------------------------------------
// Content-addressed asset store

class AssetStore {
 public:
  explicit AssetStore(std::filesystem::path root) : root_(std::move(root)) {
    for (const char* d : {"videos", "exemplars", "results"}) std::filesystem::create_directories(root_ / d);
  }

  static std::filesystem::path default_root() {
    const char* env = std::getenv("VANGOGH_DATA_DIR");
    return env && *env ? std::filesystem::path(env) : std::filesystem::current_path() / "vangogh_data";
  }

  const std::filesystem::path& root() const { return root_; }

  // Id of a video: hash over its frame PNG encodings.
  static std::string video_hash(const Video& v) {
    std::vector<uint8_t> all;
    for (const auto& f : v.frames()) {
      const auto png = encode_frame_png(f);
      all.insert(all.end(), png.begin(), png.end());
    }
    return sha256_hex(all).substr(0, 32);
  }

  std::string put_video(const Video& v) { return put_frames("videos", "v", v); }
  std::string put_result(const Video& v) { return put_frames("results", "r", v); }

  std::string put_exemplar(const Frame& f) {
    const auto png = encode_frame_png(f);
    const std::string id = "e" + sha256_hex(png).substr(0, 32);
    std::lock_guard lk(mu_);
    const auto path = root_ / "exemplars" / (id + ".png");
    if (!std::filesystem::exists(path)) write_file_atomic(path, png);
    return id;
  }

  std::optional<Video> video(const std::string& id) const { return frames("videos", id); }
  std::optional<Video> result(const std::string& id) const { return frames("results", id); }

  std::optional<Frame> exemplar(const std::string& id) const {
    if (!safe_id(id)) return std::nullopt;
    const auto path = root_ / "exemplars" / (id + ".png");
    if (!std::filesystem::is_regular_file(path)) return std::nullopt;
    return decode_frame_png(read_file_bytes(path));
  }

  // Raw PNG bytes of one stored frame, without decoding.
  std::optional<std::vector<uint8_t>> frame_png(const std::string& kind, const std::string& id, int64_t k) const {
    if (!safe_id(id) || k < 0) return std::nullopt;
    const auto path = root_ / kind / id / frame_filename(k);
    if (!std::filesystem::is_regular_file(path)) return std::nullopt;
    return read_file_bytes(path);
  }

  int64_t frame_count(const std::string& kind, const std::string& id) const {
    if (!safe_id(id) || !std::filesystem::is_directory(root_ / kind / id)) return -1;
    int64_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(root_ / kind / id)) n += detail::is_png_name(e.path());
    return n;
  }

 private:
  static bool safe_id(const std::string& id) {
    return !id.empty() && id.size() <= 64 &&
           std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
  }

  std::string put_frames(const char* kind, const char* prefix, const Video& v) {
    const std::string id = prefix + video_hash(v);
    std::lock_guard lk(mu_);
    const auto dir = root_ / kind / id;
    if (!std::filesystem::exists(dir)) {
      // written under a temporary name, then renamed into place
      auto tmp = root_ / kind / (id + ".partial");
      std::filesystem::remove_all(tmp);
      save_video(v, tmp);
      std::filesystem::rename(tmp, dir);
    }
    return id;
  }

  std::optional<Video> frames(const char* kind, const std::string& id) const {
    if (!safe_id(id) || !std::filesystem::is_directory(root_ / kind / id)) return std::nullopt;
    return load_video(root_ / kind / id);
  }

  std::filesystem::path root_;
  mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Requests and jobs

struct ColorizeRequest {
  std::string gray_video_id;
  std::optional<std::string> prompt;
  std::optional<std::string> exemplar_id;
  std::optional<HintSet> hints;
  double lambda1 = 1.0, lambda2 = 1.0;
  int64_t steps = 50;
  uint64_t seed = 0;
  bool luma_replace = true;
};

inline ColorizeRequest parse_colorize_request(const nlohmann::json& j) {
  auto bad = [](const std::string& m) { fail(Errc::invalid_argument, "colorize request: " + m); };
  if (!j.is_object()) bad("expected a JSON object");
  if (j.contains("v") && j["v"] != 1) bad("unsupported schema version");
  ColorizeRequest r;
  if (!j.contains("gray_video_id") || !j["gray_video_id"].is_string()) bad("gray_video_id is required");
  r.gray_video_id = j["gray_video_id"].get<std::string>();
  auto opt_string = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_string()) bad(std::string(key) + " must be a string");
    return j[key].get<std::string>();
  };
  r.prompt = opt_string("prompt");
  r.exemplar_id = opt_string("exemplar_id");
  if (j.contains("hints") && !j["hints"].is_null()) r.hints = hints_from_json(j["hints"]);
  auto num = [&](const char* key, double& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number() || !std::isfinite(j[key].get<double>())) bad(std::string(key) + " must be a finite number");
    out = j[key].get<double>();
  };
  num("lambda1", r.lambda1);
  num("lambda2", r.lambda2);
  if (j.contains("steps")) {
    if (!j["steps"].is_number_integer() || j["steps"].get<int64_t>() < 1 || j["steps"].get<int64_t>() > 1000)
      bad("steps must be an integer in [1, 1000]");
    r.steps = j["steps"].get<int64_t>();
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer() || j["seed"].get<int64_t>() < 0) bad("seed must be a non-negative integer");
    r.seed = j["seed"].get<uint64_t>();
  }
  if (j.contains("luma_replace")) {
    if (!j["luma_replace"].is_boolean()) bad("luma_replace must be a boolean");
    r.luma_replace = j["luma_replace"].get<bool>();
  }
  return r;
}

inline nlohmann::json to_json(const ColorizeRequest& r) {
  nlohmann::json j{{"v", 1},          {"gray_video_id", r.gray_video_id}, {"lambda1", r.lambda1},
                   {"lambda2", r.lambda2}, {"steps", r.steps},               {"seed", r.seed},
                   {"luma_replace", r.luma_replace}};
  j["prompt"] = r.prompt ? nlohmann::json(*r.prompt) : nlohmann::json(nullptr);
  j["exemplar_id"] = r.exemplar_id ? nlohmann::json(*r.exemplar_id) : nlohmann::json(nullptr);
  j["hints"] = r.hints ? to_json(*r.hints) : nlohmann::json(nullptr);
  return j;
}

enum class JobState { queued, running, done, failed };

inline const char* job_state_name(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "failed";
}

struct JobStatus {
  std::string job_id;
  JobState state = JobState::queued;
  double progress = 0;
  std::optional<std::string> result_id;
  std::optional<std::string> error;
};

inline nlohmann::json to_json(const JobStatus& s) {
  nlohmann::json j{{"v", 1}, {"job_id", s.job_id}, {"state", job_state_name(s.state)}, {"progress", s.progress}};
  j["result_id"] = s.result_id ? nlohmann::json(*s.result_id) : nlohmann::json(nullptr);
  if (s.error) j["error"] = *s.error;
  return j;
}

// Resolves asset ids into pipeline inputs; unknown ids raise missing_frames.
inline ColorizeInputs resolve_request(const AssetStore& store, const ColorizeRequest& r) {
  ColorizeInputs in;
  auto v = store.video(r.gray_video_id);
  require(v.has_value(), Errc::missing_frames, "unknown video id " + r.gray_video_id);
  in.gray = std::move(*v);
  in.prompt = r.prompt;
  if (r.exemplar_id) {
    in.exemplar = store.exemplar(*r.exemplar_id);
    require(in.exemplar.has_value(), Errc::missing_frames, "unknown exemplar id " + *r.exemplar_id);
  }
  in.hints = r.hints;
  in.lambda1 = r.lambda1;
  in.lambda2 = r.lambda2;
  in.sample.steps = r.steps;
  in.sample.seed = r.seed;
  in.sample.replace_luma = r.luma_replace;
  return in;
}

// One worker runs jobs in submission order. The model is only read.
class JobQueue {
 public:
  JobQueue(const VanGoghModel<float>& model, AssetStore& store) : model_(model), store_(store) {
    worker_ = std::thread([this] { loop(); });
  }
  ~JobQueue() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
  JobQueue(const JobQueue&) = delete;
  JobQueue& operator=(const JobQueue&) = delete;

  JobStatus submit(ColorizeInputs in) {
    std::lock_guard lk(mu_);
    JobStatus s;
    s.job_id = "j" + std::to_string(++counter_);
    jobs_[s.job_id] = s;
    pending_.push_back({s.job_id, std::move(in)});
    cv_.notify_all();
    return s;
  }

  std::optional<JobStatus> status(const std::string& id) const {
    std::lock_guard lk(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
  }

  // While paused, queued jobs stay queued.
  void set_paused(bool on) {
    {
      std::lock_guard lk(mu_);
      paused_ = on;
    }
    cv_.notify_all();
  }

  // Blocks until the job leaves the queue; for scripts and tests.
  JobStatus wait(const std::string& id) const {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] {
      auto it = jobs_.find(id);
      return it == jobs_.end() || it->second.state == JobState::done || it->second.state == JobState::failed;
    });
    auto it = jobs_.find(id);
    require(it != jobs_.end(), Errc::invalid_argument, "unknown job " + id);
    return it->second;
  }

 private:
  struct Pending {
    std::string id;
    ColorizeInputs in;
  };

  void loop() {
    for (;;) {
      Pending job;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stop_ || (!paused_ && !pending_.empty()); });
        if (stop_) return;
        job = std::move(pending_.front());
        pending_.pop_front();
        jobs_[job.id].state = JobState::running;
      }
      job.in.sample.progress = [&](int64_t done, int64_t total) {
        std::lock_guard lk(mu_);
        jobs_[job.id].progress = static_cast<double>(done) / static_cast<double>(total);
      };
      std::optional<std::string> result, error;
      try {
        result = store_.put_result(colorize(model_, job.in));
      } catch (const std::exception& e) {
        error = e.what();
      }
      {
        std::lock_guard lk(mu_);
        auto& s = jobs_[job.id];
        if (result) {
          s.state = JobState::done;
          s.progress = 1.0;
          s.result_id = result;
        } else {
          s.state = JobState::failed;
          s.error = error;
        }
      }
      cv_.notify_all();
    }
  }

  const VanGoghModel<float>& model_;
  AssetStore& store_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<std::string, JobStatus> jobs_;
  std::deque<Pending> pending_;
  int64_t counter_ = 0;
  bool stop_ = false, paused_ = false;
  std::thread worker_;
};

}  // namespace vangogh
