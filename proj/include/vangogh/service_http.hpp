#pragma once

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "vangogh/service.hpp"

#include <httplib.h>

namespace vangogh {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, {{"v", 1}, {"error", msg}});
}

// Upload bodies arrive either raw or as the first file of a multipart form.
inline std::vector<uint8_t> upload_bytes(const httplib::Request& req) {
  if (req.is_multipart_form_data()) {
    require(!req.files.empty(), Errc::invalid_argument, "multipart upload without a file");
    const auto& c = req.files.begin()->second.content;
    return {c.begin(), c.end()};
  }
  return {req.body.begin(), req.body.end()};
}

inline int status_for(Errc c) {
  switch (c) {
    case Errc::invalid_argument:
    case Errc::io_error:
    case Errc::undecodable_frame:
    case Errc::inconsistent_dimensions:
    case Errc::invalid_dimensions:
    case Errc::prompt_too_long:
    case Errc::out_of_range:
    case Errc::shape_mismatch:
    case Errc::shape_incompatible:
    case Errc::missing_frames: return 400;
    default: return 500;
  }
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_argument, std::string("malformed JSON: ") + e.what());
  }
}

// Runs a handler, mapping library errors to status codes.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, status_for(e.code()), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

inline std::optional<int64_t> parse_index(const std::string& s) {
  if (s.empty() || s.size() > 9 || !std::all_of(s.begin(), s.end(), ::isdigit)) return std::nullopt;
  return std::stoll(s);
}

}  // namespace detail

// Endpoints (all JSON carries "v": 1):
//   POST /assets/video              zip of PNG frames -> {id, frames, height, width}
//   POST /assets/exemplar           PNG -> {id}
//   GET  /assets/video/:id          -> {id, frames}
//   GET  /assets/video/:id/frame/:k PNG
//   GET  /assets/exemplar/:id       PNG
//   POST /jobs/colorize             ColorizeRequest -> JobStatus
//   GET  /jobs/:id                  JobStatus
//   GET  /results/:id               -> {id, frames}
//   GET  /results/:id/frame/:k      PNG; :id may be a result id or a job id
//   POST /hints/preview             {video_id, hints} -> tracked hints + overlay PNGs
inline void register_routes(httplib::Server& svr, AssetStore& store, JobQueue& jobs) {
  using detail::guarded;
  using detail::send_error;
  using detail::send_json;

  svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"v", 1}, {"ok", true}});
  });

  svr.Post("/assets/video", guarded([&store](const httplib::Request& req, httplib::Response& res) {
             const Video v = video_from_zip(detail::upload_bytes(req));
             const std::string id = store.put_video(v);
             send_json(res, 200,
                       {{"v", 1}, {"id", id}, {"frames", v.num_frames()}, {"height", v.height()}, {"width", v.width()}});
           }));

  svr.Post("/assets/exemplar", guarded([&store](const httplib::Request& req, httplib::Response& res) {
             auto f = decode_frame_png(detail::upload_bytes(req));
             if (!f) return send_error(res, 400, "body is not a PNG image");
             send_json(res, 200, {{"v", 1}, {"id", store.put_exemplar(*f)}});
           }));

  auto describe = [&store](const char* kind) {
    return guarded([&store, kind](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.path_params.at("id");
      const int64_t n = store.frame_count(kind, id);
      if (n < 0) return send_error(res, 404, std::string("unknown id ") + id);
      send_json(res, 200, {{"v", 1}, {"id", id}, {"frames", n}});
    });
  };
  svr.Get("/assets/video/:id", describe("videos"));
  svr.Get("/results/:id", describe("results"));

  svr.Get("/assets/video/:id/frame/:k", guarded([&store](const httplib::Request& req, httplib::Response& res) {
            const auto k = detail::parse_index(req.path_params.at("k"));
            auto png = k ? store.frame_png("videos", req.path_params.at("id"), *k) : std::nullopt;
            if (!png) return send_error(res, 404, "unknown video or frame");
            res.set_content(std::string(png->begin(), png->end()), "image/png");
          }));

  svr.Get("/assets/exemplar/:id", guarded([&store](const httplib::Request& req, httplib::Response& res) {
            auto f = store.exemplar(req.path_params.at("id"));
            if (!f) return send_error(res, 404, "unknown exemplar");
            const auto png = encode_frame_png(*f);
            res.set_content(std::string(png.begin(), png.end()), "image/png");
          }));

  svr.Post("/jobs/colorize", guarded([&store, &jobs](const httplib::Request& req, httplib::Response& res) {
             const ColorizeRequest r = parse_colorize_request(detail::parse_body(req));
             if (!store.video(r.gray_video_id)) return send_error(res, 404, "unknown video id " + r.gray_video_id);
             if (r.exemplar_id && !store.exemplar(*r.exemplar_id))
               return send_error(res, 404, "unknown exemplar id " + *r.exemplar_id);
             ColorizeInputs in = resolve_request(store, r);
             if (r.hints) validate_hints(*r.hints, in.gray.num_frames(), in.gray.height(), in.gray.width());
             if (r.prompt) tokenize(*r.prompt, CondConfig{});
             send_json(res, 200, to_json(jobs.submit(std::move(in))));
           }));

  svr.Get("/jobs/:id", guarded([&jobs](const httplib::Request& req, httplib::Response& res) {
            auto s = jobs.status(req.path_params.at("id"));
            if (!s) return send_error(res, 404, "unknown job " + req.path_params.at("id"));
            send_json(res, 200, to_json(*s));
          }));

  svr.Get("/results/:id/frame/:k", guarded([&store, &jobs](const httplib::Request& req, httplib::Response& res) {
            std::string id = req.path_params.at("id");
            if (auto s = jobs.status(id)) {
              if (s->state == JobState::failed)
                return send_error(res, 500, "job failed: " + s->error.value_or("unknown error"));
              if (s->state != JobState::done) return send_error(res, 409, "job " + id + " is not done");
              id = *s->result_id;
            }
            const auto k = detail::parse_index(req.path_params.at("k"));
            auto png = k ? store.frame_png("results", id, *k) : std::nullopt;
            if (!png) return send_error(res, 404, "unknown result or frame");
            res.set_content(std::string(png->begin(), png->end()), "image/png");
          }));

  svr.Post("/hints/preview", guarded([&store](const httplib::Request& req, httplib::Response& res) {
             const auto j = detail::parse_body(req);
             if (!j.is_object() || !j.contains("video_id") || !j["video_id"].is_string() || !j.contains("hints"))
               return send_error(res, 400, "preview needs video_id and hints");
             const std::string vid = j["video_id"].get<std::string>();
             auto v = store.video(vid);
             if (!v) return send_error(res, 404, "unknown video id " + vid);
             const HintPreview p = preview_hints(*v, hints_from_json(j["hints"]));
             nlohmann::json overlays = nlohmann::json::array();
             for (const auto& f : p.overlay.frames()) overlays.push_back(base64_encode(encode_frame_png(f)));
             send_json(res, 200,
                       {{"v", 1}, {"frames", p.overlay.num_frames()}, {"hints", to_json(p.tracked)}, {"overlays", overlays}});
           }));
}

}  // namespace vangogh
