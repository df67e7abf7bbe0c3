#include <gtest/gtest.h>

#include <thread>

#include "support/tempdir.hpp"
#include "support/zip_writer.hpp"
#include "vangogh/service_http.hpp"
#include "vangogh/synth.hpp"

using namespace vangogh;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.cond.dim = 16;
  c.cond.queries = 2;
  c.cond.heads = 2;
  c.cond.text_len = 6;
  c.cond.vocab = 64;
  c.cond.image_size = 16;
  c.unet.channels = 8;
  c.unet.context_dim = 16;
  c.unet.heads = 2;
  c.unet.time_dim = 8;
  c.unet.groups = 4;
  c.seed = 2;
  return c;
}

const VanGoghModel<float>& model() {
  static VanGoghModel<float> m(small_config());
  return m;
}

std::vector<uint8_t> zip_video(const Video& v, bool packed = true) {
  vangogh::testing::ZipWriter z;
  z.add("clip/", {});
  for (int64_t t = v.num_frames() - 1; t >= 0; --t)  // out of order on purpose
    z.add("clip/" + frame_filename(t), encode_frame_png(v[t]), packed);
  z.add("clip/notes.txt", {'h', 'i'});
  return z.finish();
}

Video quantized(const Video& v) {
  std::vector<Frame> f;
  for (const auto& fr : v.frames()) f.push_back(*decode_frame_png(encode_frame_png(fr)));
  return Video(std::move(f), v.fps());
}

ColorizeInputs inputs(const Video& gray, uint64_t seed = 3) {
  ColorizeInputs in;
  in.gray = gray;
  in.sample.steps = 3;
  in.sample.seed = seed;
  return in;
}

double max_l_diff(const Video& a, const Video& b) {
  double m = 0;
  for (int64_t t = 0; t < a.num_frames(); ++t) {
    const auto la = rgb_to_lab(a[t]), lb = rgb_to_lab(b[t]);
    for (size_t i = 0; i < la.L.size(); ++i) m = std::max(m, std::abs(la.L[i] - lb.L[i]));
  }
  return m;
}

bool same_frames(const Video& a, const Video& b) {
  if (a.num_frames() != b.num_frames()) return false;
  for (int64_t t = 0; t < a.num_frames(); ++t)
    if (a[t].pixels() != b[t].pixels()) return false;
  return true;
}

}  // namespace

TEST(Zip, StoredAndDeflated) {
  const std::vector<uint8_t> data = {1, 2, 3, 4, 5, 5, 5, 5, 5, 5, 5, 5, 5, 9};
  vangogh::testing::ZipWriter z;
  z.add("a.bin", data, false);
  z.add("dir/", {});
  z.add("dir/b.bin", data, true);
  const auto entries = read_zip(z.finish());
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].name, "a.bin");
  EXPECT_EQ(entries[0].data, data);
  EXPECT_EQ(entries[1].name, "dir/b.bin");
  EXPECT_EQ(entries[1].data, data);
}

TEST(Zip, RejectsDamage) {
  vangogh::testing::ZipWriter z;
  z.add("a.bin", {1, 2, 3, 4});
  auto bytes = z.finish();
  bytes[30 + 5] ^= 0xff;  // payload byte after the 5-char name
  EXPECT_THROW(read_zip(bytes), Error);
  EXPECT_THROW(read_zip(std::vector<uint8_t>(40, 0)), Error);
  EXPECT_THROW(read_zip({}), Error);
}

TEST(Zip, VideoFramesSortedByName) {
  const Video v = quantized(translating_clip(3, 8, 8, 1, 0, 1));
  const Video r = video_from_zip(zip_video(v));
  ASSERT_TRUE(same_frames(v, r));
  vangogh::testing::ZipWriter empty;
  empty.add("x.txt", {'a'});
  EXPECT_THROW(video_from_zip(empty.finish()), Error);
}

TEST(Base64, KnownVectors) {
  auto enc = [](const std::string& s) { return base64_encode(std::vector<uint8_t>(s.begin(), s.end())); };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("f"), "Zg==");
  EXPECT_EQ(enc("fo"), "Zm8=");
  EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
}

TEST(Pipeline, ValidShapes) {
  EXPECT_EQ(valid_frame_count(1), 1);
  EXPECT_EQ(valid_frame_count(2), 5);
  EXPECT_EQ(valid_frame_count(5), 5);
  EXPECT_EQ(valid_frame_count(6), 9);
  EXPECT_EQ(valid_frame_count(61), 61);
  EXPECT_EQ(valid_side(3), 16);
  EXPECT_EQ(valid_side(24), 32);
  EXPECT_EQ(valid_side(23), 16);
  EXPECT_EQ(valid_side(64), 64);
}

TEST(Pipeline, OddShapesKeepFramesAndLuma) {
  const Video gray = quantized(to_grayscale(translating_clip(6, 20, 28, 1, 0, 5)));
  const Video out = colorize(model(), inputs(gray));
  ASSERT_EQ(out.num_frames(), 6);
  ASSERT_EQ(out.height(), 20);
  ASSERT_EQ(out.width(), 28);
  EXPECT_LE(max_l_diff(out, gray), 1e-4 * 100);
}

TEST(Pipeline, DeterministicAndSeedSensitive) {
  const Video gray = to_grayscale(translating_clip(5, 16, 16, 1, 0, 5));
  ColorizeInputs in = inputs(gray);
  in.prompt = "a green field";
  in.exemplar = translating_clip(1, 16, 16, 0, 0, 9)[0];
  HintSet h;
  h.cell_side = 3;
  h.anchors.push_back({0, 4, 4, {1.0f, 0.0f, 0.0f}});
  in.hints = h;
  const Video a = colorize(model(), in), b = colorize(model(), in);
  EXPECT_TRUE(same_frames(a, b));
  in.sample.seed = 4;
  EXPECT_FALSE(same_frames(a, colorize(model(), in)));
}

TEST(Pipeline, LumaReplaceFlag) {
  const Video gray = to_grayscale(translating_clip(5, 16, 16, 1, 0, 5));
  ColorizeInputs in = inputs(gray);
  EXPECT_LE(max_l_diff(colorize(model(), in), gray), 1e-2);
  in.sample.replace_luma = false;
  EXPECT_GT(max_l_diff(colorize(model(), in), gray), 1.0);
}

TEST(Pipeline, ColourInputIsReducedToGray) {
  const Video colour = translating_clip(5, 16, 16, 1, 0, 5);
  EXPECT_TRUE(same_frames(colorize(model(), inputs(colour)), colorize(model(), inputs(to_grayscale(colour)))));
}

TEST(Pipeline, HintsOutsideVideoRejected) {
  const Video gray = to_grayscale(translating_clip(5, 16, 16, 1, 0, 5));
  ColorizeInputs in = inputs(gray);
  HintSet h;
  h.anchors.push_back({0, 40, 4, {1.0f, 0.0f, 0.0f}});
  in.hints = h;
  EXPECT_THROW(colorize(model(), in), Error);
}

TEST(Preview, StaticVideoKeepsCells) {
  std::vector<Frame> f(5, translating_clip(1, 16, 16, 0, 0, 3)[0]);
  const Video v(std::move(f));
  HintSet h;
  h.cell_side = 3;
  h.anchors.push_back({0, 5, 7, {0.0f, 0.0f, 1.0f}});
  const HintPreview p = preview_hints(v, h);
  ASSERT_EQ(p.tracked.trajectories.size(), 1u);
  for (const auto& pt : p.tracked.trajectories[0]) {
    EXPECT_NEAR(pt.x, 5, 1e-3);
    EXPECT_NEAR(pt.y, 7, 1e-3);
  }
  for (int64_t t = 0; t < 5; ++t) {
    EXPECT_FLOAT_EQ(p.overlay[t].at(7, 5, 2), 1.0f);
    EXPECT_FLOAT_EQ(p.overlay[t].at(7, 5, 0), 0.0f);
  }
}

TEST(Assets, ContentAddressed) {
  vangogh::testing::TempDir dir;
  AssetStore store(dir.path());
  const Video v = quantized(translating_clip(3, 8, 8, 1, 0, 1));
  const std::string a = store.put_video(v), b = store.put_video(v);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, store.put_video(quantized(translating_clip(3, 8, 8, 1, 0, 2))));
  ASSERT_TRUE(store.video(a).has_value());
  EXPECT_TRUE(same_frames(*store.video(a), v));
  EXPECT_EQ(store.frame_count("videos", a), 3);
  EXPECT_FALSE(store.video("nope").has_value());
  EXPECT_FALSE(store.video("../videos").has_value());
  const std::string e = store.put_exemplar(v[0]);
  EXPECT_EQ(e[0], 'e');
  EXPECT_EQ(store.exemplar(e)->pixels(), v[0].pixels());
}

TEST(Request, ParseAndValidate) {
  const auto r = parse_colorize_request(nlohmann::json::parse(
      R"({"v":1,"gray_video_id":"vabc","prompt":"red car","lambda1":0.5,"steps":7,"seed":9,
          "hints":{"v":1,"cell_side":4,"anchors":[{"x":1,"y":2,"color":[1,0,0.5]}]}})"));
  EXPECT_EQ(r.gray_video_id, "vabc");
  EXPECT_EQ(*r.prompt, "red car");
  EXPECT_FALSE(r.exemplar_id.has_value());
  EXPECT_DOUBLE_EQ(r.lambda1, 0.5);
  EXPECT_DOUBLE_EQ(r.lambda2, 1.0);
  EXPECT_EQ(r.steps, 7);
  EXPECT_EQ(r.seed, 9u);
  EXPECT_EQ(r.hints->anchors.at(0).x, 1);
  EXPECT_EQ(parse_colorize_request(to_json(r)).hints, r.hints);
  for (const char* bad : {R"({})", R"({"gray_video_id":3})", R"({"gray_video_id":"a","steps":0})",
                          R"({"gray_video_id":"a","lambda1":"x"})", R"({"gray_video_id":"a","v":2})",
                          R"({"gray_video_id":"a","seed":-1})", R"([1])"})
    EXPECT_THROW(parse_colorize_request(nlohmann::json::parse(bad)), Error) << bad;
}

TEST(Jobs, StateTransitions) {
  vangogh::testing::TempDir dir;
  AssetStore store(dir.path());
  JobQueue q(model(), store);
  q.set_paused(true);
  const JobStatus s = q.submit(inputs(to_grayscale(translating_clip(5, 16, 16, 1, 0, 5))));
  EXPECT_EQ(s.state, JobState::queued);
  EXPECT_EQ(q.status(s.job_id)->state, JobState::queued);
  EXPECT_FALSE(q.status(s.job_id)->result_id.has_value());
  q.set_paused(false);
  const JobStatus done = q.wait(s.job_id);
  EXPECT_EQ(done.state, JobState::done);
  EXPECT_DOUBLE_EQ(done.progress, 1.0);
  ASSERT_TRUE(done.result_id.has_value());
  EXPECT_EQ(store.frame_count("results", *done.result_id), 5);
  EXPECT_FALSE(q.status("j999").has_value());

  ColorizeInputs broken = inputs(to_grayscale(translating_clip(5, 16, 16, 1, 0, 5)));
  broken.prompt = std::string(300, 'a');
  const JobStatus f = q.wait(q.submit(broken).job_id);
  EXPECT_EQ(f.state, JobState::failed);
  EXPECT_FALSE(f.result_id.has_value());
  EXPECT_TRUE(f.error.has_value());
}

class Http : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = std::make_unique<AssetStore>(dir_.path());
    jobs_ = std::make_unique<JobQueue>(model(), *store_);
    register_routes(server_, *store_, *jobs_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  nlohmann::json post_json(const std::string& path, const nlohmann::json& body, int want = 200) {
    auto r = client_->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, want) << r->body;
    return nlohmann::json::parse(r->body);
  }

  std::string upload_video(const Video& v) {
    const auto z = zip_video(v);
    auto r = client_->Post("/assets/video", std::string(z.begin(), z.end()), "application/zip");
    EXPECT_EQ(r->status, 200) << r->body;
    return nlohmann::json::parse(r->body)["id"];
  }

  nlohmann::json poll(const std::string& job) {
    for (int i = 0; i < 2000; ++i) {
      auto r = client_->Get("/jobs/" + job);
      auto j = nlohmann::json::parse(r->body);
      if (j["state"] == "done" || j["state"] == "failed") return j;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    ADD_FAILURE() << "job did not finish";
    return {};
  }

  vangogh::testing::TempDir dir_;
  std::unique_ptr<AssetStore> store_;
  std::unique_ptr<JobQueue> jobs_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(Http, ColorizeMatchesDirectPipeline) {
  const Video gray = quantized(to_grayscale(translating_clip(5, 16, 16, 1, 0, 5)));
  const std::string vid = upload_video(gray);
  const Frame ex = translating_clip(1, 16, 16, 0, 0, 9)[0];
  const auto ex_png = encode_frame_png(ex);
  auto er = client_->Post("/assets/exemplar", std::string(ex_png.begin(), ex_png.end()), "image/png");
  ASSERT_EQ(er->status, 200);
  const std::string eid = nlohmann::json::parse(er->body)["id"];

  nlohmann::json req{{"v", 1},       {"gray_video_id", vid}, {"prompt", "sunset"}, {"exemplar_id", eid},
                     {"lambda1", 0.5}, {"lambda2", 1.5},       {"steps", 3},         {"seed", 21}};
  req["hints"] = {{"v", 1}, {"cell_side", 3}, {"anchors", {{{"x", 4}, {"y", 5}, {"color", {0.9, 0.1, 0.2}}}}}};
  const auto st = post_json("/jobs/colorize", req);
  EXPECT_EQ(st["v"], 1);
  const auto done = poll(st["job_id"]);
  ASSERT_EQ(done["state"], "done") << done.dump();
  EXPECT_EQ(done["progress"], 1.0);

  // same inputs through the library call
  ColorizeInputs in = resolve_request(*store_, parse_colorize_request(req));
  const Video direct = colorize(model(), in);
  for (int64_t k = 0; k < 5; ++k) {
    auto r = client_->Get("/results/" + done["result_id"].get<std::string>() + "/frame/" + std::to_string(k));
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    const auto png = encode_frame_png(direct[k]);
    EXPECT_EQ(r->body, std::string(png.begin(), png.end())) << k;
    // job ids resolve to their result as well
    auto rj = client_->Get("/jobs/x");
    EXPECT_EQ(rj->status, 404);
  }
  auto via_job = client_->Get("/results/" + st["job_id"].get<std::string>() + "/frame/0");
  EXPECT_EQ(via_job->status, 200);
  EXPECT_EQ(client_->Get("/results/" + done["result_id"].get<std::string>() + "/frame/5")->status, 404);
  EXPECT_EQ(nlohmann::json::parse(client_->Get("/results/" + done["result_id"].get<std::string>())->body)["frames"], 5);
}

TEST_F(Http, AutomaticModeAndNotDone) {
  const std::string vid = upload_video(quantized(to_grayscale(translating_clip(5, 16, 16, 1, 0, 5))));
  jobs_->set_paused(true);
  const auto st = post_json("/jobs/colorize", {{"gray_video_id", vid}, {"steps", 2}});
  EXPECT_EQ(st["state"], "queued");
  EXPECT_TRUE(st["result_id"].is_null());
  auto r = client_->Get("/results/" + st["job_id"].get<std::string>() + "/frame/0");
  EXPECT_EQ(r->status, 409);
  jobs_->set_paused(false);
  const auto done = poll(st["job_id"]);
  EXPECT_EQ(done["state"], "done");
  EXPECT_EQ(client_->Get("/results/" + st["job_id"].get<std::string>() + "/frame/4")->status, 200);
}

TEST_F(Http, Errors) {
  auto bad_zip = client_->Post("/assets/video", "not a zip", "application/zip");
  EXPECT_EQ(bad_zip->status, 400);
  EXPECT_EQ(client_->Post("/assets/exemplar", "nope", "image/png")->status, 400);
  EXPECT_EQ(client_->Post("/jobs/colorize", "{oops", "application/json")->status, 400);
  post_json("/jobs/colorize", {{"gray_video_id", "vdeadbeef"}}, 404);
  post_json("/jobs/colorize", {{"steps", 3}}, 400);
  const std::string vid = upload_video(quantized(to_grayscale(translating_clip(5, 16, 16, 1, 0, 5))));
  post_json("/jobs/colorize", {{"gray_video_id", vid}, {"exemplar_id", "emissing"}}, 404);
  post_json("/jobs/colorize",
            {{"gray_video_id", vid}, {"hints", {{"anchors", {{{"x", 99}, {"y", 0}, {"color", {1, 0, 0}}}}}}}}, 400);
  post_json("/jobs/colorize", {{"gray_video_id", vid}, {"prompt", std::string(400, 'x')}}, 400);
  EXPECT_EQ(client_->Get("/jobs/j12345")->status, 404);
  EXPECT_EQ(client_->Get("/results/rnothing/frame/0")->status, 404);
  EXPECT_EQ(client_->Get("/assets/video/" + vid + "/frame/9")->status, 404);
  EXPECT_EQ(client_->Get("/assets/video/" + vid + "/frame/0")->status, 200);
  post_json("/hints/preview", {{"video_id", "vnothing"}, {"hints", {{"anchors", nlohmann::json::array()}}}}, 404);
  post_json("/hints/preview", {{"hints", nlohmann::json::object()}}, 400);
}

TEST_F(Http, PreviewFollowsTranslation) {
  // content moves +2 px per frame to the right
  const Video v = quantized(translating_clip(5, 24, 24, 2, 0, 8, 1.5));
  const std::string vid = upload_video(v);
  const nlohmann::json hints{{"v", 1}, {"cell_side", 3}, {"anchors", {{{"x", 8}, {"y", 12}, {"color", {0, 1, 0}}}}}};
  const auto p = post_json("/hints/preview", {{"video_id", vid}, {"hints", hints}});
  ASSERT_EQ(p["frames"], 5);
  ASSERT_EQ(p["overlays"].size(), 5u);
  const HintSet tracked = hints_from_json(p["hints"]);
  ASSERT_EQ(tracked.anchors.at(0), hints_from_json(hints).anchors.at(0));
  const auto& traj = tracked.trajectories.at(0);
  for (size_t t = 1; t < traj.size(); ++t) {
    EXPECT_GE(traj[t].x - traj[t - 1].x, 1.5) << t;
    EXPECT_NEAR(traj[t].y, 12, 0.5);
  }
  EXPECT_FALSE(p["overlays"][0].get<std::string>().empty());
}
