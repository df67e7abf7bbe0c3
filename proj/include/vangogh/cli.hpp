#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

#include "vangogh/metrics.hpp"
#include "vangogh/service_http.hpp"
#include "vangogh/toy.hpp"

namespace vangogh {

// Exit codes: 0 ok, 1 bad arguments (usage on err), 2 pipeline failure.
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

namespace detail {

struct LoadedModel {
  std::unique_ptr<VanGoghModel<float>> model;
  std::optional<std::string> sha256;
};

// Without a checkpoint the default (untrained) model is used.
inline LoadedModel load_model_or_default(const std::string& checkpoint) {
  if (checkpoint.empty()) return {std::make_unique<VanGoghModel<float>>(), std::nullopt};
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  return {std::move(ck.model), sha256_file(checkpoint)};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  write_file_atomic(p, std::vector<uint8_t>(s.begin(), s.end()));
}

inline nlohmann::json read_json_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_argument, path + ": " + e.what());
  }
}

struct ColorizeArgs {
  std::string gray, out, prompt, exemplar, hints, checkpoint;
  double lambda1 = 1.0, lambda2 = 1.0;
  int64_t steps = 50;
  uint64_t seed = 0;
  bool no_luma_replace = false;
};

inline int cmd_colorize(const ColorizeArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  ColorizeInputs in;
  in.gray = load_video(a.gray);
  if (!a.prompt.empty()) in.prompt = a.prompt;
  if (!a.exemplar.empty()) {
    auto f = decode_frame_png(read_file_bytes(a.exemplar));
    require(f.has_value(), Errc::undecodable_frame, "cannot decode exemplar " + a.exemplar);
    in.exemplar = *f;
  }
  if (!a.hints.empty()) in.hints = hints_from_json(read_json_file(a.hints));
  in.lambda1 = a.lambda1;
  in.lambda2 = a.lambda2;
  in.sample.steps = a.steps;
  in.sample.seed = a.seed;
  in.sample.replace_luma = !a.no_luma_replace;
  LoadedModel m = load_model_or_default(a.checkpoint);
  const double load_s = seconds_since(t0);

  const auto t1 = std::chrono::steady_clock::now();
  const Video result = colorize(*m.model, in);
  const double sample_s = seconds_since(t1);

  const auto t2 = std::chrono::steady_clock::now();
  save_video(result, a.out);
  const double write_s = seconds_since(t2);

  auto opt = [](const std::string& s) { return s.empty() ? nlohmann::json() : nlohmann::json(s); };
  nlohmann::json report{
      {"v", 1},
      {"frames", result.num_frames()},
      {"height", result.height()},
      {"width", result.width()},
      {"config",
       {{"gray", a.gray},
        {"out", a.out},
        {"prompt", opt(a.prompt)},
        {"exemplar", opt(a.exemplar)},
        {"hints", opt(a.hints)},
        {"lambda1", a.lambda1},
        {"lambda2", a.lambda2},
        {"steps", a.steps},
        {"seed", a.seed},
        {"luma_replace", !a.no_luma_replace},
        {"checkpoint", opt(a.checkpoint)},
        {"checkpoint_sha256", m.sha256 ? nlohmann::json(*m.sha256) : nlohmann::json()}}},
      {"timings", {{"load_s", load_s}, {"sample_s", sample_s}, {"write_s", write_s}, {"total_s", seconds_since(t0)}}},
  };
  write_text(std::filesystem::path(a.out) / "report.json", report.dump(2) + "\n");
  out << "wrote " << result.num_frames() << " frames to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, resume, stage = "all";
  int64_t log_every = 50;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig cfg = load_train_config(a.config);
  auto data = load_dataset(a.data, cfg.height, cfg.width);
  std::unique_ptr<VanGoghModel<float>> model;
  std::optional<LoadedCheckpoint> ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    model = std::move(ck->model);
  }
  Trainer tr(cfg, std::move(data), std::move(model));
  tr.set_output_dir(a.out);
  if (ck) tr.resume_from(*ck);
  tr.on_step = [&](const LossRow& r) {
    if (a.log_every > 0 && r.step % a.log_every == 0) out << phase_name(r.phase) << " " << format_loss_row(r) << "\n";
  };

  std::vector<Phase> phases;
  if (a.stage == "all") {
    phases = {Phase::vae, Phase::image, Phase::video};
    if (ck && ck->info.stage != "init")  // skip phases finished before the checkpoint
      while (phase_name(phases.front()) != ck->info.stage) phases.erase(phases.begin());
  } else {
    for (Phase p : {Phase::vae, Phase::image, Phase::video})
      if (a.stage == phase_name(p)) phases = {p};
  }
  for (Phase p : phases) tr.run_phase(p);

  const auto last = std::filesystem::path(a.out) / (std::string(phase_name(phases.back())) + ".ckpt");
  out << "checkpoint " << last.string() << " sha256 " << sha256_file(last) << "\n";
  return 0;
}

struct EvalArgs {
  std::string pred, gt, id, out;
  std::optional<double> fvmd, lpips;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const MetricReport r = evaluate(load_video(a.pred), load_video(a.gt), a.fvmd);
  const std::string id = a.id.empty() ? std::filesystem::path(a.gt).filename().string() : a.id;
  const std::string csv = std::string(kReportCsvHeader) + "\n" + report_csv_row(id, r, a.lpips) + "\n";
  if (!a.out.empty()) write_text(a.out, csv);
  out << csv;
  return 0;
}

struct HintArgs {
  std::string video, out;
  int64_t k = 0, cell = 3, superpixels = 64;
  uint64_t seed = 0;
};

inline int cmd_prepare_hints(const HintArgs& a, std::ostream& out) {
  const Video v = load_video(a.video);
  Rng rng(a.seed);
  HintSet h = sample_hints_fixed(superpixel_video(v, a.superpixels), rng, a.k, a.cell);
  h = track_hints(h, to_grayscale(v));
  write_text(a.out, to_json(h).dump(2) + "\n");
  out << "wrote " << h.anchors.size() << " hints to " << a.out << "\n";
  return 0;
}

struct ServeArgs {
  std::string host = "127.0.0.1", checkpoint, data_dir;
  int port = 8080;
};

inline int cmd_serve(const ServeArgs& a, std::ostream& out) {
  LoadedModel m = load_model_or_default(a.checkpoint);
  AssetStore store(a.data_dir.empty() ? AssetStore::default_root() : std::filesystem::path(a.data_dir));
  JobQueue jobs(*m.model, store);
  httplib::Server svr;
  register_routes(svr, store, jobs);
  require(svr.bind_to_port(a.host, a.port), Errc::io_error,
          "cannot bind " + a.host + ":" + std::to_string(a.port));
  out << "listening on " << a.host << ":" << a.port << "\n" << std::flush;
  svr.listen_after_bind();
  return 0;
}

}  // namespace detail

// args excludes the program name.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"vangogh: toy multimodal video colorization"};
  app.name("vangogh");
  app.require_subcommand(1);

  detail::ColorizeArgs ca;
  auto* colorize_cmd = app.add_subcommand("colorize", "Colorize a directory of gray frames");
  colorize_cmd->add_option("--gray", ca.gray, "Input frame directory")->required()->check(CLI::ExistingDirectory);
  colorize_cmd->add_option("--out", ca.out, "Output frame directory")->required();
  colorize_cmd->add_option("--prompt", ca.prompt, "Text prompt");
  colorize_cmd->add_option("--exemplar", ca.exemplar, "Exemplar PNG")->check(CLI::ExistingFile);
  colorize_cmd->add_option("--hints", ca.hints, "HintSet JSON")->check(CLI::ExistingFile);
  colorize_cmd->add_option("--lambda1", ca.lambda1, "Text weight in the fused condition");
  colorize_cmd->add_option("--lambda2", ca.lambda2, "Colour weight in the fused condition");
  colorize_cmd->add_option("--steps", ca.steps, "Denoising steps")->check(CLI::Range(1, 1000));
  colorize_cmd->add_option("--seed", ca.seed, "Sampling seed");
  colorize_cmd->add_option("--checkpoint", ca.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
  colorize_cmd->add_flag("--no-luma-replace", ca.no_luma_replace, "Keep the sampled luma");

  detail::TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train from a config and a clip directory tree");
  train_cmd->add_option("--config", ta.config, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", ta.data, "Dataset root (one subdirectory per clip)")
      ->required()
      ->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", ta.out, "Output directory for checkpoints and logs")->required();
  train_cmd->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train_cmd->add_option("--stage", ta.stage, "Phase to run")->check(CLI::IsMember({"all", "vae", "image", "video"}));
  train_cmd->add_option("--log-every", ta.log_every, "Print every N steps (0 = quiet)");

  detail::EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Compare a predicted clip with ground truth");
  eval_cmd->add_option("--pred", ea.pred, "Predicted frame directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--gt", ea.gt, "Ground-truth frame directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--fvmd", ea.fvmd, "Externally computed FVMD");
  eval_cmd->add_option("--lpips", ea.lpips, "Externally computed LPIPS");
  eval_cmd->add_option("--id", ea.id, "Row id (default: gt directory name)");
  eval_cmd->add_option("--out", ea.out, "CSV output file");

  detail::HintArgs ha;
  auto* hints_cmd = app.add_subcommand("prepare-hints", "Sample and track hints for a clip");
  hints_cmd->add_option("--video", ha.video, "Frame directory")->required()->check(CLI::ExistingDirectory);
  hints_cmd->add_option("--k", ha.k, "Number of hints")->required()->check(CLI::NonNegativeNumber);
  hints_cmd->add_option("--seed", ha.seed, "Sampling seed");
  hints_cmd->add_option("--cell", ha.cell, "Cell side in pixels")->check(CLI::PositiveNumber);
  hints_cmd->add_option("--superpixels", ha.superpixels, "Superpixel count")->check(CLI::PositiveNumber);
  hints_cmd->add_option("--out", ha.out, "HintSet JSON output")->required();

  detail::ServeArgs sa;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP/JSON service");
  serve_cmd->add_option("--host", sa.host, "Bind address");
  serve_cmd->add_option("--port", sa.port, "Port")->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
  serve_cmd->add_option("--data-dir", sa.data_dir, "Asset root (default: $VANGOGH_DATA_DIR or ./vangogh_data)");

  std::string toy_out, toy_config;
  auto* toy_cmd = app.add_subcommand("make-toy-data", "Write the synthetic toy clips and config");
  toy_cmd->add_option("--out", toy_out, "Dataset root")->required();
  toy_cmd->add_option("--config", toy_config, "Also write the toy TrainConfig JSON here");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n"
        << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitUsage;
  }

  try {
    if (*colorize_cmd) return detail::cmd_colorize(ca, out);
    if (*train_cmd) return detail::cmd_train(ta, out);
    if (*eval_cmd) return detail::cmd_eval(ea, out);
    if (*hints_cmd) return detail::cmd_prepare_hints(ha, out);
    if (*serve_cmd) return detail::cmd_serve(sa, out);
    if (*toy_cmd) {
      write_toy_dataset(toy_out);
      if (!toy_config.empty()) detail::write_text(toy_config, nlohmann::json(toy_train_config()).dump(2) + "\n");
      out << "wrote toy clips to " << toy_out << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace vangogh
