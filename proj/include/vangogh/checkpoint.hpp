#pragma once

#include <openssl/evp.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "vangogh/model.hpp"
#include "vangogh/optim.hpp"
#include "vangogh/png.hpp"

namespace vangogh {

// Binary layout: 8-byte magic, u64 little-endian header length, JSON header,
// then the float32 payload of every tensor listed in the header, in order.
inline constexpr char kCheckpointMagic[8] = {'V', 'G', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  std::string stage;  // "init", "vae", "image", "video"
  int64_t step = 0;
  nlohmann::json train_config = nlohmann::json::object();
};

inline std::string sha256_hex(const std::vector<uint8_t>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_file_bytes(p)); }

// Writes to a sibling temp file and renames it over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, Errc::unwritable_path, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

namespace detail {

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline void put_floats(std::vector<uint8_t>& out, const Tensor<float>& t) {
  const size_t n = static_cast<size_t>(t.numel()) * sizeof(float);
  const size_t at = out.size();
  out.resize(at + n);
  std::memcpy(out.data() + at, t.data(), n);
}

}  // namespace detail

inline std::vector<uint8_t> serialize_checkpoint(const VanGoghModel<float>& model, const CheckpointInfo& info,
                                                 const AdamW<float>* opt = nullptr) {
  nlohmann::json h;
  h["version"] = kCheckpointVersion;
  h["model"] = model.config();
  h["latent_scale"] = model.latent_scale();
  h["latent_clip"] = model.latent_clip();
  h["stage"] = info.stage;
  h["step"] = info.step;
  h["train"] = info.train_config;
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<const Tensor<float>*> payload;
  for (const auto& e : model.store().entries()) {
    tensors.push_back({{"name", e.name}, {"kind", "param"}, {"group", group_name(e.group)}, {"shape", e.var.shape()}});
    payload.push_back(&e.var.value());
  }
  if (opt) {
    h["adam_steps"] = opt->steps();
    // parameter order keeps the payload independent of hash-map iteration
    for (const auto& e : model.store().entries()) {
      auto it = opt->slots().find(e.name);
      if (it == opt->slots().end()) continue;
      tensors.push_back({{"name", e.name}, {"kind", "adam_m"}, {"shape", e.var.shape()}});
      payload.push_back(&it->second.m);
      tensors.push_back({{"name", e.name}, {"kind", "adam_v"}, {"shape", e.var.shape()}});
      payload.push_back(&it->second.v);
    }
  }
  h["tensors"] = tensors;
  const std::string header = h.dump();
  std::vector<uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const auto* t : payload) detail::put_floats(out, *t);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const VanGoghModel<float>& model,
                            const CheckpointInfo& info, const AdamW<float>* opt = nullptr) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, serialize_checkpoint(model, info, opt));
}

struct LoadedCheckpoint {
  std::unique_ptr<VanGoghModel<float>> model;
  CheckpointInfo info;
  AdamW<float> optimizer;  // state only; hyperparameters come from the train config
  bool has_optimizer = false;
};

inline LoadedCheckpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
  auto bad = [](const std::string& what) { fail(Errc::bad_checkpoint, what); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) bad("not a checkpoint file");
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(bytes[8 + i]) << (8 * i);
  if (hlen > bytes.size() - 16) bad("truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<int64_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    bad(std::string("header is not JSON: ") + e.what());
  }
  if (!h.contains("version") || h["version"] != kCheckpointVersion) bad("unsupported checkpoint version");
  LoadedCheckpoint r;
  try {
    r.model = std::make_unique<VanGoghModel<float>>(h.at("model").get<ModelConfig>());
    r.model->set_latent_scale(h.at("latent_scale").get<double>());
    r.model->set_latent_clip(h.value("latent_clip", 0.0));
    r.info.stage = h.at("stage").get<std::string>();
    r.info.step = h.at("step").get<int64_t>();
    r.info.train_config = h.value("train", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    bad(std::string("malformed header: ") + e.what());
  }
  size_t at = 16 + hlen;
  size_t params_seen = 0;
  auto& store = r.model->store();
  for (const auto& t : h.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const std::string kind = t.at("kind").get<std::string>();
    const Shape shape = t.at("shape").get<Shape>();
    const auto* entry = store.find(name);
    if (!entry) bad("unknown tensor " + name);
    if (entry->var.shape() != shape) bad("shape mismatch for " + name);
    const size_t n = static_cast<size_t>(shape_numel(shape)) * sizeof(float);
    if (at + n > bytes.size()) bad("truncated payload at " + name);
    Tensor<float> value(shape);
    std::memcpy(value.data(), bytes.data() + at, n);
    at += n;
    if (kind == "param") {
      for (auto& e : store.entries())
        if (e.name == name) e.var.mutable_value() = std::move(value);
      ++params_seen;
    } else if (kind == "adam_m") {
      r.optimizer.slots()[name].m = std::move(value);
    } else if (kind == "adam_v") {
      r.optimizer.slots()[name].v = std::move(value);
    } else {
      bad("unknown tensor kind " + kind);
    }
  }
  if (params_seen != store.entries().size()) bad("checkpoint is missing parameters");
  if (at != bytes.size()) bad("trailing bytes after payload");
  if (h.contains("adam_steps")) {
    r.optimizer.set_steps(h["adam_steps"].get<int64_t>());
    r.has_optimizer = true;
  }
  return r;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  require(std::filesystem::is_regular_file(path), Errc::bad_checkpoint, "no checkpoint at " + path.string());
  return parse_checkpoint(read_file_bytes(path));
}

}  // namespace vangogh
