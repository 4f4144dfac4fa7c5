#pragma once

// Run configuration: one JSON file, every field optional (defaults below),
// unknown keys rejected. Validation errors name the offending field.
//
// {
//   "seed": 0,
//   "data": {"train": "...", "val": "...", "test": "..."},
//   "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
//   "unet": {"in_channels": 1, "base_channels": 16, "channel_mults": [1,2,4],
//            "blocks_per_level": 2, "groups": 4, "attention": false},
//   "encoder": {"layers": 4, "d_model": 64, "heads": 4, "max_len": 64,
//               "mode": "alternating", "window": 16, "global_every": 3},
//   "fusion": {"d_vis": 128, "d_attn": 128, "heads": 4, "classifier_hidden": 64},
//   "features": {"timesteps": [50,150,250], "blocks": [4,6,8,12]},
//   "optimizer": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
//   "pretrain": {"steps": 2000, "lr": 1e-4},
//   "epochs": 50,
//   "smooth": 1.0,
//   "output_dir": "runs"
// }

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ftd/segmentation.hpp"

namespace ftd {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataPaths {
  std::string train;
  std::string val;
  std::string test;
};

struct PretrainConfig {
  std::size_t steps = 2000;
  double lr = 1e-4;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataPaths data;
  ModelConfig model;
  AdamConfig optimizer;
  PretrainConfig pretrain;
  std::size_t epochs = 50;
  double smooth = 1.0;
  std::string output_dir = "runs";

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

namespace detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + ": wrong type");
    }
  }

  Reader child(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown field");
  }

 private:
  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Reader r(j, "");
  r.get("seed", c.seed);
  {
    auto d = r.child("data");
    d.get("train", c.data.train);
    d.get("val", c.data.val);
    d.get("test", c.data.test);
    d.finish();
  }
  {
    auto s = r.child("schedule");
    s.get("T", c.model.schedule.T);
    s.get("beta_start", c.model.schedule.beta_start);
    s.get("beta_end", c.model.schedule.beta_end);
    s.finish();
  }
  {
    auto u = r.child("unet");
    u.get("in_channels", c.model.unet.in_channels);
    u.get("base_channels", c.model.unet.base_channels);
    u.get("channel_mults", c.model.unet.channel_mults);
    u.get("blocks_per_level", c.model.unet.blocks_per_level);
    u.get("groups", c.model.unet.groups);
    u.get("attention", c.model.unet.attention);
    u.finish();
  }
  {
    auto e = r.child("encoder");
    auto& ec = c.model.encoder;
    e.get("layers", ec.layers);
    e.get("d_model", ec.d_model);
    e.get("heads", ec.heads);
    e.get("max_len", ec.max_len);
    std::string mode = to_string(ec.mode);
    e.get("mode", mode);
    try {
      ec.mode = attention_mode_from_string(mode);
    } catch (const std::invalid_argument&) {
      throw ConfigError("encoder.mode: expected \"dense\" or \"alternating\", got \"" + mode + "\"");
    }
    e.get("window", ec.window);
    e.get("global_every", ec.global_every);
    e.finish();
  }
  {
    auto f = r.child("fusion");
    f.get("d_vis", c.model.fusion.d_vis);
    f.get("d_attn", c.model.fusion.d_attn);
    f.get("heads", c.model.fusion.heads);
    f.get("classifier_hidden", c.model.fusion.classifier_hidden);
    f.finish();
  }
  {
    auto f = r.child("features");
    f.get("timesteps", c.model.features.timesteps);
    f.get("blocks", c.model.features.blocks);
    f.finish();
  }
  {
    auto o = r.child("optimizer");
    o.get("lr", c.optimizer.lr);
    o.get("beta1", c.optimizer.beta1);
    o.get("beta2", c.optimizer.beta2);
    o.get("eps", c.optimizer.eps);
    o.finish();
  }
  {
    auto p = r.child("pretrain");
    p.get("steps", c.pretrain.steps);
    p.get("lr", c.pretrain.lr);
    p.finish();
  }
  r.get("epochs", c.epochs);
  r.get("smooth", c.smooth);
  r.get("output_dir", c.output_dir);
  r.finish();
  return c;
}

inline nlohmann::json RunConfig::to_json() const {
  const auto& m = model;
  return {
      {"seed", seed},
      {"data", {{"train", data.train}, {"val", data.val}, {"test", data.test}}},
      {"schedule", {{"T", m.schedule.T}, {"beta_start", m.schedule.beta_start}, {"beta_end", m.schedule.beta_end}}},
      {"unet",
       {{"in_channels", m.unet.in_channels},
        {"base_channels", m.unet.base_channels},
        {"channel_mults", m.unet.channel_mults},
        {"blocks_per_level", m.unet.blocks_per_level},
        {"groups", m.unet.groups},
        {"attention", m.unet.attention}}},
      {"encoder",
       {{"layers", m.encoder.layers},
        {"d_model", m.encoder.d_model},
        {"heads", m.encoder.heads},
        {"max_len", m.encoder.max_len},
        {"mode", to_string(m.encoder.mode)},
        {"window", m.encoder.window},
        {"global_every", m.encoder.global_every}}},
      {"fusion",
       {{"d_vis", m.fusion.d_vis},
        {"d_attn", m.fusion.d_attn},
        {"heads", m.fusion.heads},
        {"classifier_hidden", m.fusion.classifier_hidden}}},
      {"features", {{"timesteps", m.features.timesteps}, {"blocks", m.features.blocks}}},
      {"optimizer",
       {{"lr", optimizer.lr}, {"beta1", optimizer.beta1}, {"beta2", optimizer.beta2}, {"eps", optimizer.eps}}},
      {"pretrain", {{"steps", pretrain.steps}, {"lr", pretrain.lr}}},
      {"epochs", epochs},
      {"smooth", smooth},
      {"output_dir", output_dir},
  };
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  const auto& s = model.schedule;
  if (s.T < 2) fail("schedule.T", "must be >= 2");
  if (!(s.beta_start > 0.0 && s.beta_start < 1.0)) fail("schedule.beta_start", "must be in (0, 1)");
  if (!(s.beta_end >= s.beta_start && s.beta_end < 1.0)) fail("schedule.beta_end", "must be in [beta_start, 1)");
  try {
    model.unet.validate();
    model.encoder.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto& f = model.fusion;
  if (f.d_vis == 0) fail("fusion.d_vis", "must be positive");
  if (f.heads == 0) fail("fusion.heads", "must be positive");
  if (f.d_attn == 0 || f.d_attn % f.heads != 0) fail("fusion.d_attn", "must be a positive multiple of fusion.heads");
  const auto& ft = model.features;
  if (ft.timesteps.empty()) fail("features.timesteps", "must not be empty");
  for (int t : ft.timesteps)
    if (t < 1 || t > s.T) fail("features.timesteps", "entry " + std::to_string(t) + " outside [1, schedule.T]");
  if (std::set<int>(ft.timesteps.begin(), ft.timesteps.end()).size() != ft.timesteps.size())
    fail("features.timesteps", "duplicate entry");
  const int nblocks = static_cast<int>(list_blocks(model.unet).size());
  if (ft.blocks.empty()) fail("features.blocks", "must not be empty");
  for (int b : ft.blocks)
    if (b < 1 || b > nblocks)
      fail("features.blocks", "entry " + std::to_string(b) + " outside [1, " + std::to_string(nblocks) + "]");
  if (std::set<int>(ft.blocks.begin(), ft.blocks.end()).size() != ft.blocks.size())
    fail("features.blocks", "duplicate entry");
  if (!(optimizer.lr >= 0.0)) fail("optimizer.lr", "must be >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) fail("optimizer.beta1", "must be in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) fail("optimizer.beta2", "must be in [0, 1)");
  if (!(optimizer.eps > 0.0)) fail("optimizer.eps", "must be positive");
  if (!(pretrain.lr >= 0.0)) fail("pretrain.lr", "must be >= 0");
  if (!(smooth > 0.0)) fail("smooth", "must be positive");
  if (output_dir.empty()) fail("output_dir", "must not be empty");
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return RunConfig::from_json(j);
}

/// Seed precedence: command-line flag > FTD_SEED > config file.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t file_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("FTD_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError("FTD_SEED: not an unsigned integer: " + std::string(env));
    return v;
  }
  return file_seed;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (sorted-key, compact) resolved config.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(c.to_json().dump())); }

}  // namespace ftd
