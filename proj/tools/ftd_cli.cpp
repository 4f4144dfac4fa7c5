// ftd: command-line front end.
//
// Exit codes: 0 success, 1 validation error (bad flag, config field, missing
// input), 2 runtime failure. Every command that has an --out directory leaves
// a run.json there, including on failure.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ftd/checks.hpp"
#include "ftd/config.hpp"
#include "ftd/segmentation.hpp"
#include "ftd/synthetic.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kFusionTol = 1e-5;
constexpr double kUnetTol = 1e-4;

// Thrown for failures detected before any work starts (exit 1).
struct ValidationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Run {
  std::string command;
  fs::path out;
  std::optional<std::string> config_hash;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> artifacts;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  fs::path artifact(const std::string& rel) {
    artifacts.push_back(rel);
    return out / rel;
  }

  void write(int exit_code, const std::string& error) const {
    if (out.empty()) return;
    std::error_code ec;
    fs::create_directories(out, ec);
    json j;
    j["command"] = command;
    j["exit_code"] = exit_code;
    j["status"] = exit_code == 0 ? "ok" : "error";
    j["config_hash"] = config_hash ? json(*config_hash) : json(nullptr);
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    j["artifacts"] = artifacts;
    if (!error.empty()) j["error"] = error;
    std::ofstream os(out / "run.json");
    os << j.dump(2) << '\n';
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ValidationFailure(what + ": no path given");
  if (!fs::is_regular_file(p)) throw ValidationFailure(what + ": file not found: " + p.string());
}

// Config file + seed precedence; relative data paths resolve against the
// config file's directory. Echoes the resolved config to --out.
ftd::RunConfig resolve_config(Run& run, const std::string& path, std::optional<std::uint64_t> seed_flag) {
  require_file(path, "--config");
  ftd::RunConfig cfg = ftd::load_run_config(path);
  cfg.seed = ftd::resolve_seed(seed_flag, cfg.seed);
  const fs::path base = fs::path(path).parent_path();
  for (std::string* p : {&cfg.data.train, &cfg.data.val, &cfg.data.test})
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  cfg.validate();
  run.seed = cfg.seed;
  run.config_hash = ftd::config_hash(cfg);
  return cfg;
}

void echo_config(Run& run, const ftd::RunConfig& cfg) { write_json(run.artifact("config.json"), cfg.to_json()); }

std::string split_manifest(const ftd::RunConfig& cfg, const std::string& split) {
  if (split == "train") return cfg.data.train;
  if (split == "val") return cfg.data.val;
  if (split == "test") return cfg.data.test;
  return split;  // explicit manifest path
}

template <typename Fn>
int guarded(Run& run, Fn&& body) {
  bool validated = false;
  try {
    body(validated);
    run.write(0, "");
    return 0;
  } catch (const std::exception& e) {
    const int code = validated ? 2 : 1;
    std::cerr << "ftd " << run.command << ": " << e.what() << '\n';
    run.write(code, e.what());
    return code;
  }
}

ftd::SegModel<float> load_model(const ftd::RunConfig& cfg, const fs::path& ckpt) {
  ftd::SegModel<float> model(cfg.model, cfg.seed);
  ftd::load_params(ftd::Checkpoint::load(ckpt), model.named_params());
  return model;
}

std::vector<std::size_t> parse_sizes(const std::string& csv, const std::string& flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValidationFailure(flag + ": expected positive integers, got '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationFailure(flag + ": empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-conditioned diffusion-feature segmentation at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, unet_ckpt, split = "test", splits, lengths = "128,512",
                                                               modes = "dense,alternating";
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::size_t> epochs_flag;
  std::uint64_t data_seed = 0;
  std::size_t n = 0, size = 64, reps = 5, min_images = 20;

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic split (or several) with PGM files and a manifest");
  gen->add_option("--seed", data_seed, "Generator seed");
  gen->add_option("--n", n, "Number of scenes (single manifest.json)");
  gen->add_option("--splits", splits, "Comma-separated sizes written as train/val/test manifests");
  gen->add_option("--size", size, "Image side length in pixels");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Train the U-Net denoiser on the training images");
  pre->add_option("--config", config_path)->required();
  pre->add_option("--seed", seed_flag);
  pre->add_option("--out", out_dir)->required();

  auto* trn = app.add_subcommand("train", "Train the cross-modal block and pixel classifier");
  trn->add_option("--config", config_path)->required();
  trn->add_option("--unet-ckpt", unet_ckpt, "Checkpoint from pretrain")->required();
  trn->add_option("--epochs", epochs_flag, "Override the config's epoch count");
  trn->add_option("--seed", seed_flag);
  trn->add_option("--out", out_dir)->required();

  auto* ev = app.add_subcommand("eval", "Per-sample Dice/IoU, summary and predicted masks");
  ev->add_option("--config", config_path)->required();
  ev->add_option("--ckpt", ckpt_path)->required();
  ev->add_option("--split", split, "train, val, test, or a manifest path");
  ev->add_option("--seed", seed_flag);
  ev->add_option("--out", out_dir)->required();

  auto* abl = app.add_subcommand("ablate", "Matched vs. deranged text evaluation");
  abl->add_option("--config", config_path)->required();
  abl->add_option("--ckpt", ckpt_path)->required();
  abl->add_option("--split", split, "train, val, test, or a manifest path");
  abl->add_option("--seed", seed_flag);
  abl->add_option("--out", out_dir)->required();

  auto* benc = app.add_subcommand("bench-encoder", "Median encoder latency per attention mode and length");
  benc->add_option("--lengths", lengths);
  benc->add_option("--modes", modes);
  benc->add_option("--reps", reps, "Timed repetitions (>= 5)");
  benc->add_option("--config", config_path, "Optional config supplying the encoder shape");
  benc->add_option("--out", out_dir)->required();

  auto* bpipe = app.add_subcommand("bench-pipeline", "Median per-image inference seconds");
  bpipe->add_option("--config", config_path)->required();
  bpipe->add_option("--ckpt", ckpt_path)->required();
  bpipe->add_option("--split", split);
  bpipe->add_option("--images", min_images, "Timed images (>= 20)");
  bpipe->add_option("--out", out_dir)->required();

  auto* gck = app.add_subcommand("gradcheck", "Finite-difference checks of the trained subgraphs");
  gck->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  Run run;
  run.command = app.get_subcommands().front()->get_name();
  run.out = out_dir;

  if (*gen) {
    return guarded(run, [&](bool& validated) {
      if (size == 0) throw ValidationFailure("--size: must be positive");
      std::vector<std::size_t> counts;
      if (!splits.empty()) {
        if (n != 0) throw ValidationFailure("--n and --splits are mutually exclusive");
        counts = parse_sizes(splits, "--splits");
        if (counts.size() > 3) throw ValidationFailure("--splits: at most three sizes (train,val,test)");
      } else if (n == 0) {
        throw ValidationFailure("--n: must be >= 1 (or use --splits)");
      }
      run.seed = data_seed;
      validated = true;
      if (counts.empty()) {
        ftd::generate_dataset(data_seed, n, size, run.out, "manifest.json");
        run.artifacts.push_back("manifest.json");
        return;
      }
      static const char* names[] = {"train", "val", "test"};
      for (std::size_t k = 0; k < counts.size(); ++k) {
        ftd::RngState r = ftd::RngState::derive(data_seed, {0x73706c74 /* "splt" */, k});
        const std::string manifest = std::string(names[k]) + ".json";
        ftd::generate_dataset(r.next_u64(), counts[k], size, run.out, manifest);
        run.artifacts.push_back(manifest);
      }
    });
  }

  if (*pre) {
    return guarded(run, [&](bool& validated) {
      const ftd::RunConfig cfg = resolve_config(run, config_path, seed_flag);
      require_file(cfg.data.train, "data.train");
      validated = true;
      fs::create_directories(run.out);
      echo_config(run, cfg);
      const auto data = ftd::load_dataset(cfg.data.train);
      std::vector<ftd::Tensor<float>> images;
      for (const auto& s : data) images.push_back(s.image);
      ftd::UNet<float> unet(cfg.model.unet, cfg.seed);
      ftd::AdamState<float> adam;
      adam.config = cfg.optimizer;
      adam.config.lr = cfg.pretrain.lr;
      ftd::RngState rng = ftd::RngState::derive(cfg.seed, {0x70726574 /* "pret" */});
      const auto losses = ftd::train_denoiser(images, unet, ftd::linear_schedule(cfg.model.schedule.T,
                                              cfg.model.schedule.beta_start, cfg.model.schedule.beta_end),
                                              cfg.pretrain.steps, rng, adam);
      ftd::write_loss_csv(run.artifact("pretrain_loss.csv"), losses);
      ftd::Checkpoint ck;
      ftd::save_params(ck, unet.named_params());
      ck.save(run.artifact("unet.ckpt"));
    });
  }

  if (*trn) {
    return guarded(run, [&](bool& validated) {
      ftd::RunConfig cfg = resolve_config(run, config_path, seed_flag);
      if (epochs_flag) {
        cfg.epochs = *epochs_flag;
        run.config_hash = ftd::config_hash(cfg);
      }
      require_file(cfg.data.train, "data.train");
      require_file(unet_ckpt, "--unet-ckpt");
      validated = true;
      fs::create_directories(run.out);
      echo_config(run, cfg);
      ftd::SegModel<float> model(cfg.model, cfg.seed);
      ftd::load_params(ftd::Checkpoint::load(unet_ckpt), model.unet().named_params());
      auto save_all = [&](const std::string& name) {
        ftd::Checkpoint ck;
        ftd::save_params(ck, model.named_params());
        ck.save(run.artifact(name));
      };
      save_all("init.ckpt");
      const auto data = ftd::load_dataset(cfg.data.train);
      ftd::AdamState<float> adam;
      adam.config = cfg.optimizer;
      ftd::RngState rng = ftd::RngState::derive(cfg.seed, {0x74726e67 /* "trng" */});
      ftd::SegTrainConfig tc{cfg.epochs, cfg.smooth};
      const auto log = ftd::train_segmentation(model, data, tc, rng, adam, [](const ftd::EpochStats& e) {
        std::cerr << "epoch " << e.epoch << " loss " << e.loss << " dice " << e.train_dice << '\n';
      });
      ftd::write_epoch_csv(run.artifact("epochs.csv"), log);
      save_all("model.ckpt");
    });
  }

  if (*ev) {
    return guarded(run, [&](bool& validated) {
      const ftd::RunConfig cfg = resolve_config(run, config_path, seed_flag);
      const std::string manifest = split_manifest(cfg, split);
      require_file(manifest, "--split " + split);
      require_file(ckpt_path, "--ckpt");
      validated = true;
      fs::create_directories(run.out);
      echo_config(run, cfg);
      auto model = load_model(cfg, ckpt_path);
      const auto report = ftd::evaluate(model, ftd::load_dataset(manifest));
      ftd::write_eval_csv(run.artifact("metrics.csv"), report);
      write_json(run.artifact("summary.json"), ftd::eval_summary(report));
      ftd::write_mask_pgms(run.out / "masks", report);
      run.artifacts.push_back("masks/");
      std::cout << "mean_dice " << report.mean_dice << " mean_iou " << report.mean_iou << " n " << report.n
                << " all_foreground_dice " << report.all_foreground_dice << '\n';
    });
  }

  if (*abl) {
    return guarded(run, [&](bool& validated) {
      const ftd::RunConfig cfg = resolve_config(run, config_path, seed_flag);
      const std::string manifest = split_manifest(cfg, split);
      require_file(manifest, "--split " + split);
      require_file(ckpt_path, "--ckpt");
      validated = true;
      fs::create_directories(run.out);
      echo_config(run, cfg);
      auto model = load_model(cfg, ckpt_path);
      ftd::RngState rng = ftd::RngState::derive(cfg.seed, {0x61626c74 /* "ablt" */});
      const auto r = ftd::ablate_text(model, ftd::load_dataset(manifest), rng);
      write_json(run.artifact("ablation.json"),
                 {{"n", r.matched.n},
                  {"matched_mean_dice", r.matched.mean_dice},
                  {"permuted_mean_dice", r.permuted.mean_dice},
                  {"difference", r.difference()},
                  {"matched_mean_iou", r.matched.mean_iou},
                  {"permuted_mean_iou", r.permuted.mean_iou},
                  {"all_foreground_mean_dice", r.matched.all_foreground_dice},
                  {"permutation", r.permutation}});
      std::cout << "matched " << r.matched.mean_dice << " permuted " << r.permuted.mean_dice << '\n';
    });
  }

  if (*benc) {
    return guarded(run, [&](bool& validated) {
      ftd::EncoderConfig enc;
      if (!config_path.empty()) enc = resolve_config(run, config_path, std::nullopt).model.encoder;
      const auto lens = parse_sizes(lengths, "--lengths");
      std::vector<ftd::AttentionMode> ms;
      std::stringstream ss(modes);
      for (std::string m; std::getline(ss, m, ',');) {
        try {
          ms.push_back(ftd::attention_mode_from_string(m));
        } catch (const std::invalid_argument&) {
          throw ValidationFailure("--modes: unknown mode '" + m + "'");
        }
      }
      if (reps < 5) throw ValidationFailure("--reps: must be >= 5");
      validated = true;
      fs::create_directories(run.out);
      ftd::write_bench_csv(run.artifact("bench_encoder.csv"), ftd::benchmark_encoder(enc, lens, ms, reps));
    });
  }

  if (*bpipe) {
    return guarded(run, [&](bool& validated) {
      const ftd::RunConfig cfg = resolve_config(run, config_path, std::nullopt);
      const std::string manifest = split_manifest(cfg, split);
      require_file(manifest, "--split " + split);
      require_file(ckpt_path, "--ckpt");
      if (min_images < 20) throw ValidationFailure("--images: must be >= 20");
      validated = true;
      fs::create_directories(run.out);
      auto model = load_model(cfg, ckpt_path);
      const auto data = ftd::load_dataset(manifest);
      const double median = ftd::benchmark_pipeline(model, data, min_images);
      std::ofstream os(run.artifact("bench_pipeline.csv"));
      os.precision(9);
      os << "images,median_s\n" << std::max(min_images, data.size()) << ',' << median << '\n';
    });
  }

  if (*gck) {
    return guarded(run, [&](bool& validated) {
      validated = true;
      fs::create_directories(run.out);
      const double fusion = ftd::fusion_head_grad_error();
      const double unet = ftd::unet_ddpm_grad_error();
      const bool ok = fusion < kFusionTol && unet < kUnetTol;
      write_json(run.artifact("gradcheck.json"),
                 {{"fusion_head", {{"max_rel_error", fusion}, {"tolerance", kFusionTol}}},
                  {"unet_ddpm", {{"max_rel_error", unet}, {"tolerance", kUnetTol}}},
                  {"pass", ok}});
      std::cout << "fusion_head " << fusion << " unet_ddpm " << unet << '\n';
      if (!ok) throw std::runtime_error("gradient check above tolerance");
    });
  }
  return 1;
}
