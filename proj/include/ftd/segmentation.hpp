#pragma once

// Text-conditioned segmentation model: frozen U-Net features + frozen text
// encoder feeding the trainable cross-modal block and pixel classifier.
// Training, evaluation, the text-derangement ablation and the pipeline timer.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftd/adam.hpp"
#include "ftd/checkpoint.hpp"
#include "ftd/diffusion.hpp"
#include "ftd/fusion.hpp"
#include "ftd/metrics.hpp"
#include "ftd/synthetic.hpp"
#include "ftd/text_encoder.hpp"
#include "ftd/unet.hpp"

namespace ftd {

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return linear_schedule(T, beta_start, beta_end); }
};

struct FeatureConfig {
  std::vector<int> timesteps{50, 150, 250};
  std::vector<int> blocks{4, 6, 8, 12};
};

struct ModelConfig {
  UNetConfig unet;
  EncoderConfig encoder;
  FusionConfig fusion;
  ScheduleConfig schedule;
  FeatureConfig features;
};

template <typename T>
class SegModel {
 public:
  SegModel(const ModelConfig& cfg, std::uint64_t seed, Vocab vocab = Vocab::from_words(grammar_words()))
      : config_(cfg),
        seed_(seed),
        unet_(cfg.unet, seed),
        vocab_(std::move(vocab)),
        textenc_(cfg.encoder, vocab_.size(), seed),
        schedule_(cfg.schedule.build()) {
    cfg.fusion.validate();
    for (int t : cfg.features.timesteps) schedule_.check_t(t);
    const std::size_t c_total = feature_channels(cfg.unet, cfg.features.timesteps.size(), cfg.features.blocks);
    RngState rng = RngState::derive(seed, {0x68656164 /* "head" */});
    fusion_ = CrossModalParams<T>(c_total, cfg.encoder.d_model, cfg.fusion, rng);
    clf_ = PixelClassifier<T>(cfg.fusion.d_vis, cfg.fusion.classifier_hidden, rng);
    unet_.set_trainable(false);
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  UNet<T>& unet() noexcept { return unet_; }
  TextEncoder<T>& text_encoder() noexcept { return textenc_; }
  const Vocab& vocab() const noexcept { return vocab_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  CrossModalParams<T>& fusion() noexcept { return fusion_; }
  PixelClassifier<T>& classifier() noexcept { return clf_; }

  std::vector<NamedParam<T>> trainable_params() {
    std::vector<NamedParam<T>> out;
    fusion_.collect(out);
    clf_.collect(out);
    return out;
  }

  /// Every parameter, checkpoint order: unet., textenc., fusion., pixclf.
  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out = unet_.named_params();
    for (auto& p : textenc_.named_params()) out.push_back(p);
    for (auto& p : trainable_params()) out.push_back(p);
    return out;
  }

  TextEmbedding<T> embed_text(const std::string& text) const {
    if (text.empty()) throw std::invalid_argument("missing text");
    return textenc_.encode(tokenize(text, vocab_, config_.encoder.max_len));
  }

  FeatureTaps<T> taps(const Tensor<T>& image, std::uint64_t sample_id) {
    return extract_taps(image, unet_, schedule_, config_.features.timesteps, config_.features.blocks, seed_,
                        sample_id);
  }

  Var<T> logits(const FeatureTaps<T>& taps, const TextEmbedding<T>& text) {
    const FeatureStack<T> fs = assemble_stack(taps);
    return pixel_classify(cross_modal_attend(constant(fs.data), text, fusion_), clf_);
  }

 private:
  ModelConfig config_;
  std::uint64_t seed_;
  UNet<T> unet_;
  Vocab vocab_;
  TextEncoder<T> textenc_;
  NoiseSchedule schedule_;
  CrossModalParams<T> fusion_;
  PixelClassifier<T> clf_;
};

template <typename T>
Tensor<T> image_as(const Sample& s) {
  return s.image.template cast<T>();
}

inline void check_samples(const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("empty dataset");
  for (const auto& s : data)
    if (s.text.empty()) throw std::invalid_argument("missing text for sample " + std::to_string(s.id));
}

/// Frozen-path outputs for one sample. Valid to reuse across epochs because the
/// backbone and encoder never change and feature noise is keyed by sample id.
template <typename T>
struct PreparedSample {
  std::size_t id;
  FeatureTaps<T> taps;
  TextEmbedding<T> text;
  const SegMask* mask;
};

template <typename T>
std::vector<PreparedSample<T>> prepare(SegModel<T>& model, const std::vector<Sample>& data) {
  std::vector<PreparedSample<T>> out;
  out.reserve(data.size());
  for (const auto& s : data)
    out.push_back({s.id, model.taps(image_as<T>(s), s.id), model.embed_text(s.text), &s.mask});
  return out;
}

struct SegTrainConfig {
  std::size_t epochs = 50;
  double smooth = 1.0;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double dice_loss = 0.0;
  double ce_loss = 0.0;
  double train_dice = 0.0;
};

/// Batch size 1, per-epoch shuffled order, Adam on fusion + classifier only.
template <typename T>
std::vector<EpochStats> train_segmentation(SegModel<T>& model, const std::vector<Sample>& data,
                                           const SegTrainConfig& cfg, RngState& rng, AdamState<T>& adam,
                                           const std::function<void(const EpochStats&)>& on_epoch = {}) {
  check_samples(data);
  std::vector<EpochStats> log;
  if (cfg.epochs == 0) return log;
  const auto params = model.trainable_params();
  const auto cache = prepare(model, data);
  std::vector<std::size_t> order(cache.size());
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next_index(i)]);
    EpochStats st;
    st.epoch = e;
    for (std::size_t idx : order) {
      const auto& ps = cache[idx];
      zero_grad(params);
      Var<T> z = model.logits(ps.taps, ps.text);
      CombinedLoss<T> loss = combined_loss(z, *ps.mask, cfg.smooth);
      backward(loss.total);
      adam_step(params, adam);
      st.loss += loss.total.value().item();
      st.dice_loss += loss.dice;
      st.ce_loss += loss.ce;
      st.train_dice += dice_metric(SegMask::from_logits(z.value()), *ps.mask);
    }
    const auto n = static_cast<double>(cache.size());
    st.loss /= n;
    st.dice_loss /= n;
    st.ce_loss /= n;
    st.train_dice /= n;
    log.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return log;
}

struct EvalRow {
  std::size_t sample_id;
  double dice;
  double iou;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<SegMask> predictions;
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  double all_foreground_dice = 0.0;  // constant predictor reference
  double all_foreground_iou = 0.0;
  std::size_t n = 0;
};

/// Mean of per-image metrics. `texts`, when given, replaces each sample's text
/// (same order as `data`).
template <typename T>
EvalReport evaluate(SegModel<T>& model, const std::vector<Sample>& data,
                    const std::vector<std::string>* texts = nullptr) {
  check_samples(data);
  if (texts && texts->size() != data.size()) throw std::invalid_argument("evaluate: text count mismatch");
  EvalReport r;
  r.n = data.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    const Var<T> z = model.logits(model.taps(image_as<T>(s), s.id), model.embed_text(texts ? (*texts)[i] : s.text));
    SegMask pred = SegMask::from_logits(z.value());
    const EvalRow row{s.id, dice_metric(pred, s.mask), iou_metric(pred, s.mask)};
    const SegMask all = SegMask::full(s.mask.height, s.mask.width, 1);
    r.all_foreground_dice += dice_metric(all, s.mask);
    r.all_foreground_iou += iou_metric(all, s.mask);
    r.mean_dice += row.dice;
    r.mean_iou += row.iou;
    r.rows.push_back(row);
    r.predictions.push_back(std::move(pred));
  }
  const auto n = static_cast<double>(r.n);
  r.mean_dice /= n;
  r.mean_iou /= n;
  r.all_foreground_dice /= n;
  r.all_foreground_iou /= n;
  return r;
}

/// Uniform random cyclic permutation (Sattolo): perm[i] != i for every i.
inline std::vector<std::size_t> random_derangement(std::size_t n, RngState& rng) {
  if (n < 2) throw std::invalid_argument("cannot derange fewer than 2 samples");
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.next_index(i)]);
  return p;
}

struct AblationReport {
  EvalReport matched;
  EvalReport permuted;
  std::vector<std::size_t> permutation;  // sample i evaluated with text of sample permutation[i]
  double difference() const { return matched.mean_dice - permuted.mean_dice; }
};

template <typename T>
AblationReport ablate_text(SegModel<T>& model, const std::vector<Sample>& data, RngState& rng) {
  if (data.size() < 2) throw std::invalid_argument("ablate: dataset too small to derange (need >= 2 samples)");
  AblationReport r;
  r.permutation = random_derangement(data.size(), rng);
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < data.size(); ++i) texts.push_back(data[r.permutation[i]].text);
  r.matched = evaluate(model, data);
  r.permuted = evaluate(model, data, &texts);
  return r;
}

/// Full inference (features, text, fusion, classifier) per image: 2 warm-up
/// runs, then one timed run per image, median seconds.
template <typename T>
double benchmark_pipeline(SegModel<T>& model, const std::vector<Sample>& data, std::size_t min_images = 20) {
  check_samples(data);
  std::vector<double> times;
  auto run = [&](const Sample& s) {
    const Var<T> z = model.logits(model.taps(image_as<T>(s), s.id), model.embed_text(s.text));
    return z.value()[0];
  };
  volatile T sink = 0;
  for (int w = 0; w < 2; ++w) sink = sink + run(data[static_cast<std::size_t>(w) % data.size()]);
  const std::size_t reps = std::max(min_images, data.size());
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = sink + run(data[i % data.size()]);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
  return times[times.size() / 2];
}

inline void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochStats>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(9);
  os << "epoch,loss,dice_loss,ce_loss,train_dice\n";
  for (const auto& e : log)
    os << e.epoch << ',' << e.loss << ',' << e.dice_loss << ',' << e.ce_loss << ',' << e.train_dice << '\n';
}

inline void write_eval_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  os << "sample_id,dice,iou\n";
  for (const auto& row : r.rows) os << row.sample_id << ',' << row.dice << ',' << row.iou << '\n';
}

inline nlohmann::json eval_summary(const EvalReport& r) {
  return {{"mean_dice", r.mean_dice},
          {"mean_iou", r.mean_iou},
          {"n", r.n},
          {"all_foreground_mean_dice", r.all_foreground_dice},
          {"all_foreground_mean_iou", r.all_foreground_iou}};
}

inline void write_mask_pgms(const std::filesystem::path& dir, const EvalReport& r) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const SegMask& m = r.predictions[i];
    GrayImage img{m.width, m.height, std::vector<std::uint8_t>(m.size())};
    for (std::size_t p = 0; p < m.size(); ++p) img.pixels[p] = m.bits[p] ? 255 : 0;
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.pgm", r.rows[i].sample_id);
    write_pgm(dir / name, img);
  }
}

}  // namespace ftd
