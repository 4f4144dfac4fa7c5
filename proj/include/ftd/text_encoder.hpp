#pragma once

// Toy transformer text encoder with a dense / alternating attention switch.
// It is always used frozen, so the forward pass runs on plain tensors.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftd/autograd.hpp"
#include "ftd/kernels.hpp"
#include "ftd/layers.hpp"
#include "ftd/rng.hpp"
#include "ftd/unet.hpp"

namespace ftd {

/// Token -> id map. Ids are contiguous from 0; 0, 1, 2 are PAD, UNK, CLS.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;

  Vocab() : ids_{{"[PAD]", kPad}, {"[UNK]", kUnk}, {"[CLS]", kCls}}, next_(3) {}

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.add(w);
    return v;
  }

  int add(const std::string& word) {
    auto [it, inserted] = ids_.emplace(word, next_);
    if (inserted) ++next_;
    return it->second;
  }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(next_); }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [tok, id] : ids_) j[tok] = id;
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("vocab JSON must be an object");
    Vocab v;
    v.ids_.clear();
    std::vector<bool> used(j.size(), false);
    for (const auto& [tok, val] : j.items()) {
      const int id = val.get<int>();
      if (id < 0 || static_cast<std::size_t>(id) >= j.size() || used[static_cast<std::size_t>(id)]) {
        throw std::invalid_argument("vocab ids must be unique and contiguous from 0");
      }
      used[static_cast<std::size_t>(id)] = true;
      v.ids_[tok] = id;
    }
    if (v.id("[PAD]") != kPad || v.id("[UNK]") != kUnk || v.id("[CLS]") != kCls) {
      throw std::invalid_argument("vocab reserved ids PAD=0, UNK=1, CLS=2 missing");
    }
    v.next_ = static_cast<int>(j.size());
    return v;
  }

  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  std::map<std::string, int> ids_;
  int next_;
};

/// Lowercase, split on anything that is not a letter or digit, prepend CLS,
/// truncate to max_len, pad with PAD to max_len.
inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be >= 2");
  std::vector<int> ids{Vocab::kCls};
  std::string word;
  auto flush = [&] {
    if (!word.empty()) ids.push_back(vocab.id(word));
    word.clear();
  };
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc)) {
      word.push_back(static_cast<char>(std::tolower(uc)));
    } else {
      flush();
    }
  }
  flush();
  ids.resize(max_len, Vocab::kPad);
  return ids;
}

/// Row-major seq_len x seq_len boolean matrix.
struct BoolMatrix {
  std::size_t n = 0;
  std::vector<std::uint8_t> bits;
  bool operator()(std::size_t i, std::size_t j) const { return bits[i * n + j] != 0; }
};

/// i may attend j iff |i - j| <= w; position 0 (CLS) attends and is attended globally.
inline BoolMatrix local_attention_mask(std::size_t seq_len, std::size_t w) {
  if (w < 1) throw std::invalid_argument("local_attention_mask: window must be >= 1");
  BoolMatrix m{seq_len, std::vector<std::uint8_t>(seq_len * seq_len, 0)};
  for (std::size_t i = 0; i < seq_len; ++i)
    for (std::size_t j = 0; j < seq_len; ++j) {
      const std::size_t d = i > j ? i - j : j - i;
      m.bits[i * seq_len + j] = (d <= w || i == 0 || j == 0) ? 1 : 0;
    }
  return m;
}

enum class AttentionMode { dense, alternating };

inline std::string to_string(AttentionMode m) { return m == AttentionMode::dense ? "dense" : "alternating"; }

inline AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "dense") return AttentionMode::dense;
  if (s == "alternating") return AttentionMode::alternating;
  throw std::invalid_argument("unknown attention mode '" + s + "' (dense|alternating)");
}

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t max_len = 64;
  AttentionMode mode = AttentionMode::alternating;
  std::size_t window = 16;
  std::size_t global_every = 3;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("encoder." + field + ": " + why);
    };
    if (layers == 0) fail("layers", "must be positive");
    if (heads == 0 || d_model == 0 || d_model % heads != 0) fail("d_model", "must be divisible by heads");
    if (d_model % 2 != 0) fail("d_model", "must be even (sinusoidal positions)");
    if (max_len < 2) fail("max_len", "must be >= 2");
    if (window < 1) fail("window", "must be >= 1");
    if (global_every < 1) fail("global_every", "must be >= 1");
  }

  /// Layers are numbered from 0; in alternating mode layer l is dense iff l % global_every == 0.
  bool layer_is_dense(std::size_t l) const { return mode == AttentionMode::dense || l % global_every == 0; }
};

template <typename T>
struct TextEmbedding {
  Tensor<T> tokens;                 // [seq_len, d_model]
  std::vector<std::uint8_t> valid;  // 1 for real tokens, 0 for PAD
};

namespace detail {

template <typename T>
Tensor<T> linear_rows(const Tensor<T>& x, const Param<T>& w, const Param<T>& b) {
  Tensor<T> y = kernels::matmul(x, w.value);
  const std::size_t n = y.dim(0), d = y.dim(1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) y(r, j) += b.value[j];
  return y;
}

template <typename T>
T gelu(T x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  const double xd = x;
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

}  // namespace detail

/// Multi-head attention over rows of q, k, v [S, d]. window == 0 means dense;
/// otherwise query i sees keys with |i - j| <= window plus the global CLS
/// position 0 (and CLS sees everything). PAD queries and keys are excluded;
/// PAD query rows produce zeros. When `weights` is non-null it receives one
/// dense [S, S] matrix per head with exact zeros at excluded positions.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               std::size_t window, const std::vector<std::uint8_t>& valid,
                               std::vector<Tensor<T>>* weights = nullptr) {
  const std::size_t S = q.dim(0), d = q.dim(1), dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor<T> out(Shape{S, d});
  if (weights) weights->assign(heads, Tensor<T>(Shape{S, S}));
  std::vector<std::size_t> keys;
  std::vector<double> p;
  keys.reserve(S);
  for (std::size_t i = 0; i < S; ++i) {
    if (!valid[i]) continue;
    keys.clear();
    if (window == 0 || i == 0) {
      for (std::size_t j = 0; j < S; ++j)
        if (valid[j]) keys.push_back(j);
    } else {
      if (valid[0]) keys.push_back(0);
      const std::size_t lo = i > window ? i - window : 1;
      const std::size_t hi = std::min(S - 1, i + window);
      for (std::size_t j = std::max<std::size_t>(lo, 1); j <= hi; ++j)
        if (valid[j]) keys.push_back(j);
    }
    p.resize(keys.size());
    for (std::size_t h = 0; h < heads; ++h) {
      const T* qi = q.ptr() + i * d + h * dh;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < keys.size(); ++a) {
        const T* kj = k.ptr() + keys[a] * d + h * dh;
        T dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        p[a] = dot * scale;
        m = std::max(m, p[a]);
      }
      double z = 0.0;
      for (double& e : p) {
        e = std::exp(e - m);
        z += e;
      }
      T* oi = out.ptr() + i * d + h * dh;
      for (std::size_t a = 0; a < keys.size(); ++a) {
        const T w = static_cast<T>(p[a] / z);
        const T* vj = v.ptr() + keys[a] * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        if (weights) (*weights)[h](i, keys[a]) = w;
      }
    }
  }
  return out;
}

template <typename T>
class TextEncoder {
 public:
  TextEncoder(EncoderConfig config, std::size_t vocab_size, std::uint64_t seed)
      : config_(config), vocab_size_(vocab_size) {
    config_.validate();
    RngState rng = RngState::derive(seed, {0x74657874 /* "text" */});
    const std::size_t d = config_.d_model;
    token_embedding_ = Param<T>(normal_init<T>(rng, {vocab_size, d}, 1.0), false);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      Layer layer;
      layer.ln1 = LayerNorm<T>(d);
      layer.q = Linear<T>(d, d, rng);
      layer.k = Linear<T>(d, d, rng);
      layer.v = Linear<T>(d, d, rng);
      layer.o = Linear<T>(d, d, rng);
      layer.ln2 = LayerNorm<T>(d);
      layer.ff1 = Linear<T>(d, 4 * d, rng);
      layer.ff2 = Linear<T>(4 * d, d, rng);
      layers_.push_back(std::move(layer));
    }
    final_ln_ = LayerNorm<T>(d);
    ftd::set_trainable(named_params(), false);
  }

  const EncoderConfig& config() const noexcept { return config_; }
  EncoderConfig& mutable_config() noexcept { return config_; }

  TextEmbedding<T> encode(const std::vector<int>& ids) const {
    std::vector<std::uint8_t> valid(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != Vocab::kPad;
    return encode(ids, valid);
  }

  /// Encodes with an explicit PAD mask (valid[i] == 0 marks PAD).
  TextEmbedding<T> encode(const std::vector<int>& ids, const std::vector<std::uint8_t>& valid) const {
    const std::size_t S = ids.size(), d = config_.d_model;
    if (S == 0 || S > config_.max_len) {
      throw std::invalid_argument("encode: sequence length " + std::to_string(S) + " exceeds max_len " +
                                  std::to_string(config_.max_len));
    }
    if (valid.size() != S) throw std::invalid_argument("encode: mask length mismatch");
    Tensor<T> x(Shape{S, d});
    for (std::size_t i = 0; i < S; ++i) {
      const int id = ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
        throw std::invalid_argument("encode: token id " + std::to_string(id) + " outside vocabulary");
      }
      const Tensor<T> pos = timestep_embedding<T>(static_cast<double>(i), d);
      for (std::size_t c = 0; c < d; ++c) x(i, c) = token_embedding_.value(static_cast<std::size_t>(id), c) + pos[c];
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      Tensor<T> h = kernels::layer_norm(x, L.ln1.gamma.value, L.ln1.beta.value, 1e-5, nullptr);
      const Tensor<T> q = detail::linear_rows(h, L.q.weight, L.q.bias);
      const Tensor<T> k = detail::linear_rows(h, L.k.weight, L.k.bias);
      const Tensor<T> v = detail::linear_rows(h, L.v.weight, L.v.bias);
      const std::size_t window = config_.layer_is_dense(l) ? 0 : config_.window;
      const Tensor<T> a = multi_head_attention(q, k, v, config_.heads, window, valid);
      accumulate(x, detail::linear_rows(a, L.o.weight, L.o.bias));
      h = kernels::layer_norm(x, L.ln2.gamma.value, L.ln2.beta.value, 1e-5, nullptr);
      Tensor<T> f = detail::linear_rows(h, L.ff1.weight, L.ff1.bias);
      for (auto& e : f.data()) e = detail::gelu(e);
      accumulate(x, detail::linear_rows(f, L.ff2.weight, L.ff2.bias));
    }
    return {kernels::layer_norm(x, final_ln_.gamma.value, final_ln_.beta.value, 1e-5, nullptr), valid};
  }

  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    out.push_back({"textenc.token_embedding", &token_embedding_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "textenc.layer" + std::to_string(l);
      Layer& L = layers_[l];
      L.ln1.collect(p + ".ln1", out);
      L.q.collect(p + ".q", out);
      L.k.collect(p + ".k", out);
      L.v.collect(p + ".v", out);
      L.o.collect(p + ".o", out);
      L.ln2.collect(p + ".ln2", out);
      L.ff1.collect(p + ".ff1", out);
      L.ff2.collect(p + ".ff2", out);
    }
    final_ln_.collect("textenc.final_ln", out);
    return out;
  }

 private:
  struct Layer {
    LayerNorm<T> ln1;
    Linear<T> q, k, v, o;
    LayerNorm<T> ln2;
    Linear<T> ff1, ff2;
  };

  EncoderConfig config_;
  std::size_t vocab_size_;
  Param<T> token_embedding_;
  std::vector<Layer> layers_;
  LayerNorm<T> final_ln_;
};

struct BenchRow {
  std::string mode;
  std::size_t seq_len;
  double median_s;
};

/// Median wall-clock seconds of encode() per (mode, length): 2 warm-up runs,
/// then `repetitions` timed runs on a monotonic clock, single-threaded.
inline std::vector<BenchRow> benchmark_encoder(EncoderConfig config, const std::vector<std::size_t>& lengths,
                                               const std::vector<AttentionMode>& modes,
                                               std::size_t repetitions, std::uint64_t seed = 0) {
  if (repetitions < 5) throw std::invalid_argument("benchmark_encoder: repetitions must be >= 5");
  std::vector<BenchRow> rows;
  for (AttentionMode mode : modes) {
    for (std::size_t len : lengths) {
      EncoderConfig cfg = config;
      cfg.mode = mode;
      cfg.max_len = std::max(cfg.max_len, len);
      const std::size_t vocab_size = 32;
      TextEncoder<float> enc(cfg, vocab_size, seed);
      RngState rng = RngState::derive(seed, {len});
      std::vector<int> ids(len);
      ids[0] = Vocab::kCls;
      for (std::size_t i = 1; i < len; ++i) ids[i] = 3 + static_cast<int>(rng.next_index(vocab_size - 3));
      volatile float sink = 0.0f;
      for (int w = 0; w < 2; ++w) sink = sink + enc.encode(ids).tokens[0];
      std::vector<double> times;
      for (std::size_t r = 0; r < repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto emb = enc.encode(ids);
        const auto t1 = std::chrono::steady_clock::now();
        sink = sink + emb.tokens[0];
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
      std::sort(times.begin(), times.end());
      const std::size_t n = times.size();
      const double median = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
      rows.push_back({to_string(mode), len, median});
    }
  }
  return rows;
}

inline void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "mode,seq_len,median_s\n";
  os.precision(9);
  for (const auto& r : rows) os << r.mode << ',' << r.seq_len << ',' << r.median_s << '\n';
}

}  // namespace ftd
