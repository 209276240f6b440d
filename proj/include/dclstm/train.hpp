#pragma once

#include <cstdio>
#include <fstream>
#include <thread>

#include "dclstm/data.hpp"
#include "dclstm/log.hpp"
#include "dclstm/model.hpp"

// Loss, optimizers, metrics, checkpointing and the train/eval loops. All
// randomness flows from explicit seeds; a single-threaded run is
// byte-reproducible, and the multi-threaded path keeps per-thread gradient
// buffers that are reduced in a fixed order.

namespace dclstm {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 0.0;
  double val_fraction = 0.2;
  uint64_t seed = 0;
  int threads = 1;
  std::string checkpoint_path;
  std::string log_path;

  void validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (optimizer != "adam" && optimizer != "sgd") throw std::invalid_argument("TrainConfig: unknown optimizer");
    if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
  }

  static TrainConfig parse(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "learning_rate") cfg.learning_rate = std::stod(val);
      else if (key == "optimizer") cfg.optimizer = val;
      else if (key == "momentum") cfg.momentum = std::stod(val);
      else if (key == "beta1") cfg.beta1 = std::stod(val);
      else if (key == "beta2") cfg.beta2 = std::stod(val);
      else if (key == "adam_eps") cfg.adam_eps = std::stod(val);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
      else if (key == "val_fraction") cfg.val_fraction = std::stod(val);
      else if (key == "train_seed") cfg.seed = std::stoull(val);
      else if (key == "threads") cfg.threads = std::stoi(val);
      else if (key == "checkpoint_path") cfg.checkpoint_path = val;
      else if (key == "log_path") cfg.log_path = val;
    }
    return cfg;
  }
};

// -log softmax(logits)[label] with max-subtraction stabilization.
template <typename T>
Var<T> cross_entropy(Tape<T>& tp, Var<T> logits, int64_t label) {
  const Tensor<T>& lv = tp.value(logits);
  if (lv.shape().rank() != 1) throw std::invalid_argument("cross_entropy: logits must be rank 1");
  const int64_t n = lv.shape().extent(0);
  if (label < 0 || label >= n) throw std::invalid_argument("cross_entropy: label out of range");
  T m = lv[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, lv[i]);
  T sum = 0;
  for (int64_t i = 0; i < n; ++i) sum += std::exp(lv[i] - m);
  const T loss = m + std::log(sum) - lv[label];
  return tp.make(Tensor<T>{Shape{1}, {loss}}, {logits}, [logits, label, m, sum](Tape<T>& t, int id) {
    const Tensor<T>& dy = ad::out_grad(t, id);
    if (Tensor<T>* dl = t.grad_sink(logits.id)) {
      const Tensor<T>& lv = t.value(logits);
      for (int64_t i = 0; i < lv.numel(); ++i) {
        const T soft = std::exp(lv[i] - m) / sum;
        (*dl)[i] += dy[0] * (soft - (i == label ? T(1) : T(0)));
      }
    }
  });
}

// In-place parameter update. Adam uses bias-corrected moments; weight decay
// is decoupled (applied straight to the weights) for both rules.
template <typename T = float>
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(ParamStore<T>& params) {
    ++t_;
    if (state_m_.empty()) {
      state_m_.resize(params.count());
      state_v_.resize(params.count());
      for (size_t i = 0; i < params.count(); ++i) {
        state_m_[i] = Tensor<T>::zeros(params.value(i).shape());
        if (cfg_.optimizer == "adam") state_v_[i] = Tensor<T>::zeros(params.value(i).shape());
      }
    }
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T wd = static_cast<T>(cfg_.weight_decay);
    for (size_t i = 0; i < params.count(); ++i) {
      Tensor<T>& w = params.value(i);
      const Tensor<T>& g = params.grad(i);
      if (cfg_.optimizer == "adam") {
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T eps = static_cast<T>(cfg_.adam_eps);
        const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
        const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
        Tensor<T>& mt = state_m_[i];
        Tensor<T>& vt = state_v_[i];
        for (int64_t j = 0; j < w.numel(); ++j) {
          mt[j] = b1 * mt[j] + (T(1) - b1) * g[j];
          vt[j] = b2 * vt[j] + (T(1) - b2) * g[j] * g[j];
          const T mhat = mt[j] / bc1;
          const T vhat = vt[j] / bc2;
          w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
        }
      } else {  // sgd with momentum
        const T mu = static_cast<T>(cfg_.momentum);
        Tensor<T>& vel = state_m_[i];
        for (int64_t j = 0; j < w.numel(); ++j) {
          vel[j] = mu * vel[j] + g[j];
          w[j] -= lr * (vel[j] + wd * w[j]);
        }
      }
    }
  }

  int64_t step_count() const { return t_; }

 private:
  TrainConfig cfg_;
  int64_t t_ = 0;
  std::vector<Tensor<T>> state_m_;
  std::vector<Tensor<T>> state_v_;
};

struct Metrics {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  int64_t total = 0;
  std::vector<int64_t> confusion;  // [num_classes * num_classes], row = true class
  int64_t num_classes = 0;

  int64_t& at(int64_t truth, int64_t pred) { return confusion[static_cast<size_t>(truth * num_classes + pred)]; }
  int64_t at(int64_t truth, int64_t pred) const {
    return confusion[static_cast<size_t>(truth * num_classes + pred)];
  }
};

// Temporal sampling + spatial resize into the model's input shape.
inline Tensor<float> prepare_clip(const VideoClip& clip, const ModelConfig& cfg, bool jitter, Rng& rng) {
  if (clip.frames.shape().extent(3) != cfg.c)
    throw std::invalid_argument("prepare_clip: channel count does not match config");
  VideoClip sampled = uniform_sample(clip, cfg.t, jitter, rng);
  if (sampled.frames.shape().extent(1) != cfg.h || sampled.frames.shape().extent(2) != cfg.w)
    sampled = resize(sampled, cfg.h, cfg.w);
  return sampled.frames;
}

template <typename T>
int64_t argmax_class(const Tensor<T>& logits) {
  int64_t best = 0;
  for (int64_t i = 1; i < logits.numel(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

namespace detail {
template <typename F>
void parallel_over(int64_t n, int threads, F chunk_fn) {
  if (threads <= 1 || n <= 1) {
    chunk_fn(0, int64_t{0}, n);
    return;
  }
  const int used = static_cast<int>(std::min<int64_t>(threads, n));
  std::vector<std::thread> pool;
  const int64_t per = (n + used - 1) / used;
  for (int w = 0; w < used; ++w) {
    const int64_t lo = w * per, hi = std::min<int64_t>(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([=] { chunk_fn(w, lo, hi); });
  }
  for (auto& th : pool) th.join();
}
}  // namespace detail

// Deterministic evaluation: jitter off, fixed clip order.
template <typename T>
Metrics evaluate(const ModelParams<T>& mp, const std::vector<VideoClip>& clips,
                 const std::vector<size_t>& indices, int threads = 1) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty dataset");
  Metrics metrics;
  metrics.num_classes = mp.config.num_classes;
  metrics.confusion.assign(static_cast<size_t>(metrics.num_classes * metrics.num_classes), 0);
  std::vector<double> losses(indices.size(), 0.0);
  std::vector<int64_t> preds(indices.size(), 0);
  detail::parallel_over(static_cast<int64_t>(indices.size()), threads, [&](int, int64_t lo, int64_t hi) {
    Rng rng(0);  // jitter is off; unused
    for (int64_t i = lo; i < hi; ++i) {
      const VideoClip& clip = clips[indices[static_cast<size_t>(i)]];
      Tape<T> tp;
      Tensor<T> input = prepare_clip(clip, mp.config, false, rng);
      Var<T> logits = forward(tp, mp, input, false);
      Var<T> loss = cross_entropy(tp, logits, clip.label);
      losses[static_cast<size_t>(i)] = static_cast<double>(tp.value(loss)[0]);
      preds[static_cast<size_t>(i)] = argmax_class(tp.value(logits));
    }
  });
  int64_t correct = 0;
  double loss_sum = 0.0;
  for (size_t i = 0; i < indices.size(); ++i) {
    const VideoClip& clip = clips[indices[i]];
    metrics.at(clip.label, preds[i]) += 1;
    if (preds[i] == clip.label) ++correct;
    loss_sum += losses[i];
  }
  metrics.total = static_cast<int64_t>(indices.size());
  metrics.accuracy = static_cast<double>(correct) / static_cast<double>(metrics.total);
  metrics.mean_loss = loss_sum / static_cast<double>(metrics.total);
  return metrics;
}

template <typename T>
Metrics evaluate(const ModelParams<T>& mp, const std::vector<VideoClip>& clips, int threads = 1) {
  std::vector<size_t> all(clips.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate(mp, clips, all, threads);
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr uint16_t kCheckpointVersion = 1;

inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

// Magic "DCKP", version u16, config length u32 + config text, u64 FNV-1a of
// the config text, then per parameter: name length u16, name bytes, rank u8,
// extents u32, payload f32 LE. The embedded config lets eval/inspect rebuild
// the architecture from the file alone.
template <typename T>
void save_checkpoint(const ModelParams<T>& mp, const std::string& path) {
  static_assert(sizeof(T) == 4, "checkpoint payload is f32");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  const std::string cfg = mp.config.serialize();
  os.write("DCKP", 4);
  detail::write_le<uint16_t>(os, kCheckpointVersion);
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::write_le<uint64_t>(os, fnv1a64(cfg));
  for (const auto& name : mp.store.names()) {
    const Tensor<T>& t = mp.store.value(name);
    detail::write_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<uint8_t>(os, static_cast<uint8_t>(t.shape().rank()));
    for (int a = 0; a < t.shape().rank(); ++a)
      detail::write_le<uint32_t>(os, static_cast<uint32_t>(t.shape().extent(a)));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename T = float>
ModelParams<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DCKP", 4) != 0)
    throw std::runtime_error("load_checkpoint: corrupt checkpoint (bad magic)");
  if (detail::read_le<uint16_t>(is) != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version");
  const uint32_t cfg_len = detail::read_le<uint32_t>(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw std::runtime_error("load_checkpoint: corrupt checkpoint (truncated config)");
  const uint64_t stored_hash = detail::read_le<uint64_t>(is);
  if (stored_hash != fnv1a64(cfg_text))
    throw std::runtime_error("load_checkpoint: config hash mismatch");

  ModelParams<T> mp = build<T>(ModelConfig::parse(cfg_text));
  size_t loaded = 0;
  while (true) {
    uint16_t name_len;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw std::runtime_error("load_checkpoint: corrupt checkpoint (record header)");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || !mp.store.has(name))
      throw std::runtime_error("load_checkpoint: unknown parameter record");
    const uint8_t rank = detail::read_le<uint8_t>(is);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = detail::read_le<uint32_t>(is);
    Tensor<T>& dst = mp.store.value(name);
    if (Shape(dims) != dst.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.numel() * sizeof(T)));
    if (!is) throw std::runtime_error("load_checkpoint: corrupt checkpoint (truncated payload)");
    ++loaded;
  }
  if (loaded != mp.store.count()) throw std::runtime_error("load_checkpoint: missing parameter records");
  return mp;
}

// ---------------------------------------------------------------------------
// training loop

struct EpochStats {
  double train_loss = 0.0, train_acc = 0.0, val_loss = 0.0, val_acc = 0.0;
};

// Gradient of one clip's loss for every parameter, in store order.
template <typename T>
void clip_gradients(const ModelParams<T>& mp, const Tensor<T>& input, int64_t label,
                    std::vector<Tensor<T>>& grads, double& loss_out, bool& correct_out) {
  Tape<T> tp;
  std::unordered_map<std::string, Var<T>> vars;
  Var<T> logits = forward(tp, mp, input, true, &vars);
  Var<T> loss = cross_entropy(tp, logits, label);
  tp.backward(loss);
  loss_out = static_cast<double>(tp.value(loss)[0]);
  correct_out = argmax_class(tp.value(logits)) == label;
  const auto& names = mp.store.names();
  grads.resize(names.size());
  for (size_t i = 0; i < names.size(); ++i) grads[i] = tp.grad(vars.at(names[i]));
}

// One epoch line per call: "epoch<TAB>train_loss<TAB>train_acc<TAB>val_loss<TAB>val_acc".
inline std::string format_epoch_line(int epoch, const EpochStats& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d\t%.6f\t%.6f\t%.6f\t%.6f", epoch, s.train_loss, s.train_acc,
                s.val_loss, s.val_acc);
  return std::string(buf);
}

// Trains in place. Batch gradient is the mean over clip gradients; data
// order and jitter derive from cfg.seed, so a fixed seed on one thread gives
// a byte-identical log and checkpoint.
template <typename T>
std::vector<EpochStats> train_loop(ModelParams<T>& mp, const std::vector<VideoClip>& clips,
                                   const std::vector<size_t>& train_idx, const std::vector<size_t>& val_idx,
                                   const TrainConfig& cfg, const std::string& log_path = "") {
  cfg.validate();
  if (train_idx.empty()) throw std::invalid_argument("train_loop: empty training set");
  Optimizer<T> opt(cfg);
  Rng shuffle_rng(cfg.seed ^ 0x7d3a9f4b2c1e8d56ULL);
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, std::ios::app);
    if (!log) throw std::runtime_error("train_loop: cannot open log " + log_path);
  }

  std::vector<EpochStats> history;
  std::vector<size_t> order = train_idx;
  const size_t n_train = order.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

    double loss_sum = 0.0;
    int64_t correct = 0;
    for (size_t b0 = 0; b0 < n_train; b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t b1 = std::min(n_train, b0 + static_cast<size_t>(cfg.batch_size));
      const int64_t n = static_cast<int64_t>(b1 - b0);
      std::vector<std::vector<Tensor<T>>> grads(static_cast<size_t>(n));
      std::vector<double> losses(static_cast<size_t>(n), 0.0);
      std::vector<char> hit(static_cast<size_t>(n), 0);
      detail::parallel_over(n, cfg.threads, [&](int, int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          const size_t pos = b0 + static_cast<size_t>(i);
          const VideoClip& clip = clips[order[pos]];
          // jitter stream keyed by (epoch, position), not by thread
          Rng jitter_rng(cfg.seed ^ splitmix64((static_cast<uint64_t>(epoch) << 32) | pos));
          Tensor<T> input = prepare_clip(clip, mp.config, true, jitter_rng);
          bool c = false;
          clip_gradients(mp, input, clip.label, grads[static_cast<size_t>(i)],
                         losses[static_cast<size_t>(i)], c);
          hit[static_cast<size_t>(i)] = c ? 1 : 0;
        }
      });
      mp.store.zero_grads();
      const T inv_n = T(1) / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) {
        loss_sum += losses[static_cast<size_t>(i)];
        correct += hit[static_cast<size_t>(i)];
        for (size_t p = 0; p < mp.store.count(); ++p) {
          Tensor<T>& acc = mp.store.grad(p);
          const Tensor<T>& g = grads[static_cast<size_t>(i)][p];
          for (int64_t j = 0; j < acc.numel(); ++j) acc[j] += g[j] * inv_n;
        }
      }
      opt.step(mp.store);
    }

    EpochStats s;
    s.train_loss = loss_sum / static_cast<double>(n_train);
    s.train_acc = static_cast<double>(correct) / static_cast<double>(n_train);
    if (!val_idx.empty()) {
      const Metrics m = evaluate(mp, clips, val_idx, cfg.threads);
      s.val_loss = m.mean_loss;
      s.val_acc = m.accuracy;
    }
    history.push_back(s);
    const std::string line = format_epoch_line(epoch, s);
    if (log) {
      log << line << "\n";
      log.flush();
    }
    log_info("[train] " + line);
  }
  return history;
}

}  // namespace dclstm
