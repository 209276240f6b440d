#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dclstm/convlstm.hpp"

// Full network assembly: 3D CNN front-end -> deformable ConvLSTM -> shared
// per-frame 2D CNN head -> global average fusion -> fully connected
// classifier. Widths and kernel counts are config knobs; the wiring is fixed.

namespace dclstm {

struct ModelConfig {
  int64_t t = 32, h = 112, w = 112, c = 3;
  std::vector<int64_t> conv3d_widths = {32, 64};
  int64_t hidden = 64;
  int deform_per_quartile = 3;  // 0 turns the model into the plain ConvLSTM baseline
  std::vector<int64_t> head_widths = {64, 96, 128};
  int64_t num_classes = 17;
  uint64_t seed = 0;

  bool deformable() const { return deform_per_quartile > 0; }

  std::string serialize() const {
    std::ostringstream os;
    auto list = [](const std::vector<int64_t>& v) {
      std::ostringstream s;
      for (size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
      return s.str();
    };
    os << "t=" << t << "\n"
       << "h=" << h << "\n"
       << "w=" << w << "\n"
       << "c=" << c << "\n"
       << "conv3d_widths=" << list(conv3d_widths) << "\n"
       << "hidden=" << hidden << "\n"
       << "deform_per_quartile=" << deform_per_quartile << "\n"
       << "head_widths=" << list(head_widths) << "\n"
       << "num_classes=" << num_classes << "\n"
       << "seed=" << seed << "\n";
    return os.str();
  }

  static ModelConfig parse(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    auto parse_list = [](const std::string& s) {
      std::vector<int64_t> v;
      std::istringstream ls(s);
      std::string item;
      while (std::getline(ls, item, ','))
        if (!item.empty()) v.push_back(std::stoll(item));
      return v;
    };
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      if (key == "t") cfg.t = std::stoll(val);
      else if (key == "h") cfg.h = std::stoll(val);
      else if (key == "w") cfg.w = std::stoll(val);
      else if (key == "c") cfg.c = std::stoll(val);
      else if (key == "conv3d_widths") cfg.conv3d_widths = parse_list(val);
      else if (key == "hidden") cfg.hidden = std::stoll(val);
      else if (key == "deform_per_quartile") cfg.deform_per_quartile = std::stoi(val);
      else if (key == "head_widths") cfg.head_widths = parse_list(val);
      else if (key == "num_classes") cfg.num_classes = std::stoll(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
    }
    return cfg;
  }
};

// Named parameter collection; insertion order is the canonical order for
// initialization, checkpoints and the optimizer.
template <typename T = float>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    grads_.push_back(Tensor<T>::zeros(value.shape()));
    values_.push_back(std::move(value));
  }

  size_t count() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& value(const std::string& name) { return values_[idx(name)]; }
  const Tensor<T>& value(const std::string& name) const { return values_[idx(name)]; }
  Tensor<T>& value(size_t i) { return values_[i]; }
  const Tensor<T>& value(size_t i) const { return values_[i]; }

  Tensor<T>& grad(const std::string& name) { return grads_[idx(name)]; }
  Tensor<T>& grad(size_t i) { return grads_[i]; }
  const Tensor<T>& grad(size_t i) const { return grads_[i]; }

  void zero_grads() {
    for (auto& g : grads_) g = Tensor<T>::zeros(g.shape());
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

 private:
  size_t idx(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<Tensor<T>> values_;
  std::vector<Tensor<T>> grads_;
};

template <typename T = float>
struct ModelParams {
  ModelConfig config;
  ParamStore<T> store;
};

namespace detail {

// Spatial/temporal extents through the fixed layer stack; throws when the
// config arithmetic cannot produce a valid network.
struct ShapeWalk {
  int64_t t_lstm, s_lstm;             // sequence length and spatial extent entering the ConvLSTM
  std::vector<int64_t> head_spatial;  // spatial extent after each head pool
  int64_t s_final;
};

inline ShapeWalk walk_shapes(const ModelConfig& cfg) {
  if (cfg.conv3d_widths.size() != 2)
    throw std::invalid_argument("model: conv3d_widths must name exactly two layers (two pools, one temporal)");
  if (cfg.h != cfg.w) throw std::invalid_argument("model: input frames must be square");
  if (cfg.t < 2 || cfg.h < 4) throw std::invalid_argument("model: input too small for the 3D component");
  if (cfg.num_classes < 2) throw std::invalid_argument("model: need at least two classes");
  if (cfg.hidden < 1 || cfg.deform_per_quartile < 0) throw std::invalid_argument("model: bad widths");
  ShapeWalk wk;
  // conv3d(same) -> pool(1,2,2) -> conv3d(same) -> pool(2,2,2)
  int64_t s = (cfg.h - 2) / 2 + 1;
  s = (s - 2) / 2 + 1;
  wk.s_lstm = s;
  wk.t_lstm = (cfg.t - 2) / 2 + 1;
  for (size_t i = 0; i < cfg.head_widths.size(); ++i) {
    if (s < 2)
      throw std::invalid_argument("model: spatial extent exhausted before head layer " + std::to_string(i));
    s = (s - 2) / 2 + 1;
    wk.head_spatial.push_back(s);
  }
  wk.s_final = s;
  return wk;
}

}  // namespace detail

// Deterministic initialization from cfg.seed: conv and fc weights uniform
// +-sqrt(1/fan_in), biases zero except the forget gate at 1, offset predictor
// all zero.
template <typename T = float>
ModelParams<T> build(const ModelConfig& cfg) {
  detail::walk_shapes(cfg);
  ModelParams<T> mp;
  mp.config = cfg;
  Rng rng(cfg.seed);
  auto uniform_fan_in = [&](const Shape& shape, int64_t fan_in) {
    Tensor<T> t(shape);
    const T bound = static_cast<T>(std::sqrt(1.0 / static_cast<double>(fan_in)));
    rng.fill_uniform(t, -bound, bound);
    return t;
  };
  // relu-feeding convs take the Kaiming gain; +-sqrt(1/fan) leaves small
  // models on a dead plateau for some seeds
  auto kaiming_uniform = [&](const Shape& shape, int64_t fan_in) {
    Tensor<T> t(shape);
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    rng.fill_uniform(t, -bound, bound);
    return t;
  };

  int64_t ci = cfg.c;
  for (size_t i = 0; i < cfg.conv3d_widths.size(); ++i) {
    const int64_t co = cfg.conv3d_widths[i];
    const std::string base = "conv3d." + std::to_string(i) + ".";
    mp.store.add(base + "weight", kaiming_uniform(Shape{3, 3, 3, ci, co}, 27 * ci));
    mp.store.add(base + "bias", Tensor<T>::zeros(Shape{co}));
    ci = co;
  }

  const int64_t ch = cfg.hidden;
  const int64_t k = 3;
  mp.store.add("convlstm.input_i.weight", uniform_fan_in(Shape{k, k, ci, ch}, k * k * ci));
  mp.store.add("convlstm.input_f.weight", uniform_fan_in(Shape{k, k, ci, ch}, k * k * ci));
  mp.store.add("convlstm.input_o.weight", uniform_fan_in(Shape{k, k, ci, ch}, k * k * ci));
  mp.store.add("convlstm.input_g.weight", uniform_fan_in(Shape{k, k, ci, ch}, k * k * ci));
  mp.store.add("convlstm.hidden_i.scale", uniform_fan_in(Shape{ch}, ch));
  mp.store.add("convlstm.hidden_f.scale", uniform_fan_in(Shape{ch}, ch));
  mp.store.add("convlstm.hidden_o.scale", uniform_fan_in(Shape{ch}, ch));
  mp.store.add("convlstm.hidden_g.weight", uniform_fan_in(Shape{k, k, ch, ch}, k * k * ch));
  mp.store.add("convlstm.bias_i", Tensor<T>::zeros(Shape{ch}));
  mp.store.add("convlstm.bias_f", Tensor<T>::full(Shape{ch}, T(1)));
  mp.store.add("convlstm.bias_o", Tensor<T>::zeros(Shape{ch}));
  mp.store.add("convlstm.bias_g", Tensor<T>::zeros(Shape{ch}));
  if (cfg.deformable()) {
    mp.store.add("convlstm.offset.weight", Tensor<T>::zeros(Shape{k, k, ci, 2 * k * k}));
    mp.store.add("convlstm.offset.bias", Tensor<T>::zeros(Shape{2 * k * k}));
  }

  int64_t hc = ch;
  for (size_t i = 0; i < cfg.head_widths.size(); ++i) {
    const int64_t co = cfg.head_widths[i];
    const std::string base = "head." + std::to_string(i) + ".";
    mp.store.add(base + "weight", kaiming_uniform(Shape{3, 3, hc, co}, 9 * hc));
    mp.store.add(base + "bias", Tensor<T>::zeros(Shape{co}));
    hc = co;
  }

  mp.store.add("fc.weight", uniform_fan_in(Shape{hc, cfg.num_classes}, hc));
  mp.store.add("fc.bias", Tensor<T>::zeros(Shape{cfg.num_classes}));
  return mp;
}

// Registers every parameter as a tape leaf, in store order.
template <typename T>
std::unordered_map<std::string, Var<T>> lift_params(Tape<T>& tp, const ModelParams<T>& mp, bool trainable) {
  std::unordered_map<std::string, Var<T>> vars;
  for (const auto& name : mp.store.names()) vars[name] = tp.leaf(mp.store.value(name), trainable);
  return vars;
}

// Forward pass to logits (softmax lives in the loss). The clip is consumed as
// a constant; parameters are trainable leaves when `trainable` is set.
template <typename T>
Var<T> forward(Tape<T>& tp, const ModelParams<T>& mp, const Tensor<T>& clip, bool trainable = false,
               std::unordered_map<std::string, Var<T>>* out_vars = nullptr) {
  const ModelConfig& cfg = mp.config;
  if (clip.shape().rank() != 4 || clip.shape().extent(0) != cfg.t || clip.shape().extent(1) != cfg.h ||
      clip.shape().extent(2) != cfg.w || clip.shape().extent(3) != cfg.c)
    throw std::invalid_argument("forward: clip shape " + clip.shape().str() + " does not match config");
  const detail::ShapeWalk wk = detail::walk_shapes(cfg);
  auto vars = lift_params(tp, mp, trainable);

  Var<T> x = tp.leaf(clip, false);
  // 3D component: two convs, two pools, only the second pool shrinks time
  x = ad::conv3d(tp, x, vars.at("conv3d.0.weight"), vars.at("conv3d.0.bias"), 1, 1, 1, 1, 1, 1);
  x = ad::relu(tp, x);
  x = ad::maxpool3d(tp, x, {1, 2, 2}, {1, 2, 2});
  x = ad::conv3d(tp, x, vars.at("conv3d.1.weight"), vars.at("conv3d.1.bias"), 1, 1, 1, 1, 1, 1);
  x = ad::relu(tp, x);
  x = ad::maxpool3d(tp, x, {2, 2, 2}, {2, 2, 2});

  ConvLSTMCellVars<T> cell;
  cell.k = 3;
  cell.wxi = vars.at("convlstm.input_i.weight");
  cell.wxf = vars.at("convlstm.input_f.weight");
  cell.wxo = vars.at("convlstm.input_o.weight");
  cell.wxg = vars.at("convlstm.input_g.weight");
  cell.hsi = vars.at("convlstm.hidden_i.scale");
  cell.hsf = vars.at("convlstm.hidden_f.scale");
  cell.hso = vars.at("convlstm.hidden_o.scale");
  cell.whg = vars.at("convlstm.hidden_g.weight");
  cell.bi = vars.at("convlstm.bias_i");
  cell.bf = vars.at("convlstm.bias_f");
  cell.bo = vars.at("convlstm.bias_o");
  cell.bg = vars.at("convlstm.bias_g");
  if (cfg.deformable()) {
    cell.off_w = vars.at("convlstm.offset.weight");
    cell.off_b = vars.at("convlstm.offset.bias");
  }
  // schedule over the sequence length actually entering the ConvLSTM
  const auto schedule =
      cfg.deformable() ? deformable_schedule(wk.t_lstm, cfg.deform_per_quartile) : std::vector<int64_t>{};
  x = unroll(tp, x, cell, schedule);

  // shared 2D head applied per frame
  std::vector<Var<T>> frames;
  frames.reserve(static_cast<size_t>(wk.t_lstm));
  for (int64_t t = 0; t < wk.t_lstm; ++t) {
    Var<T> f = ad::frame(tp, x, t);
    for (size_t i = 0; i < cfg.head_widths.size(); ++i) {
      const std::string base = "head." + std::to_string(i) + ".";
      f = ad::conv2d(tp, f, vars.at(base + "weight"), vars.at(base + "bias"), 1, 1, 1, 1);
      f = ad::relu(tp, f);
      f = ad::avgpool2d(tp, f, {2, 2}, {2, 2});
    }
    frames.push_back(f);
  }
  x = ad::stack_frames(tp, frames);

  Var<T> feat = ad::reduce_mean(tp, x, {0, 1, 2});  // [c_final]
  const int64_t c_final = tp.value(feat).shape().extent(0);
  Var<T> logits = ad::matmul(tp, ad::reshape(tp, feat, Shape{1, c_final}), vars.at("fc.weight"));
  logits = ad::reshape(tp, logits, Shape{cfg.num_classes});
  logits = ad::add_channel_bias(tp, logits, vars.at("fc.bias"));

  if (out_vars) *out_vars = std::move(vars);
  return logits;
}

template <typename T>
int64_t param_count(const ModelParams<T>& mp) {
  return mp.store.param_count();
}

}  // namespace dclstm
