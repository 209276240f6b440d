#pragma once

#include <set>
#include <vector>

#include "dclstm/autodiff.hpp"
#include "dclstm/kernels.hpp"
#include "dclstm/rng.hpp"

// ConvLSTM recurrence in two flavors, standard and deformable. All
// input-to-state paths are odd-kernel "same" convolutions with stride 1 so
// the spatial extents survive the unroll. Gates i/f/o keep their dependence
// on the hidden state through a per-channel scalar transform of the globally
// average-pooled map; the candidate path g keeps a full hidden-to-state
// convolution, and in the deformable variant its input-to-state convolution
// samples through learned offsets.

namespace dclstm {

template <typename T = float>
struct ConvLSTMState {
  Var<T> h;
  Var<T> c;
};

template <typename T = float>
struct ConvLSTMCellParams {
  Conv2DParams<T> input_i, input_f, input_o, input_g;  // [k,k,c_in,c_hidden], no conv bias
  Tensor<T> hidden_i, hidden_f, hidden_o;              // per-channel scalars [c_hidden]
  Conv2DParams<T> hidden_g;                            // [k,k,c_hidden,c_hidden]
  Tensor<T> bias_i, bias_f, bias_o, bias_g;            // [c_hidden]
  Conv2DParams<T> offset;                              // deformable variant only

  bool has_offset() const { return !offset.weight.empty(); }
};

// Uniform fan-in init, forget-gate bias 1, offset predictor weights and bias
// zero so training starts exactly at the regular-conv baseline.
template <typename T>
ConvLSTMCellParams<T> make_convlstm_cell(int64_t c_in, int64_t c_hidden, int k, bool deformable, Rng& rng) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("make_convlstm_cell: kernel size must be odd");
  const int pad = k / 2;
  auto conv = [&](int64_t ci, int64_t co) {
    Conv2DParams<T> p;
    p.weight = Tensor<T>{Shape{k, k, ci, co}};
    const T bound = static_cast<T>(std::sqrt(1.0 / static_cast<double>(k * k * ci)));
    rng.fill_uniform(p.weight, -bound, bound);
    p.sh = p.sw = 1;
    p.ph = p.pw = pad;
    return p;
  };
  ConvLSTMCellParams<T> cell;
  cell.input_i = conv(c_in, c_hidden);
  cell.input_f = conv(c_in, c_hidden);
  cell.input_o = conv(c_in, c_hidden);
  cell.input_g = conv(c_in, c_hidden);
  const T hbound = static_cast<T>(std::sqrt(1.0 / static_cast<double>(c_hidden)));
  cell.hidden_i = Tensor<T>{Shape{c_hidden}};
  cell.hidden_f = Tensor<T>{Shape{c_hidden}};
  cell.hidden_o = Tensor<T>{Shape{c_hidden}};
  rng.fill_uniform(cell.hidden_i, -hbound, hbound);
  rng.fill_uniform(cell.hidden_f, -hbound, hbound);
  rng.fill_uniform(cell.hidden_o, -hbound, hbound);
  cell.hidden_g = conv(c_hidden, c_hidden);
  cell.bias_i = Tensor<T>::zeros(Shape{c_hidden});
  cell.bias_f = Tensor<T>::full(Shape{c_hidden}, T(1));
  cell.bias_o = Tensor<T>::zeros(Shape{c_hidden});
  cell.bias_g = Tensor<T>::zeros(Shape{c_hidden});
  if (deformable) {
    cell.offset.weight = Tensor<T>::zeros(Shape{k, k, c_in, 2 * k * k});
    cell.offset.bias = Tensor<T>::zeros(Shape{2 * k * k});
    cell.offset.sh = cell.offset.sw = 1;
    cell.offset.ph = cell.offset.pw = pad;
  }
  return cell;
}

// Tape handles for one cell's parameters.
template <typename T = float>
struct ConvLSTMCellVars {
  Var<T> wxi, wxf, wxo, wxg;  // input-to-state conv weights
  Var<T> hsi, hsf, hso;       // per-channel hidden-to-state scalars for i, f, o
  Var<T> whg;                 // hidden-to-state conv weight for g
  Var<T> bi, bf, bo, bg;      // gate biases
  Var<T> off_w, off_b;        // offset predictor (invalid ids when absent)
  int k = 3;

  bool has_offset() const { return off_w.valid(); }
};

template <typename T>
ConvLSTMCellVars<T> lift(Tape<T>& tp, const ConvLSTMCellParams<T>& p, bool trainable = true) {
  ConvLSTMCellVars<T> v;
  v.k = static_cast<int>(p.input_i.weight.shape().extent(0));
  v.wxi = tp.leaf(p.input_i.weight, trainable);
  v.wxf = tp.leaf(p.input_f.weight, trainable);
  v.wxo = tp.leaf(p.input_o.weight, trainable);
  v.wxg = tp.leaf(p.input_g.weight, trainable);
  v.hsi = tp.leaf(p.hidden_i, trainable);
  v.hsf = tp.leaf(p.hidden_f, trainable);
  v.hso = tp.leaf(p.hidden_o, trainable);
  v.whg = tp.leaf(p.hidden_g.weight, trainable);
  v.bi = tp.leaf(p.bias_i, trainable);
  v.bf = tp.leaf(p.bias_f, trainable);
  v.bo = tp.leaf(p.bias_o, trainable);
  v.bg = tp.leaf(p.bias_g, trainable);
  if (p.has_offset()) {
    v.off_w = tp.leaf(p.offset.weight, trainable);
    v.off_b = tp.leaf(p.offset.bias, trainable);
  }
  return v;
}

// One recurrence step:
//   i = sigma(conv(x; Wxi) + si * GAP(h) + bi)      (per-channel, broadcast)
//   f = sigma(conv(x; Wxf) + sf * GAP(h) + bf)
//   o = sigma(conv(x; Wxo) + so * GAP(h) + bo)
//   g = tanh(conv*(x; Wxg) + conv(h; Whg) + bg)     conv* deformable on flag
//   c' = f . c + i . g ;  h' = o . tanh(c')
template <typename T>
ConvLSTMState<T> convlstm_step(Tape<T>& tp, Var<T> x_t, ConvLSTMState<T> s,
                               const ConvLSTMCellVars<T>& p, bool deformable) {
  const Shape& xs = tp.value(x_t).shape();
  const Shape& hs = tp.value(s.h).shape();
  if (xs.rank() != 3 || hs.rank() != 3 || xs.extent(0) != hs.extent(0) || xs.extent(1) != hs.extent(1))
    throw std::invalid_argument("convlstm_step: spatial extents of input and state disagree");
  if (deformable && !p.has_offset())
    throw std::invalid_argument("convlstm_step: deformable step requested without an offset predictor");
  const int pad = p.k / 2;
  const int64_t h = hs.extent(0), w = hs.extent(1);

  Var<T> xi = ad::conv2d(tp, x_t, p.wxi, Var<T>{}, 1, 1, pad, pad);
  Var<T> xf = ad::conv2d(tp, x_t, p.wxf, Var<T>{}, 1, 1, pad, pad);
  Var<T> xo = ad::conv2d(tp, x_t, p.wxo, Var<T>{}, 1, 1, pad, pad);
  Var<T> xg;
  if (deformable) {
    Var<T> off = ad::conv2d(tp, x_t, p.off_w, p.off_b, 1, 1, pad, pad);
    xg = ad::deformable_conv2d(tp, x_t, p.wxg, Var<T>{}, off, 1, 1, pad, pad);
  } else {
    xg = ad::conv2d(tp, x_t, p.wxg, Var<T>{}, 1, 1, pad, pad);
  }

  Var<T> gap = ad::reduce_mean(tp, s.h, {0, 1});
  Var<T> hi = ad::broadcast_hw(tp, ad::mul(tp, p.hsi, gap), h, w);
  Var<T> hf = ad::broadcast_hw(tp, ad::mul(tp, p.hsf, gap), h, w);
  Var<T> ho = ad::broadcast_hw(tp, ad::mul(tp, p.hso, gap), h, w);
  Var<T> hg = ad::conv2d(tp, s.h, p.whg, Var<T>{}, 1, 1, pad, pad);

  Var<T> gi = ad::sigmoid(tp, ad::add_channel_bias(tp, ad::add(tp, xi, hi), p.bi));
  Var<T> gf = ad::sigmoid(tp, ad::add_channel_bias(tp, ad::add(tp, xf, hf), p.bf));
  Var<T> go = ad::sigmoid(tp, ad::add_channel_bias(tp, ad::add(tp, xo, ho), p.bo));
  Var<T> gg = ad::tanh(tp, ad::add_channel_bias(tp, ad::add(tp, xg, hg), p.bg));

  Var<T> c_next = ad::add(tp, ad::mul(tp, gf, s.c), ad::mul(tp, gi, gg));
  Var<T> h_next = ad::mul(tp, go, ad::tanh(tp, c_next));
  return ConvLSTMState<T>{h_next, c_next};
}

// Frames at which the deformable path runs: per_quartile consecutive frames
// starting at the 25%, 50% and 75% marks, clamped to [0, t-1].
inline std::vector<int64_t> deformable_schedule(int64_t t, int per_quartile = 3) {
  if (t < 1) throw std::invalid_argument("deformable_schedule: t must be >= 1");
  std::set<int64_t> picks;
  for (int64_t base : {t / 4, t / 2, 3 * t / 4})
    for (int64_t k = 0; k < per_quartile; ++k)
      if (base + k <= t - 1) picks.insert(base + k);
  return std::vector<int64_t>(picks.begin(), picks.end());
}

// Iterates convlstm_step over time from a zero initial state and stacks the
// hidden maps; step t takes the deformable path iff t is in the schedule.
template <typename T>
Var<T> unroll(Tape<T>& tp, Var<T> x, const ConvLSTMCellVars<T>& p,
              const std::vector<int64_t>& schedule) {
  const Shape& xs = tp.value(x).shape();
  if (xs.rank() != 4) throw std::invalid_argument("unroll: input must be [t,h,w,c]");
  const int64_t t_n = xs.extent(0);
  if (t_n < 1) throw std::invalid_argument("unroll: empty input");
  const int64_t c_hidden = tp.value(p.wxi).shape().extent(3);

  ConvLSTMState<T> state;
  state.h = tp.leaf(Tensor<T>::zeros(Shape{xs.extent(1), xs.extent(2), c_hidden}), false);
  state.c = tp.leaf(Tensor<T>::zeros(Shape{xs.extent(1), xs.extent(2), c_hidden}), false);

  std::vector<Var<T>> hidden;
  hidden.reserve(static_cast<size_t>(t_n));
  for (int64_t t = 0; t < t_n; ++t) {
    const bool deformable =
        p.has_offset() && std::find(schedule.begin(), schedule.end(), t) != schedule.end();
    state = convlstm_step(tp, ad::frame(tp, x, t), state, p, deformable);
    hidden.push_back(state.h);
  }
  return ad::stack_frames(tp, hidden);
}

}  // namespace dclstm
