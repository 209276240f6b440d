#pragma once

#include <string>
#include <vector>

#include "dclstm/convlstm.hpp"
#include "dclstm/train.hpp"

// Finite-difference verification of every differentiable kernel. Each named
// check builds a small random instance, scalarizes the output through a fixed
// random weighting, and compares backward() gradients against central
// differences of the 64-bit forward. The 32-bit pass re-runs the same
// instance in float and is held to a looser tolerance; offsets are kept at
// least 0.1 from integer displacements where bilinear sampling has its kink.

namespace dclstm {

inline constexpr double kGradTol32 = 1e-3;
inline constexpr double kGradTol64 = 1e-5;

struct GradCheckResult {
  std::string kernel;
  double max_rel_err_f32 = 0.0;
  double max_rel_err_f64 = 0.0;
  bool pass = false;
};

namespace gc {

enum class Kind {
  matmul,
  sigmoid_op,
  tanh_op,
  relu_op,
  conv2d_op,
  conv3d_op,
  maxpool3d_op,
  avgpool2d_op,
  deformable_conv2d_op,
  convlstm_step_op,
  cross_entropy_op,
};

struct Instance {
  Kind kind;
  std::vector<Tensor<float>> inputs;
  int stride = 1, pad = 1;
  std::array<int, 3> window = {2, 2, 2};
  std::vector<int64_t> schedule;
  int64_t label = 0;
};

template <typename T>
Var<T> build_output(const Instance& ins, Tape<T>& tp, const std::vector<Var<T>>& in) {
  switch (ins.kind) {
    case Kind::matmul:
      return ad::matmul(tp, in[0], in[1]);
    case Kind::sigmoid_op:
      return ad::sigmoid(tp, in[0]);
    case Kind::tanh_op:
      return ad::tanh(tp, in[0]);
    case Kind::relu_op:
      return ad::relu(tp, in[0]);
    case Kind::conv2d_op:
      return ad::conv2d(tp, in[0], in[1], in[2], ins.stride, ins.stride, ins.pad, ins.pad);
    case Kind::conv3d_op:
      return ad::conv3d(tp, in[0], in[1], in[2], 1, 1, 1, ins.pad, ins.pad, ins.pad);
    case Kind::maxpool3d_op:
      return ad::maxpool3d(tp, in[0], ins.window, ins.window);
    case Kind::avgpool2d_op:
      return ad::avgpool2d(tp, in[0], {ins.window[1], ins.window[2]}, {ins.window[1], ins.window[2]});
    case Kind::deformable_conv2d_op:
      return ad::deformable_conv2d(tp, in[0], in[1], in[2], in[3], 1, 1, ins.pad, ins.pad);
    case Kind::convlstm_step_op: {
      ConvLSTMCellVars<T> cell;
      cell.k = 3;
      cell.wxi = in[1];
      cell.wxf = in[2];
      cell.wxo = in[3];
      cell.wxg = in[4];
      cell.hsi = in[5];
      cell.hsf = in[6];
      cell.hso = in[7];
      cell.whg = in[8];
      cell.bi = in[9];
      cell.bf = in[10];
      cell.bo = in[11];
      cell.bg = in[12];
      cell.off_w = in[13];
      cell.off_b = in[14];
      return unroll(tp, in[0], cell, ins.schedule);
    }
    case Kind::cross_entropy_op:
      return cross_entropy(tp, in[0], ins.label);
  }
  throw std::logic_error("gradcheck: unknown kind");
}

// Offsets whose displacement from every integer is at least `band`.
inline Tensor<float> banded_offsets(const Shape& shape, Rng& rng, double band = 0.1) {
  Tensor<float> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double frac = rng.uniform(band, 1.0 - band);
    const double whole = static_cast<double>(rng.uniform_int(-2, 1));
    t[i] = static_cast<float>(whole + frac);
  }
  return t;
}

inline Tensor<float> uniform_t(const Shape& s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor<float> t(s);
  rng.fill_uniform(t, lo, hi);
  return t;
}

// Shuffled linspace keeps pool ties and relu kinks away from the probes.
inline Tensor<float> separated_t(const Shape& s, Rng& rng) {
  Tensor<float> t(s);
  const int64_t n = t.numel();
  std::vector<float> vals(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    float v = -1.0f + 2.0f * static_cast<float>(i + 1) / static_cast<float>(n + 1);
    if (std::abs(v) < 1e-2f) v += 0.05f;
    vals[static_cast<size_t>(i)] = v;
  }
  for (int64_t i = n; i > 1; --i)
    std::swap(vals[static_cast<size_t>(i - 1)], vals[static_cast<size_t>(rng.uniform_int(0, i - 1))]);
  for (int64_t i = 0; i < n; ++i) t[i] = vals[static_cast<size_t>(i)];
  return t;
}

inline Instance make_instance(const std::string& kernel, Rng& rng) {
  Instance ins;
  if (kernel == "matmul") {
    ins.kind = Kind::matmul;
    const int64_t m = rng.uniform_int(2, 5), k = rng.uniform_int(2, 5), n = rng.uniform_int(2, 5);
    ins.inputs = {uniform_t(Shape{m, k}, rng), uniform_t(Shape{k, n}, rng)};
  } else if (kernel == "sigmoid") {
    ins.kind = Kind::sigmoid_op;
    ins.inputs = {uniform_t(Shape{rng.uniform_int(2, 6), rng.uniform_int(2, 6), rng.uniform_int(1, 3)}, rng,
                            -2.0f, 2.0f)};
  } else if (kernel == "tanh") {
    ins.kind = Kind::tanh_op;
    ins.inputs = {uniform_t(Shape{rng.uniform_int(2, 6), rng.uniform_int(2, 6), rng.uniform_int(1, 3)}, rng,
                            -2.0f, 2.0f)};
  } else if (kernel == "relu") {
    ins.kind = Kind::relu_op;
    ins.inputs = {separated_t(Shape{rng.uniform_int(2, 6), rng.uniform_int(2, 6), rng.uniform_int(1, 3)}, rng)};
  } else if (kernel == "conv2d") {
    ins.kind = Kind::conv2d_op;
    ins.stride = static_cast<int>(rng.uniform_int(1, 2));
    ins.pad = 1;
    const int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int64_t h = 5, w = ins.stride == 2 ? 5 : 6;
    ins.inputs = {uniform_t(Shape{h, w, ci}, rng), uniform_t(Shape{3, 3, ci, co}, rng),
                  uniform_t(Shape{co}, rng)};
  } else if (kernel == "conv3d") {
    ins.kind = Kind::conv3d_op;
    ins.pad = 1;
    const int64_t ci = rng.uniform_int(1, 2), co = rng.uniform_int(1, 2);
    ins.inputs = {uniform_t(Shape{3, 4, 4, ci}, rng), uniform_t(Shape{3, 3, 3, ci, co}, rng),
                  uniform_t(Shape{co}, rng)};
  } else if (kernel == "maxpool3d") {
    ins.kind = Kind::maxpool3d_op;
    ins.window = rng.uniform_int(0, 1) ? std::array<int, 3>{2, 2, 2} : std::array<int, 3>{1, 2, 2};
    ins.inputs = {separated_t(Shape{4, 4, 4, rng.uniform_int(1, 3)}, rng)};
  } else if (kernel == "avgpool2d") {
    ins.kind = Kind::avgpool2d_op;
    ins.inputs = {uniform_t(Shape{4, 6, rng.uniform_int(1, 3)}, rng)};
  } else if (kernel == "deformable_conv2d") {
    ins.kind = Kind::deformable_conv2d_op;
    ins.pad = 1;
    const int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int64_t h = 5, w = 5;
    ins.inputs = {uniform_t(Shape{h, w, ci}, rng), uniform_t(Shape{3, 3, ci, co}, rng),
                  uniform_t(Shape{co}, rng), banded_offsets(Shape{h, w, 18}, rng)};
  } else if (kernel == "convlstm_step") {
    ins.kind = Kind::convlstm_step_op;
    ins.schedule = {1};  // second of two steps takes the deformable path
    const int64_t ci = 2, ch = 2;
    ins.inputs = {uniform_t(Shape{2, 4, 4, ci}, rng),
                  uniform_t(Shape{3, 3, ci, ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{3, 3, ci, ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{3, 3, ci, ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{3, 3, ci, ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{3, 3, ch, ch}, rng, -0.5f, 0.5f),
                  uniform_t(Shape{ch}, rng, -0.2f, 0.2f),
                  uniform_t(Shape{ch}, rng, 0.8f, 1.2f),
                  uniform_t(Shape{ch}, rng, -0.2f, 0.2f),
                  uniform_t(Shape{ch}, rng, -0.2f, 0.2f),
                  Tensor<float>::zeros(Shape{3, 3, ci, 18}),
                  banded_offsets(Shape{18}, rng)};
  } else if (kernel == "cross_entropy") {
    ins.kind = Kind::cross_entropy_op;
    const int64_t n = rng.uniform_int(3, 6);
    ins.label = rng.uniform_int(0, n - 1);
    ins.inputs = {uniform_t(Shape{n}, rng, -2.0f, 2.0f)};
  } else {
    throw std::invalid_argument("gradcheck: unknown kernel " + kernel);
  }
  return ins;
}

template <typename T>
std::vector<Tensor<T>> tape_gradients(const Instance& ins, const Tensor<float>& weights) {
  Tape<T> tp;
  std::vector<Var<T>> leaves;
  leaves.reserve(ins.inputs.size());
  for (const auto& in : ins.inputs) leaves.push_back(tp.leaf(cast<T>(in), true));
  Var<T> out = build_output(ins, tp, leaves);
  Var<T> loss = ad::sum(tp, ad::mul(tp, out, tp.leaf(cast<T>(weights), false)));
  tp.backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(leaves.size());
  for (Var<T> v : leaves) grads.push_back(tp.grad(v));
  return grads;
}

inline double loss_value_f64(const Instance& ins, const std::vector<Tensor<double>>& inputs,
                             const Tensor<float>& weights) {
  Tape<double> tp;
  std::vector<Var<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(tp.leaf(in, false));
  Var<double> out = build_output(ins, tp, leaves);
  const Tensor<double>& ov = tp.value(out);
  double s = 0;
  for (int64_t i = 0; i < ov.numel(); ++i) s += ov[i] * static_cast<double>(weights[i]);
  return s;
}

inline double max_rel_err(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max(1e-8, std::abs(a[i]) + std::abs(b[i])));
  return m;
}

}  // namespace gc

inline const std::vector<std::string>& gradcheck_kernels() {
  static const std::vector<std::string> names = {
      "matmul",    "sigmoid",   "tanh",      "relu",          "conv2d",        "conv3d",
      "maxpool3d", "avgpool2d", "deformable_conv2d", "convlstm_step", "cross_entropy"};
  return names;
}

inline GradCheckResult gradcheck_kernel(const std::string& kernel, int trials, uint64_t seed) {
  GradCheckResult res;
  res.kernel = kernel;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(splitmix64(seed) ^ static_cast<uint64_t>(trial));
    gc::Instance ins = gc::make_instance(kernel, rng);

    // fixed random scalarization weights, shaped like the output
    Shape out_shape = [&] {
      Tape<float> probe;
      std::vector<Var<float>> leaves;
      for (const auto& in : ins.inputs) leaves.push_back(probe.leaf(in, false));
      return probe.value(gc::build_output(ins, probe, leaves)).shape();
    }();
    Tensor<float> weights = gc::uniform_t(out_shape, rng, -1.0f, 1.0f);

    const auto g32 = gc::tape_gradients<float>(ins, weights);
    const auto g64 = gc::tape_gradients<double>(ins, weights);

    std::vector<Tensor<double>> inputs_d;
    inputs_d.reserve(ins.inputs.size());
    for (const auto& in : ins.inputs) inputs_d.push_back(cast<double>(in));

    for (size_t k = 0; k < ins.inputs.size(); ++k) {
      auto f = [&](const Tensor<double>& probe) {
        std::vector<Tensor<double>> local = inputs_d;
        local[k] = probe;
        return gc::loss_value_f64(ins, local, weights);
      };
      const Tensor<double> fd = finite_diff_grad(f, inputs_d[k], 1e-4);
      res.max_rel_err_f32 = std::max(res.max_rel_err_f32, gc::max_rel_err(cast<double>(g32[k]), fd));
      res.max_rel_err_f64 = std::max(res.max_rel_err_f64, gc::max_rel_err(g64[k], fd));
    }
  }
  res.pass = res.max_rel_err_f32 < kGradTol32 && res.max_rel_err_f64 < kGradTol64;
  return res;
}

inline std::vector<GradCheckResult> gradcheck_all(int trials, uint64_t seed) {
  std::vector<GradCheckResult> out;
  for (const auto& name : gradcheck_kernels()) out.push_back(gradcheck_kernel(name, trials, seed));
  return out;
}

}  // namespace dclstm
