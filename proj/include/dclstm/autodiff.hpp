#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dclstm/kernels.hpp"
#include "dclstm/tensor.hpp"

// Define-by-run reverse-mode autodiff. A Tape owns the nodes of one forward
// pass; ops append a node holding the output value and a closure that pulls
// the node's gradient and pushes it into the parents. The tape is rebuilt per
// forward pass because the model's structure is data dependent (deformable
// steps run on selected frames only).

namespace dclstm {

template <typename T = float>
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T = float>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // lazily allocated; same shape as value once it exists
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;  // null for leaves
  };

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    guard_finite(value, "tape leaf");
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, {}, nullptr});
    return Var<T>{static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> make(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Tape&, int)> backward) {
    guard_finite(value, "tape op");
    bool rg = false;
    std::vector<int> pids;
    pids.reserve(parents.size());
    for (Var<T> p : parents) {
      check(p);
      rg = rg || nodes_[static_cast<size_t>(p.id)].requires_grad;
      pids.push_back(p.id);
    }
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, rg, std::move(pids), std::move(backward)});
    return Var<T>{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var<T> v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  bool requires_grad(Var<T> v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id)].requires_grad;
  }

  bool has_grad(Var<T> v) const {
    check(v);
    return !nodes_[static_cast<size_t>(v.id)].grad.empty();
  }

  // Gradient read access; zeros if backward never reached the node.
  const Tensor<T>& grad(Var<T> v) {
    check(v);
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  // Accumulating write access used by backward closures.
  Tensor<T>* grad_sink(int node_id) {
    Node& n = nodes_[static_cast<size_t>(node_id)];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return &n.grad;
  }

  void accumulate(int node_id, const Tensor<T>& g) {
    Tensor<T>* sink = grad_sink(node_id);
    if (!sink) return;
    if (sink->shape() != g.shape()) throw std::invalid_argument("tape: gradient shape mismatch");
    T* dst = sink->data();
    const T* src = g.data();
    const int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  // Populates grad = d loss / d value for every requires_grad node reachable
  // from loss; gradients from multiple consumers accumulate by addition.
  void backward(Var<T> loss) {
    check(loss);
    Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (Node& n : nodes_) n.grad = Tensor<T>{};
    ln.grad = Tensor<T>::full(ln.value.shape(), T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && n.requires_grad && !n.grad.empty()) n.backward(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  void check(Var<T> v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("tape: variable does not belong to this tape (detached graph)");
  }

  std::vector<Node> nodes_;
};

namespace ad {

template <typename T>
const Tensor<T>& out_grad(Tape<T>& tp, int id) {
  return tp.grad(Var<T>{id});
}

template <typename T>
Var<T> add(Tape<T>& tp, Var<T> a, Var<T> b) {
  Tensor<T> y = dclstm::add(tp.value(a), tp.value(b));
  return tp.make(std::move(y), {a, b}, [a, b](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    t.accumulate(a.id, dy);
    t.accumulate(b.id, dy);
  });
}

template <typename T>
Var<T> sub(Tape<T>& tp, Var<T> a, Var<T> b) {
  Tensor<T> y = dclstm::sub(tp.value(a), tp.value(b));
  return tp.make(std::move(y), {a, b}, [a, b](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    t.accumulate(a.id, dy);
    if (Tensor<T>* db = t.grad_sink(b.id)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*db)[i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Tape<T>& tp, Var<T> a, Var<T> b) {
  Tensor<T> y = dclstm::mul(tp.value(a), tp.value(b));
  return tp.make(std::move(y), {a, b}, [a, b](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (t.requires_grad(Var<T>{a.id})) t.accumulate(a.id, dclstm::mul(dy, t.value(b)));
    if (t.requires_grad(Var<T>{b.id})) t.accumulate(b.id, dclstm::mul(dy, t.value(a)));
  });
}

template <typename T>
Var<T> sigmoid(Tape<T>& tp, Var<T> a) {
  Tensor<T> y = dclstm::sigmoid(tp.value(a));
  return tp.make(std::move(y), {a}, [a](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    const Tensor<T>& y = t.value(Var<T>{id});
    if (Tensor<T>* da = t.grad_sink(a.id)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * y[i] * (T(1) - y[i]);
    }
  });
}

template <typename T>
Var<T> tanh(Tape<T>& tp, Var<T> a) {
  Tensor<T> y = dclstm::tanh(tp.value(a));
  return tp.make(std::move(y), {a}, [a](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    const Tensor<T>& y = t.value(Var<T>{id});
    if (Tensor<T>* da = t.grad_sink(a.id)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * (T(1) - y[i] * y[i]);
    }
  });
}

// Gradient at exactly 0 is defined as 0.
template <typename T>
Var<T> relu(Tape<T>& tp, Var<T> a) {
  Tensor<T> y = dclstm::relu(tp.value(a));
  return tp.make(std::move(y), {a}, [a](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    const Tensor<T>& x = t.value(Var<T>{a.id});
    if (Tensor<T>* da = t.grad_sink(a.id)) {
      for (int64_t i = 0; i < dy.numel(); ++i)
        if (x[i] > T(0)) (*da)[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> scale(Tape<T>& tp, Var<T> a, T k) {
  Tensor<T> y = dclstm::scale(tp.value(a), k);
  return tp.make(std::move(y), {a}, [a, k](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (Tensor<T>* da = t.grad_sink(a.id)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += k * dy[i];
    }
  });
}

template <typename T>
Var<T> reduce_mean(Tape<T>& tp, Var<T> a, const std::vector<int>& axes) {
  Tensor<T> y = dclstm::reduce_mean(tp.value(a), axes);
  const Shape in_shape = tp.value(a).shape();
  const T inv = static_cast<T>(y.numel()) / static_cast<T>(in_shape.numel());
  // prefix reduction (e.g. global average pooling) keeps a contiguous tail
  bool prefix = true;
  std::vector<bool> reduced(static_cast<size_t>(in_shape.rank()), false);
  for (int ax : axes) reduced[static_cast<size_t>(ax)] = true;
  for (size_t i = 0; i < reduced.size(); ++i)
    if (reduced[i] != (i < axes.size())) prefix = false;
  return tp.make(std::move(y), {a}, [a, in_shape, inv, prefix, reduced](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    Tensor<T>* da = t.grad_sink(a.id);
    if (!da) return;
    if (prefix) {
      const int64_t tail = dy.numel();
      const int64_t rows = in_shape.numel() / tail;
      for (int64_t r = 0; r < rows; ++r) {
        T* dst = da->data() + r * tail;
        for (int64_t j = 0; j < tail; ++j) dst[j] += dy[j] * inv;
      }
    } else {
      const int r = in_shape.rank();
      for (int64_t flat = 0; flat < in_shape.numel(); ++flat) {
        auto c = in_shape.coords(flat);
        int64_t out_idx = 0, mult = 1;
        for (int ax = r - 1; ax >= 0; --ax) {
          if (!reduced[static_cast<size_t>(ax)]) {
            out_idx += c[static_cast<size_t>(ax)] * mult;
            mult *= in_shape.extent(ax);
          }
        }
        (*da)[flat] += dy[out_idx] * inv;
      }
    }
  });
}

template <typename T>
Var<T> sum(Tape<T>& tp, Var<T> a) {
  const Tensor<T>& x = tp.value(a);
  T s = 0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
  Tensor<T> y{Shape{1}, {s}};
  return tp.make(std::move(y), {a}, [a](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (Tensor<T>* da = t.grad_sink(a.id)) {
      for (int64_t i = 0; i < da->numel(); ++i) (*da)[i] += dy[0];
    }
  });
}

template <typename T>
Var<T> matmul(Tape<T>& tp, Var<T> a, Var<T> b) {
  Tensor<T> y = dclstm::matmul(tp.value(a), tp.value(b));
  return tp.make(std::move(y), {a, b}, [a, b](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    const int64_t m = av.shape().extent(0), k = av.shape().extent(1), n = bv.shape().extent(1);
    if (Tensor<T>* da = t.grad_sink(a.id)) {  // dA = dY * B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t l = 0; l < k; ++l) {
          T acc = 0;
#pragma omp simd reduction(+ : acc)
          for (int64_t j = 0; j < n; ++j) acc += dy[i * n + j] * bv[l * n + j];
          (*da)[i * k + l] += acc;
        }
    }
    if (Tensor<T>* db = t.grad_sink(b.id)) {  // dB = A^T * dY
      for (int64_t i = 0; i < m; ++i)
        for (int64_t l = 0; l < k; ++l) {
          const T av_il = av[i * k + l];
          for (int64_t j = 0; j < n; ++j) (*db)[l * n + j] += av_il * dy[i * n + j];
        }
    }
  });
}

template <typename T>
Var<T> reshape(Tape<T>& tp, Var<T> a, const Shape& s) {
  Tensor<T> y = tp.value(a).reshaped(s);
  const Shape in_shape = tp.value(a).shape();
  return tp.make(std::move(y), {a}, [a, in_shape](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    t.accumulate(a.id, dy.reshaped(in_shape));
  });
}

// Slice one frame [h,w,c] out of a [t,h,w,c] sequence.
template <typename T>
Var<T> frame(Tape<T>& tp, Var<T> x, int64_t t_idx) {
  const Tensor<T>& xv = tp.value(x);
  if (xv.shape().rank() != 4) throw std::invalid_argument("frame: input must be [t,h,w,c]");
  const int64_t tn = xv.shape().extent(0);
  if (t_idx < 0 || t_idx >= tn) throw std::invalid_argument("frame: index out of range");
  const int64_t fsize = xv.numel() / tn;
  Tensor<T> y{Shape{xv.shape().extent(1), xv.shape().extent(2), xv.shape().extent(3)}};
  std::copy(xv.data() + t_idx * fsize, xv.data() + (t_idx + 1) * fsize, y.data());
  return tp.make(std::move(y), {x}, [x, t_idx, fsize](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (Tensor<T>* dx = t.grad_sink(x.id)) {
      T* dst = dx->data() + t_idx * fsize;
      for (int64_t i = 0; i < fsize; ++i) dst[i] += dy[i];
    }
  });
}

// Stack [h,w,c] frames into [t,h,w,c].
template <typename T>
Var<T> stack_frames(Tape<T>& tp, const std::vector<Var<T>>& frames) {
  if (frames.empty()) throw std::invalid_argument("stack_frames: empty input");
  const Shape fs = tp.value(frames[0]).shape();
  const int64_t tn = static_cast<int64_t>(frames.size());
  const int64_t fsize = fs.numel();
  Tensor<T> y{Shape{tn, fs.extent(0), fs.extent(1), fs.extent(2)}};
  for (int64_t i = 0; i < tn; ++i) {
    const Tensor<T>& fv = tp.value(frames[static_cast<size_t>(i)]);
    if (fv.shape() != fs) throw std::invalid_argument("stack_frames: inhomogeneous frame shapes");
    std::copy(fv.data(), fv.data() + fsize, y.data() + i * fsize);
  }
  return tp.make(std::move(y), frames, [frames, fsize](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    for (size_t i = 0; i < frames.size(); ++i) {
      if (Tensor<T>* df = t.grad_sink(frames[i].id)) {
        const T* src = dy.data() + static_cast<int64_t>(i) * fsize;
        for (int64_t j = 0; j < fsize; ++j) (*df)[j] += src[j];
      }
    }
  });
}

// map[..., c] + bias[c], bias broadcast over the leading axes.
template <typename T>
Var<T> add_channel_bias(Tape<T>& tp, Var<T> a, Var<T> bias) {
  const Tensor<T>& av = tp.value(a);
  const Tensor<T>& bv = tp.value(bias);
  const int64_t c = av.shape().extent(av.shape().rank() - 1);
  if (bv.shape().rank() != 1 || bv.shape().extent(0) != c)
    throw std::invalid_argument("add_channel_bias: bias must match last axis");
  Tensor<T> y(av.shape());
  const int64_t rows = av.numel() / c;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) y[r * c + j] = av[r * c + j] + bv[j];
  guard_finite(y, "add_channel_bias");
  return tp.make(std::move(y), {a, bias}, [a, bias, rows, c](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    t.accumulate(a.id, dy);
    if (Tensor<T>* db = t.grad_sink(bias.id)) {
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) (*db)[j] += dy[r * c + j];
    }
  });
}

// vec[c] -> [h,w,c], copied across space; backward sums over space.
template <typename T>
Var<T> broadcast_hw(Tape<T>& tp, Var<T> vec, int64_t h, int64_t w) {
  const Tensor<T>& v = tp.value(vec);
  if (v.shape().rank() != 1) throw std::invalid_argument("broadcast_hw: input must be rank 1");
  const int64_t c = v.shape().extent(0);
  Tensor<T> y{Shape{h, w, c}};
  for (int64_t r = 0; r < h * w; ++r)
    for (int64_t j = 0; j < c; ++j) y[r * c + j] = v[j];
  return tp.make(std::move(y), {vec}, [vec, h, w, c](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (Tensor<T>* dv = t.grad_sink(vec.id)) {
      for (int64_t r = 0; r < h * w; ++r)
        for (int64_t j = 0; j < c; ++j) (*dv)[j] += dy[r * c + j];
    }
  });
}

template <typename T>
Var<T> conv2d(Tape<T>& tp, Var<T> x, Var<T> weight, Var<T> bias, int sh, int sw, int ph, int pw) {
  Tensor<T> y = dclstm::conv2d(tp.value(x), tp.value(weight),
                               bias.valid() ? tp.value(bias) : Tensor<T>{}, sh, sw, ph, pw);
  std::vector<Var<T>> parents{x, weight};
  if (bias.valid()) parents.push_back(bias);
  return tp.make(std::move(y), parents, [x, weight, bias, sh, sw, ph, pw](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    Tensor<T>* dx = t.grad_sink(x.id);
    Tensor<T>* dw = t.grad_sink(weight.id);
    Tensor<T>* db = bias.valid() ? t.grad_sink(bias.id) : nullptr;
    if (dx || dw || db) conv2d_grad(t.value(x), t.value(weight), sh, sw, ph, pw, dy, dx, dw, db);
  });
}

template <typename T>
Var<T> conv3d(Tape<T>& tp, Var<T> x, Var<T> weight, Var<T> bias,
              int st, int sh, int sw, int pt, int ph, int pw) {
  Tensor<T> y = dclstm::conv3d(tp.value(x), tp.value(weight),
                               bias.valid() ? tp.value(bias) : Tensor<T>{}, st, sh, sw, pt, ph, pw);
  std::vector<Var<T>> parents{x, weight};
  if (bias.valid()) parents.push_back(bias);
  return tp.make(std::move(y), parents, [x, weight, bias, st, sh, sw, pt, ph, pw](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    Tensor<T>* dx = t.grad_sink(x.id);
    Tensor<T>* dw = t.grad_sink(weight.id);
    Tensor<T>* db = bias.valid() ? t.grad_sink(bias.id) : nullptr;
    if (dx || dw || db) conv3d_grad(t.value(x), t.value(weight), st, sh, sw, pt, ph, pw, dy, dx, dw, db);
  });
}

// Gradient flows to x, weight, bias, and the offsets.
template <typename T>
Var<T> deformable_conv2d(Tape<T>& tp, Var<T> x, Var<T> weight, Var<T> bias, Var<T> offsets,
                         int sh, int sw, int ph, int pw) {
  Tensor<T> y = dclstm::deformable_conv2d(tp.value(x), tp.value(weight),
                                          bias.valid() ? tp.value(bias) : Tensor<T>{},
                                          tp.value(offsets), sh, sw, ph, pw);
  std::vector<Var<T>> parents{x, weight, offsets};
  if (bias.valid()) parents.push_back(bias);
  return tp.make(std::move(y), parents, [x, weight, bias, offsets, sh, sw, ph, pw](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    Tensor<T>* dx = t.grad_sink(x.id);
    Tensor<T>* dw = t.grad_sink(weight.id);
    Tensor<T>* db = bias.valid() ? t.grad_sink(bias.id) : nullptr;
    Tensor<T>* doff = t.grad_sink(offsets.id);
    if (dx || dw || db || doff)
      deformable_conv2d_grad(t.value(x), t.value(weight), t.value(offsets), sh, sw, ph, pw, dy,
                             dx, dw, db, doff);
  });
}

template <typename T>
Var<T> maxpool3d(Tape<T>& tp, Var<T> x, std::array<int, 3> window, std::array<int, 3> stride) {
  std::vector<int64_t> argmax;
  Tensor<T> y = dclstm::maxpool3d(tp.value(x), window, stride, &argmax);
  return tp.make(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (Tensor<T>* dx = t.grad_sink(x.id)) maxpool3d_grad(argmax, dy, dx);
  });
}

template <typename T>
Var<T> avgpool2d(Tape<T>& tp, Var<T> x, std::array<int, 2> window, std::array<int, 2> stride) {
  Tensor<T> y = dclstm::avgpool2d(tp.value(x), window, stride);
  const Shape in_shape = tp.value(x).shape();
  return tp.make(std::move(y), {x}, [x, in_shape, window, stride](Tape<T>& t, int id) {
    const Tensor<T>& dy = out_grad(t, id);
    if (Tensor<T>* dx = t.grad_sink(x.id)) avgpool2d_grad(in_shape, window, stride, dy, dx);
  });
}

}  // namespace ad

// Central-difference gradient oracle: (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps)
// per coordinate. Runs wherever f runs; tests instantiate it in 64-bit.
template <typename F>
Tensor<double> finite_diff_grad(F f, const Tensor<double>& x, double eps = 1e-4) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

}  // namespace dclstm
