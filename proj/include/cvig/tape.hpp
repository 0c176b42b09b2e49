#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvig/ops.hpp"
#include "cvig/tensor.hpp"

// Minimal reverse-mode tape over whole tensors. Nodes are shared handles;
// a recording tape keeps every node that depends on a watched parameter and
// replays their backward rules in reverse insertion order.

namespace cvig::ad {

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  add_bias,
  scale1p,
  mul_rows,
  gelu,
  leaky_relu,
  softmax,
  concat,
  gather_rows,
  segment_reduce,
  reduce,
  reshape,
  im2col,
  depthwise,
  batchnorm,
  cross_entropy,
  sum,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::add_bias: return "add_bias";
    case OpKind::scale1p: return "scale1p";
    case OpKind::mul_rows: return "mul_rows";
    case OpKind::gelu: return "gelu";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::softmax: return "softmax";
    case OpKind::concat: return "concat";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::segment_reduce: return "segment_reduce";
    case OpKind::reduce: return "reduce";
    case OpKind::reshape: return "reshape";
    case OpKind::im2col: return "im2col";
    case OpKind::depthwise: return "depthwise";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::sum: return "sum";
  }
  return "?";
}

template <class T>
struct Node {
  OpKind op = OpKind::leaf;
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  const Shape& shape() const { return value.shape(); }

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    Tensor<T>& dst = grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  Node* input(std::size_t i) const { return inputs[i].get(); }
  bool wants(std::size_t i) const { return inputs[i]->requires_grad; }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
using GradMap = std::map<std::string, Tensor<T>>;

/// A value with no history. Parameters are leaves that a tape watches.
template <class T>
Var<T> leaf(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) const { return leaf(std::move(value)); }

  /// Marks `param` as differentiable on this tape under `name`.
  void watch(const std::string& name, const Var<T>& param) {
    if (!recording_) return;
    param->requires_grad = true;
    param->has_grad = false;
    param->grad = Tensor<T>();
    params_.emplace_back(name, param);
  }

  Var<T> record(OpKind op, Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
    if (!value.all_finite()) throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
    auto n = std::make_shared<Node<T>>();
    n->op = op;
    n->value = std::move(value);
    bool needs = false;
    if (recording_)
      for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (needs) {
      n->requires_grad = true;
      n->inputs = std::move(inputs);
      n->backward = std::move(backward);
      nodes_.push_back(n);
    }
    return n;
  }

  /// Gradients of a scalar loss for every watched parameter.
  GradMap<T> backward(const Var<T>& loss) {
    if (loss->value.size() != 1) throw DimensionError("backward: loss must be a scalar, got shape " + to_string(loss->shape()));
    return backward(loss, Tensor<T>(loss->shape(), T(1)));
  }

  /// Vector-Jacobian product seeded with `upstream` at `output`.
  GradMap<T> backward(const Var<T>& output, const Tensor<T>& upstream) {
    if (upstream.shape() != output->shape())
      throw DimensionError("backward: upstream gradient shape " + to_string(upstream.shape()) +
                           " differs from output " + to_string(output->shape()));
    if (output->requires_grad) output->accumulate(upstream);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.has_grad && n.backward) n.backward(n);
    }
    GradMap<T> grads;
    for (const auto& [name, p] : params_) grads[name] = p->has_grad ? p->grad : Tensor<T>(p->shape());
    return grads;
  }

  const std::vector<std::pair<std::string, Var<T>>>& watched() const noexcept { return params_; }

 private:
  bool recording_;
  std::vector<Var<T>> nodes_;
  std::vector<std::pair<std::string, Var<T>>> params_;
};

// ---- differentiable operations --------------------------------------------

template <class T>
Var<T> matmul(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  return t.record(OpKind::matmul, cvig::matmul(a->value, b->value), {a, b}, [](Node<T>& n) {
    if (n.wants(0)) n.input(0)->accumulate(cvig::matmul(n.grad, transpose(n.input(1)->value)));
    if (n.wants(1)) n.input(1)->accumulate(cvig::matmul(transpose(n.input(0)->value), n.grad));
  });
}

template <class T>
Var<T> add(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  return t.record(OpKind::add, cvig::add(a->value, b->value), {a, b}, [](Node<T>& n) {
    if (n.wants(0)) n.input(0)->accumulate(n.grad);
    if (n.wants(1)) n.input(1)->accumulate(n.grad);
  });
}

template <class T>
Var<T> sub(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  return t.record(OpKind::sub, cvig::sub(a->value, b->value), {a, b}, [](Node<T>& n) {
    if (n.wants(0)) n.input(0)->accumulate(n.grad);
    if (n.wants(1)) {
      Tensor<T>& g = n.input(1)->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <class T>
Var<T> add_bias(Tape<T>& t, const Var<T>& x, const Var<T>& bias) {
  return t.record(OpKind::add_bias, cvig::add_bias(x->value, bias->value), {x, bias}, [](Node<T>& n) {
    if (n.wants(0)) n.input(0)->accumulate(n.grad);
    if (n.wants(1)) {
      Tensor<T>& g = n.input(1)->grad_buffer();
      const std::size_t c = g.size();
      for (std::size_t i = 0; i < n.grad.size() / c; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
    }
  });
}

/// x W + b
template <class T>
Var<T> affine(Tape<T>& t, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(t, matmul(t, x, w), b);
}

/// (1 + s) x for a one-element s.
template <class T>
Var<T> scale1p(Tape<T>& t, const Var<T>& x, const Var<T>& s) {
  if (s->value.size() != 1) throw DimensionError("scale1p: scale must have one element");
  Tensor<T> out = x->value;
  const T f = T(1) + s->value[0];
  for (auto& v : out.data()) v *= f;
  return t.record(OpKind::scale1p, std::move(out), {x, s}, [](Node<T>& n) {
    const Tensor<T>& xv = n.input(0)->value;
    if (n.wants(0)) {
      const T f = T(1) + n.input(1)->value[0];
      Tensor<T>& g = n.input(0)->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * n.grad[i];
    }
    if (n.wants(1)) {
      T acc{0};
      for (std::size_t i = 0; i < xv.size(); ++i) acc += n.grad[i] * xv[i];
      n.input(1)->grad_buffer()[0] += acc;
    }
  });
}

/// Scales row i of x[n x c] by w[i].
template <class T>
Var<T> mul_rows(Tape<T>& t, const Var<T>& x, const Var<T>& w) {
  const std::size_t rows = x->value.rows(), c = x->value.cols();
  if (w->value.size() != rows) throw DimensionError("mul_rows: weight count must equal row count");
  Tensor<T> out = x->value;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) *= w->value[i];
  return t.record(OpKind::mul_rows, std::move(out), {x, w}, [rows, c](Node<T>& n) {
    const Tensor<T>& xv = n.input(0)->value;
    const Tensor<T>& wv = n.input(1)->value;
    if (n.wants(0)) {
      Tensor<T>& g = n.input(0)->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < c; ++j) g(i, j) += n.grad(i, j) * wv[i];
    }
    if (n.wants(1)) {
      Tensor<T>& g = n.input(1)->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < c; ++j) acc += n.grad(i, j) * xv(i, j);
        g[i] += acc;
      }
    }
  });
}

template <class T>
Var<T> gelu(Tape<T>& t, const Var<T>& x) {
  return t.record(OpKind::gelu, cvig::gelu(x->value), {x}, [](Node<T>& n) {
    const Tensor<T>& xv = n.input(0)->value;
    Tensor<T>& g = n.input(0)->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * gelu_grad(xv[i]);
  });
}

template <class T>
Var<T> leaky_relu(Tape<T>& t, const Var<T>& x, T slope = T(kLeakySlope)) {
  return t.record(OpKind::leaky_relu, cvig::leaky_relu(x->value, slope), {x}, [slope](Node<T>& n) {
    const Tensor<T>& xv = n.input(0)->value;
    Tensor<T>& g = n.input(0)->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (xv[i] > T(0) ? T(1) : slope);
  });
}

template <class T>
Var<T> softmax(Tape<T>& t, const Var<T>& x, std::size_t axis) {
  return t.record(OpKind::softmax, cvig::softmax(x->value, axis), {x}, [axis](Node<T>& n) {
    const Shape& s = n.value.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Tensor<T>& g = n.input(0)->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot{0};
        for (std::size_t k = 0; k < len; ++k) dot += n.grad[base + k * inner] * n.value[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          g[idx] += n.value[idx] * (n.grad[idx] - dot);
        }
      }
  });
}

template <class T>
Var<T> concat(Tape<T>& t, const std::vector<Var<T>>& parts) {
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p->value);
  return t.record(OpKind::concat, concat_features(values), parts, [](Node<T>& n) {
    const std::size_t rows = n.value.rows(), width = n.value.cols();
    std::size_t col = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t c = n.input(k)->value.cols();
      if (n.wants(k)) {
        Tensor<T>& g = n.input(k)->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < c; ++j) g(i, j) += n.grad[i * width + col + j];
      }
      col += c;
    }
  });
}

template <class T>
Var<T> gather_rows(Tape<T>& t, const Var<T>& x, std::vector<std::size_t> index) {
  Tensor<T> out = cvig::gather_rows(x->value, std::span<const std::size_t>(index));
  return t.record(OpKind::gather_rows, std::move(out), {x}, [index = std::move(index)](Node<T>& n) {
    Tensor<T>& g = n.input(0)->grad_buffer();
    const std::size_t c = g.cols();
    for (std::size_t r = 0; r < index.size(); ++r) {
      T* dst = g.ptr() + index[r] * c;
      const T* src = n.grad.ptr() + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Var<T> segment_reduce(Tape<T>& t, ReduceKind kind, const Var<T>& x, std::vector<std::size_t> offsets) {
  auto res = cvig::segment_reduce(kind, x->value, std::span<const std::size_t>(offsets));
  return t.record(OpKind::segment_reduce, std::move(res.values), {x},
                  [kind, offsets = std::move(offsets), argmax = std::move(res.argmax)](Node<T>& n) {
                    Tensor<T>& g = n.input(0)->grad_buffer();
                    const std::size_t c = g.cols();
                    const std::size_t segs = offsets.size() - 1;
                    for (std::size_t s = 0; s < segs; ++s) {
                      const T* src = n.grad.ptr() + s * c;
                      if (kind == ReduceKind::max) {
                        for (std::size_t j = 0; j < c; ++j) g(argmax[s * c + j], j) += src[j];
                      } else {
                        const T scale = kind == ReduceKind::mean ? T(1) / T(offsets[s + 1] - offsets[s]) : T(1);
                        for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
                          for (std::size_t j = 0; j < c; ++j) g(r, j) += src[j] * scale;
                      }
                    }
                  });
}

template <class T>
Var<T> reduce(Tape<T>& t, ReduceKind kind, const Var<T>& x, std::size_t axis) {
  auto res = cvig::reduce(kind, x->value, axis);
  return t.record(OpKind::reduce, std::move(res.values), {x},
                  [kind, axis, argmax = std::move(res.argmax)](Node<T>& n) {
                    Tensor<T>& g = n.input(0)->grad_buffer();
                    const Shape& s = g.shape();
                    std::size_t outer = 1, inner = 1;
                    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
                    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
                    const std::size_t len = s[axis];
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t in = 0; in < inner; ++in) {
                        const std::size_t src = o * inner + in;
                        const std::size_t base = o * len * inner + in;
                        if (kind == ReduceKind::max) {
                          g[base + argmax[src] * inner] += n.grad[src];
                        } else {
                          const T v = kind == ReduceKind::mean ? n.grad[src] / T(len) : n.grad[src];
                          for (std::size_t k = 0; k < len; ++k) g[base + k * inner] += v;
                        }
                      }
                  });
}

template <class T>
Var<T> reshape(Tape<T>& t, const Var<T>& x, Shape shape) {
  return t.record(OpKind::reshape, x->value.reshaped(std::move(shape)), {x}, [](Node<T>& n) {
    Tensor<T>& g = n.input(0)->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <class T>
Var<T> sum(Tape<T>& t, const Var<T>& x) {
  T acc{0};
  for (T v : x->value.data()) acc += v;
  return t.record(OpKind::sum, Tensor<T>::scalar(acc), {x}, [](Node<T>& n) {
    Tensor<T>& g = n.input(0)->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

template <class T>
Var<T> im2col3x3(Tape<T>& t, const Var<T>& x, std::size_t stride) {
  const GridShape in{x->value.dim(0), x->value.dim(1), x->value.dim(2), x->value.dim(3)};
  return t.record(OpKind::im2col, cvig::im2col3x3(x->value, stride), {x}, [in, stride](Node<T>& n) {
    n.input(0)->accumulate(col2im3x3(n.grad, in, stride));
  });
}

/// 3x3 convolution with padding 1 over [B x H x W x Cin]; weight [9*Cin x Cout].
template <class T>
Var<T> conv3x3(Tape<T>& t, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride) {
  const std::size_t B = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  const std::size_t Ho = conv_out_extent(H, stride), Wo = conv_out_extent(W, stride);
  auto y = affine(t, im2col3x3(t, x, stride), weight, bias);
  return reshape(t, y, {B, Ho, Wo, weight->value.dim(1)});
}

template <class T>
Var<T> depthwise3x3(Tape<T>& t, const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  return t.record(OpKind::depthwise, cvig::depthwise3x3(x->value, kernel->value, bias->value), {x, kernel, bias},
                  [](Node<T>& n) {
                    const Tensor<T>& xv = n.input(0)->value;
                    const Tensor<T>& kv = n.input(1)->value;
                    const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
                    Tensor<T>* gx = n.wants(0) ? &n.input(0)->grad_buffer() : nullptr;
                    Tensor<T>* gk = n.wants(1) ? &n.input(1)->grad_buffer() : nullptr;
                    Tensor<T>* gb = n.wants(2) ? &n.input(2)->grad_buffer() : nullptr;
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t xx = 0; xx < W; ++xx) {
                          const T* go = n.grad.ptr() + ((b * H + y) * W + xx) * C;
                          if (gb)
                            for (std::size_t c = 0; c < C; ++c) (*gb)[c] += go[c];
                          for (std::size_t dy = 0; dy < 3; ++dy) {
                            const long iy = static_cast<long>(y + dy) - 1;
                            for (std::size_t dx = 0; dx < 3; ++dx) {
                              const long ix = static_cast<long>(xx + dx) - 1;
                              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                              const std::size_t off = ((b * H + iy) * W + ix) * C;
                              const std::size_t koff = (dy * 3 + dx) * C;
                              for (std::size_t c = 0; c < C; ++c) {
                                if (gx) (*gx)[off + c] += go[c] * kv[koff + c];
                                if (gk) (*gk)[koff + c] += go[c] * xv[off + c];
                              }
                            }
                          }
                        }
                  });
}

template <class T>
Var<T> batchnorm(Tape<T>& t, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, RunningStats<T>& stats,
                 Mode mode) {
  auto r = cvig::batchnorm(x->value, gamma->value, beta->value, stats, mode);
  return t.record(OpKind::batchnorm, std::move(r.out), {x, gamma, beta},
                  [mode, xhat = std::move(r.normalized), inv_std = std::move(r.inv_std)](Node<T>& n) {
                    const std::size_t rows = xhat.rows(), c = xhat.cols();
                    const Tensor<T>& gv = n.input(1)->value;
                    if (n.wants(1) || n.wants(2)) {
                      Tensor<T> dgamma({c}), dbeta({c});
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j) {
                          dgamma[j] += n.grad(i, j) * xhat(i, j);
                          dbeta[j] += n.grad(i, j);
                        }
                      if (n.wants(1)) n.input(1)->accumulate(dgamma);
                      if (n.wants(2)) n.input(2)->accumulate(dbeta);
                    }
                    if (!n.wants(0)) return;
                    Tensor<T>& gx = n.input(0)->grad_buffer();
                    if (mode == Mode::infer) {
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j) gx(i, j) += n.grad(i, j) * gv[j] * inv_std[j];
                      return;
                    }
                    Tensor<T> sum_d({c}), sum_dx({c});
                    for (std::size_t i = 0; i < rows; ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = n.grad(i, j) * gv[j];
                        sum_d[j] += d;
                        sum_dx[j] += d * xhat(i, j);
                      }
                    const T inv_n = T(1) / T(rows);
                    for (std::size_t i = 0; i < rows; ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = n.grad(i, j) * gv[j];
                        gx(i, j) += inv_std[j] * inv_n * (T(rows) * d - sum_d[j] - xhat(i, j) * sum_dx[j]);
                      }
                  });
}

/// Mean softmax cross-entropy of logits[B x K] against integer labels.
template <class T>
Var<T> cross_entropy(Tape<T>& t, const Var<T>& logits, std::vector<std::size_t> labels) {
  const std::size_t B = logits->value.rows(), K = logits->value.cols();
  if (labels.size() != B) throw DimensionError("cross_entropy: one label per row required");
  Tensor<T> probs = cvig::softmax(logits->value, 1);
  T loss{0};
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) throw DimensionError("cross_entropy: label out of range");
    const auto row = logits->value.row(b);
    T m = row[0];
    for (T v : row) m = std::max(m, v);
    T s{0};
    for (T v : row) s += std::exp(v - m);
    loss += (m + std::log(s)) - row[labels[b]];
  }
  loss /= T(B);
  return t.record(OpKind::cross_entropy, Tensor<T>::scalar(loss), {logits},
                  [probs = std::move(probs), labels = std::move(labels)](Node<T>& n) {
                    const std::size_t B = probs.rows(), K = probs.cols();
                    Tensor<T>& g = n.input(0)->grad_buffer();
                    const T scale = n.grad[0] / T(B);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t k = 0; k < K; ++k)
                        g(b, k) += scale * (probs(b, k) - (k == labels[b] ? T(1) : T(0)));
                  });
}

}  // namespace cvig::ad
