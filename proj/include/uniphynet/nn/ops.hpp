#pragma once

// Differentiable operations over Tensor<T>. Every op validates shapes, computes
// its value eagerly and, when recording, attaches a closure that pushes the
// output gradient back into the inputs that require it.

#include "uniphynet/nn/tensor.hpp"
#include "uniphynet/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>

namespace uniphynet::nn {

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Grad buffer of an input when it participates in differentiation, else null.
template <typename T>
Vec<T>* grad_of(const NodePtr<T>& n) {
  return n && n->requires_grad ? &n->grad_buffer() : nullptr;
}

inline void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

struct ConvGeometry {
  Index stride = 1;
  Index pad_left = 0;
  Index pad_right = 0;

  static ConvGeometry symmetric(Index kernel, Index stride = 1) { return {stride, kernel / 2, kernel / 2}; }
  // Output length equals ceil(L / stride) for any kernel, odd or even.
  static ConvGeometry same(Index kernel, Index stride = 1) { return {stride, (kernel - 1) / 2, kernel / 2}; }

  Index output_length(Index length, Index kernel) const {
    const Index span = length + pad_left + pad_right - kernel;
    return span < 0 ? 0 : span / stride + 1;
  }
};

// x [B, Cin, L], weight [Cout, Cin, k], bias [Cout] (may be undefined).
// Cross-correlation: out[b, o, t] = bias[o] + sum_{c, j} w[o, c, j] x[b, c, t*stride + j - pad_left].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry geo) {
  detail::expect_rank(x.shape(), 3, "conv1d input");
  detail::expect_rank(weight.shape(), 3, "conv1d weight");
  const Index batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const Index cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin)
    throw ShapeError("conv1d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) throw ShapeError("conv1d: bias shape");
  if (geo.stride < 1) throw ShapeError("conv1d: stride must be positive");
  const Index lout = geo.output_length(len, k);
  if (lout < 1) throw ShapeError("conv1d: kernel longer than padded input");

  const Index rows = cin * k;
  auto im2col = [=](const T* xb, RowMat<T>& cols) {
    cols.setZero(rows, lout);
    for (Index c = 0; c < cin; ++c)
      for (Index j = 0; j < k; ++j) {
        T* dst = cols.row(c * k + j).data();
        const T* src = xb + c * len;
        for (Index t = 0; t < lout; ++t) {
          const Index pos = t * geo.stride + j - geo.pad_left;
          if (pos >= 0 && pos < len) dst[t] = src[pos];
        }
      }
  };

  Vec<T> out(batch * cout * lout);
  const ConstMatMap<T> w(weight.data(), cout, rows);
  RowMat<T> cols;
  for (Index b = 0; b < batch; ++b) {
    im2col(x.data() + b * cin * len, cols);
    MatMap<T> ob(out.data() + b * cout * lout, cout, lout);
    ob.noalias() = w * cols;
    if (bias.defined()) ob.colwise() += bias.value();
  }

  auto xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : detail::NodePtr<T>{};
  return make_result<T>({batch, cout, lout}, std::move(out), {x, weight, bias},
                        [=](Node<T>& self) {
                          Vec<T>* gx = detail::grad_of(xn);
                          Vec<T>* gw = detail::grad_of(wn);
                          Vec<T>* gb = detail::grad_of(bn);
                          const ConstMatMap<T> wm(wn->value.data(), cout, rows);
                          RowMat<T> cols_b, dcols;
                          for (Index b = 0; b < batch; ++b) {
                            const ConstMatMap<T> dout(self.grad.data() + b * cout * lout, cout, lout);
                            if (gw) {
                              im2col(xn->value.data() + b * cin * len, cols_b);
                              MatMap<T>(gw->data(), cout, rows).noalias() += dout * cols_b.transpose();
                            }
                            if (gb) *gb += dout.rowwise().sum();
                            if (gx) {
                              dcols.noalias() = wm.transpose() * dout;
                              T* dxb = gx->data() + b * cin * len;
                              for (Index c = 0; c < cin; ++c)
                                for (Index j = 0; j < k; ++j) {
                                  const T* src = dcols.row(c * k + j).data();
                                  for (Index t = 0; t < lout; ++t) {
                                    const Index pos = t * geo.stride + j - geo.pad_left;
                                    if (pos >= 0 && pos < len) dxb[c * len + pos] += src[t];
                                  }
                                }
                            }
                          }
                        });
}

// Per-channel convolution: x [B, C, L], weight [C, 1, k], bias [C].
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry geo) {
  detail::expect_rank(x.shape(), 3, "depthwise_conv1d input");
  detail::expect_rank(weight.shape(), 3, "depthwise_conv1d weight");
  const Index batch = x.dim(0), ch = x.dim(1), len = x.dim(2), k = weight.dim(2);
  if (weight.dim(0) != ch || weight.dim(1) != 1) throw ShapeError("depthwise_conv1d: weight must be [C,1,k]");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ch)) throw ShapeError("depthwise_conv1d: bias shape");
  const Index lout = geo.output_length(len, k);
  if (lout < 1) throw ShapeError("depthwise_conv1d: kernel longer than padded input");

  Vec<T> out(batch * ch * lout);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < ch; ++c) {
      const T* src = x.data() + (b * ch + c) * len;
      const T* w = weight.data() + c * k;
      T* dst = out.data() + (b * ch + c) * lout;
      const T b0 = bias.defined() ? bias.value()[c] : T(0);
      for (Index t = 0; t < lout; ++t) {
        T acc = b0;
        for (Index j = 0; j < k; ++j) {
          const Index pos = t * geo.stride + j - geo.pad_left;
          if (pos >= 0 && pos < len) acc += w[j] * src[pos];
        }
        dst[t] = acc;
      }
    }

  auto xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : detail::NodePtr<T>{};
  return make_result<T>({batch, ch, lout}, std::move(out), {x, weight, bias}, [=](Node<T>& self) {
    Vec<T>* gx = detail::grad_of(xn);
    Vec<T>* gw = detail::grad_of(wn);
    Vec<T>* gb = detail::grad_of(bn);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < ch; ++c) {
        const T* src = xn->value.data() + (b * ch + c) * len;
        const T* w = wn->value.data() + c * k;
        const T* dout = self.grad.data() + (b * ch + c) * lout;
        for (Index t = 0; t < lout; ++t) {
          const T g = dout[t];
          if (gb) (*gb)[c] += g;
          for (Index j = 0; j < k; ++j) {
            const Index pos = t * geo.stride + j - geo.pad_left;
            if (pos < 0 || pos >= len) continue;
            if (gw) (*gw)[c * k + j] += g * src[pos];
            if (gx) (*gx)[(b * ch + c) * len + pos] += g * w[j];
          }
        }
      }
  });
}

template <typename T>
struct BatchNormState {
  Vec<T> running_mean;
  Vec<T> running_var;
  bool trained = false;
  bool warned = false;

  explicit BatchNormState(Index channels = 0)
      : running_mean(Vec<T>::Zero(channels)), running_var(Vec<T>::Ones(channels)) {}
};

enum class Mode { Train, Eval };

// x [B, C, L]; statistics per channel over (B, L). Train mode normalizes with
// batch statistics and folds them into the running estimates with `momentum`
// (running variance uses the unbiased estimate).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::expect_rank(x.shape(), 3, "batch_norm input");
  const Index batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  if (gamma.numel() != ch || beta.numel() != ch || state.running_mean.size() != ch)
    throw ShapeError("batch_norm: parameter size does not match channel count");
  const Index n = batch * len;

  Vec<T> mean(ch), inv_std(ch);
  if (mode == Mode::Train) {
    if (n < 2) throw ShapeError("batch_norm: training needs at least two values per channel");
    for (Index c = 0; c < ch; ++c) {
      T sum = 0;
      for (Index b = 0; b < batch; ++b) sum += Eigen::Map<const Vec<T>>(x.data() + (b * ch + c) * len, len).sum();
      const T mu = sum / T(n);
      T sq = 0;
      for (Index b = 0; b < batch; ++b)
        sq += (Eigen::Map<const Vec<T>>(x.data() + (b * ch + c) * len, len).array() - mu).square().sum();
      const T var = sq / T(n);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * sq / T(n - 1);
    }
    state.trained = true;
  } else {
    if (!state.trained && !state.warned) {
      spdlog::warn("batch_norm: eval before any training step, using initial running statistics");
      state.warned = true;
    }
    mean = state.running_mean;
    inv_std = (state.running_var.array() + eps).rsqrt();
  }

  Vec<T> xhat(x.numel()), out(x.numel());
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < ch; ++c) {
      const Index off = (b * ch + c) * len;
      xhat.segment(off, len) = (x.value().segment(off, len).array() - mean[c]) * inv_std[c];
      out.segment(off, len) = xhat.segment(off, len).array() * gamma.value()[c] + beta.value()[c];
    }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  const bool train = mode == Mode::Train;
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [=, xhat = std::move(xhat)](Node<T>& self) {
                          Vec<T>* gx = detail::grad_of(xn);
                          Vec<T>* gg = detail::grad_of(gn);
                          Vec<T>* gb = detail::grad_of(bn);
                          for (Index c = 0; c < ch; ++c) {
                            T sum_dy = 0, sum_dy_xhat = 0;
                            for (Index b = 0; b < batch; ++b) {
                              const Index off = (b * ch + c) * len;
                              sum_dy += self.grad.segment(off, len).sum();
                              sum_dy_xhat += self.grad.segment(off, len).dot(xhat.segment(off, len));
                            }
                            if (gg) (*gg)[c] += sum_dy_xhat;
                            if (gb) (*gb)[c] += sum_dy;
                            if (!gx) continue;
                            const T g = gn->value[c];
                            for (Index b = 0; b < batch; ++b) {
                              const Index off = (b * ch + c) * len;
                              if (train) {
                                gx->segment(off, len).array() +=
                                    g * inv_std[c] / T(n) *
                                    (T(n) * self.grad.segment(off, len).array() - sum_dy -
                                     xhat.segment(off, len).array() * sum_dy_xhat);
                              } else {
                                gx->segment(off, len).array() += g * inv_std[c] * self.grad.segment(off, len).array();
                              }
                            }
                          }
                        });
}

enum class Activation { SiLU, ReLU, Sigmoid, Tanh };

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  Vec<T> out(x.numel());
  const auto& v = x.value();
  switch (kind) {
    case Activation::SiLU:
      for (Index i = 0; i < v.size(); ++i) out[i] = v[i] * detail::sigmoid(v[i]);
      break;
    case Activation::ReLU: out = v.cwiseMax(T(0)); break;
    case Activation::Sigmoid:
      for (Index i = 0; i < v.size(); ++i) out[i] = detail::sigmoid(v[i]);
      break;
    case Activation::Tanh: out = v.array().tanh(); break;
  }
  auto xn = x.node();
  Vec<T> saved = kind == Activation::SiLU || kind == Activation::ReLU ? Vec<T>() : out;
  return make_result<T>(x.shape(), std::move(out), {x}, [=, saved = std::move(saved)](Node<T>& self) {
    Vec<T>* gx = detail::grad_of(xn);
    if (!gx) return;
    const auto& in = xn->value;
    switch (kind) {
      case Activation::SiLU:
        for (Index i = 0; i < in.size(); ++i) {
          const T s = detail::sigmoid(in[i]);
          (*gx)[i] += self.grad[i] * s * (T(1) + in[i] * (T(1) - s));
        }
        break;
      case Activation::ReLU:
        for (Index i = 0; i < in.size(); ++i)
          if (in[i] > T(0)) (*gx)[i] += self.grad[i];
        break;
      case Activation::Sigmoid:
        gx->array() += self.grad.array() * saved.array() * (T(1) - saved.array());
        break;
      case Activation::Tanh:
        gx->array() += self.grad.array() * (T(1) - saved.array().square());
        break;
    }
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) { return activation(Activation::SiLU, x); }
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::ReLU, x); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::Sigmoid, x); }
template <typename T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(Activation::Tanh, x); }

enum class Pool { GlobalAvgTime, GlobalMaxTime, AvgOverChannels, MaxOverChannels };

// [B,C,L] -> [B,C] for the time pools, [B,1,L] for the channel pools. Max
// routes the gradient to the first maximum in scan order.
template <typename T>
Tensor<T> pool(Pool kind, const Tensor<T>& x) {
  detail::expect_rank(x.shape(), 3, "pool");
  const Index batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  const bool over_time = kind == Pool::GlobalAvgTime || kind == Pool::GlobalMaxTime;
  const bool is_max = kind == Pool::GlobalMaxTime || kind == Pool::MaxOverChannels;
  Shape shape = over_time ? Shape{batch, ch} : Shape{batch, 1, len};
  Vec<T> out(numel(shape));
  std::vector<Index> argmax(is_max ? out.size() : 0);
  const T* v = x.data();
  if (over_time) {
    for (Index r = 0; r < batch * ch; ++r) {
      const T* row = v + r * len;
      if (is_max) {
        Index best = 0;
        for (Index t = 1; t < len; ++t)
          if (row[t] > row[best]) best = t;
        out[r] = row[best];
        argmax[r] = r * len + best;
      } else {
        out[r] = Eigen::Map<const Vec<T>>(row, len).mean();
      }
    }
  } else {
    for (Index b = 0; b < batch; ++b)
      for (Index t = 0; t < len; ++t) {
        const Index o = b * len + t;
        if (is_max) {
          Index best = b * ch * len + t;
          for (Index c = 1; c < ch; ++c) {
            const Index idx = (b * ch + c) * len + t;
            if (v[idx] > v[best]) best = idx;
          }
          out[o] = v[best];
          argmax[o] = best;
        } else {
          T acc = 0;
          for (Index c = 0; c < ch; ++c) acc += v[(b * ch + c) * len + t];
          out[o] = acc / T(ch);
        }
      }
  }
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), {x},
                        [=, argmax = std::move(argmax)](Node<T>& self) {
                          Vec<T>* gx = detail::grad_of(xn);
                          if (!gx) return;
                          if (is_max) {
                            for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += self.grad[o];
                          } else if (over_time) {
                            for (Index r = 0; r < batch * ch; ++r)
                              gx->segment(r * len, len).array() += self.grad[r] / T(len);
                          } else {
                            for (Index b = 0; b < batch; ++b)
                              for (Index c = 0; c < ch; ++c)
                                gx->segment((b * ch + c) * len, len) += self.grad.segment(b * len, len) / T(ch);
                          }
                        });
}

// x [..., n], weight [m, n], bias [m] (may be undefined) -> [..., m].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::expect_rank(weight.shape(), 2, "linear weight");
  const Index m = weight.dim(0), n = weight.dim(1);
  if (x.rank() < 1 || x.shape().back() != n)
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not end in " + std::to_string(n));
  if (bias.defined() && bias.numel() != m) throw ShapeError("linear: bias shape");
  const Index rows = x.numel() / n;
  Shape shape = x.shape();
  shape.back() = m;
  Vec<T> out(rows * m);
  MatMap<T> y(out.data(), rows, m);
  y.noalias() = ConstMatMap<T>(x.data(), rows, n) * ConstMatMap<T>(weight.data(), m, n).transpose();
  if (bias.defined()) y.rowwise() += bias.value().transpose();

  auto xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : detail::NodePtr<T>{};
  return make_result<T>(std::move(shape), std::move(out), {x, weight, bias}, [=](Node<T>& self) {
    const ConstMatMap<T> dy(self.grad.data(), rows, m);
    if (Vec<T>* gx = detail::grad_of(xn))
      MatMap<T>(gx->data(), rows, n).noalias() += dy * ConstMatMap<T>(wn->value.data(), m, n);
    if (Vec<T>* gw = detail::grad_of(wn))
      MatMap<T>(gw->data(), m, n).noalias() += dy.transpose() * ConstMatMap<T>(xn->value.data(), rows, n);
    if (Vec<T>* gb = detail::grad_of(bn)) *gb += dy.colwise().sum().transpose();
  });
}

// Concatenation along `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (parts.size() == 1) return parts[0];
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p.dim(d) != first[d])
        throw ShapeError("concat: " + shape_string(p.shape()) + " vs " + shape_string(first));
    shape[axis] += p.dim(axis);
  }
  Index outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const Index out_chunk = shape[axis] * inner;

  Vec<T> out(numel(shape));
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index chunk = p.dim(axis) * inner;
    for (Index o = 0; o < outer; ++o) out.segment(o * out_chunk + offset, chunk) = p.value().segment(o * chunk, chunk);
    offsets.push_back(offset);
    offset += chunk;
  }
  std::vector<detail::NodePtr<T>> nodes;
  std::vector<Index> chunks;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    chunks.push_back(p.dim(axis) * inner);
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return make_result<T>(std::move(shape), std::move(out), std::move(inputs), [=](Node<T>& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      Vec<T>* g = detail::grad_of(nodes[i]);
      if (!g) continue;
      for (Index o = 0; o < outer; ++o) g->segment(o * chunks[i], chunks[i]) += self.grad.segment(o * out_chunk + offsets[i], chunks[i]);
    }
  });
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  return concat(std::span<const Tensor<T>>(parts.begin(), parts.size()), axis);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), a.value() + b.value(), {a, b}, [=](Node<T>& self) {
    if (Vec<T>* ga = detail::grad_of(an)) *ga += self.grad;
    if (Vec<T>* gb = detail::grad_of(bn)) *gb += self.grad;
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T factor) {
  auto xn = x.node();
  return make_result<T>(x.shape(), x.value() * factor, {x}, [=](Node<T>& self) {
    if (Vec<T>* gx = detail::grad_of(xn)) *gx += self.grad * factor;
  });
}

// y [B, F, L] scaled by a [B, F] per channel.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& y, const Tensor<T>& a) {
  detail::expect_rank(y.shape(), 3, "scale_channels");
  const Index batch = y.dim(0), ch = y.dim(1), len = y.dim(2);
  if (a.shape() != Shape{batch, ch}) throw ShapeError("scale_channels: weights must be [B,F]");
  Vec<T> out(y.numel());
  for (Index r = 0; r < batch * ch; ++r) out.segment(r * len, len) = y.value().segment(r * len, len) * a.value()[r];
  auto yn = y.node(), an = a.node();
  return make_result<T>(y.shape(), std::move(out), {y, a}, [=](Node<T>& self) {
    Vec<T>* gy = detail::grad_of(yn);
    Vec<T>* ga = detail::grad_of(an);
    for (Index r = 0; r < batch * ch; ++r) {
      if (gy) gy->segment(r * len, len) += self.grad.segment(r * len, len) * an->value[r];
      if (ga) (*ga)[r] += self.grad.segment(r * len, len).dot(yn->value.segment(r * len, len));
    }
  });
}

// y [B, F, L] scaled by s [B, 1, L] per time step.
template <typename T>
Tensor<T> scale_time(const Tensor<T>& y, const Tensor<T>& s) {
  detail::expect_rank(y.shape(), 3, "scale_time");
  const Index batch = y.dim(0), ch = y.dim(1), len = y.dim(2);
  if (s.shape() != Shape{batch, 1, len}) throw ShapeError("scale_time: weights must be [B,1,L]");
  Vec<T> out(y.numel());
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < ch; ++c)
      out.segment((b * ch + c) * len, len) =
          y.value().segment((b * ch + c) * len, len).cwiseProduct(s.value().segment(b * len, len));
  auto yn = y.node(), sn = s.node();
  return make_result<T>(y.shape(), std::move(out), {y, s}, [=](Node<T>& self) {
    Vec<T>* gy = detail::grad_of(yn);
    Vec<T>* gs = detail::grad_of(sn);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < ch; ++c) {
        const Index off = (b * ch + c) * len;
        if (gy) gy->segment(off, len) += self.grad.segment(off, len).cwiseProduct(sn->value.segment(b * len, len));
        if (gs) gs->segment(b * len, len) += self.grad.segment(off, len).cwiseProduct(yn->value.segment(off, len));
      }
  });
}

// [B, M, N] -> [B, N, M]
template <typename T>
Tensor<T> transpose12(const Tensor<T>& x) {
  detail::expect_rank(x.shape(), 3, "transpose12");
  const Index batch = x.dim(0), m = x.dim(1), n = x.dim(2);
  Vec<T> out(x.numel());
  for (Index b = 0; b < batch; ++b)
    MatMap<T>(out.data() + b * m * n, n, m) = ConstMatMap<T>(x.data() + b * m * n, m, n).transpose();
  auto xn = x.node();
  return make_result<T>({batch, n, m}, std::move(out), {x}, [=](Node<T>& self) {
    Vec<T>* gx = detail::grad_of(xn);
    if (!gx) return;
    for (Index b = 0; b < batch; ++b)
      MatMap<T>(gx->data() + b * m * n, m, n) += ConstMatMap<T>(self.grad.data() + b * m * n, n, m).transpose();
  });
}

// Batched a [B, M, K] times b [B, K, N], or b^T when b is [B, N, K] and
// transpose_b is set.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::expect_rank(a.shape(), 3, "bmm lhs");
  detail::expect_rank(b.shape(), 3, "bmm rhs");
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  const Index bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k)
    throw ShapeError("bmm: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const Index br = transpose_b ? n : k, bc = transpose_b ? k : n;
  Vec<T> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    const ConstMatMap<T> am(a.data() + i * m * k, m, k), bm(b.data() + i * br * bc, br, bc);
    MatMap<T> om(out.data() + i * m * n, m, n);
    if (transpose_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am * bm;
  }
  auto an = a.node(), bn = b.node();
  return make_result<T>({batch, m, n}, std::move(out), {a, b}, [=](Node<T>& self) {
    Vec<T>* ga = detail::grad_of(an);
    Vec<T>* gb = detail::grad_of(bn);
    for (Index i = 0; i < batch; ++i) {
      const ConstMatMap<T> dc(self.grad.data() + i * m * n, m, n);
      const ConstMatMap<T> am(an->value.data() + i * m * k, m, k), bm(bn->value.data() + i * br * bc, br, bc);
      if (ga) {
        MatMap<T> dam(ga->data() + i * m * k, m, k);
        if (transpose_b) dam.noalias() += dc * bm;
        else dam.noalias() += dc * bm.transpose();
      }
      if (gb) {
        MatMap<T> dbm(gb->data() + i * br * bc, br, bc);
        if (transpose_b) dbm.noalias() += dc.transpose() * am;
        else dbm.noalias() += am.transpose() * dc;
      }
    }
  });
}

// Softmax over the last dimension.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const Index n = x.shape().back(), rows = x.numel() / n;
  Vec<T> out(x.numel());
  for (Index r = 0; r < rows; ++r) {
    auto in = x.value().segment(r * n, n);
    auto o = out.segment(r * n, n);
    o = (in.array() - in.maxCoeff()).exp();
    o /= o.sum();
  }
  auto xn = x.node();
  Vec<T> saved = out;
  return make_result<T>(x.shape(), std::move(out), {x}, [=, saved = std::move(saved)](Node<T>& self) {
    Vec<T>* gx = detail::grad_of(xn);
    if (!gx) return;
    for (Index r = 0; r < rows; ++r) {
      auto s = saved.segment(r * n, n);
      auto dy = self.grad.segment(r * n, n);
      gx->segment(r * n, n).array() += s.array() * (dy.array() - dy.dot(s));
    }
  });
}

// Inverted dropout; identity outside training or when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Mode mode, RngStream& rng) {
  if (mode != Mode::Train || p <= T(0)) return x;
  if (p >= T(1)) throw ShapeError("dropout: p must be below 1");
  Vec<T> mask(x.numel());
  const T keep = T(1) / (T(1) - p);
  for (Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < static_cast<double>(p) ? T(0) : keep;
  auto xn = x.node();
  Vec<T> out = x.value().cwiseProduct(mask);
  return make_result<T>(x.shape(), std::move(out), {x}, [=, mask = std::move(mask)](Node<T>& self) {
    if (Vec<T>* gx = detail::grad_of(xn)) *gx += self.grad.cwiseProduct(mask);
  });
}

// x [B, L, H] -> [B, H] at time index t.
template <typename T>
Tensor<T> select_time(const Tensor<T>& x, Index t) {
  detail::expect_rank(x.shape(), 3, "select_time");
  const Index batch = x.dim(0), len = x.dim(1), h = x.dim(2);
  if (t < 0 || t >= len) throw ShapeError("select_time: index out of range");
  Vec<T> out(batch * h);
  for (Index b = 0; b < batch; ++b) out.segment(b * h, h) = x.value().segment((b * len + t) * h, h);
  auto xn = x.node();
  return make_result<T>({batch, h}, std::move(out), {x}, [=](Node<T>& self) {
    if (Vec<T>* gx = detail::grad_of(xn))
      for (Index b = 0; b < batch; ++b) gx->segment((b * len + t) * h, h) += self.grad.segment(b * h, h);
  });
}

// Scalar sum(x * w) for a constant weight vector; used to reduce arbitrary
// outputs to a loss in gradient checks.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const Vec<T>& w) {
  if (w.size() != x.numel()) throw ShapeError("weighted_sum: weight size");
  auto xn = x.node();
  Vec<T> out(1);
  out[0] = x.value().dot(w);
  return make_result<T>({1}, std::move(out), {x}, [=](Node<T>& self) {
    if (Vec<T>* gx = detail::grad_of(xn)) *gx += w * self.grad[0];
  });
}

// Mean over the batch of -log softmax(logits)[target]; logits [B, C].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  detail::expect_rank(logits.shape(), 2, "softmax_cross_entropy");
  const Index batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<Index>(targets.size()) != batch) throw ShapeError("softmax_cross_entropy: target count");
  for (int t : targets)
    if (t < 0 || t >= classes) throw ValidationError("target " + std::to_string(t) + " outside [0, " + std::to_string(classes) + ")");
  Vec<T> probs(logits.numel());
  T loss = 0;
  for (Index b = 0; b < batch; ++b) {
    auto z = logits.value().segment(b * classes, classes);
    const T zmax = z.maxCoeff();
    const T lse = zmax + std::log((z.array() - zmax).exp().sum());
    loss += lse - z[targets[b]];
    probs.segment(b * classes, classes) = (z.array() - lse).exp();
  }
  Vec<T> out(1);
  out[0] = loss / T(batch);
  auto ln = logits.node();
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result<T>({1}, std::move(out), {logits}, [=, probs = std::move(probs)](Node<T>& self) {
    Vec<T>* g = detail::grad_of(ln);
    if (!g) return;
    const T scale = self.grad[0] / T(batch);
    for (Index b = 0; b < batch; ++b) {
      g->segment(b * classes, classes) += probs.segment(b * classes, classes) * scale;
      (*g)[b * classes + tgt[b]] -= scale;
    }
  });
}

}  // namespace uniphynet::nn
