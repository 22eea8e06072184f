#pragma once

// Differentiable operations. Every function computes its forward value
// eagerly and records a backward rule on the operands' Graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "attfuse/graph.hpp"
#include "attfuse/kernels.hpp"
#include "attfuse/tensor.hpp"

namespace attfuse {

namespace detail {

inline Graph& graph_of(std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.graph) throw UsageError("uninitialized variable");
    if (g && g != v.graph) throw UsageError("operands recorded on different graphs");
    g = v.graph;
  }
  return *g;
}

inline void add_into(Tensor* dst, const Tensor& src) {
  if (dst) *dst += src;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [n x k] * [k x m] -> [n x m]
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of({a, b});
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor out(Shape{n, m});
  kernels::gemm_nn(av.ptr(), bv.ptr(), out.ptr(), n, k, m);
  return g.record("matmul", std::move(out), {a, b}, [a, b, n, k, m](Graph& gr, const Tensor& go) {
    if (Tensor* ga = gr.grad_slot(a)) kernels::gemm_nt(go.ptr(), gr.value(b).ptr(), ga->ptr(), n, m, k);
    if (Tensor* gb = gr.grad_slot(b)) kernels::gemm_tn(gr.value(a).ptr(), go.ptr(), gb->ptr(), k, n, m);
  });
}

/// Adds a bias vector along the last axis.
inline Var add_bias(Var x, Var bias) {
  Graph& g = detail::graph_of({x, bias});
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  const std::size_t width = xv.rank() ? xv.shape().back() : 1;
  if (bv.rank() != 1 || bv.dim(0) != width) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % width];
  return g.record("add_bias", std::move(out), {x, bias}, [x, bias, width](Graph& gr, const Tensor& go) {
    detail::add_into(gr.grad_slot(x), go);
    if (Tensor* gb = gr.grad_slot(bias)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % width] += go[i];
    }
  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of({a, b});
  const Tensor& av = g.value(a);
  av.require_same_shape(g.value(b), "add");
  Tensor out = av;
  out += g.value(b);
  return g.record("add", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    detail::add_into(gr.grad_slot(a), go);
    detail::add_into(gr.grad_slot(b), go);
  });
}

/// Elementwise product of equal-shaped tensors.
inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of({a, b});
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  av.require_same_shape(bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record("mul", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    if (Tensor* ga = gr.grad_slot(a)) {
      const Tensor& bv2 = gr.value(b);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * bv2[i];
    }
    if (Tensor* gb = gr.grad_slot(b)) {
      const Tensor& av2 = gr.value(a);
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * av2[i];
    }
  });
}

/// Elementwise product with a constant (non-differentiated) tensor.
inline Var mul_const(Var x, Tensor factor) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  xv.require_same_shape(factor, "mul_const");
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor[i];
  return g.record("mul_const", std::move(out), {x}, [x, f = std::move(factor)](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * f[i];
    }
  });
}

inline Var scale(Var x, double s) {
  Graph& g = detail::graph_of({x});
  Tensor out = g.value(x);
  for (auto& v : out.data()) v *= s;
  return g.record("scale", std::move(out), {x}, [x, s](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * s;
    }
  });
}

/// Sum of all elements; scalar result.
inline Var sum(Var x) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  double s = 0.0;
  for (double v : xv.data()) s += v;
  return g.record("sum", Tensor::scalar(s), {x}, [x](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const double d = go[0];
      for (auto& v : gx->data()) v += d;
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { sigmoid, relu, tanh, softmax };

namespace detail {

template <class Fwd, class Deriv>
Var unary(std::string_view name, Var x, Fwd fwd, Deriv deriv_from_in_out) {
  Graph& g = graph_of({x});
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t out_id = g.size();
  return g.record(name, std::move(out), {x}, [x, out_id, deriv_from_in_out](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const Tensor& in = gr.value(x);
      const Tensor& y = gr.value(Var{&gr, out_id});
      for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * deriv_from_in_out(in[i], y[i]);
    }
  });
}

}  // namespace detail

inline Var sigmoid(Var x) {
  return detail::unary("sigmoid", x, [](double v) { return detail::sigmoid(v); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(Var x) {
  return detail::unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

/// Softmax along the last axis, max-subtracted.
inline Var softmax(Var x) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  const std::size_t width = xv.rank() ? xv.shape().back() : 1;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.size() / width; ++r) {
    const double* in = xv.ptr() + r * width;
    double* o = out.ptr() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < width; ++j) o[j] /= z;
  }
  const std::size_t out_id = g.size();
  return g.record("softmax", std::move(out), {x}, [x, out_id, width](Graph& gr, const Tensor& go) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx) return;
    const Tensor& y = gr.value(Var{&gr, out_id});
    for (std::size_t r = 0; r < y.size() / width; ++r) {
      const double* yr = y.ptr() + r * width;
      const double* gr_ = go.ptr() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += gr_[j] * yr[j];
      for (std::size_t j = 0; j < width; ++j) (*gx)[r * width + j] += yr[j] * (gr_[j] - dot);
    }
  });
}

inline Var activation(Var x, Activation kind) {
  switch (kind) {
    case Activation::sigmoid: return sigmoid(x);
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::softmax: return softmax(x);
  }
  throw ConfigError("unknown activation");
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var x, Shape shape) {
  Graph& g = detail::graph_of({x});
  Tensor out = g.value(x).reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {x}, [x](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
    }
  });
}

namespace detail {

// Calls fn(src_offset, dst_offset) for each element of a permuted copy.
template <class Fn>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& axes, Fn fn) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride_of_out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride_of_out[i] = in_strides[axes[i]];
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = shape_numel(in_shape);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < total; ++dst) {
    fn(src, dst);
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += stride_of_out[ax];
        break;
      }
      src -= stride_of_out[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

/// Output axis i is input axis axes[i].
inline Var permute(Var x, std::vector<std::size_t> axes) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  std::vector<std::size_t> check = axes;
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check.size() != xv.rank() || check[i] != i) throw DimensionError("permute: invalid axis list");
  }
  Shape out_shape(xv.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = xv.dim(axes[i]);
  Tensor out(out_shape);
  detail::for_each_permuted(xv.shape(), axes, [&](std::size_t s, std::size_t d) { out[d] = xv[s]; });
  return g.record("permute", std::move(out), {x}, [x, axes](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      detail::for_each_permuted(gx->shape(), axes, [&](std::size_t s, std::size_t d) { (*gx)[s] += go[d]; });
    }
  });
}

/// Channels [begin, end) of the last axis.
inline Var channel_slice(Var x, std::size_t begin, std::size_t end) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  const std::size_t c = xv.rank() ? xv.shape().back() : 0;
  if (begin >= end || end > c) {
    throw DimensionError("channel_slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(xv.shape()));
  }
  Shape s = xv.shape();
  s.back() = end - begin;
  const std::size_t w = end - begin;
  const std::size_t rows = xv.size() / c;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.ptr() + r * c + begin, w, out.ptr() + r * w);
  }
  return g.record("channel_slice", std::move(out), {x}, [x, begin, w, c, rows](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) (*gx)[r * c + begin + j] += go[r * w + j];
      }
    }
  });
}

/// Concatenates along the last axis; all leading dimensions must agree.
inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_last: no inputs");
  Graph& g = *parts.front().graph;
  const Shape& lead_shape = g.value(parts.front()).shape();
  if (lead_shape.empty()) throw DimensionError("concat_last: scalar input");
  Shape lead(lead_shape.begin(), lead_shape.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = g.value(p).shape();
    if (s.size() != lead_shape.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw DimensionError("channel_concat: shape mismatch " + shape_str(lead_shape) + " vs " + shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  const std::size_t rows = out.size() / total;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = g.value(parts[k]);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.ptr() + r * widths[k], widths[k], out.ptr() + r * total + off);
    off += widths[k];
  }
  return g.record("channel_concat", std::move(out), parts, [parts, widths, total, rows](Graph& gr, const Tensor& go) {
    std::size_t off2 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (Tensor* gp = gr.grad_slot(parts[k])) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) (*gp)[r * widths[k] + j] += go[r * total + off2 + j];
        }
      }
      off2 += widths[k];
    }
  });
}

/// F_concat = a (+) b along the channel axis.
inline Var channel_concat(Var a, Var b) { return concat_last({a, b}); }

/// x[i] along the leading axis.
inline Var select(Var x, std::size_t i) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  if (xv.rank() < 1 || i >= xv.dim(0)) throw DimensionError("select: index out of range for " + shape_str(xv.shape()));
  Shape s(xv.shape().begin() + 1, xv.shape().end());
  const std::size_t n = shape_numel(s);
  Tensor out(s, std::vector<double>(xv.ptr() + i * n, xv.ptr() + (i + 1) * n));
  return g.record("select", std::move(out), {x}, [x, i, n](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += go[j];
    }
  });
}

/// Stacks equal-shaped tensors along a new leading axis.
inline Var stack(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("stack: no inputs");
  Graph& g = *parts.front().graph;
  const Shape& s0 = g.value(parts.front()).shape();
  const std::size_t n = shape_numel(s0);
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  Tensor out(out_shape);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = g.value(parts[k]);
    if (pv.shape() != s0) throw DimensionError("stack: shape mismatch " + shape_str(s0) + " vs " + shape_str(pv.shape()));
    std::copy_n(pv.ptr(), n, out.ptr() + k * n);
  }
  return g.record("stack", std::move(out), parts, [parts, n](Graph& gr, const Tensor& go) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (Tensor* gp = gr.grad_slot(parts[k])) {
        for (std::size_t j = 0; j < n; ++j) (*gp)[j] += go[k * n + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (channel-last)

enum class Padding { same, valid };

namespace detail {

// Accepts [H x W x C] or [B x H x W x C]; returns (B, H, W, C).
inline std::array<std::size_t, 4> image_dims(const Tensor& t, std::string_view op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw DimensionError(std::string(op) + ": expected [H x W x C] or [B x H x W x C], got " + shape_str(t.shape()));
}

inline Shape image_shape(bool batched, std::size_t b, std::size_t h, std::size_t w, std::size_t c) {
  return batched ? Shape{b, h, w, c} : Shape{h, w, c};
}

inline std::size_t same_padding(std::size_t in, std::size_t k, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t need = (out - 1) * stride + k;
  return need > in ? need - in : 0;
}

}  // namespace detail

/// Cross-correlation of input [(B x) H x W x Cin] with kernels
/// [kh x kw x Cin x Cout], plus per-output-channel bias.
inline Var conv2d(Var input, Var kernels, Var bias, Padding padding, int stride = 1) {
  Graph& g = detail::graph_of({input, kernels, bias});
  const Tensor& iv = g.value(input);
  const Tensor& kv = g.value(kernels);
  const Tensor& bv = g.value(bias);
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive, got " + std::to_string(stride));
  const auto [batch, h, w, cin] = detail::image_dims(iv, "conv2d");
  if (kv.rank() != 4 || kv.dim(2) != cin) {
    throw DimensionError("conv2d: kernels " + shape_str(kv.shape()) + " incompatible with input " + shape_str(iv.shape()));
  }
  const std::size_t cout = kv.dim(3);
  if (bv.rank() != 1 || bv.dim(0) != cout) {
    throw DimensionError("conv2d: bias " + shape_str(bv.shape()) + " does not match " + std::to_string(cout) + " channels");
  }
  kernels::ConvGeometry geo{};
  geo.batch = batch;
  geo.in_h = h;
  geo.in_w = w;
  geo.in_c = cin;
  geo.k_h = kv.dim(0);
  geo.k_w = kv.dim(1);
  geo.out_c = cout;
  geo.stride = static_cast<std::size_t>(stride);
  const std::size_t pad_h = padding == Padding::same ? detail::same_padding(h, geo.k_h, geo.stride) : 0;
  const std::size_t pad_w = padding == Padding::same ? detail::same_padding(w, geo.k_w, geo.stride) : 0;
  if (geo.k_h > h + pad_h || geo.k_w > w + pad_w) {
    throw ConfigError("conv2d: kernel " + shape_str(kv.shape()) + " larger than padded input " + shape_str(iv.shape()));
  }
  geo.pad_top = pad_h / 2;
  geo.pad_left = pad_w / 2;
  geo.out_h = (h + pad_h - geo.k_h) / geo.stride + 1;
  geo.out_w = (w + pad_w - geo.k_w) / geo.stride + 1;

  const bool direct = geo.k_h == 1 && geo.k_w == 1 && geo.stride == 1;
  const std::size_t positions = geo.positions();
  const std::size_t patch = geo.patch();
  Tensor out(detail::image_shape(iv.rank() == 4, batch, geo.out_h, geo.out_w, cout));
  for (std::size_t p = 0; p < positions; ++p) std::copy_n(bv.ptr(), cout, out.ptr() + p * cout);
  if (direct) {
    kernels::gemm_nn(iv.ptr(), kv.ptr(), out.ptr(), positions, patch, cout);
  } else {
    std::vector<double> cols(positions * patch);
    kernels::im2col(geo, iv.ptr(), cols.data());
    kernels::gemm_nn(cols.data(), kv.ptr(), out.ptr(), positions, patch, cout);
  }
  return g.record("conv2d", std::move(out), {input, kernels, bias},
                  [input, kernels, bias, geo, direct](Graph& gr, const Tensor& go) {
    const std::size_t positions2 = geo.positions();
    const std::size_t patch2 = geo.patch();
    const std::size_t co = geo.out_c;
    if (Tensor* gb = gr.grad_slot(bias)) {
      for (std::size_t p = 0; p < positions2; ++p) {
        for (std::size_t c = 0; c < co; ++c) (*gb)[c] += go[p * co + c];
      }
    }
    Tensor* gk = gr.grad_slot(kernels);
    Tensor* gi = gr.grad_slot(input);
    if (direct) {
      if (gk) kernels::gemm_tn(gr.value(input).ptr(), go.ptr(), gk->ptr(), patch2, positions2, co);
      if (gi) kernels::gemm_nt(go.ptr(), gr.value(kernels).ptr(), gi->ptr(), positions2, co, patch2);
      return;
    }
    if (gk) {
      std::vector<double> cols(positions2 * patch2);
      kernels::im2col(geo, gr.value(input).ptr(), cols.data());
      kernels::gemm_tn(cols.data(), go.ptr(), gk->ptr(), patch2, positions2, co);
    }
    if (gi) {
      std::vector<double> dcols(positions2 * patch2, 0.0);
      kernels::gemm_nt(go.ptr(), gr.value(kernels).ptr(), dcols.data(), positions2, co, patch2);
      kernels::col2im(geo, dcols.data(), gi->ptr());
    }
  });
}

/// Non-overlapping 2x2 spatial max; ties route to the first maximum in
/// row-major window order.
inline Var maxpool2d(Var x) {
  Graph& g = detail::graph_of({x});
  const Tensor& xv = g.value(x);
  const auto [b, h, w, c] = detail::image_dims(xv, "maxpool2d");
  if (h % 2 || w % 2) throw DimensionError("maxpool2d: odd spatial size " + shape_str(xv.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out(detail::image_shape(xv.rank() == 4, b, oh, ow, c));
  std::vector<std::size_t> arg(out.size());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((n * h + 2 * oy) * w + 2 * ox) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          const std::size_t o = ((n * oh + oy) * ow + ox) * c + ch;
          out[o] = xv[best];
          arg[o] = best;
        }
      }
    }
  }
  return g.record("maxpool2d", std::move(out), {x}, [x, arg = std::move(arg)](Graph& gr, const Tensor& go) {
    if (Tensor* gx = gr.grad_slot(x)) {
      for (std::size_t o = 0; o < go.size(); ++o) (*gx)[arg[o]] += go[o];
    }
  });
}

enum class PoolMode { avg, max };

/// Pools over the channel (last) axis: [..., C] -> [..., 1]. Max ties route
/// to the lowest channel index.
inline Var channel_pool(Var f, PoolMode mode) {
  Graph& g = detail::graph_of({f});
  const Tensor& fv = g.value(f);
  if (fv.rank() < 1) throw DimensionError("channel_pool: scalar input");
  const std::size_t c = fv.shape().back();
  const std::size_t rows = fv.size() / c;
  Shape s = fv.shape();
  s.back() = 1;
  Tensor out(s);
  std::vector<std::size_t> arg;
  if (mode == PoolMode::avg) {
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += fv[r * c + k];
      out[r] = acc / static_cast<double>(c);
    }
  } else {
    arg.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (fv[r * c + k] > fv[r * c + best]) best = k;
      }
      arg[r] = best;
      out[r] = fv[r * c + best];
    }
  }
  return g.record(mode == PoolMode::avg ? "channel_avg" : "channel_max", std::move(out), {f},
                  [f, mode, c, rows, arg = std::move(arg)](Graph& gr, const Tensor& go) {
    Tensor* gf = gr.grad_slot(f);
    if (!gf) return;
    if (mode == PoolMode::avg) {
      const double inv = 1.0 / static_cast<double>(c);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < c; ++k) (*gf)[r * c + k] += go[r] * inv;
      }
    } else {
      for (std::size_t r = 0; r < rows; ++r) (*gf)[r * c + arg[r]] += go[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention broadcasts

/// out[.., i, j, c] = f[.., i, j, c] * w[.., c]. f is [M x M x C] with w [C],
/// or [B x M x M x C] with w [B x C].
inline Var broadcast_mul_channel(Var f, Var w) {
  Graph& g = detail::graph_of({f, w});
  const Tensor& fv = g.value(f);
  const Tensor& wv = g.value(w);
  const auto [b, h, wd, c] = detail::image_dims(fv, "broadcast_mul_channel");
  const Shape expect = fv.rank() == 4 ? Shape{b, c} : Shape{c};
  if (wv.shape() != expect) {
    throw DimensionError("broadcast_mul_channel: weights " + shape_str(wv.shape()) + " do not match features " +
                         shape_str(fv.shape()));
  }
  const std::size_t hw = h * wd;
  Tensor out(fv.shape());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = (n * hw + p) * c + k;
        out[i] = fv[i] * wv[n * c + k];
      }
    }
  }
  return g.record("broadcast_mul_channel", std::move(out), {f, w}, [f, w, b, hw, c](Graph& gr, const Tensor& go) {
    const Tensor& fv2 = gr.value(f);
    const Tensor& wv2 = gr.value(w);
    Tensor* gf = gr.grad_slot(f);
    Tensor* gw = gr.grad_slot(w);
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t i = (n * hw + p) * c + k;
          if (gf) (*gf)[i] += go[i] * wv2[n * c + k];
          if (gw) (*gw)[n * c + k] += go[i] * fv2[i];
        }
      }
    }
  });
}

/// out[.., i, j, c] = f[.., i, j, c] * w[.., i, j]. f is [M x M x C] with w
/// [M x M], or [B x M x M x C] with w [B x M x M].
inline Var broadcast_mul_spatial(Var f, Var w) {
  Graph& g = detail::graph_of({f, w});
  const Tensor& fv = g.value(f);
  const Tensor& wv = g.value(w);
  const auto [b, h, wd, c] = detail::image_dims(fv, "broadcast_mul_spatial");
  const Shape expect = fv.rank() == 4 ? Shape{b, h, wd} : Shape{h, wd};
  if (wv.shape() != expect) {
    throw DimensionError("broadcast_mul_spatial: weights " + shape_str(wv.shape()) + " do not match features " +
                         shape_str(fv.shape()));
  }
  const std::size_t positions = b * h * wd;
  Tensor out(fv.shape());
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t k = 0; k < c; ++k) out[p * c + k] = fv[p * c + k] * wv[p];
  }
  return g.record("broadcast_mul_spatial", std::move(out), {f, w}, [f, w, positions, c](Graph& gr, const Tensor& go) {
    const Tensor& fv2 = gr.value(f);
    const Tensor& wv2 = gr.value(w);
    Tensor* gf = gr.grad_slot(f);
    Tensor* gw = gr.grad_slot(w);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t k = 0; k < c; ++k) {
        if (gf) (*gf)[p * c + k] += go[p * c + k] * wv2[p];
        if (gw) (*gw)[p] += go[p * c + k] * fv2[p * c + k];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Batch-statistics normalization of x [B x C] followed by per-column affine.
/// Batch mean and biased variance are written to the out-parameters.
inline Var batchnorm_train(Var x, Var scale_p, Var shift_p, double eps, Tensor* batch_mean = nullptr,
                           Tensor* batch_var = nullptr) {
  Graph& g = detail::graph_of({x, scale_p, shift_p});
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2) throw DimensionError("batchnorm: expected [B x C], got " + shape_str(xv.shape()));
  const std::size_t b = xv.dim(0), c = xv.dim(1);
  if (b < 2) throw UsageError("batchnorm: train mode needs a batch of at least 2, got " + std::to_string(b));
  const Tensor& sv = g.value(scale_p);
  const Tensor& tv = g.value(shift_p);
  if (sv.shape() != Shape{c} || tv.shape() != Shape{c}) throw DimensionError("batchnorm: parameter width mismatch");
  Tensor mean(Shape{c}), var(Shape{c});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < c; ++k) mean[k] += xv[i * c + k];
  for (std::size_t k = 0; k < c; ++k) mean[k] /= static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const double d = xv[i * c + k] - mean[k];
      var[k] += d * d;
    }
  }
  for (std::size_t k = 0; k < c; ++k) var[k] /= static_cast<double>(b);
  Tensor inv_std(Shape{c});
  for (std::size_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + eps);
  Tensor xhat(xv.shape()), out(xv.shape());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t j = i * c + k;
      xhat[j] = (xv[j] - mean[k]) * inv_std[k];
      out[j] = xhat[j] * sv[k] + tv[k];
    }
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  return g.record("batchnorm", std::move(out), {x, scale_p, shift_p},
                  [x, scale_p, shift_p, b, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr,
                                                                                                  const Tensor& go) {
    const Tensor& sv2 = gr.value(scale_p);
    if (Tensor* gs = gr.grad_slot(scale_p)) {
      for (std::size_t j = 0; j < go.size(); ++j) (*gs)[j % c] += go[j] * xhat[j];
    }
    if (Tensor* gt = gr.grad_slot(shift_p)) {
      for (std::size_t j = 0; j < go.size(); ++j) (*gt)[j % c] += go[j];
    }
    if (Tensor* gx = gr.grad_slot(x)) {
      const double nb = static_cast<double>(b);
      for (std::size_t k = 0; k < c; ++k) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          const double d = go[i * c + k] * sv2[k];
          sum_d += d;
          sum_dx += d * xhat[i * c + k];
        }
        for (std::size_t i = 0; i < b; ++i) {
          const double d = go[i * c + k] * sv2[k];
          (*gx)[i * c + k] += inv_std[k] / nb * (nb * d - sum_d - xhat[i * c + k] * sum_dx);
        }
      }
    }
  });
}

/// Normalization with fixed statistics (eval mode).
inline Var batchnorm_fixed(Var x, Var scale_p, Var shift_p, const Tensor& mean, const Tensor& var, double eps) {
  Graph& g = detail::graph_of({x, scale_p, shift_p});
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2) throw DimensionError("batchnorm: expected [B x C], got " + shape_str(xv.shape()));
  const std::size_t c = xv.dim(1);
  const Tensor& sv = g.value(scale_p);
  const Tensor& tv = g.value(shift_p);
  if (sv.shape() != Shape{c} || mean.shape() != Shape{c}) throw DimensionError("batchnorm: parameter width mismatch");
  Tensor inv_std(Shape{c});
  for (std::size_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + eps);
  Tensor out(xv.shape());
  for (std::size_t j = 0; j < xv.size(); ++j) {
    const std::size_t k = j % c;
    out[j] = (xv[j] - mean[k]) * inv_std[k] * sv[k] + tv[k];
  }
  return g.record("batchnorm_fixed", std::move(out), {x, scale_p, shift_p},
                  [x, scale_p, shift_p, c, mean, inv_std](Graph& gr, const Tensor& go) {
    const Tensor& xv2 = gr.value(x);
    const Tensor& sv2 = gr.value(scale_p);
    Tensor* gx = gr.grad_slot(x);
    Tensor* gs = gr.grad_slot(scale_p);
    Tensor* gt = gr.grad_slot(shift_p);
    for (std::size_t j = 0; j < go.size(); ++j) {
      const std::size_t k = j % c;
      if (gx) (*gx)[j] += go[j] * inv_std[k] * sv2[k];
      if (gs) (*gs)[k] += go[j] * (xv2[j] - mean[k]) * inv_std[k];
      if (gt) (*gt)[k] += go[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Graph& g = detail::graph_of({logits});
  const Tensor& lv = g.value(logits);
  if (lv.rank() != 2) throw DimensionError("cross_entropy: logits must be [B x N], got " + shape_str(lv.shape()));
  const std::size_t b = lv.dim(0), n = lv.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(b));
  }
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                      " outside [0, " + std::to_string(n) + ")");
    }
    const double* row = lv.ptr() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[labels[i]];
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return g.record("cross_entropy", Tensor::scalar(loss), {logits},
                  [logits, probs = std::move(probs), lab = std::move(lab), b, n](Graph& gr, const Tensor& go) {
    if (Tensor* gl = gr.grad_slot(logits)) {
      const double s = go[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double onehot = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
          (*gl)[i * n + j] += s * (probs[i * n + j] - onehot);
        }
      }
    }
  });
}

}  // namespace attfuse
