#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attfuse/graph.hpp"
#include "attfuse/ops.hpp"

namespace attfuse {

enum class Mode { train, eval };

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one draw; independent of
/// the standard library's distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, -limit, limit);
  return t;
}

// ---------------------------------------------------------------------------

/// Fully connected layer: x [B x in] -> x W + b.
struct DenseLayer {
  Parameter weight;  // [in x out]
  Parameter bias;    // [out]

  DenseLayer() = default;

  /// Fan-in scaled uniform weights, zero bias.
  DenseLayer(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", uniform_tensor({in, out}, std::sqrt(6.0 / static_cast<double>(in)), rng)),
        bias(name + ".bias", Tensor(Shape{out})) {}

  std::size_t in_width() const { return weight.value.dim(0); }
  std::size_t out_width() const { return weight.value.dim(1); }

  Var forward(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    if (xv.rank() != 2 || xv.dim(1) != in_width()) {
      throw DimensionError("dense " + weight.name + ": input " + shape_str(xv.shape()) + " does not have width " +
                           std::to_string(in_width()));
    }
    return add_bias(matmul(x, g.parameter(weight)), g.parameter(bias));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

inline Var dense_forward(Graph& g, DenseLayer& layer, Var x) { return layer.forward(g, x); }

// ---------------------------------------------------------------------------

/// Single-layer LSTM. Gate blocks are stored fused along the last axis in the
/// order (input, forget, cell, output): input_weights [in x 4H],
/// recurrent_weights [H x 4H], bias [4H].
struct LstmLayer {
  Parameter input_weights;
  Parameter recurrent_weights;
  Parameter bias;

  LstmLayer() = default;

  /// Uniform(+-1/sqrt(H)) weights, zero bias except +1 on the forget gate.
  LstmLayer(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng) {
    const double lim = 1.0 / std::sqrt(static_cast<double>(hidden));
    input_weights = Parameter(name + ".input_weights", uniform_tensor({in, 4 * hidden}, lim, rng));
    recurrent_weights = Parameter(name + ".recurrent_weights", uniform_tensor({hidden, 4 * hidden}, lim, rng));
    Tensor b(Shape{4 * hidden});
    for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;
    bias = Parameter(name + ".bias", std::move(b));
  }

  std::size_t in_width() const { return input_weights.value.dim(0); }
  std::size_t hidden() const { return recurrent_weights.value.dim(0); }

  /// seq is [T x in] or time-major batched [T x B x in]; returns the hidden
  /// state at every step, [T x H] or [T x B x H]. Initial state is zero.
  Var forward(Graph& g, Var seq) {
    const Tensor& sv = g.value(seq);
    const bool batched = sv.rank() == 3;
    if ((sv.rank() != 2 && sv.rank() != 3) || sv.shape().back() != in_width()) {
      throw DimensionError("lstm " + input_weights.name + ": sequence " + shape_str(sv.shape()) +
                           " does not have step width " + std::to_string(in_width()));
    }
    const std::size_t steps = sv.dim(0);
    const std::size_t h = hidden();
    Var wx = g.parameter(input_weights);
    Var wh = g.parameter(recurrent_weights);
    Var b = g.parameter(bias);

    std::vector<Var> outputs;
    outputs.reserve(steps);
    Var hs{}, cs{};
    for (std::size_t t = 0; t < steps; ++t) {
      Var xt = select(seq, t);
      if (!batched) xt = reshape(xt, {1, in_width()});
      Var z = matmul(xt, wx);
      if (t > 0) z = add(z, matmul(hs, wh));
      z = add_bias(z, b);
      Var ig = sigmoid(channel_slice(z, 0, h));
      Var fg = sigmoid(channel_slice(z, h, 2 * h));
      Var cand = attfuse::tanh(channel_slice(z, 2 * h, 3 * h));
      Var og = sigmoid(channel_slice(z, 3 * h, 4 * h));
      cs = t > 0 ? add(mul(fg, cs), mul(ig, cand)) : mul(ig, cand);
      hs = mul(og, attfuse::tanh(cs));
      outputs.push_back(batched ? hs : reshape(hs, {h}));
    }
    return stack(outputs);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&input_weights);
    out.push_back(&recurrent_weights);
    out.push_back(&bias);
  }
};

inline Var lstm_forward(Graph& g, LstmLayer& layer, Var seq) { return layer.forward(g, seq); }

/// Reverses the leading (time) axis.
inline Var reverse_time(Var seq) {
  const std::size_t steps = seq.graph->value(seq).dim(0);
  std::vector<Var> parts;
  parts.reserve(steps);
  for (std::size_t t = steps; t-- > 0;) parts.push_back(select(seq, t));
  return stack(parts);
}

/// Bidirectional LSTM: forward pass over seq concatenated per step with the
/// backward layer's pass over the reversed sequence, re-aligned in time.
inline Var blstm_forward(Graph& g, LstmLayer& fwd, LstmLayer& bwd, Var seq) {
  if (fwd.hidden() != bwd.hidden()) {
    throw ConfigError("blstm: hidden sizes differ (" + std::to_string(fwd.hidden()) + " vs " +
                      std::to_string(bwd.hidden()) + ")");
  }
  Var forward_states = fwd.forward(g, seq);
  Var backward_states = reverse_time(bwd.forward(g, reverse_time(seq)));
  return channel_concat(forward_states, backward_states);
}

// ---------------------------------------------------------------------------

/// Batch normalization over [B x C] with running statistics for eval mode.
struct BatchNorm {
  Parameter scale;
  Parameter shift;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t width)
      : scale(name + ".scale", Tensor(Shape{width}, 1.0)),
        shift(name + ".shift", Tensor(Shape{width})),
        running_mean(Shape{width}),
        running_var(Shape{width}, 1.0) {}

  /// Train mode normalizes by batch statistics and, when update_stats is set,
  /// folds them into the running estimates. Eval mode uses running estimates.
  Var forward(Graph& g, Var x, Mode mode, bool update_stats = true) {
    if (mode == Mode::eval) {
      return batchnorm_fixed(x, g.parameter(scale), g.parameter(shift), running_mean, running_var, epsilon);
    }
    Tensor mean, var;
    Var out = batchnorm_train(x, g.parameter(scale), g.parameter(shift), epsilon, &mean, &var);
    if (update_stats) {
      for (std::size_t k = 0; k < mean.size(); ++k) {
        running_mean[k] = (1.0 - momentum) * running_mean[k] + momentum * mean[k];
        running_var[k] = (1.0 - momentum) * running_var[k] + momentum * var[k];
      }
    }
    return out;
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&scale);
    out.push_back(&shift);
  }
};

inline Var batchnorm_forward(Graph& g, BatchNorm& bn, Var x, Mode mode) { return bn.forward(g, x, mode); }

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate). Eval mode returns x.
inline Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const Tensor& xv = x.graph->value(x);
  Tensor mask(xv.shape());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (auto& m : mask.data()) m = uniform01(rng) >= rate ? keep_scale : 0.0;
  return mul_const(x, std::move(mask));
}

// ---------------------------------------------------------------------------

/// VGG-style feature extractor: stages of 3x3 same-padded conv + relu, each
/// stage followed by 2x2 max pooling.
struct ConvBackbone {
  struct Conv {
    Parameter kernel;  // [3 x 3 x Cin x Cout]
    Parameter bias;    // [Cout]
  };

  std::vector<std::vector<Conv>> stages;
  std::size_t in_channels = 3;

  ConvBackbone() = default;

  /// widths[s] is the channel count of stage s, convs_per_stage[s] how many
  /// convolutions it holds.
  ConvBackbone(const std::string& name, std::size_t in_ch, const std::vector<std::size_t>& widths,
               const std::vector<std::size_t>& convs_per_stage, Rng& rng)
      : in_channels(in_ch) {
    if (widths.empty() || widths.size() != convs_per_stage.size()) {
      throw ConfigError("backbone: widths and convs_per_stage must be non-empty and of equal length");
    }
    std::size_t cin = in_ch;
    for (std::size_t s = 0; s < widths.size(); ++s) {
      if (widths[s] == 0 || convs_per_stage[s] == 0) throw ConfigError("backbone: zero width or conv count");
      std::vector<Conv> stage;
      for (std::size_t k = 0; k < convs_per_stage[s]; ++k) {
        const std::string base = name + ".stage" + std::to_string(s) + ".conv" + std::to_string(k);
        const double lim = std::sqrt(6.0 / static_cast<double>(9 * cin));
        stage.push_back(Conv{Parameter(base + ".kernel", uniform_tensor({3, 3, cin, widths[s]}, lim, rng)),
                             Parameter(base + ".bias", Tensor(Shape{widths[s]}))});
        cin = widths[s];
      }
      stages.push_back(std::move(stage));
    }
  }

  std::size_t out_channels() const { return stages.back().back().bias.value.dim(0); }
  std::size_t reduction() const { return std::size_t{1} << stages.size(); }

  /// Spatial size M of the output for a square input of the given size.
  std::size_t output_size(std::size_t input) const {
    if (input == 0 || input % reduction() != 0) {
      throw ConfigError("backbone: input size " + std::to_string(input) + " is not divisible by " +
                        std::to_string(reduction()));
    }
    return input / reduction();
  }

  /// x [B x S x S x Cin] -> [B x M x M x K].
  Var forward(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    if (xv.rank() != 4 || xv.dim(3) != in_channels) {
      throw DimensionError("backbone: expected [B x S x S x " + std::to_string(in_channels) + "], got " +
                           shape_str(xv.shape()));
    }
    output_size(xv.dim(1));
    output_size(xv.dim(2));
    Var h = x;
    for (auto& stage : stages) {
      for (auto& conv : stage) {
        h = relu(conv2d(h, g.parameter(conv.kernel), g.parameter(conv.bias), Padding::same, 1));
      }
      h = maxpool2d(h);
    }
    return h;
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& stage : stages) {
      for (auto& conv : stage) {
        out.push_back(&conv.kernel);
        out.push_back(&conv.bias);
      }
    }
  }
};

}  // namespace attfuse
