#pragma once

// Two-level attention over a fused feature volume F_concat [M x M x C]:
// a per-map gate W_fm in (0,1)^C, then a per-position gate W_spatial in
// (0,1)^{M x M}, giving F_attention = W_spatial * (W_fm * F_concat).

#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "attfuse/layers.hpp"

namespace attfuse {

enum class FeatureMapVariant { lstm_dense, dense_only };
enum class SpatialVariant { conv, dense };
/// How the fused volume is read as a sequence by the recurrent encoder.
/// `maps`: C steps, each one flattened M*M map. `positions`: M*M steps, each
/// the C-vector at one location.
enum class SequenceOrientation { maps, positions };
enum class GateActivation { sigmoid, softmax };

struct FeatureMapAttentionConfig {
  FeatureMapVariant variant = FeatureMapVariant::lstm_dense;
  std::size_t lstm_layers = 1;
  bool bidirectional = false;
  std::size_t hidden = 16;
  GateActivation activation = GateActivation::sigmoid;
  SequenceOrientation orientation = SequenceOrientation::maps;
};

struct SpatialAttentionConfig {
  SpatialVariant variant = SpatialVariant::conv;
  GateActivation activation = GateActivation::sigmoid;
};

/// Gate weights together with the gated features.
struct AttentionOutput {
  Var weights;
  Var refined;
};

namespace detail {

// Views a rank-3 volume as a batch of one.
inline Var as_batch(Var f, bool& was_single) {
  const Tensor& v = f.graph->value(f);
  was_single = v.rank() == 3;
  if (v.rank() == 3) return reshape(f, {1, v.dim(0), v.dim(1), v.dim(2)});
  if (v.rank() != 4) throw DimensionError("attention: expected [M x M x C] or [B x M x M x C], got " + shape_str(v.shape()));
  return f;
}

inline Var squeeze_batch(Var x) {
  const Shape& s = x.graph->value(x).shape();
  return reshape(x, Shape(s.begin() + 1, s.end()));
}

inline Var gate(Var scores, GateActivation act) {
  return act == GateActivation::sigmoid ? sigmoid(scores) : softmax(scores);
}

}  // namespace detail

/// [M x M x C] -> [C x M^2] (batched: [B x M x M x C] -> [B x C x M^2]).
/// Row c is the row-major flattening of feature map c.
inline Var reshape_to_map_sequence(Var f) {
  const Tensor& v = f.graph->value(f);
  if (v.rank() == 3) {
    return permute(reshape(f, {v.dim(0) * v.dim(1), v.dim(2)}), {1, 0});
  }
  if (v.rank() == 4) {
    return permute(reshape(f, {v.dim(0), v.dim(1) * v.dim(2), v.dim(3)}), {0, 2, 1});
  }
  throw DimensionError("reshape_to_map_sequence: expected [M x M x C], got " + shape_str(v.shape()));
}

/// Per-feature-map gating: an LSTM stack encodes the map sequence and a
/// shared dense head scores each encoded map (or, for dense_only, each raw
/// flattened map).
class FeatureMapAttention {
 public:
  FeatureMapAttention() = default;

  FeatureMapAttention(const std::string& name, const FeatureMapAttentionConfig& cfg, std::size_t map_size,
                      std::size_t channels, Rng& rng)
      : cfg_(cfg), map_size_(map_size), channels_(channels) {
    if (map_size == 0 || channels == 0) throw ConfigError("feature-map attention: empty input volume");
    const std::size_t positions = map_size * map_size;
    if (cfg.variant == FeatureMapVariant::dense_only) {
      score_ = DenseLayer(name + ".score", positions, 1, rng);
      return;
    }
    if (cfg.lstm_layers < 1 || cfg.lstm_layers > 3) {
      throw ConfigError("feature-map attention: lstm_layers must be 1..3, got " + std::to_string(cfg.lstm_layers));
    }
    if (cfg.hidden == 0) throw ConfigError("feature-map attention: hidden size must be positive");
    const std::size_t step_width = cfg.orientation == SequenceOrientation::maps ? positions : channels;
    std::size_t in = step_width;
    for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
      const std::string base = name + ".lstm" + std::to_string(l);
      if (cfg.bidirectional) {
        forward_layers_.emplace_back(base + ".fwd", in, cfg.hidden, rng);
        backward_layers_.emplace_back(base + ".bwd", in, cfg.hidden, rng);
        in = 2 * cfg.hidden;
      } else {
        forward_layers_.emplace_back(base, in, cfg.hidden, rng);
        in = cfg.hidden;
      }
    }
    const std::size_t score_out = cfg.orientation == SequenceOrientation::maps ? 1 : channels;
    score_ = DenseLayer(name + ".score", in, score_out, rng);
  }

  const FeatureMapAttentionConfig& config() const { return cfg_; }
  std::size_t channels() const { return channels_; }

  /// Forces W_fm = 1 so the module becomes an exact identity.
  void set_bypass(bool on) { bypass_ = on; }
  bool bypass() const { return bypass_; }

  /// f is [M x M x C] or [B x M x M x C]; weights are [C] or [B x C].
  AttentionOutput forward(Graph& g, Var f) {
    bool single = false;
    Var fb = detail::as_batch(f, single);
    const Tensor& fv = g.value(fb);
    const std::size_t batch = fv.dim(0);
    if (fv.dim(1) != map_size_ || fv.dim(2) != map_size_ || fv.dim(3) != channels_) {
      throw ConfigError("feature-map attention configured for " + std::to_string(map_size_) + "x" +
                        std::to_string(map_size_) + "x" + std::to_string(channels_) + ", got " +
                        shape_str(fv.shape()));
    }
    Var weights = bypass_ ? g.constant(Tensor(Shape{batch, channels_}, 1.0)) : detail::gate(scores(g, fb), cfg_.activation);
    Var refined = broadcast_mul_channel(fb, weights);
    if (single) return {detail::squeeze_batch(weights), detail::squeeze_batch(refined)};
    return {weights, refined};
  }

  void collect(std::vector<Parameter*>& out) {
    for (std::size_t l = 0; l < forward_layers_.size(); ++l) {
      forward_layers_[l].collect(out);
      if (cfg_.bidirectional) backward_layers_[l].collect(out);
    }
    score_.collect(out);
  }

 private:
  // Pre-activation scores theta_fm, [B x C].
  Var scores(Graph& g, Var fb) {
    const std::size_t batch = g.value(fb).dim(0);
    const std::size_t positions = map_size_ * map_size_;
    if (cfg_.variant == FeatureMapVariant::dense_only) {
      Var rows = reshape(reshape_to_map_sequence(fb), {batch * channels_, positions});
      return reshape(score_.forward(g, rows), {batch, channels_});
    }
    if (cfg_.orientation == SequenceOrientation::maps) {
      Var seq = permute(reshape_to_map_sequence(fb), {1, 0, 2});  // [C x B x M^2]
      Var states = encode(g, seq);                                 // [C x B x H']
      const std::size_t width = g.value(states).dim(2);
      Var s = score_.forward(g, reshape(states, {channels_ * batch, width}));
      return permute(reshape(s, {channels_, batch}), {1, 0});
    }
    Var seq = permute(reshape(fb, {batch, positions, channels_}), {1, 0, 2});  // [M^2 x B x C]
    Var states = encode(g, seq);
    return score_.forward(g, select(states, positions - 1));
  }

  Var encode(Graph& g, Var seq) {
    Var h = seq;
    for (std::size_t l = 0; l < forward_layers_.size(); ++l) {
      h = cfg_.bidirectional ? blstm_forward(g, forward_layers_[l], backward_layers_[l], h)
                             : forward_layers_[l].forward(g, h);
    }
    return h;
  }

  FeatureMapAttentionConfig cfg_;
  std::size_t map_size_ = 0;
  std::size_t channels_ = 0;
  std::vector<LstmLayer> forward_layers_;
  std::vector<LstmLayer> backward_layers_;
  DenseLayer score_;
  bool bypass_ = false;
};

/// Per-position gating from channel-average and channel-max maps, through a
/// 1x1 convolution (or a dense layer over the flattened pair).
class SpatialAttention {
 public:
  SpatialAttention() = default;

  SpatialAttention(const std::string& name, const SpatialAttentionConfig& cfg, std::size_t map_size, Rng& rng)
      : cfg_(cfg), map_size_(map_size) {
    if (map_size == 0) throw ConfigError("spatial attention: empty map");
    if (cfg.variant == SpatialVariant::conv) {
      kernel_ = Parameter(name + ".kernel", uniform_tensor({1, 1, 2, 1}, std::sqrt(3.0), rng));
      bias_ = Parameter(name + ".bias", Tensor(Shape{1}));
    } else {
      const std::size_t positions = map_size * map_size;
      dense_ = DenseLayer(name + ".dense", 2 * positions, positions, rng);
    }
  }

  const SpatialAttentionConfig& config() const { return cfg_; }
  void set_bypass(bool on) { bypass_ = on; }
  bool bypass() const { return bypass_; }

  /// Direct access to the 1x1 kernel [1 x 1 x 2 x 1] and bias [1] of the conv
  /// variant.
  Parameter& kernel() { return kernel_; }
  Parameter& bias() { return bias_; }

  /// f is [M x M x C] or [B x M x M x C]; weights are [M x M] or [B x M x M].
  AttentionOutput forward(Graph& g, Var f) {
    bool single = false;
    Var fb = detail::as_batch(f, single);
    const Tensor& fv = g.value(fb);
    const std::size_t batch = fv.dim(0), m1 = fv.dim(1), m2 = fv.dim(2);
    if (cfg_.variant == SpatialVariant::dense && (m1 != map_size_ || m2 != map_size_)) {
      throw ConfigError("spatial attention (dense) configured for " + std::to_string(map_size_) + "x" +
                        std::to_string(map_size_) + " maps, got " + shape_str(fv.shape()));
    }
    Var weights;
    if (bypass_) {
      weights = g.constant(Tensor(Shape{batch, m1, m2}, 1.0));
    } else {
      Var pooled = channel_concat(channel_pool(fb, PoolMode::avg), channel_pool(fb, PoolMode::max));  // [B x M x M x 2]
      Var theta;
      if (cfg_.variant == SpatialVariant::conv) {
        theta = conv2d(pooled, g.parameter(kernel_), g.parameter(bias_), Padding::valid, 1);
        theta = reshape(theta, {batch, m1 * m2});
      } else {
        theta = dense_.forward(g, reshape(pooled, {batch, 2 * m1 * m2}));
      }
      weights = reshape(detail::gate(theta, cfg_.activation), {batch, m1, m2});
    }
    Var refined = broadcast_mul_spatial(fb, weights);
    if (single) return {detail::squeeze_batch(weights), detail::squeeze_batch(refined)};
    return {weights, refined};
  }

  void collect(std::vector<Parameter*>& out) {
    if (cfg_.variant == SpatialVariant::conv) {
      out.push_back(&kernel_);
      out.push_back(&bias_);
    } else {
      dense_.collect(out);
    }
  }

 private:
  SpatialAttentionConfig cfg_;
  std::size_t map_size_ = 0;
  Parameter kernel_;
  Parameter bias_;
  DenseLayer dense_;
  bool bypass_ = false;
};

struct TwoLevelOutput {
  Var feature_map_weights;
  Var spatial_weights;
  Var output;
};

/// F_attention = W_spatial * (W_fm * F_concat).
inline TwoLevelOutput two_level_attention(Graph& g, FeatureMapAttention& fm, SpatialAttention& sp, Var f_concat) {
  AttentionOutput first = fm.forward(g, f_concat);
  AttentionOutput second = sp.forward(g, first.refined);
  return {first.weights, second.weights, second.refined};
}

/// Writes one CSV row per weight: sample id, flat weight index, value.
/// `weights` is [B x ...]; sample_ids has B entries.
inline void write_attention_csv(std::ostream& os, std::span<const std::string> sample_ids, const Tensor& weights,
                                bool header = true) {
  if (weights.rank() < 1 || weights.dim(0) != sample_ids.size()) {
    throw DimensionError("attention csv: " + std::to_string(sample_ids.size()) + " ids for weights " +
                         shape_str(weights.shape()));
  }
  if (header) os << "sample_id,weight_index,value\n";
  const std::size_t per = weights.size() / weights.dim(0);
  char buf[64];
  for (std::size_t b = 0; b < sample_ids.size(); ++b) {
    for (std::size_t i = 0; i < per; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", weights[b * per + i]);
      os << sample_ids[b] << ',' << i << ',' << buf << '\n';
    }
  }
}

}  // namespace attfuse
