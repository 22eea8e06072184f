#pragma once

// Full network: per-modality backbones, fusion (concatenation plus optional
// attention), and a 4-layer classifier; plus checkpoint persistence.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "attfuse/attention.hpp"
#include "attfuse/config.hpp"
#include "attfuse/layers.hpp"

namespace attfuse {

struct ForwardOptions {
  Mode mode = Mode::eval;
  bool dropout = true;             // apply dropout in train mode
  bool update_batch_stats = true;  // fold batch statistics into running estimates in train mode
};

/// Everything a forward pass exposes. Attention weight handles are only
/// meaningful when the corresponding has_* flag is set.
struct ForwardOutput {
  Var logits;     // [B x N]
  Var embedding;  // [B x w3], third classifier block
  Var fused;      // [B x M x M x C] before attention
  Var attended;   // [B x M x M x C] after attention
  Var feature_map_weights;  // [B x C]
  Var spatial_weights;      // [B x M x M]
  bool has_feature_map_weights = false;
  bool has_spatial_weights = false;
};

/// Repeats a single-channel image batch [B x S x S x 1] to `channels`.
inline Tensor replicate_channels(const Tensor& x, std::size_t channels) {
  if (x.rank() != 4 || x.dim(3) != 1) throw DimensionError("replicate_channels: expected [B x S x S x 1], got " + shape_str(x.shape()));
  Tensor out(Shape{x.dim(0), x.dim(1), x.dim(2), channels});
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t c = 0; c < channels; ++c) out[i * channels + c] = x[i];
  }
  return out;
}

class Model {
 public:
  /// Deterministic initialization from `seed`; the seed is stored in the
  /// model's config.
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.seed = seed;
    cfg_.validate();
    Rng rng(seed);
    dropout_rng_.seed(seed ^ 0x9E3779B97F4A7C15ULL);
    const bool need_rgb = cfg_.modalities != Modalities::depth;
    const bool need_depth = cfg_.modalities != Modalities::rgb;
    if (need_rgb || cfg_.share_backbone) {
      rgb_backbone_ = ConvBackbone(cfg_.share_backbone ? "backbone" : "rgb_backbone", 3, cfg_.backbone_widths,
                                   cfg_.convs_per_stage, rng);
    }
    if (need_depth && !cfg_.share_backbone) {
      depth_backbone_ = ConvBackbone("depth_backbone", 3, cfg_.backbone_widths, cfg_.convs_per_stage, rng);
    }
    const std::size_t m = cfg_.feature_size();
    const std::size_t c = cfg_.fused_channels();
    if (cfg_.uses_feature_map_attention()) fm_ = FeatureMapAttention("feature_map_attention", cfg_.feature_map, m, c, rng);
    if (cfg_.uses_spatial_attention()) sp_ = SpatialAttention("spatial_attention", cfg_.spatial, m, rng);
    std::size_t in = cfg_.classifier_input_width();
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string base = "classifier.block" + std::to_string(i);
      blocks_.push_back(Block{DenseLayer(base + ".dense", in, cfg_.classifier_widths[i], rng),
                              BatchNorm(base + ".batchnorm", cfg_.classifier_widths[i])});
      in = cfg_.classifier_widths[i];
    }
    output_ = DenseLayer("classifier.output", in, cfg_.num_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// rgb [B x S x S x 3] with values in [0,1]; depth [B x S x S x 1].
  ForwardOutput forward(Graph& g, const Tensor& rgb, const Tensor& depth, const ForwardOptions& opt) {
    const std::size_t s = cfg_.input_size;
    if (rgb.rank() != 4 || depth.rank() != 4) throw DimensionError("forward: inputs must be rank-4 image batches");
    if (rgb.dim(0) != depth.dim(0)) {
      throw DataError("forward: rgb batch of " + std::to_string(rgb.dim(0)) + " vs depth batch of " + std::to_string(depth.dim(0)));
    }
    if (rgb.shape() != Shape{rgb.dim(0), s, s, 3}) throw DimensionError("forward: rgb batch " + shape_str(rgb.shape()) + " does not match input_size " + std::to_string(s));
    if (depth.shape() != Shape{depth.dim(0), s, s, 1}) throw DimensionError("forward: depth batch " + shape_str(depth.shape()) + " does not match input_size " + std::to_string(s));
    const std::size_t batch = rgb.dim(0);

    ForwardOutput out;
    Var fused;
    if (cfg_.modalities == Modalities::rgb) {
      fused = rgb_backbone_.forward(g, g.constant(rgb));
    } else if (cfg_.modalities == Modalities::depth) {
      fused = depth_net().forward(g, g.constant(replicate_channels(depth, 3)));
    } else {
      Var f_rgb = rgb_backbone_.forward(g, g.constant(rgb));
      Var f_depth = depth_net().forward(g, g.constant(replicate_channels(depth, 3)));
      fused = channel_concat(f_rgb, f_depth);
    }
    out.fused = fused;
    Var h = fused;
    if (cfg_.uses_feature_map_attention()) {
      AttentionOutput a = fm_.forward(g, h);
      out.feature_map_weights = a.weights;
      out.has_feature_map_weights = true;
      h = a.refined;
    }
    if (cfg_.uses_spatial_attention()) {
      AttentionOutput a = sp_.forward(g, h);
      out.spatial_weights = a.weights;
      out.has_spatial_weights = true;
      h = a.refined;
    }
    out.attended = h;

    const std::size_t m = cfg_.feature_size();
    const std::size_t c = cfg_.fused_channels();
    if (cfg_.classifier_input == ClassifierInput::flatten) {
      h = reshape(h, {batch, m * m * c});
    } else {
      h = reshape(channel_pool(permute(reshape(h, {batch, m * m, c}), {0, 2, 1}), PoolMode::avg), {batch, c});
    }
    for (auto& blk : blocks_) {
      h = blk.dense.forward(g, h);
      h = blk.norm.forward(g, h, opt.mode, opt.update_batch_stats);
      h = relu(h);
      out.embedding = h;
      if (opt.dropout) h = dropout(h, cfg_.dropout, opt.mode, dropout_rng_);
    }
    out.logits = output_.forward(g, h);
    return out;
  }

  /// Trainable parameters in a fixed order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    if (!rgb_backbone_.stages.empty()) rgb_backbone_.collect(out);
    if (!depth_backbone_.stages.empty()) depth_backbone_.collect(out);
    if (cfg_.uses_feature_map_attention()) fm_.collect(out);
    if (cfg_.uses_spatial_attention()) sp_.collect(out);
    for (auto& blk : blocks_) {
      blk.dense.collect(out);
      blk.norm.collect(out);
    }
    output_.collect(out);
    return out;
  }

  /// Non-trainable state (batchnorm running statistics), named.
  std::vector<std::pair<std::string, Tensor*>> buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string base = "classifier.block" + std::to_string(i) + ".batchnorm";
      out.emplace_back(base + ".running_mean", &blocks_[i].norm.running_mean);
      out.emplace_back(base + ".running_var", &blocks_[i].norm.running_var);
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  FeatureMapAttention& feature_map_attention() { return fm_; }
  SpatialAttention& spatial_attention() { return sp_; }

  /// Forces both attention gates to exactly one (where present).
  void set_unit_attention(bool on) {
    fm_.set_bypass(on);
    sp_.set_bypass(on);
  }

  Rng& dropout_rng() { return dropout_rng_; }

 private:
  struct Block {
    DenseLayer dense;
    BatchNorm norm;
  };

  ConvBackbone& depth_net() { return cfg_.share_backbone ? rgb_backbone_ : depth_backbone_; }

  ModelConfig cfg_;
  ConvBackbone rgb_backbone_;
  ConvBackbone depth_backbone_;
  FeatureMapAttention fm_;
  SpatialAttention sp_;
  std::vector<Block> blocks_;
  DenseLayer output_;
  Rng dropout_rng_;
};

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) { return Model(cfg, seed); }

/// Names and shapes of every trainable parameter implied by a config, in
/// Model::parameters() order, computed without allocating the model.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> out;
  auto backbone = [&](const std::string& name) {
    std::size_t cin = 3;
    for (std::size_t s = 0; s < cfg.backbone_widths.size(); ++s) {
      for (std::size_t k = 0; k < cfg.convs_per_stage[s]; ++k) {
        const std::string base = name + ".stage" + std::to_string(s) + ".conv" + std::to_string(k);
        out.emplace_back(base + ".kernel", Shape{3, 3, cin, cfg.backbone_widths[s]});
        out.emplace_back(base + ".bias", Shape{cfg.backbone_widths[s]});
        cin = cfg.backbone_widths[s];
      }
    }
  };
  if (cfg.share_backbone) {
    backbone("backbone");
  } else {
    if (cfg.modalities != Modalities::depth) backbone("rgb_backbone");
    if (cfg.modalities != Modalities::rgb) backbone("depth_backbone");
  }
  const std::size_t m = cfg.feature_size();
  const std::size_t c = cfg.fused_channels();
  if (cfg.uses_feature_map_attention()) {
    const auto& fm = cfg.feature_map;
    if (fm.variant == FeatureMapVariant::dense_only) {
      out.emplace_back("feature_map_attention.score.weight", Shape{m * m, 1});
      out.emplace_back("feature_map_attention.score.bias", Shape{1});
    } else {
      std::size_t in = fm.orientation == SequenceOrientation::maps ? m * m : c;
      auto lstm = [&](const std::string& base, std::size_t width) {
        out.emplace_back(base + ".input_weights", Shape{width, 4 * fm.hidden});
        out.emplace_back(base + ".recurrent_weights", Shape{fm.hidden, 4 * fm.hidden});
        out.emplace_back(base + ".bias", Shape{4 * fm.hidden});
      };
      for (std::size_t l = 0; l < fm.lstm_layers; ++l) {
        const std::string base = "feature_map_attention.lstm" + std::to_string(l);
        if (fm.bidirectional) {
          lstm(base + ".fwd", in);
          lstm(base + ".bwd", in);
          in = 2 * fm.hidden;
        } else {
          lstm(base, in);
          in = fm.hidden;
        }
      }
      const std::size_t score_out = fm.orientation == SequenceOrientation::maps ? 1 : c;
      out.emplace_back("feature_map_attention.score.weight", Shape{in, score_out});
      out.emplace_back("feature_map_attention.score.bias", Shape{score_out});
    }
  }
  if (cfg.uses_spatial_attention()) {
    if (cfg.spatial.variant == SpatialVariant::conv) {
      out.emplace_back("spatial_attention.kernel", Shape{1, 1, 2, 1});
      out.emplace_back("spatial_attention.bias", Shape{1});
    } else {
      out.emplace_back("spatial_attention.dense.weight", Shape{2 * m * m, m * m});
      out.emplace_back("spatial_attention.dense.bias", Shape{m * m});
    }
  }
  std::size_t in = cfg.classifier_input_width();
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string base = "classifier.block" + std::to_string(i);
    const std::size_t w = cfg.classifier_widths[i];
    out.emplace_back(base + ".dense.weight", Shape{in, w});
    out.emplace_back(base + ".dense.bias", Shape{w});
    out.emplace_back(base + ".batchnorm.scale", Shape{w});
    out.emplace_back(base + ".batchnorm.shift", Shape{w});
    in = w;
  }
  out.emplace_back("classifier.output.weight", Shape{in, cfg.num_classes});
  out.emplace_back("classifier.output.bias", Shape{cfg.num_classes});
  return out;
}

/// Extracts the third classifier block's activations in eval mode.
inline Tensor extract_embedding(Model& model, const Tensor& rgb, const Tensor& depth) {
  Graph g;
  ForwardOutput out = model.forward(g, rgb, depth, ForwardOptions{Mode::eval});
  return g.value(out.embedding);
}

/// Eval-mode logits for a batch.
inline Tensor predict_logits(Model& model, const Tensor& rgb, const Tensor& depth) {
  Graph g;
  ForwardOutput out = model.forward(g, rgb, depth, ForwardOptions{Mode::eval});
  return g.value(out.logits);
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   "FCKP" | u32 version | u32 config length | config text |
//   repeated { u32 name length | name | FTNS tensor }
// Records named "optimizer.*" or "meta.*" are carried as extras.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::map<std::string, Tensor> extras;
};

namespace detail {

inline void write_record(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_tensor(os, t);
}

inline std::size_t record_bytes(const std::string& name, const Shape& shape) {
  return 4 + name.size() + serialized_tensor_bytes(shape);
}

}  // namespace detail

/// Expected size in bytes of a checkpoint without extras.
inline std::size_t checkpoint_size(const ModelConfig& cfg) {
  std::size_t n = 4 + 4 + 4 + cfg.to_text().size();
  for (const auto& [name, shape] : parameter_shapes(cfg)) n += detail::record_bytes(name, shape);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string base = "classifier.block" + std::to_string(i) + ".batchnorm";
    const Shape s{cfg.classifier_widths[i]};
    n += detail::record_bytes(base + ".running_mean", s) + detail::record_bytes(base + ".running_var", s);
  }
  return n;
}

/// Writes atomically: the file at `path` is replaced only after a complete
/// write.
inline void save_checkpoint(Model& model, const std::filesystem::path& path,
                            const std::map<std::string, Tensor>& extras = {}) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + tmp.string());
    os.write("FCKP", 4);
    detail::put_u32(os, kCheckpointVersion);
    const std::string text = model.config().to_text();
    detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (Parameter* p : model.parameters()) detail::write_record(os, p->name, p->value);
    for (const auto& [name, t] : model.buffers()) detail::write_record(os, name, *t);
    for (const auto& [name, t] : extras) detail::write_record(os, name, t);
    if (!os) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "FCKP") throw LoadError(path.string() + ": not a checkpoint");
  std::uint32_t version = 0, text_len = 0;
  if (!detail::get_u32(is, version)) throw LoadError(path.string() + ": truncated header");
  if (version != kCheckpointVersion) {
    throw LoadError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  if (!detail::get_u32(is, text_len)) throw LoadError(path.string() + ": truncated header");
  std::string text(text_len, '\0');
  if (!is.read(text.data(), text_len)) throw LoadError(path.string() + ": truncated config");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_text(text);
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": bad embedded config: " + e.what());
  }

  Checkpoint ck{Model(cfg, cfg.seed), {}};
  std::map<std::string, Tensor*> slots;
  for (Parameter* p : ck.model.parameters()) slots[p->name] = &p->value;
  for (auto& [name, t] : ck.model.buffers()) slots[name] = t;
  std::set<std::string> seen;
  while (is.peek() != std::char_traits<char>::eof()) {
    std::uint32_t name_len = 0;
    if (!detail::get_u32(is, name_len)) throw LoadError(path.string() + ": truncated record header");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw LoadError(path.string() + ": truncated record name");
    Tensor t;
    try {
      t = read_tensor(is);
    } catch (const LoadError& e) {
      throw LoadError(path.string() + ": entry '" + name + "': " + e.what());
    }
    if (name.rfind("optimizer.", 0) == 0 || name.rfind("meta.", 0) == 0) {
      ck.extras[name] = std::move(t);
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw LoadError(path.string() + ": unexpected entry '" + name + "'");
    if (!seen.insert(name).second) throw LoadError(path.string() + ": duplicate entry '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw LoadError(path.string() + ": entry '" + name + "' has shape " + shape_str(t.shape()) + ", config implies " +
                      shape_str(it->second->shape()));
    }
    *it->second = std::move(t);
  }
  for (Parameter* p : ck.model.parameters()) {
    if (!seen.count(p->name)) throw LoadError(path.string() + ": missing entry '" + p->name + "'");
  }
  for (auto& [name, t] : ck.model.buffers()) {
    if (!seen.count(name)) throw LoadError(path.string() + ": missing entry '" + name + "'");
  }
  return ck;
}

}  // namespace attfuse
