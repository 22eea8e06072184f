#pragma once

// ModelConfig and its plain-text key=value form.

#include <charconv>
#include <cstdio>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "attfuse/attention.hpp"
#include "attfuse/errors.hpp"

namespace attfuse {

enum class Fusion { concat_only, feature_map_only, spatial_only, two_level };
enum class Modalities { rgbd, rgb, depth };
enum class ClassifierInput { flatten, pool };
enum class DecayUnit { epoch, step };

/// Architecture and training hyperparameters.
struct ModelConfig {
  // Backbone
  std::size_t input_size = 112;
  std::vector<std::size_t> backbone_widths{8, 16, 32, 32};
  std::vector<std::size_t> convs_per_stage{1, 1, 1, 1};
  bool share_backbone = false;
  Modalities modalities = Modalities::rgbd;

  // Fusion and attention
  Fusion fusion = Fusion::two_level;
  FeatureMapAttentionConfig feature_map{FeatureMapVariant::lstm_dense, 1, false, 32, GateActivation::sigmoid,
                                        SequenceOrientation::maps};
  SpatialAttentionConfig spatial{};

  // Classifier
  std::vector<std::size_t> classifier_widths{2048, 1024, 512};
  ClassifierInput classifier_input = ClassifierInput::flatten;
  std::size_t num_classes = 10;
  double dropout = 0.5;

  std::uint64_t seed = 1;

  // Optimization
  std::size_t batch_size = 20;
  double learning_rate = 1e-5;
  double lr_decay = 0.9;
  DecayUnit decay_unit = DecayUnit::epoch;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t epochs = 50;

  /// Full-size network: VGG-16 convolution blocks on 224x224 input
  /// (7x7x512 per modality), LSTM width 1024.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.input_size = 224;
    c.backbone_widths = {64, 128, 256, 512, 512};
    c.convs_per_stage = {2, 2, 3, 3, 3};
    c.feature_map.hidden = 1024;
    return c;
  }

  std::size_t feature_size() const { return input_size >> backbone_widths.size(); }
  std::size_t backbone_channels() const { return backbone_widths.back(); }
  std::size_t fused_channels() const {
    return modalities == Modalities::rgbd ? 2 * backbone_channels() : backbone_channels();
  }
  bool uses_feature_map_attention() const {
    return fusion == Fusion::feature_map_only || fusion == Fusion::two_level;
  }
  bool uses_spatial_attention() const { return fusion == Fusion::spatial_only || fusion == Fusion::two_level; }
  std::size_t classifier_input_width() const {
    const std::size_t m = feature_size();
    return classifier_input == ClassifierInput::flatten ? m * m * fused_channels() : fused_channels();
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (backbone_widths.empty() || backbone_widths.size() != convs_per_stage.size()) {
      throw ConfigError("backbone_widths and convs_per_stage must be non-empty and equally long");
    }
    for (std::size_t i = 0; i < backbone_widths.size(); ++i) {
      if (backbone_widths[i] == 0 || convs_per_stage[i] == 0) throw ConfigError("backbone stage with zero width/convs");
    }
    const std::size_t reduction = std::size_t{1} << backbone_widths.size();
    if (input_size == 0 || input_size % reduction != 0) {
      throw ConfigError("input_size " + std::to_string(input_size) + " not divisible by " + std::to_string(reduction));
    }
    if (classifier_widths.size() != 3) throw ConfigError("classifier_widths needs exactly 3 entries");
    for (auto w : classifier_widths) {
      if (w == 0) throw ConfigError("classifier widths must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (uses_feature_map_attention() && feature_map.variant == FeatureMapVariant::lstm_dense) {
      if (feature_map.lstm_layers < 1 || feature_map.lstm_layers > 3) throw ConfigError("lstm_layers must be 1..3");
      if (feature_map.hidden == 0) throw ConfigError("lstm_hidden must be positive");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
  }

  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
};

// ---------------------------------------------------------------------------
// Enum names

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::concat_only: return "concat_only";
    case Fusion::feature_map_only: return "feature_map_only";
    case Fusion::spatial_only: return "spatial_only";
    case Fusion::two_level: return "two_level";
  }
  return "?";
}
inline std::string to_string(Modalities m) {
  switch (m) {
    case Modalities::rgbd: return "rgbd";
    case Modalities::rgb: return "rgb";
    case Modalities::depth: return "depth";
  }
  return "?";
}
inline std::string to_string(FeatureMapVariant v) { return v == FeatureMapVariant::lstm_dense ? "lstm_dense" : "dense_only"; }
inline std::string to_string(SpatialVariant v) { return v == SpatialVariant::conv ? "conv" : "dense"; }
inline std::string to_string(GateActivation a) { return a == GateActivation::sigmoid ? "sigmoid" : "softmax"; }
inline std::string to_string(SequenceOrientation o) { return o == SequenceOrientation::maps ? "maps" : "positions"; }
inline std::string to_string(ClassifierInput c) { return c == ClassifierInput::flatten ? "flatten" : "pool"; }
inline std::string to_string(DecayUnit d) { return d == DecayUnit::epoch ? "epoch" : "step"; }

inline Fusion parse_fusion(std::string_view s) {
  if (s == "concat_only") return Fusion::concat_only;
  if (s == "feature_map_only") return Fusion::feature_map_only;
  if (s == "spatial_only") return Fusion::spatial_only;
  if (s == "two_level") return Fusion::two_level;
  throw ConfigError("unknown fusion '" + std::string(s) + "'");
}

namespace detail {

template <class E>
E parse_choice(std::string_view key, std::string_view s, std::initializer_list<std::pair<std::string_view, E>> opts) {
  for (const auto& [name, v] : opts) {
    if (s == name) return v;
  }
  throw ConfigError("invalid value '" + std::string(s) + "' for " + std::string(key));
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(std::string_view key, std::string_view s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("invalid integer '" + std::string(s) + "' for " + std::string(key));
  }
  return v;
}

inline double parse_double(std::string_view key, std::string_view s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(s), &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid number '" + std::string(s) + "' for " + std::string(key));
  }
}

inline bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("invalid boolean '" + std::string(s) + "' for " + std::string(key));
}

inline std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece = trim(s.substr(start, comma == std::string_view::npos ? s.size() - start : comma - start));
    out.push_back(parse_size(key, piece));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "input_size=" << input_size << '\n'
     << "backbone_widths=" << detail::join(backbone_widths) << '\n'
     << "convs_per_stage=" << detail::join(convs_per_stage) << '\n'
     << "share_backbone=" << (share_backbone ? "true" : "false") << '\n'
     << "modalities=" << to_string(modalities) << '\n'
     << "fusion=" << to_string(fusion) << '\n'
     << "fm_variant=" << to_string(feature_map.variant) << '\n'
     << "lstm_layers=" << feature_map.lstm_layers << '\n'
     << "bidirectional=" << (feature_map.bidirectional ? "true" : "false") << '\n'
     << "lstm_hidden=" << feature_map.hidden << '\n'
     << "fm_activation=" << to_string(feature_map.activation) << '\n'
     << "fm_orientation=" << to_string(feature_map.orientation) << '\n'
     << "spatial_variant=" << to_string(spatial.variant) << '\n'
     << "spatial_activation=" << to_string(spatial.activation) << '\n'
     << "classifier_widths=" << detail::join(classifier_widths) << '\n'
     << "classifier_input=" << to_string(classifier_input) << '\n'
     << "num_classes=" << num_classes << '\n'
     << "dropout=" << detail::fmt_double(dropout) << '\n'
     << "seed=" << seed << '\n'
     << "batch_size=" << batch_size << '\n'
     << "learning_rate=" << detail::fmt_double(learning_rate) << '\n'
     << "lr_decay=" << detail::fmt_double(lr_decay) << '\n'
     << "decay_unit=" << to_string(decay_unit) << '\n'
     << "adam_beta1=" << detail::fmt_double(adam_beta1) << '\n'
     << "adam_beta2=" << detail::fmt_double(adam_beta2) << '\n'
     << "adam_epsilon=" << detail::fmt_double(adam_epsilon) << '\n'
     << "epochs=" << epochs << '\n';
  return os.str();
}

/// Parses key=value lines ('#' starts a comment). Keys not present keep
/// their defaults; unknown keys are rejected.
inline ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string val = detail::trim(std::string_view(t).substr(eq + 1));
    using detail::parse_choice;
    if (key == "input_size") c.input_size = detail::parse_size(key, val);
    else if (key == "backbone_widths") c.backbone_widths = detail::parse_size_list(key, val);
    else if (key == "convs_per_stage") c.convs_per_stage = detail::parse_size_list(key, val);
    else if (key == "share_backbone") c.share_backbone = detail::parse_bool(key, val);
    else if (key == "modalities")
      c.modalities = parse_choice<Modalities>(key, val, {{"rgbd", Modalities::rgbd}, {"rgb", Modalities::rgb}, {"depth", Modalities::depth}});
    else if (key == "fusion") c.fusion = parse_fusion(val);
    else if (key == "fm_variant")
      c.feature_map.variant = parse_choice<FeatureMapVariant>(
          key, val, {{"lstm_dense", FeatureMapVariant::lstm_dense}, {"dense_only", FeatureMapVariant::dense_only}});
    else if (key == "lstm_layers") c.feature_map.lstm_layers = detail::parse_size(key, val);
    else if (key == "bidirectional") c.feature_map.bidirectional = detail::parse_bool(key, val);
    else if (key == "lstm_hidden") c.feature_map.hidden = detail::parse_size(key, val);
    else if (key == "fm_activation")
      c.feature_map.activation =
          parse_choice<GateActivation>(key, val, {{"sigmoid", GateActivation::sigmoid}, {"softmax", GateActivation::softmax}});
    else if (key == "fm_orientation")
      c.feature_map.orientation = parse_choice<SequenceOrientation>(
          key, val, {{"maps", SequenceOrientation::maps}, {"positions", SequenceOrientation::positions}});
    else if (key == "spatial_variant")
      c.spatial.variant = parse_choice<SpatialVariant>(key, val, {{"conv", SpatialVariant::conv}, {"dense", SpatialVariant::dense}});
    else if (key == "spatial_activation")
      c.spatial.activation =
          parse_choice<GateActivation>(key, val, {{"sigmoid", GateActivation::sigmoid}, {"softmax", GateActivation::softmax}});
    else if (key == "classifier_widths") c.classifier_widths = detail::parse_size_list(key, val);
    else if (key == "classifier_input")
      c.classifier_input =
          parse_choice<ClassifierInput>(key, val, {{"flatten", ClassifierInput::flatten}, {"pool", ClassifierInput::pool}});
    else if (key == "num_classes") c.num_classes = detail::parse_size(key, val);
    else if (key == "dropout") c.dropout = detail::parse_double(key, val);
    else if (key == "seed") c.seed = detail::parse_size(key, val);
    else if (key == "batch_size") c.batch_size = detail::parse_size(key, val);
    else if (key == "learning_rate") c.learning_rate = detail::parse_double(key, val);
    else if (key == "lr_decay") c.lr_decay = detail::parse_double(key, val);
    else if (key == "decay_unit")
      c.decay_unit = parse_choice<DecayUnit>(key, val, {{"epoch", DecayUnit::epoch}, {"step", DecayUnit::step}});
    else if (key == "adam_beta1") c.adam_beta1 = detail::parse_double(key, val);
    else if (key == "adam_beta2") c.adam_beta2 = detail::parse_double(key, val);
    else if (key == "adam_epsilon") c.adam_epsilon = detail::parse_double(key, val);
    else if (key == "epochs") c.epochs = detail::parse_size(key, val);
    else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return c;
}

}  // namespace attfuse
