#pragma once

// Adam, training/evaluation loops, gradient checking, and the ablation
// harness.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "attfuse/config.hpp"
#include "attfuse/data.hpp"
#include "attfuse/finite_diff.hpp"
#include "attfuse/model.hpp"

namespace attfuse {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;   // updates applied so far
  std::size_t epoch = 0;  // completed epochs (drives per-epoch decay)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double base_lr = 1e-5;
  double decay = 0.9;
  DecayUnit decay_unit = DecayUnit::epoch;

  AdamState() = default;

  AdamState(const std::vector<Parameter*>& params, const ModelConfig& cfg)
      : beta1(cfg.adam_beta1),
        beta2(cfg.adam_beta2),
        epsilon(cfg.adam_epsilon),
        base_lr(cfg.learning_rate),
        decay(cfg.lr_decay),
        decay_unit(cfg.decay_unit) {
    for (const Parameter* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }

  /// base * decay^e, where e counts completed epochs (or steps).
  double effective_lr() const {
    const double e = static_cast<double>(decay_unit == DecayUnit::epoch ? epoch : step);
    return base_lr * std::pow(decay, e);
  }
};

/// One bias-corrected Adam update from each parameter's accumulated grad.
/// All gradients are validated before anything is modified.
inline void adam_step(AdamState& s, const std::vector<Parameter*>& params) {
  if (s.m.size() != params.size()) throw UsageError("adam_step: optimizer state was built for a different parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Parameter& p = *params[k];
    if (p.grad.shape() != p.value.shape()) throw UsageError("adam_step: no gradient for parameter " + p.name);
    if (s.m[k].shape() != p.value.shape()) throw UsageError("adam_step: moment shape mismatch for " + p.name);
    for (double g : p.grad.data()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + p.name);
    }
  }
  const double lr = s.effective_lr();
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    double* w = p.value.ptr();
    const double* g = p.grad.ptr();
    double* m = s.m[k].ptr();
    double* v = s.v[k].ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  bool operator==(const EvalResult&) const = default;
};

/// Rank-1 scoring of precomputed logits [n x N]; the first maximum wins ties.
inline EvalResult score_logits(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("score_logits: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  EvalResult r;
  r.count = n;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.ptr() + i * classes;
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("score_logits: label " + std::to_string(y) + " of sample " + std::to_string(i) + " out of range");
    }
    std::size_t best = 0;
    double mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > mx) mx = row[c], best = c;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    loss += std::log(z) + mx - row[y];
    correct += best == static_cast<std::size_t>(y);
    ++r.confusion[static_cast<std::size_t>(y)][best];
  }
  r.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  r.mean_loss = n ? loss / static_cast<double>(n) : 0.0;
  return r;
}

struct AttentionSummary {
  bool present = false;
  double mean_rgb = 0.0;    // mean feature-map weight over RGB-derived channels
  double mean_depth = 0.0;  // ... over depth-derived channels

  bool operator==(const AttentionSummary&) const = default;
};

/// Eval-mode pass over `records` in file order. Optionally accumulates the
/// feature-map attention weights per modality half.
inline EvalResult evaluate(Model& model, const std::vector<Record>& records, std::size_t batch_size = 20,
                           AttentionSummary* attention = nullptr) {
  if (records.empty()) throw UsageError("evaluate: no records");
  const ModelConfig& cfg = model.config();
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Tensor logits(Shape{records.size(), cfg.num_classes});
  std::vector<int> labels;
  const bool want_att = attention && cfg.uses_feature_map_attention() && cfg.modalities == Modalities::rgbd;
  double sum_rgb = 0.0, sum_depth = 0.0;
  std::size_t row = 0;
  for (const auto& idx : batch_plan(order, batch_size)) {
    Batch b = load_batch(records, idx, cfg.input_size);
    Graph g;
    ForwardOutput out = model.forward(g, b.rgb, b.depth, ForwardOptions{Mode::eval});
    const Tensor& lv = g.value(out.logits);
    std::copy(lv.data().begin(), lv.data().end(), logits.ptr() + row * cfg.num_classes);
    row += b.size();
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    if (want_att) {
      const Tensor& w = g.value(out.feature_map_weights);
      const std::size_t k = cfg.backbone_channels();
      for (std::size_t i = 0; i < b.size(); ++i) {
        for (std::size_t c = 0; c < 2 * k; ++c) (c < k ? sum_rgb : sum_depth) += w[i * 2 * k + c];
      }
    }
  }
  if (attention) {
    *attention = AttentionSummary{};
    if (want_att) {
      const double denom = static_cast<double>(records.size() * cfg.backbone_channels());
      *attention = AttentionSummary{true, sum_rgb / denom, sum_depth / denom};
    }
  }
  return score_logits(logits, labels);
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  std::size_t epoch = 0;  // 0 = evaluation before any update
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // eval mode, whole train split
  double test_accuracy = 0.0;   // whole test split
  std::map<std::string, double> split_accuracy;  // per test tag

  bool operator==(const EpochStats&) const = default;
};

struct RunReport {
  std::string config_text;
  std::uint64_t seed = 0;
  std::size_t batch_size = 0;
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
  double best_test_accuracy = 0.0;
  AttentionSummary attention;  // on the test split, final weights
  std::string status = "completed";  // or "diverged"
  double wall_seconds = 0.0;

  /// Wall time is measurement, not outcome, and is excluded.
  bool operator==(const RunReport& o) const {
    return config_text == o.config_text && seed == o.seed && batch_size == o.batch_size && epochs == o.epochs &&
           best_epoch == o.best_epoch && best_test_accuracy == o.best_test_accuracy && attention == o.attention &&
           status == o.status;
  }

  const EpochStats& final_epoch() const { return epochs.back(); }
};

inline constexpr const char* kRunReportHeader =
    "epoch,learning_rate,train_loss,train_accuracy,test_accuracy,split_accuracy";

/// One row per epoch; split_accuracy is "tag=value" pairs joined by ';'.
inline void write_run_csv(std::ostream& os, const RunReport& r) {
  os << kRunReportHeader << '\n';
  char buf[160];
  for (const auto& e : r.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.6f,%.6f,", e.epoch, e.learning_rate, e.train_loss,
                  e.train_accuracy, e.test_accuracy);
    os << buf;
    bool first = true;
    for (const auto& [tag, acc] : e.split_accuracy) {
      std::snprintf(buf, sizeof buf, "%s%s=%.6f", first ? "" : ";", tag.c_str(), acc);
      os << buf;
      first = false;
    }
    os << '\n';
  }
}

/// Key=value summary: seed, status, best epoch/accuracy, attention means.
inline void write_run_summary(std::ostream& os, const RunReport& r) {
  os << "seed=" << r.seed << "\nstatus=" << r.status << "\nbatch_size=" << r.batch_size
     << "\nepochs=" << (r.epochs.empty() ? 0 : r.epochs.size() - 1) << "\nbest_epoch=" << r.best_epoch
     << "\nbest_test_accuracy=" << detail::fmt_double(r.best_test_accuracy);
  if (r.attention.present) {
    os << "\nmean_fm_weight_rgb=" << detail::fmt_double(r.attention.mean_rgb)
       << "\nmean_fm_weight_depth=" << detail::fmt_double(r.attention.mean_depth);
  }
  os << "\nwall_seconds=" << detail::fmt_double(r.wall_seconds) << '\n';
}

struct TrainOptions {
  std::optional<std::size_t> epochs;       // overrides the config's epoch count
  std::filesystem::path checkpoint_path;  // best checkpoint; empty = none written
  bool save_optimizer = false;
  bool evaluate_train = true;             // eval-mode accuracy on the train split per epoch
  std::function<void(const EpochStats&)> on_epoch;
  std::function<bool(const EpochStats&)> stop_when;  // checked after each epoch
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::map<std::string, double> accuracy_by_tag(Model& model, const std::vector<Record>& test, std::size_t batch,
                                                     double& overall, AttentionSummary* attention) {
  std::map<std::string, std::vector<Record>> groups;
  for (const auto& r : test) groups[r.split].push_back(r);
  std::map<std::string, double> out;
  if (groups.size() == 1) {
    overall = evaluate(model, test, batch, attention).accuracy;
    out[groups.begin()->first] = overall;
    return out;
  }
  std::size_t correct = 0;
  for (const auto& [tag, recs] : groups) {
    const EvalResult e = evaluate(model, recs, batch);
    out[tag] = e.accuracy;
    correct += static_cast<std::size_t>(std::llround(e.accuracy * static_cast<double>(e.count)));
  }
  overall = static_cast<double>(correct) / static_cast<double>(test.size());
  if (attention) evaluate(model, test, batch, attention);
  return out;
}

inline std::map<std::string, Tensor> optimizer_extras(const AdamState& s, Model& model, std::size_t epoch,
                                                      bool with_moments) {
  std::map<std::string, Tensor> extras;
  extras["meta.epoch"] = Tensor::scalar(static_cast<double>(epoch));
  if (with_moments) {
    extras["optimizer.step"] = Tensor::scalar(static_cast<double>(s.step));
    const auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      extras["optimizer.m." + params[k]->name] = s.m[k];
      extras["optimizer.v." + params[k]->name] = s.v[k];
    }
  }
  return extras;
}

}  // namespace detail

/// Minibatch Adam training on split.train, evaluating split.test after each
/// epoch. Shuffling and dropout are seeded from the model's config seed.
inline RunReport train(Model& model, const Split& split, const TrainOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& cfg = model.config();
  if (split.train.empty()) throw UsageError("train: empty training split");
  if (split.test.empty()) throw UsageError("train: empty test split");
  const std::size_t epochs = opt.epochs.value_or(cfg.epochs);
  const auto params = model.parameters();
  AdamState adam(params, cfg);

  RunReport report;
  report.config_text = cfg.to_text();
  report.seed = cfg.seed;
  report.batch_size = cfg.batch_size;

  auto record_epoch = [&](std::size_t epoch, double train_loss) {
    EpochStats e;
    e.epoch = epoch;
    e.learning_rate = adam.effective_lr();
    e.train_loss = train_loss;
    if (opt.evaluate_train) e.train_accuracy = evaluate(model, split.train, cfg.batch_size).accuracy;
    e.split_accuracy = detail::accuracy_by_tag(model, split.test, cfg.batch_size, e.test_accuracy, nullptr);
    if (epoch == 0 || e.test_accuracy > report.best_test_accuracy) {
      report.best_test_accuracy = e.test_accuracy;
      report.best_epoch = epoch;
      if (!opt.checkpoint_path.empty()) {
        save_checkpoint(model, opt.checkpoint_path, detail::optimizer_extras(adam, model, epoch, opt.save_optimizer));
      }
    }
    report.epochs.push_back(e);
    if (opt.on_epoch) opt.on_epoch(e);
  };

  record_epoch(0, evaluate(model, split.train, cfg.batch_size).mean_loss);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto order = shuffled_order(split.train.size(), detail::mix_seed(cfg.seed, epoch));
    double loss_sum = 0.0;
    bool diverged = false;
    for (const auto& idx : batch_plan(order, cfg.batch_size)) {
      // Batch statistics are undefined for a single sample.
      if (idx.size() < 2) continue;
      Batch b = load_batch(split.train, idx, cfg.input_size);
      Graph g;
      ForwardOutput out = model.forward(g, b.rgb, b.depth, ForwardOptions{Mode::train});
      Var loss = cross_entropy(out.logits, b.labels);
      const double lv = g.value(loss).item();
      if (!std::isfinite(lv)) {
        diverged = true;
        break;
      }
      g.backward(loss);
      try {
        adam_step(adam, params);
      } catch (const TrainingError&) {
        diverged = true;
        break;
      }
      loss_sum += lv * static_cast<double>(idx.size());
    }
    if (diverged) {
      report.status = "diverged";
      break;
    }
    adam.epoch = epoch;
    record_epoch(epoch, loss_sum / static_cast<double>(split.train.size()));
    if (opt.stop_when && opt.stop_when(report.epochs.back())) break;
  }
  if (report.status == "completed") {
    double overall = 0.0;
    detail::accuracy_by_tag(model, split.test, cfg.batch_size, overall, &report.attention);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckGroup {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

/// Compares analytic gradients against central differences. `analytic`
/// must fill every Parameter::grad; `loss` evaluates the objective at the
/// current parameter values. At most `max_coords` coordinates per parameter
/// are probed, chosen by a seeded draw when the parameter is larger.
inline GradcheckReport check_gradients(const std::vector<Parameter*>& params, const std::function<void()>& analytic,
                                       const std::function<double()>& loss, double tolerance = 1e-4,
                                       std::size_t max_coords = 500, std::uint64_t seed = 1, double h = 1e-5) {
  analytic();
  GradcheckReport report;
  report.tolerance = tolerance;
  report.pass = true;
  Rng rng(seed);
  for (Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) throw UsageError("check_gradients: no gradient for " + p->name);
    const Tensor analytic_grad = p->grad;
    std::vector<std::size_t> coords;
    const std::size_t n = p->value.size();
    if (n <= max_coords) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      auto order = shuffled_order(n, rng());
      coords.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(max_coords));
    }
    GradcheckGroup grp{p->name, coords.size(), 0.0, true};
    for (std::size_t i : coords) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = loss();
      p->value[i] = orig - h;
      const double down = loss();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      grp.max_rel_error = std::max(grp.max_rel_error, relative_error(analytic_grad[i], numeric));
    }
    grp.pass = grp.max_rel_error < tolerance;
    report.pass = report.pass && grp.pass;
    report.max_rel_error = std::max(report.max_rel_error, grp.max_rel_error);
    report.groups.push_back(grp);
  }
  return report;
}

/// Tiny model for gradient checking: 16x16 input, three backbone stages
/// (M = 2, 4 channels per modality, C = 8), two classes.
inline ModelConfig gradcheck_config(Fusion fusion = Fusion::two_level) {
  ModelConfig c;
  c.input_size = 16;
  c.backbone_widths = {2, 4, 4};
  c.convs_per_stage = {1, 1, 1};
  c.fusion = fusion;
  c.feature_map.hidden = 3;
  c.classifier_widths = {6, 5, 4};
  c.num_classes = 2;
  c.batch_size = 3;
  return c;
}

/// End-to-end check of the full network: train-mode batchnorm on a fixed
/// batch without running-stat updates, dropout disabled.
inline GradcheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed, double tolerance = 1e-4,
                                 std::size_t max_coords = 500) {
  Model model(cfg, seed);
  Rng rng(detail::mix_seed(seed, 77));
  const std::size_t b = std::max<std::size_t>(cfg.batch_size, 2), s = cfg.input_size;
  const Tensor rgb = uniform_tensor({b, s, s, 3}, 1.0, rng);
  const Tensor depth = uniform_tensor({b, s, s, 1}, 1.0, rng);
  std::vector<int> labels(b);
  for (std::size_t i = 0; i < b; ++i) labels[i] = static_cast<int>(i % cfg.num_classes);
  const ForwardOptions fo{Mode::train, false, false};
  const auto params = model.parameters();
  auto analytic = [&] {
    Graph g;
    Var loss = cross_entropy(model.forward(g, rgb, depth, fo).logits, labels);
    g.backward(loss);
  };
  auto loss = [&] {
    Graph g;
    return g.value(cross_entropy(model.forward(g, rgb, depth, fo).logits, labels)).item();
  };
  return check_gradients(params, analytic, loss, tolerance, max_coords, seed);
}

/// Two dense layers with a relu between, on random data.
inline GradcheckReport gradcheck_dense(std::uint64_t seed, double tolerance = 1e-6) {
  Rng rng(seed);
  DenseLayer l1("dense0", 5, 7, rng), l2("dense1", 7, 3, rng);
  const Tensor x = uniform_tensor({4, 5}, 1.0, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  std::vector<Parameter*> params;
  l1.collect(params);
  l2.collect(params);
  // Nonzero biases so no relu input sits exactly at the kink.
  for (auto& v : l1.bias.value.data()) v = uniform(rng, -0.5, 0.5);
  auto build = [&](Graph& g) { return cross_entropy(l2.forward(g, relu(l1.forward(g, g.constant(x)))), labels); };
  auto analytic = [&] {
    Graph g;
    g.backward(build(g));
  };
  auto loss = [&] {
    Graph g;
    return g.value(build(g)).item();
  };
  return check_gradients(params, analytic, loss, tolerance, 500, seed);
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string table;  // "5", "6" or "7"
  std::string name;
  ModelConfig config;
};

/// The ablation grid built on `base`: fusion rows, attention-mechanism rows,
/// and LSTM-depth rows.
inline std::vector<AblationVariant> ablation_variants(const ModelConfig& base) {
  std::vector<AblationVariant> out;
  auto add = [&](const char* table, const char* name, auto edit) {
    ModelConfig c = base;
    c.modalities = Modalities::rgbd;
    c.feature_map.variant = FeatureMapVariant::lstm_dense;
    c.feature_map.lstm_layers = 1;
    c.feature_map.bidirectional = false;
    c.spatial.variant = SpatialVariant::conv;
    edit(c);
    out.push_back({table, name, c});
  };
  add("5", "rgb_only", [](ModelConfig& c) { c.modalities = Modalities::rgb, c.fusion = Fusion::concat_only; });
  add("5", "depth_only", [](ModelConfig& c) { c.modalities = Modalities::depth, c.fusion = Fusion::concat_only; });
  add("5", "concat", [](ModelConfig& c) { c.fusion = Fusion::concat_only; });
  add("5", "feature_map_only", [](ModelConfig& c) { c.fusion = Fusion::feature_map_only; });
  add("5", "spatial_only", [](ModelConfig& c) { c.fusion = Fusion::spatial_only; });
  add("5", "two_level", [](ModelConfig& c) { c.fusion = Fusion::two_level; });
  add("6", "fm_dense", [](ModelConfig& c) {
    c.fusion = Fusion::feature_map_only, c.feature_map.variant = FeatureMapVariant::dense_only;
  });
  add("6", "fm_lstm_dense", [](ModelConfig& c) { c.fusion = Fusion::feature_map_only; });
  add("6", "spatial_dense", [](ModelConfig& c) { c.fusion = Fusion::spatial_only, c.spatial.variant = SpatialVariant::dense; });
  add("6", "spatial_conv", [](ModelConfig& c) { c.fusion = Fusion::spatial_only; });
  add("6", "two_level", [](ModelConfig& c) { c.fusion = Fusion::two_level; });
  add("7", "lstm1", [](ModelConfig& c) { c.fusion = Fusion::feature_map_only; });
  add("7", "lstm2", [](ModelConfig& c) { c.fusion = Fusion::feature_map_only, c.feature_map.lstm_layers = 2; });
  add("7", "lstm3", [](ModelConfig& c) { c.fusion = Fusion::feature_map_only, c.feature_map.lstm_layers = 3; });
  add("7", "blstm", [](ModelConfig& c) { c.fusion = Fusion::feature_map_only, c.feature_map.bidirectional = true; });
  return out;
}

struct AblationRow {
  std::string table;
  std::string variant;
  ModelConfig config;
  std::vector<double> accuracies;  // best test accuracy per seed
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample standard deviation; 0 for one seed
  bool has_attention = false;
  double mean_fm_weight_rgb = 0.0;
  double mean_fm_weight_depth = 0.0;
  std::vector<AttentionSummary> attention;  // per seed
};

inline constexpr const char* kAblationHeader =
    "table,variant,fusion,modalities,fm_variant,lstm_layers,bidirectional,spatial_variant,seeds,mean_accuracy,"
    "std_accuracy,mean_fm_weight_rgb,mean_fm_weight_depth";

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << kAblationHeader << '\n';
  char buf[64];
  for (const auto& r : rows) {
    const auto& c = r.config;
    os << r.table << ',' << r.variant << ',' << to_string(c.fusion) << ',' << to_string(c.modalities) << ',';
    if (c.uses_feature_map_attention()) {
      os << to_string(c.feature_map.variant) << ',';
      if (c.feature_map.variant == FeatureMapVariant::lstm_dense) {
        os << c.feature_map.lstm_layers << ',' << (c.feature_map.bidirectional ? "true" : "false") << ',';
      } else {
        os << ",,";
      }
    } else {
      os << ",,,";
    }
    if (c.uses_spatial_attention()) os << to_string(c.spatial.variant);
    os << ',' << r.accuracies.size();
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,", r.mean_accuracy, r.std_accuracy);
    os << buf;
    if (r.has_attention) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.mean_fm_weight_rgb, r.mean_fm_weight_depth);
      os << buf;
    } else {
      os << ',';
    }
    os << '\n';
  }
}

struct AblationOptions {
  std::optional<std::size_t> epochs;
  std::vector<std::string> only;  // restrict to these variant names; empty = all
  std::function<void(const AblationVariant&, std::uint64_t seed, const RunReport&)> on_run;
};

/// Trains every variant for every seed. Identical (config, seed) pairs that
/// occur in several tables are trained once and reused.
inline std::vector<AblationRow> ablate(const Split& split, const ModelConfig& base, const std::vector<std::uint64_t>& seeds,
                                       const AblationOptions& opt = {}) {
  if (seeds.empty()) throw UsageError("ablate: at least one seed required");
  std::map<std::string, RunReport> cache;
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants(base)) {
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), v.name) == opt.only.end()) continue;
    AblationRow row{v.table, v.name, v.config, {}, 0.0, 0.0, false, 0.0, 0.0, {}};
    for (std::uint64_t seed : seeds) {
      ModelConfig c = v.config;
      c.seed = seed;
      const std::string key = c.to_text();
      auto it = cache.find(key);
      if (it == cache.end()) {
        Model model(c, seed);
        TrainOptions to;
        to.epochs = opt.epochs;
        to.evaluate_train = false;
        it = cache.emplace(key, train(model, split, to)).first;
        if (opt.on_run) opt.on_run(v, seed, it->second);
      }
      row.accuracies.push_back(it->second.best_test_accuracy);
      row.attention.push_back(it->second.attention);
    }
    const double n = static_cast<double>(row.accuracies.size());
    for (double a : row.accuracies) row.mean_accuracy += a / n;
    if (row.accuracies.size() > 1) {
      double ss = 0.0;
      for (double a : row.accuracies) ss += (a - row.mean_accuracy) * (a - row.mean_accuracy);
      row.std_accuracy = std::sqrt(ss / (n - 1.0));
    }
    row.has_attention = !row.attention.empty() && row.attention.front().present;
    if (row.has_attention) {
      for (const auto& a : row.attention) {
        row.mean_fm_weight_rgb += a.mean_rgb / n;
        row.mean_fm_weight_depth += a.mean_depth / n;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace attfuse
