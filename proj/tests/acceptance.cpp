// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 3 4        selected criteria

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace attfuse;
using testing_support::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, Rng& rng) { return uniform_tensor(std::move(shape), 1.0, rng); }

void zero_parameters(std::vector<Parameter*> ps) {
  for (auto* p : ps) std::fill(p->value.data().begin(), p->value.data().end(), 0.0);
}

// --- 1 ----------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const ModelConfig cfg = gradcheck_config(Fusion::two_level);
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckReport r = gradcheck(cfg, 1, 1e-4);
  const double secs = seconds_since(t0);
  const bool shape_ok = cfg.input_size == 16 && cfg.feature_size() == 2 && cfg.fused_channels() == 8 &&
                        cfg.num_classes == 2;
  return {r.pass && r.max_rel_error < 1e-4 && secs < 300.0 && shape_ok,
          fmt("toy 16x16 M=%zu C=%zu, %zu parameter groups, max rel err %.2e (< 1e-4), %.1f s (< 300 s)",
              cfg.feature_size(), cfg.fused_channels(), r.groups.size(), r.max_rel_error, secs)};
}

// --- 2 ----------------------------------------------------------------------------

Outcome attention_fixtures() {
  Rng rng(2);
  const Tensor f = random_tensor({2, 3, 3, 6}, rng);
  std::size_t fm_bad = 0, fm_checked = 0;
  FeatureMapAttentionConfig variants[] = {
      {FeatureMapVariant::lstm_dense, 1, false, 4}, {FeatureMapVariant::lstm_dense, 2, false, 4},
      {FeatureMapVariant::lstm_dense, 3, false, 4}, {FeatureMapVariant::lstm_dense, 1, true, 4},
      {FeatureMapVariant::dense_only, 1, false, 4}};
  for (const auto& c : variants) {
    FeatureMapAttention fm("fm", c, 3, 6, rng);
    std::vector<Parameter*> ps;
    fm.collect(ps);
    zero_parameters(ps);
    Graph g;
    const AttentionOutput out = fm.forward(g, g.constant(f));
    const Tensor& w = g.value(out.weights);
    const Tensor& refined = g.value(out.refined);
    for (double v : w.data()) fm_bad += v != 0.5;
    for (std::size_t i = 0; i < f.size(); ++i) fm_bad += refined[i] != 0.5 * f[i];
    fm_checked += w.size() + f.size();
  }

  FeatureMapAttention fm("fm", {}, 3, 6, rng);
  SpatialAttention sp("sp", {}, 3, rng);
  std::vector<Parameter*> ps;
  fm.collect(ps);
  sp.collect(ps);
  zero_parameters(ps);
  Graph g;
  const Tensor& two = g.value(two_level_attention(g, fm, sp, g.constant(f)).output);
  std::size_t two_bad = 0;
  for (std::size_t i = 0; i < f.size(); ++i) two_bad += two[i] != 0.25 * f[i];

  ModelConfig toy = gradcheck_config(Fusion::concat_only);
  Model concat(toy, 4);
  toy.fusion = Fusion::two_level;
  Model attended(toy, 5);
  std::map<std::string, Parameter*> by_name;
  for (auto* p : attended.parameters()) by_name[p->name] = p;
  for (auto* p : concat.parameters()) by_name.at(p->name)->value = p->value;
  attended.set_unit_attention(true);
  Rng in(6);
  const Tensor rgb = uniform_tensor({3, 16, 16, 3}, 1.0, in), depth = uniform_tensor({3, 16, 16, 1}, 1.0, in);
  const bool bypass_ok = predict_logits(concat, rgb, depth) == predict_logits(attended, rgb, depth);

  return {fm_bad == 0 && two_bad == 0 && bypass_ok,
          fmt("zero-parameter feature-map attention: %zu/%zu values off (0.5 gate, 0.5*f); two-level: %zu/%zu off "
              "(0.25*f); unit-gate logits %s concat_only",
              fm_bad, fm_checked, two_bad, f.size(), bypass_ok ? "bit-identical to" : "DIFFER from")};
}

// --- 3 ----------------------------------------------------------------------------

Outcome full_scale_shapes() {
  const ModelConfig cfg = ModelConfig::full_scale();
  const std::size_t s = cfg.input_size;
  Rng rng(3);
  ConvBackbone rgb_net("rgb_backbone", 3, cfg.backbone_widths, cfg.convs_per_stage, rng);
  ConvBackbone depth_net("depth_backbone", 3, cfg.backbone_widths, cfg.convs_per_stage, rng);
  FeatureMapAttention fm("feature_map_attention", cfg.feature_map, cfg.feature_size(), cfg.fused_channels(), rng);
  SpatialAttention sp("spatial_attention", cfg.spatial, cfg.feature_size(), rng);

  Graph g;
  const Tensor rgb = uniform_tensor({1, s, s, 3}, 1.0, rng);
  const Tensor depth = replicate_channels(uniform_tensor({1, s, s, 1}, 1.0, rng), 3);
  const Var f_rgb = rgb_net.forward(g, g.constant(rgb));
  const Var f_depth = depth_net.forward(g, g.constant(depth));
  const Var f_concat = channel_concat(f_rgb, f_depth);
  const TwoLevelOutput att = two_level_attention(g, fm, sp, f_concat);

  const Shape want_backbone{1, 7, 7, 512}, want_concat{1, 7, 7, 1024};
  const bool ok = g.value(f_rgb).shape() == want_backbone && g.value(f_depth).shape() == want_backbone &&
                  g.value(f_concat).shape() == want_concat && g.value(att.feature_map_weights).shape() == Shape{1, 1024} &&
                  g.value(att.spatial_weights).shape() == Shape{1, 7, 7} &&
                  g.value(att.output).shape() == want_concat;

  std::size_t classifier_in = 0;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    if (name == "classifier.block0.dense.weight") classifier_in = shape[0];
  }
  return {ok && classifier_in == 7 * 7 * 1024 && cfg.feature_size() == 7,
          fmt("input %zu: F_RGB %s, F_Depth %s, F_concat %s, feature-map map 1x1x%zu, spatial map %zux%zux1, "
              "classifier input %zu",
              s, shape_str(g.value(f_rgb).shape()).c_str(), shape_str(g.value(f_depth).shape()).c_str(),
              shape_str(g.value(f_concat).shape()).c_str(), g.value(att.feature_map_weights).dim(1),
              g.value(att.spatial_weights).dim(1), g.value(att.spatial_weights).dim(2), classifier_in)};
}

// --- 4 ----------------------------------------------------------------------------

std::uint16_t nearest_rank(const std::vector<std::uint16_t>& sorted, unsigned p) {
  std::size_t r = 1;
  while (100 * r < p * sorted.size()) ++r;
  return sorted[r - 1];
}

Image8 clip_oracle(const Image16& d) {
  std::vector<std::uint16_t> v;
  for (auto s : d.data) {
    if (s != 0) v.push_back(s);
  }
  std::sort(v.begin(), v.end());
  const double lo = nearest_rank(v, 25), hi = nearest_rank(v, 90);
  Image8 out(d.width, d.height, 1);
  if (lo == hi) return out;
  for (std::size_t i = 0; i < d.data.size(); ++i) {
    if (d.data[i] == 0) continue;
    const double c = std::clamp(static_cast<double>(d.data[i]), lo, hi) - lo;
    out.data[i] = static_cast<std::uint8_t>(std::floor(255.0 * c / (hi - lo) + 0.5));
  }
  return out;
}

Outcome preprocessing_oracle() {
  Rng rng(4);
  std::size_t mismatches = 0, out_of_range = 0, min_len = SIZE_MAX, max_len = 0;
  for (int i = 0; i < 1000; ++i) {
    std::size_t n;
    if (i == 0) n = 10;
    else if (i == 1) n = 100000;
    else n = static_cast<std::size_t>(std::exp(uniform(rng, std::log(10.0), std::log(100000.0))));
    n = std::clamp<std::size_t>(n, 10, 100000);
    // Factor n as width x height with both sides >= 1.
    std::size_t w = 1 + rng() % static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    while (n % w != 0) --w;
    Image16 d(w, n / w, 1);
    const int regime = i % 4;
    const double zero_fraction = regime == 3 ? 0.5 : (regime == 2 ? 0.1 : 0.0);
    const std::uint32_t span = regime == 1 ? 40 : 65535;
    for (auto& s : d.data) {
      s = uniform01(rng) < zero_fraction ? 0 : static_cast<std::uint16_t>(1 + rng() % span);
    }
    d.data[rng() % n] = static_cast<std::uint16_t>(1 + rng() % span);
    const Image8 got = depth_clip_normalize(d);
    mismatches += got.data != clip_oracle(d).data;
    // Clipped samples must span exactly [0, 255] unless the clip range is empty.
    const auto bounds = depth_percentiles(d);
    int lo = 255, hi = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (d.data[k] == 0) continue;
      lo = std::min<int>(lo, got.data[k]);
      hi = std::max<int>(hi, got.data[k]);
    }
    const bool spans = bounds.low == bounds.high ? hi == 0 : (lo == 0 && hi == 255);
    out_of_range += got.data.size() != n || !spans;
    min_len = std::min(min_len, n);
    max_len = std::max(max_len, n);
  }
  return {mismatches == 0 && out_of_range == 0,
          fmt("1000 images, %zu..%zu samples: %zu differ from the sort-based nearest-rank oracle, %zu do not span [0, 255]",
              min_len, max_len, mismatches, out_of_range)};
}

// --- 5 ----------------------------------------------------------------------------

Outcome augmentation_properties() {
  Rng rng(5);
  std::size_t flip_bad = 0, identity_bad = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t w = 1 + rng() % 64, h = 1 + rng() % 64, c = t % 2 ? 3 : 1;
    Image8 img(w, h, c);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng());
    AugmentParams flip{AugmentKind::flip};
    flip_bad += augment(augment(img, flip), flip).data != img.data;
    const AugmentParams identities[] = {{AugmentKind::rotation, 0.0},
                                        {AugmentKind::shear, 0.0, 0.0},
                                        {AugmentKind::flip, 0.0, 0.0, false},
                                        {AugmentKind::perspective, 0.0, 0.0, false, 1.0}};
    for (const auto& p : identities) identity_bad += augment(img, p).data != img.data;
  }
  std::vector<ImagePair> pairs;
  for (int i = 0; i < 25; ++i) {
    Image8 rgb(20, 20, 3), depth(20, 20, 1);
    for (auto& v : rgb.data) v = static_cast<std::uint8_t>(rng());
    for (auto& v : depth.data) v = static_cast<std::uint8_t>(rng());
    pairs.push_back({"p" + std::to_string(i), rgb, depth, i % 7});
  }
  const auto expanded = augment_expand(pairs, 9);
  std::size_t label_bad = 0;
  for (std::size_t i = 0; i < expanded.size(); ++i) label_bad += expanded[i].pair.label != pairs[i / 4].label;
  const bool expand_ok = expanded.size() == 4 * pairs.size() && label_bad == 0;
  return {flip_bad == 0 && identity_bad == 0 && expand_ok,
          fmt("flip twice: %zu/50 differ; identity parameters: %zu/200 differ; expand %zu -> %zu pairs, %zu labels "
              "changed",
              flip_bad, identity_bad, pairs.size(), expanded.size(), label_bad)};
}

// --- 6 ----------------------------------------------------------------------------

Outcome desk_learning() {
  TempDir dir("attfuse_acceptance_desk");
  SyntheticSpec spec;
  spec.classes = 10;
  spec.per_class = 30;
  spec.test_per_class = 10;
  spec.size = 112;
  spec.seed = 1;
  const Manifest m = load_manifest(generate_synthetic(spec, dir.path()));
  const Split split = protocol_split(m, Protocol::fixed());

  const ModelConfig cfg;
  Model model(cfg, 1);
  TrainOptions opt;
  opt.epochs = 50;
  opt.on_epoch = [](const EpochStats& e) {
    std::printf("  epoch %2zu  loss %.4f  train %.3f  test %.3f\n", e.epoch, e.train_loss, e.train_accuracy,
                e.test_accuracy);
    std::fflush(stdout);
  };
  opt.stop_when = [](const EpochStats& e) { return e.train_accuracy >= 0.99 && e.test_accuracy >= 0.90; };
  const RunReport r = train(model, split, opt);
  const EpochStats& last = r.final_epoch();
  const bool ok = r.status == "completed" && last.train_accuracy >= 0.99 && last.test_accuracy >= 0.90 &&
                  last.epoch <= 50 && r.wall_seconds < 1800.0;
  return {ok, fmt("%zu train / %zu test pairs at %zu px, lr %.0e decay %.1f batch %zu: train %.3f test %.3f at epoch "
                  "%zu, %.0f s (< 1800 s)",
                  split.train.size(), split.test.size(), cfg.input_size, cfg.learning_rate, cfg.lr_decay,
                  cfg.batch_size, last.train_accuracy, last.test_accuracy, last.epoch, r.wall_seconds)};
}

// --- 7 ----------------------------------------------------------------------------

ModelConfig ablation_task_config(Fusion fusion) {
  ModelConfig c;
  c.input_size = 32;
  c.fusion = fusion;
  c.classifier_widths = {128, 128, 128};
  c.batch_size = 10;
  c.learning_rate = 1e-3;
  c.lr_decay = 1.0;
  c.epochs = 20;
  return c;
}

Split synthetic_split(const TempDir& dir, const std::string& name, SyntheticSpec spec) {
  spec.classes = 10;
  spec.per_class = 30;
  spec.test_per_class = 10;
  spec.size = 32;
  spec.seed = 11;
  return protocol_split(load_manifest(generate_synthetic(spec, dir / name)), Protocol::fixed());
}

RunReport run_seed(const Split& split, Fusion fusion, std::uint64_t seed) {
  ModelConfig c = ablation_task_config(fusion);
  c.seed = seed;
  Model m(c, seed);
  return train(m, split, {});
}

Outcome ablation_ordering() {
  TempDir dir("attfuse_acceptance_ablation");
  SyntheticSpec complementary;
  complementary.complementary = true;
  SyntheticSpec noise_depth;
  for (std::size_t k = 0; k < 10; ++k) noise_depth.noise_depth_classes.insert(k);
  const Split comp = synthetic_split(dir, "complementary", complementary);
  const Split noisy = synthetic_split(dir, "noise_depth", noise_depth);

  double two = 0.0, concat = 0.0;
  std::size_t separated = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const RunReport t = run_seed(comp, Fusion::two_level, seed);
    const RunReport c = run_seed(comp, Fusion::concat_only, seed);
    const RunReport n = run_seed(noisy, Fusion::two_level, seed);
    two += t.best_test_accuracy / 5.0;
    concat += c.best_test_accuracy / 5.0;
    const bool sep = n.attention.present && n.attention.mean_depth < n.attention.mean_rgb;
    separated += sep;
    std::printf("  seed %llu  complementary: two_level %.3f concat_only %.3f  noise-depth: fm weight rgb %.4f depth %.4f%s\n",
                static_cast<unsigned long long>(seed), t.best_test_accuracy, c.best_test_accuracy,
                n.attention.mean_rgb, n.attention.mean_depth, sep ? "" : "  (not separated)");
    std::fflush(stdout);
  }
  const bool ordering = two >= concat - 0.01;
  return {separated >= 4,
          fmt("depth weight below rgb weight in %zu/5 seeds (need >= 4); complementary mean accuracy two_level %.4f vs "
              "concat_only %.4f, ordering %s (reported)",
              separated, two, concat, ordering ? "holds" : "does not hold")};
}

// --- 8 ----------------------------------------------------------------------------

Outcome determinism() {
  TempDir dir("attfuse_acceptance_determinism");
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 9;
  spec.size = 32;
  const Split split = protocol_split(load_manifest(generate_synthetic(spec, dir / "data")), Protocol::fixed());

  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.num_classes = 3;
  cfg.classifier_widths = {16, 16, 16};
  cfg.batch_size = 6;
  cfg.learning_rate = 1e-3;
  cfg.seed = 8;
  TrainOptions opt;
  opt.epochs = 3;
  auto run = [&](const std::filesystem::path& ckpt) {
    Model m(cfg, 8);
    RunReport r = train(m, split, opt);
    save_checkpoint(m, ckpt);
    return std::pair{std::move(m), std::move(r)};
  };
  auto [m1, r1] = run(dir / "a.ckpt");
  auto [m2, r2] = run(dir / "b.ckpt");
  std::ostringstream csv1, csv2;
  write_run_csv(csv1, r1);
  write_run_csv(csv2, r2);
  const bool reports_equal = r1 == r2 && csv1.str() == csv2.str();

  Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  std::vector<std::size_t> all(split.test.size());
  std::iota(all.begin(), all.end(), 0);
  const Batch b = load_batch(split.test, all, cfg.input_size);
  const Tensor before = predict_logits(m1, b.rgb, b.depth);
  const Tensor after = predict_logits(loaded.model, b.rgb, b.depth);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < before.size(); ++i) differing += std::memcmp(before.data().data() + i, after.data().data() + i, sizeof(double)) != 0;
  return {reports_equal && differing == 0,
          fmt("two runs with seed 8: reports %s; reloaded checkpoint: %zu/%zu eval logits differ bitwise",
              reports_equal ? "identical" : "DIFFER", differing, before.size())};
}

// --- 9 ----------------------------------------------------------------------------

Outcome variant_coverage() {
  TempDir dir("attfuse_acceptance_variants");
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 6;
  spec.size = 16;
  const Split split = protocol_split(load_manifest(generate_synthetic(spec, dir / "data")), Protocol::fixed());

  ModelConfig base = gradcheck_config();
  base.classifier_widths = {16, 16, 16};
  AblationOptions opt;
  opt.epochs = 1;
  const auto rows = ablate(split, base, {1}, opt);
  std::ostringstream os;
  write_ablation_csv(os, rows);

  std::istringstream is(os.str());
  std::string header, line;
  std::getline(is, header);
  std::size_t lines = 0, bad_fields = 0;
  const auto fields = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
  while (std::getline(is, line)) {
    ++lines;
    bad_fields += fields(line) != fields(header);
  }
  std::map<std::string, std::size_t> per_table;
  std::set<std::string> names;
  for (const auto& r : rows) {
    ++per_table[r.table];
    names.insert(r.table + ":" + r.variant);
  }
  const bool covered = names.count("7:lstm1") && names.count("7:lstm2") && names.count("7:lstm3") &&
                       names.count("7:blstm") && names.count("6:fm_dense") && names.count("6:spatial_dense") &&
                       names.count("5:rgb_only") && names.count("5:depth_only") && names.count("5:two_level");
  const bool ok = header == kAblationHeader && rows.size() == 15 && lines == 15 && bad_fields == 0 &&
                  per_table["5"] == 6 && per_table["6"] == 5 && per_table["7"] == 4 && covered;
  return {ok, fmt("%zu rows (table 5: %zu, table 6: %zu, table 7: %zu), %zu CSV lines, header %s",
                  rows.size(), per_table["5"], per_table["6"], per_table["7"], lines,
                  header == kAblationHeader ? "matches" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"analytic attention fixtures", attention_fixtures},
      {"full-scale shapes", full_scale_shapes},
      {"preprocessing oracle", preprocessing_oracle},
      {"augmentation properties", augmentation_properties},
      {"desk-scale learning", desk_learning},
      {"ablation ordering", ablation_ordering},
      {"determinism and persistence", determinism},
      {"variant coverage", variant_coverage},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const long k = std::strtol(argv[i], nullptr, 10);
    if (k < 1 || k > static_cast<long>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion '%s'\n", argv[i]);
      return 2;
    }
    selected.insert(static_cast<std::size_t>(k));
  }
  if (selected.empty()) {
    for (std::size_t k = 1; k <= criteria.size(); ++k) selected.insert(k);
  }

  std::size_t failed = 0;
  for (auto k : selected) {
    const auto& [name, check] = criteria[k - 1];
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu [%s]: %s  %s\n", k, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
