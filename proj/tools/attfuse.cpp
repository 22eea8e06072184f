// Command-line front end: synthetic data, preprocessing, training,
// evaluation, gradient checks, ablations and embedding dumps.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <iostream>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "attfuse/attfuse.hpp"

namespace fs = std::filesystem;
using namespace attfuse;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw LoadError("cannot open " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

ModelConfig load_config(const std::string& path) {
  if (path.empty()) return ModelConfig{};
  return ModelConfig::from_text(read_file(path));
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  return os;
}

struct SplitArgs {
  std::string protocol = "fixed";
  int fold = 0;
  std::string test_tag;

  Split apply(const Manifest& m) const {
    if (protocol == "fivefold") return protocol_split(m, Protocol::fivefold(fold));
    if (protocol == "fixed") return protocol_split(m, Protocol::fixed(test_tag));
    throw ConfigError("unknown protocol '" + protocol + "' (expected fixed or fivefold)");
  }

  void add_to(CLI::App* app) {
    app->add_option("--protocol", protocol, "fixed or fivefold")->check(CLI::IsMember({"fixed", "fivefold"}));
    app->add_option("--fold", fold, "fold index for fivefold");
    app->add_option("--test-tag", test_tag, "test split tag for fixed (default: every non-train tag)");
  }
};

/// Records whose split tag is `tag` ("all" keeps everything), optionally
/// restricted to one fold.
std::vector<Record> select_records(const Manifest& m, const std::string& tag, int fold) {
  std::vector<Record> out;
  for (const auto& r : m.records) {
    if (fold >= 0 && r.fold != fold) continue;
    if (tag == "all" || r.split == tag) out.push_back(r);
  }
  if (out.empty()) throw ConfigError("no records tagged '" + tag + "' in " + m.path.string());
  return out;
}

std::vector<std::size_t> parse_classes(const std::string& s) {
  std::vector<std::size_t> out;
  if (!s.empty()) out = detail::parse_size_list("classes", s);
  return out;
}

// --- subcommands ---------------------------------------------------------------

struct SynthArgs {
  SyntheticSpec spec;
  std::string noise_depth, noise_rgb, out;
};

int run_synth(SynthArgs& a) {
  for (auto c : parse_classes(a.noise_depth)) a.spec.noise_depth_classes.insert(c);
  for (auto c : parse_classes(a.noise_rgb)) a.spec.noise_rgb_classes.insert(c);
  const fs::path manifest = generate_synthetic(a.spec, a.out);
  std::printf("wrote %zu pairs to %s\n", a.spec.classes * a.spec.per_class, manifest.string().c_str());
  return 0;
}

struct PreprocessArgs {
  std::string in, out, manifest_name = "manifest.csv";
  std::size_t size = 112;
  double crop_ratio = kDefaultCropRatio;
  bool clip = true;
  bool augment = false;
  bool all_kinds = false;
  bool train_only = false;
  std::uint64_t seed = 1;
};

int run_preprocess(const PreprocessArgs& a) {
  const Manifest m = load_manifest(fs::path(a.in) / a.manifest_name);
  const fs::path out = a.out;
  fs::create_directories(out / "rgb");
  fs::create_directories(out / "depth");
  std::vector<ImagePair> pairs;
  std::vector<const Record*> sources;
  for (const auto& r : m.records) {
    const Image8 rgb = read_ppm(r.rgb);
    Image8 depth;
    if (a.clip) {
      depth = depth_clip_normalize(read_pgm16(r.depth));
    } else {
      depth = read_pgm8(r.depth);
    }
    if (depth.width != rgb.width || depth.height != rgb.height) throw DataError(r.depth.string() + ": size differs from " + r.rgb.string());
    auto [rc, dc] = crop_resize_pair(rgb, depth, a.size, a.crop_ratio);
    pairs.push_back({r.subject + "_" + r.sample, std::move(rc), std::move(dc), r.label});
    sources.push_back(&r);
  }
  std::vector<Record> records;
  std::ofstream log;
  if (a.augment) {
    log = open_out(out / "augment_log.csv");
    log << "sample_id,kind,rotation_deg,shear_deg,flip,perspective_scale,seed\n";
  }
  auto emit = [&](const ImagePair& p, const Record& src, const std::string& sample) {
    Record r = src;
    r.sample = sample;
    r.rgb = out / "rgb" / (p.id + ".ppm");
    r.depth = out / "depth" / (p.id + ".pgm");
    write_ppm(r.rgb, p.rgb);
    write_pgm(r.depth, p.depth);
    records.push_back(std::move(r));
  };
  std::vector<std::size_t> to_expand;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (a.augment && (!a.train_only || sources[i]->split == "train")) {
      to_expand.push_back(i);
    } else {
      emit(pairs[i], *sources[i], sources[i]->sample);
    }
  }
  if (!to_expand.empty()) {
    std::vector<ImagePair> subset;
    for (auto i : to_expand) subset.push_back(pairs[i]);
    const auto expanded = augment_expand(subset, a.seed, a.all_kinds);
    const std::size_t per = expanded.size() / subset.size();
    for (std::size_t i = 0; i < expanded.size(); ++i) {
      const std::size_t k = to_expand[i / per];
      const Record& src = *sources[k];
      const auto& e = expanded[i];
      const std::string sample = src.sample + e.pair.id.substr(pairs[k].id.size());
      emit(e.pair, src, sample);
      if (e.params) {
        const auto& p = *e.params;
        log << records.back().id() << ',' << to_string(p.kind) << ',' << detail::fmt_double(p.rotation_deg) << ','
            << detail::fmt_double(p.shear_deg) << ',' << (p.kind == AugmentKind::flip && p.flip ? "true" : "false") << ','
            << detail::fmt_double(p.perspective_scale) << ',' << p.seed << '\n';
      }
    }
  }
  write_manifest(out / "manifest.csv", records);
  std::printf("wrote %zu pairs to %s\n", records.size(), (out / "manifest.csv").string().c_str());
  return 0;
}

struct TrainArgs {
  std::string manifest, config, out;
  std::uint64_t seed = 1;
  std::optional<std::size_t> epochs;
  bool save_optimizer = false;
  bool quiet = false;
  SplitArgs split;
};

int run_train(const TrainArgs& a) {
  const ModelConfig cfg = load_config(a.config);
  const Manifest m = load_manifest(a.manifest);
  if (m.num_classes() != cfg.num_classes) {
    throw ConfigError("manifest has " + std::to_string(m.num_classes()) + " subjects but the config sets num_classes=" +
                      std::to_string(cfg.num_classes));
  }
  const Split split = a.split.apply(m);
  const fs::path out = a.out;
  fs::create_directories(out);
  Model model(cfg, a.seed);
  open_out(out / "config.txt") << model.config().to_text();
  TrainOptions opt;
  opt.epochs = a.epochs;
  opt.checkpoint_path = out / "best.ckpt";
  opt.save_optimizer = a.save_optimizer;
  if (!a.quiet) {
    opt.on_epoch = [](const EpochStats& e) {
      std::printf("epoch %3zu  lr %.3g  loss %.4f  train %.4f  test %.4f\n", e.epoch, e.learning_rate, e.train_loss,
                  e.train_accuracy, e.test_accuracy);
      std::fflush(stdout);
    };
  }
  const RunReport r = train(model, split, opt);
  auto csv = open_out(out / "report.csv");
  write_run_csv(csv, r);
  auto summary = open_out(out / "summary.txt");
  write_run_summary(summary, r);
  std::printf("%s: best test accuracy %.4f at epoch %zu (%.1fs)\n", r.status.c_str(), r.best_test_accuracy, r.best_epoch,
              r.wall_seconds);
  return r.status == "completed" ? 0 : 2;
}

struct EvalArgs {
  std::string checkpoint, manifest, split = "test", confusion;
  int fold = -1;
  std::size_t batch = 20;
};

int run_eval(const EvalArgs& a) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const Manifest m = load_manifest(a.manifest);
  const auto records = select_records(m, a.split, a.fold);
  const EvalResult r = evaluate(ck.model, records, a.batch);
  std::printf("split=%s records=%zu accuracy=%.6f mean_loss=%.6f\n", a.split.c_str(), r.count, r.accuracy, r.mean_loss);
  if (!a.confusion.empty()) {
    auto os = open_out(a.confusion);
    os << "true_class";
    for (const auto& s : m.subjects) os << ',' << s;
    os << '\n';
    for (std::size_t t = 0; t < r.confusion.size(); ++t) {
      os << (t < m.subjects.size() ? m.subjects[t] : std::to_string(t));
      for (auto c : r.confusion[t]) os << ',' << c;
      os << '\n';
    }
  }
  return 0;
}

struct GradcheckArgs {
  std::string variant = "two_level";
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  std::size_t max_coords = 500;
  bool verbose = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  GradcheckReport r;
  if (a.variant == "dense") {
    r = gradcheck_dense(a.seed, a.tolerance);
  } else {
    std::optional<ModelConfig> cfg;
    for (const auto& v : ablation_variants(gradcheck_config())) {
      if (v.name == a.variant) cfg = v.config;
    }
    if (!cfg) cfg = gradcheck_config(parse_fusion(a.variant));
    r = gradcheck(*cfg, a.seed, a.tolerance, a.max_coords);
  }
  for (const auto& g : r.groups) {
    if (a.verbose || !g.pass) {
      std::printf("%-48s coords %4zu  max rel err %.3e  %s\n", g.name.c_str(), g.coordinates, g.max_rel_error,
                  g.pass ? "ok" : "FAIL");
    }
  }
  std::printf("gradcheck %s: %zu groups, max relative error %.3e (tolerance %.0e) %s\n", a.variant.c_str(),
              r.groups.size(), r.max_rel_error, r.tolerance, r.pass ? "PASS" : "FAIL");
  return r.pass ? 0 : 1;
}

struct AblateArgs {
  std::string manifest, config, out, seeds = "1,2,3,4,5", only;
  std::optional<std::size_t> epochs;
  SplitArgs split;
};

int run_ablate(const AblateArgs& a) {
  const ModelConfig cfg = load_config(a.config);
  const Manifest m = load_manifest(a.manifest);
  const Split split = a.split.apply(m);
  std::vector<std::uint64_t> seeds;
  for (auto s : detail::parse_size_list("seeds", a.seeds)) seeds.push_back(s);
  AblationOptions opt;
  opt.epochs = a.epochs;
  if (!a.only.empty()) {
    std::stringstream ss(a.only);
    for (std::string name; std::getline(ss, name, ',');) opt.only.push_back(detail::trim(name));
  }
  opt.on_run = [](const AblationVariant& v, std::uint64_t seed, const RunReport& r) {
    std::printf("table %s %-16s seed %llu  best test %.4f  (%.1fs)\n", v.table.c_str(), v.name.c_str(),
                static_cast<unsigned long long>(seed), r.best_test_accuracy, r.wall_seconds);
    std::fflush(stdout);
  };
  const auto rows = ablate(split, cfg, seeds, opt);
  auto os = open_out(a.out);
  write_ablation_csv(os, rows);
  std::printf("wrote %zu rows to %s\n", rows.size(), a.out.c_str());
  return 0;
}

struct EmbedArgs {
  std::string checkpoint, manifest, out, split = "all", attention;
  int fold = -1;
  std::size_t batch = 20;
};

int run_embed(const EmbedArgs& a) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const Manifest m = load_manifest(a.manifest);
  const auto records = select_records(m, a.split, a.fold);
  const ModelConfig& cfg = ck.model.config();
  auto os = open_out(a.out);
  os << "sample_id,label";
  for (std::size_t i = 0; i < cfg.classifier_widths[2]; ++i) os << ",e" << i;
  os << '\n';
  std::ofstream att;
  if (!a.attention.empty()) att = open_out(a.attention);
  bool att_header = true;
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  char buf[32];
  for (const auto& idx : batch_plan(order, a.batch)) {
    const Batch b = load_batch(records, idx, cfg.input_size);
    Graph g;
    const ForwardOutput out = ck.model.forward(g, b.rgb, b.depth, ForwardOptions{Mode::eval});
    const Tensor& e = g.value(out.embedding);
    const std::size_t w = e.dim(1);
    for (std::size_t r = 0; r < b.size(); ++r) {
      os << b.ids[r] << ',' << b.labels[r];
      for (std::size_t i = 0; i < w; ++i) {
        std::snprintf(buf, sizeof buf, ",%.9g", e[r * w + i]);
        os << buf;
      }
      os << '\n';
    }
    if (att.is_open() && out.has_feature_map_weights) {
      write_attention_csv(att, b.ids, g.value(out.feature_map_weights), att_header);
      att_header = false;
    }
  }
  std::printf("wrote %zu embeddings to %s\n", records.size(), a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"RGB-D recognition with two-level attention fusion"};
  app.require_subcommand(1);
  std::function<int()> action;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic RGB-D dataset");
  s->add_option("--classes", synth.spec.classes, "number of classes")->capture_default_str();
  s->add_option("--per-class", synth.spec.per_class, "pairs per class (train + test)")->capture_default_str();
  s->add_option("--test-per-class", synth.spec.test_per_class, "test pairs per class (default per-class / 3)");
  s->add_option("--size", synth.spec.size, "image side in pixels")->capture_default_str();
  s->add_option("--noise-depth-classes", synth.noise_depth, "classes whose depth is pure noise, e.g. 0,3,5");
  s->add_option("--noise-rgb-classes", synth.noise_rgb, "classes whose RGB is pure noise");
  s->add_flag("--complementary", synth.spec.complementary, "each modality identifies only part of the label");
  s->add_flag("--raw-depth", synth.spec.raw_depth, "also write 16-bit raw depth and manifest_raw.csv");
  s->add_option("--noise", synth.spec.noise, "per-pixel noise level")->capture_default_str();
  s->add_option("--seed", synth.spec.seed, "random seed")->capture_default_str();
  s->add_option("--out", synth.out, "output directory")->required();
  s->callback([&] { action = [&] { return run_synth(synth); }; });

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "clip depth, crop/resize and optionally augment a dataset");
  p->add_option("--in", pre.in, "input directory holding the manifest")->required();
  p->add_option("--manifest", pre.manifest_name, "manifest file name inside --in")->capture_default_str();
  p->add_option("--out", pre.out, "output directory")->required();
  p->add_option("--size", pre.size, "output side in pixels")->capture_default_str();
  p->add_option("--crop-ratio", pre.crop_ratio, "centre crop fraction of the shorter side")->capture_default_str();
  p->add_flag("!--no-clip", pre.clip, "depth is already an 8-bit map; skip percentile clipping");
  p->add_flag("--augment", pre.augment, "add 3 augmented copies per pair");
  p->add_flag("--all-kinds", pre.all_kinds, "with --augment, add one copy per transform type (4)");
  p->add_flag("--train-only", pre.train_only, "with --augment, leave test records unaugmented");
  p->add_option("--seed", pre.seed, "augmentation seed")->capture_default_str();
  p->callback([&] { action = [&] { return run_preprocess(pre); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model and keep the best checkpoint");
  t->add_option("--manifest", tr.manifest, "dataset manifest")->required();
  t->add_option("--config", tr.config, "key=value model config (default: built-in desk config)");
  t->add_option("--seed", tr.seed, "initialization and shuffling seed")->capture_default_str();
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--epochs", tr.epochs, "override the config's epoch count");
  t->add_flag("--save-optimizer", tr.save_optimizer, "store Adam moments in the checkpoint");
  t->add_flag("--quiet", tr.quiet, "no per-epoch lines");
  tr.split.add_to(t);
  t->callback([&] { action = [&] { return run_train(tr); }; });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "rank-1 accuracy of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--manifest", ev.manifest, "dataset manifest")->required();
  e->add_option("--split", ev.split, "split tag to evaluate, or 'all'")->capture_default_str();
  e->add_option("--fold", ev.fold, "restrict to one fold");
  e->add_option("--batch", ev.batch, "batch size")->capture_default_str();
  e->add_option("--confusion", ev.confusion, "write the confusion matrix CSV here");
  e->callback([&] { action = [&] { return run_eval(ev); }; });

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "compare backward() with finite differences on a toy model");
  g->add_option("--variant", gc.variant, "fusion, ablation variant name, or 'dense'")->capture_default_str();
  g->add_option("--seed", gc.seed, "seed")->capture_default_str();
  g->add_option("--tolerance", gc.tolerance, "max relative error")->capture_default_str();
  g->add_option("--max-coords", gc.max_coords, "coordinates probed per parameter")->capture_default_str();
  g->add_flag("-v,--verbose", gc.verbose, "print every parameter group");
  g->callback([&] { action = [&] { return run_gradcheck(gc); }; });

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "train every ablation variant over several seeds");
  a->add_option("--manifest", ab.manifest, "dataset manifest")->required();
  a->add_option("--config", ab.config, "base config file");
  a->add_option("--seeds", ab.seeds, "comma-separated seeds")->capture_default_str();
  a->add_option("--epochs", ab.epochs, "override the config's epoch count");
  a->add_option("--only", ab.only, "comma-separated variant names");
  a->add_option("--out", ab.out, "report CSV")->required();
  ab.split.add_to(a);
  a->callback([&] { action = [&] { return run_ablate(ab); }; });

  EmbedArgs em;
  auto* m = app.add_subcommand("embed", "dump third-block embeddings");
  m->add_option("--checkpoint", em.checkpoint, "checkpoint file")->required();
  m->add_option("--manifest", em.manifest, "dataset manifest")->required();
  m->add_option("--out", em.out, "embedding CSV")->required();
  m->add_option("--split", em.split, "split tag, or 'all'")->capture_default_str();
  m->add_option("--fold", em.fold, "restrict to one fold");
  m->add_option("--attention", em.attention, "also write feature-map attention weights here");
  m->callback([&] { action = [&] { return run_embed(em); }; });

  CLI11_PARSE(app, argc, argv);
  try {
    return action();
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
}
