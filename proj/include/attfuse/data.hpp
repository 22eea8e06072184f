#pragma once

// Dataset manifests, evaluation protocols, batching, and the synthetic
// multimodal dataset generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attfuse/config.hpp"
#include "attfuse/errors.hpp"
#include "attfuse/image.hpp"
#include "attfuse/layers.hpp"
#include "attfuse/tensor.hpp"

namespace attfuse {

struct Record {
  std::string subject;
  std::string sample;
  std::filesystem::path rgb;    // resolved against the manifest directory
  std::filesystem::path depth;
  std::string split;            // train | test | test1 | test2 ...
  int fold = -1;                // -1 when the column is empty
  int label = 0;                // index of subject among sorted subject ids

  std::string id() const { return subject + "/" + sample; }
};

struct Manifest {
  std::filesystem::path path;
  std::vector<Record> records;
  std::vector<std::string> subjects;  // sorted; position = class index

  std::size_t num_classes() const { return subjects.size(); }
};

inline constexpr const char* kManifestHeader = "subject,sample,rgb,depth,split,fold";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace detail

/// Parses and validates a manifest. Paths are relative to the manifest's
/// directory unless absolute.
inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open manifest " + path.string());
  Manifest m;
  m.path = path;
  const auto base = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::set<std::pair<std::string, std::string>> keys;
  auto fail = [&](const std::string& msg) {
    throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    if (!header_seen) {
      if (detail::trim(line) != kManifestHeader) fail(std::string("expected header '") + kManifestHeader + "'");
      header_seen = true;
      continue;
    }
    auto cols = detail::split_csv_line(line);
    if (cols.size() != 6) fail("expected 6 columns, found " + std::to_string(cols.size()));
    Record r;
    r.subject = cols[0];
    r.sample = cols[1];
    if (r.subject.empty() || r.sample.empty()) fail("empty subject or sample id");
    r.rgb = std::filesystem::path(cols[2]).is_absolute() ? std::filesystem::path(cols[2]) : base / cols[2];
    r.depth = std::filesystem::path(cols[3]).is_absolute() ? std::filesystem::path(cols[3]) : base / cols[3];
    r.split = cols[4];
    if (r.split.empty()) fail("empty split tag");
    if (!cols[5].empty()) {
      try {
        std::size_t used = 0;
        r.fold = std::stoi(cols[5], &used);
        if (used != cols[5].size() || r.fold < 0) throw std::invalid_argument("fold");
      } catch (const std::exception&) {
        fail("invalid fold '" + cols[5] + "'");
      }
    }
    if (!keys.insert({r.subject, r.sample}).second) fail("duplicate record " + r.subject + "/" + r.sample);
    if (!std::filesystem::is_regular_file(r.rgb)) fail("missing file " + r.rgb.string());
    if (!std::filesystem::is_regular_file(r.depth)) fail("missing file " + r.depth.string());
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw LoadError(path.string() + ": empty manifest");
  std::set<std::string> subjects;
  for (const auto& r : m.records) subjects.insert(r.subject);
  m.subjects.assign(subjects.begin(), subjects.end());
  for (auto& r : m.records) {
    r.label = static_cast<int>(std::lower_bound(m.subjects.begin(), m.subjects.end(), r.subject) - m.subjects.begin());
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  os << kManifestHeader << '\n';
  for (const auto& r : records) {
    os << r.subject << ',' << r.sample << ',' << r.rgb.lexically_relative(base).generic_string() << ','
       << r.depth.lexically_relative(base).generic_string() << ',' << r.split << ',';
    if (r.fold >= 0) os << r.fold;
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Protocols

struct Protocol {
  enum class Kind { fivefold, fixed_split };
  Kind kind = Kind::fixed_split;
  int fold = 0;             // fivefold only
  std::string test_tag;     // fixed_split: which test tag; empty = every non-train tag

  static Protocol fivefold(int k) { return {Kind::fivefold, k, {}}; }
  static Protocol fixed(std::string tag = {}) { return {Kind::fixed_split, 0, std::move(tag)}; }
};

struct Split {
  std::vector<Record> train;
  std::vector<Record> test;
};

/// fivefold(k) uses the records whose fold column is k, divided by their
/// train/test tags; fixed_split ignores folds and honors the tags.
inline Split protocol_split(const Manifest& m, const Protocol& p) {
  Split s;
  if (p.kind == Protocol::Kind::fivefold) {
    if (p.fold < 0 || p.fold >= 5) throw ConfigError("fivefold: fold index must be in [0, 5), got " + std::to_string(p.fold));
    bool any_fold = false;
    for (const auto& r : m.records) any_fold = any_fold || r.fold >= 0;
    if (!any_fold) throw ConfigError("fivefold protocol requested but the manifest has no fold column values");
  }
  bool tag_seen = p.test_tag.empty();
  for (const auto& r : m.records) {
    if (p.kind == Protocol::Kind::fivefold && r.fold != p.fold) continue;
    if (r.split == "train") {
      s.train.push_back(r);
    } else if (p.test_tag.empty() || r.split == p.test_tag) {
      tag_seen = true;
      s.test.push_back(r);
    }
  }
  if (!tag_seen) throw ConfigError("no records tagged '" + p.test_tag + "' in the manifest");
  if (s.train.empty()) throw ConfigError("protocol selects no training records");
  if (s.test.empty()) throw ConfigError("protocol selects an empty test split");
  std::set<std::string> train_subjects, test_subjects;
  for (const auto& r : s.train) train_subjects.insert(r.subject);
  for (const auto& r : s.test) test_subjects.insert(r.subject);
  for (const auto& subj : m.subjects) {
    if (!train_subjects.count(subj) || !test_subjects.count(subj)) {
      throw ConfigError("subject '" + subj + "' lacks train or test records under this protocol");
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor rgb;    // [B x S x S x 3], values in [0, 1]
  Tensor depth;  // [B x S x S x 1]
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
};

/// Record order for one epoch: a seeded Fisher-Yates permutation.
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

/// Groups `order` into consecutive batches of at most `batch_size`.
inline std::vector<std::vector<std::size_t>> batch_plan(const std::vector<std::size_t>& order, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                      order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return plan;
}

/// Reads the selected records from disk; images must be size x size.
inline Batch load_batch(const std::vector<Record>& records, const std::vector<std::size_t>& indices, std::size_t size) {
  Batch b;
  const std::size_t n = indices.size();
  b.rgb = Tensor(Shape{n, size, size, 3});
  b.depth = Tensor(Shape{n, size, size, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const Record& r = records.at(indices[i]);
    const Image8 rgb = read_ppm(r.rgb);
    const Image8 depth = read_pgm8(r.depth);
    if (rgb.width != size || rgb.height != size) {
      throw DataError(r.rgb.string() + ": image is " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) +
                      ", expected " + std::to_string(size) + "x" + std::to_string(size));
    }
    if (depth.width != size || depth.height != size) {
      throw DataError(r.depth.string() + ": image is " + std::to_string(depth.width) + "x" +
                      std::to_string(depth.height) + ", expected " + std::to_string(size) + "x" + std::to_string(size));
    }
    double* rp = b.rgb.ptr() + i * size * size * 3;
    for (std::size_t k = 0; k < rgb.data.size(); ++k) rp[k] = rgb.data[k] / 255.0;
    double* dp = b.depth.ptr() + i * size * size;
    for (std::size_t k = 0; k < depth.data.size(); ++k) dp[k] = depth.data[k] / 255.0;
    b.labels.push_back(r.label);
    b.ids.push_back(r.id());
  }
  return b;
}

/// Eagerly loads every batch of one shuffled epoch.
inline std::vector<Batch> make_batches(const std::vector<Record>& records, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t size) {
  std::vector<Batch> out;
  for (const auto& idx : batch_plan(shuffled_order(records.size(), seed), batch_size)) {
    out.push_back(load_batch(records, idx, size));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 30;       // total pairs per class
  std::size_t test_per_class = 0;   // 0 = per_class / 3
  std::size_t size = 112;
  std::set<std::size_t> noise_depth_classes;  // depth of these classes carries no class signal
  std::set<std::size_t> noise_rgb_classes;
  // RGB identifies only the class pair {2j, 2j+1} and depth only the
  // residue class mod N/2, so both modalities are needed (N must be even).
  bool complementary = false;
  bool raw_depth = false;  // also write 16-bit raw depth next to the 8-bit map
  double noise = 0.05;     // per-pixel Gaussian noise, in [0,1] intensity units
  int max_shift = 2;       // per-sample translation range in pixels
  std::uint64_t seed = 1;

  std::size_t test_count() const { return test_per_class ? test_per_class : per_class / 3; }
};

/// A template image with values in [0, 1], `channels` interleaved.
struct Template {
  std::size_t size = 0, channels = 1;
  std::vector<double> values;
};

namespace detail {

inline double gaussian(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sum of soft blobs: a smooth "face-like" random pattern.
inline Template blob_template(std::size_t size, std::size_t channels, Rng& rng) {
  Template t{size, channels, std::vector<double>(size * size * channels, 0.1)};
  const double s = static_cast<double>(size);
  for (int k = 0; k < 6; ++k) {
    const double cx = uniform(rng, 0.2 * s, 0.8 * s), cy = uniform(rng, 0.2 * s, 0.8 * s);
    const double sigma = uniform(rng, 0.06 * s, 0.15 * s);
    std::vector<double> amp(channels);
    for (auto& a : amp) a = uniform(rng, -0.5, 1.0);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        for (std::size_t c = 0; c < channels; ++c) t.values[(y * size + x) * channels + c] += amp[c] * g;
      }
    }
  }
  for (auto& v : t.values) v = std::clamp(v, 0.0, 1.0);
  return t;
}

inline std::vector<std::uint8_t> render_sample(const Template* t, std::size_t size, std::size_t channels, double noise,
                                               int max_shift, Rng& rng) {
  std::vector<std::uint8_t> out(size * size * channels);
  const long span = 2 * max_shift + 1;
  const long sx = static_cast<long>(uniform01(rng) * static_cast<double>(span)) - max_shift;
  const long sy = static_cast<long>(uniform01(rng) * static_cast<double>(span)) - max_shift;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        double v;
        if (t) {
          const long tx = std::clamp(static_cast<long>(x) - sx, 0L, static_cast<long>(size) - 1);
          const long ty = std::clamp(static_cast<long>(y) - sy, 0L, static_cast<long>(size) - 1);
          v = t->values[(static_cast<std::size_t>(ty) * size + static_cast<std::size_t>(tx)) * channels + c] +
              noise * gaussian(rng);
        } else {
          v = uniform01(rng);
        }
        out[(y * size + x) * channels + c] = static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
      }
    }
  }
  return out;
}

}  // namespace detail

struct SyntheticTemplates {
  std::vector<Template> rgb;    // indexed by rgb_index(c)
  std::vector<Template> depth;  // indexed by depth_index(c)
  std::size_t classes = 0;
  bool complementary = false;

  std::size_t rgb_index(std::size_t c) const { return complementary ? c / 2 : c; }
  std::size_t depth_index(std::size_t c) const { return complementary ? c % (classes / 2) : c; }
};

/// The per-class templates generate_synthetic draws samples around.
inline SyntheticTemplates synthetic_templates(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.size < 16) throw ConfigError("synthetic image size must be at least 16");
  if (spec.complementary && spec.classes % 2 != 0) throw ConfigError("complementary mode needs an even class count");
  SyntheticTemplates t;
  t.classes = spec.classes;
  t.complementary = spec.complementary;
  Rng rng(spec.seed);
  const std::size_t n_rgb = spec.complementary ? spec.classes / 2 : spec.classes;
  const std::size_t n_depth = spec.complementary ? spec.classes / 2 : spec.classes;
  for (std::size_t i = 0; i < n_rgb; ++i) t.rgb.push_back(detail::blob_template(spec.size, 3, rng));
  for (std::size_t i = 0; i < n_depth; ++i) t.depth.push_back(detail::blob_template(spec.size, 1, rng));
  return t;
}

/// Writes rgb/<subject>_<k>.ppm, depth/<subject>_<k>.pgm and manifest.csv
/// under `dir` (plus depth_raw/ and manifest_raw.csv when raw_depth is set);
/// returns the manifest path. The first per_class - test_count
/// samples of each class are tagged train, the rest test.
inline std::filesystem::path generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& dir) {
  if (spec.per_class < 2) throw ConfigError("synthetic data needs at least 2 samples per class");
  const std::size_t tests = spec.test_count();
  if (tests == 0 || tests >= spec.per_class) throw ConfigError("test_per_class must leave at least one train and one test sample");
  const SyntheticTemplates templates = synthetic_templates(spec);
  std::filesystem::create_directories(dir / "rgb");
  std::filesystem::create_directories(dir / "depth");
  if (spec.raw_depth) std::filesystem::create_directories(dir / "depth_raw");
  const std::size_t width = std::to_string(spec.classes - 1).size();
  Rng rng(spec.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<Record> records;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::string subject = std::to_string(c);
    subject = "s" + std::string(width - subject.size(), '0') + subject;
    const Template* rgb_t = spec.noise_rgb_classes.count(c) ? nullptr : &templates.rgb[templates.rgb_index(c)];
    const Template* depth_t = spec.noise_depth_classes.count(c) ? nullptr : &templates.depth[templates.depth_index(c)];
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      Record r;
      r.subject = subject;
      r.sample = std::to_string(k);
      r.rgb = dir / "rgb" / (subject + "_" + r.sample + ".ppm");
      r.depth = dir / "depth" / (subject + "_" + r.sample + ".pgm");
      r.split = k < spec.per_class - tests ? "train" : "test";
      Image8 rgb(spec.size, spec.size, 3), depth(spec.size, spec.size, 1);
      rgb.data = detail::render_sample(rgb_t, spec.size, 3, spec.noise, spec.max_shift, rng);
      depth.data = detail::render_sample(depth_t, spec.size, 1, spec.noise, spec.max_shift, rng);
      write_ppm(r.rgb, rgb);
      write_pgm(r.depth, depth);
      if (spec.raw_depth) {
        // Sensor-like range values: near = small, 0 marks a missing sample.
        Image16 raw(spec.size, spec.size, 1);
        for (std::size_t i = 0; i < depth.data.size(); ++i) {
          raw.data[i] = depth.data[i] == 0 ? 0 : static_cast<std::uint16_t>(2000 - 4 * depth.data[i]);
        }
        write_pgm16(dir / "depth_raw" / (subject + "_" + r.sample + ".pgm"), raw);
      }
      records.push_back(std::move(r));
    }
  }
  const auto manifest = dir / "manifest.csv";
  write_manifest(manifest, records);
  if (spec.raw_depth) {
    std::vector<Record> raw = records;
    for (auto& r : raw) r.depth = dir / "depth_raw" / r.depth.filename();
    write_manifest(dir / "manifest_raw.csv", raw);
  }
  return manifest;
}

}  // namespace attfuse
