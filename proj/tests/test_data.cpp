#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include "support.hpp"

using namespace attfuse;
using testing_support::TempDir;

namespace {

// Tiny images whose pixels encode `tag`, so a batch row can be traced back.
void write_pair(const std::filesystem::path& dir, const std::string& stem, std::uint8_t tag, std::size_t size = 4) {
  std::filesystem::create_directories(dir / "img");
  write_ppm(dir / "img" / (stem + ".ppm"), Image8(size, size, 3, tag));
  write_pgm(dir / "img" / (stem + "_d.pgm"), Image8(size, size, 1, static_cast<std::uint8_t>(255 - tag)));
}

struct Row {
  std::string subject, sample, split;
  int fold = -1;
};

std::filesystem::path write_rows(const TempDir& dir, const std::vector<Row>& rows, bool with_files = true) {
  const auto path = dir / "manifest.csv";
  std::ofstream os(path);
  os << kManifestHeader << "\n";
  std::uint8_t tag = 0;
  for (const auto& r : rows) {
    const std::string stem = r.subject + "_" + r.sample;
    if (with_files) write_pair(dir.path(), stem, tag++);
    os << r.subject << "," << r.sample << ",img/" << stem << ".ppm,img/" << stem << "_d.pgm," << r.split << ","
       << (r.fold >= 0 ? std::to_string(r.fold) : "") << "\n";
  }
  return path;
}

std::filesystem::path write_text(const TempDir& dir, const std::string& text) {
  const auto path = dir / "manifest.csv";
  std::ofstream(path) << text;
  return path;
}

void expect_load_error(const std::filesystem::path& p, const std::string& fragment) {
  try {
    load_manifest(p);
    ADD_FAILURE() << "expected LoadError containing '" << fragment << "'";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

// Five folds; in each, every subject has 4 train and 17 test images.
std::vector<Row> fivefold_rows(int subjects) {
  std::vector<Row> rows;
  for (int f = 0; f < 5; ++f)
    for (int s = 0; s < subjects; ++s)
      for (int k = 0; k < 21; ++k) rows.push_back({"subj" + std::to_string(s), "f" + std::to_string(f) + "_" + std::to_string(k), k < 4 ? "train" : "test", f});
  return rows;
}

std::vector<Record> plain_records(std::size_t n) {
  std::vector<Record> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].subject = "s" + std::to_string(i % 3);
    out[i].sample = std::to_string(i);
  }
  return out;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

double sq_distance(const std::vector<std::uint8_t>& img, const Template& t) {
  double d = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double e = img[i] / 255.0 - t.values[i];
    d += e * e;
  }
  return d;
}

}  // namespace

// --- manifest ------------------------------------------------------------------

TEST(Manifest, TwoSubjects) {
  TempDir dir;
  const auto m = load_manifest(write_rows(dir, {{"bob", "1", "train"}, {"amy", "1", "train"}, {"bob", "2", "test"}, {"amy", "2", "test", 3}}));
  EXPECT_EQ(m.num_classes(), 2u);
  EXPECT_EQ(m.subjects, (std::vector<std::string>{"amy", "bob"}));
  ASSERT_EQ(m.records.size(), 4u);
  EXPECT_EQ(m.records[0].label, 1);
  EXPECT_EQ(m.records[1].label, 0);
  EXPECT_EQ(m.records[0].fold, -1);
  EXPECT_EQ(m.records[3].fold, 3);
  EXPECT_EQ(m.records[2].id(), "bob/2");
  EXPECT_EQ(m.records[0].rgb, dir / "img/bob_1.ppm");
}

TEST(Manifest, MissingDepthFileNamed) {
  TempDir dir;
  const auto path = write_rows(dir, {{"a", "1", "train"}, {"b", "1", "test"}});
  std::filesystem::remove(dir / "img/b_1_d.pgm");
  expect_load_error(path, "manifest.csv:3: missing file");
  expect_load_error(path, "b_1_d.pgm");
}

TEST(Manifest, MalformedInputsNameTheLine) {
  TempDir dir;
  write_pair(dir.path(), "a_1", 0);
  const std::string h = std::string(kManifestHeader) + "\n";
  const std::string ok = "a,1,img/a_1.ppm,img/a_1_d.pgm,train,\n";
  expect_load_error(write_text(dir, h + ok + ok), ":3: duplicate record a/1");
  expect_load_error(write_text(dir, "subject,sample\n" + ok), ":1: expected header");
  expect_load_error(write_text(dir, h + "a,1,img/a_1.ppm,train\n"), ":2: expected 6 columns, found 4");
  expect_load_error(write_text(dir, h + "a,1,img/a_1.ppm,img/a_1_d.pgm,train,x\n"), ":2: invalid fold 'x'");
  expect_load_error(write_text(dir, h + "a,1,img/a_1.ppm,img/a_1_d.pgm,train,-2\n"), ":2: invalid fold");
  expect_load_error(write_text(dir, h + ",1,img/a_1.ppm,img/a_1_d.pgm,train,\n"), ":2: empty subject");
  expect_load_error(write_text(dir, h + "a,1,img/a_1.ppm,img/a_1_d.pgm,,\n"), ":2: empty split");
  expect_load_error(write_text(dir, ""), "empty manifest");
  expect_load_error(dir / "absent.csv", "cannot open manifest");
}

TEST(Manifest, WriteThenLoadRoundTrips) {
  TempDir dir;
  const auto m = load_manifest(write_rows(dir, {{"a", "1", "train", 0}, {"b", "x", "test1"}, {"b", "y", "test2", 4}}));
  write_manifest(dir / "copy.csv", m.records);
  const auto again = load_manifest(dir / "copy.csv");
  ASSERT_EQ(again.records.size(), m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(again.records[i].id(), m.records[i].id());
    EXPECT_EQ(again.records[i].rgb, m.records[i].rgb);
    EXPECT_EQ(again.records[i].split, m.records[i].split);
    EXPECT_EQ(again.records[i].fold, m.records[i].fold);
  }
}

// --- protocols -----------------------------------------------------------------

TEST(Protocol, FivefoldPerSubjectCounts) {
  TempDir dir;
  const auto m = load_manifest(write_rows(dir, fivefold_rows(3)));
  std::multiset<std::string> all_tests;
  for (int k = 0; k < 5; ++k) {
    const Split s = protocol_split(m, Protocol::fivefold(k));
    std::map<std::string, int> train, test;
    for (const auto& r : s.train) ++train[r.subject];
    for (const auto& r : s.test) {
      ++test[r.subject];
      all_tests.insert(r.id());
    }
    for (const auto& subj : m.subjects) {
      EXPECT_EQ(train[subj], 4);
      EXPECT_EQ(test[subj], 17);
    }
    std::set<std::string> train_ids;
    for (const auto& r : s.train) train_ids.insert(r.id());
    for (const auto& r : s.test) EXPECT_EQ(train_ids.count(r.id()), 0u);
  }
  std::multiset<std::string> tagged;
  for (const auto& r : m.records)
    if (r.split == "test") tagged.insert(r.id());
  EXPECT_EQ(all_tests, tagged);
}

TEST(Protocol, FixedSplitThreeWay) {
  std::vector<Row> rows;
  for (int s = 0; s < 2; ++s)
    for (int k = 0; k < 87; ++k) rows.push_back({"p" + std::to_string(s), std::to_string(k), k < 18 ? "train" : k < 48 ? "test1" : "test2"});
  TempDir dir;
  const auto m = load_manifest(write_rows(dir, rows));
  const Split t1 = protocol_split(m, Protocol::fixed("test1"));
  const Split t2 = protocol_split(m, Protocol::fixed("test2"));
  const Split both = protocol_split(m, Protocol::fixed());
  EXPECT_EQ(t1.train.size(), 2u * 18);
  EXPECT_EQ(t1.test.size(), 2u * 30);
  EXPECT_EQ(t2.test.size(), 2u * 39);
  EXPECT_EQ(both.test.size(), 2u * 69);
  for (const auto& r : t1.test) EXPECT_EQ(r.split, "test1");
}

TEST(Protocol, MismatchesAreConfigErrors) {
  TempDir dir;
  const auto m = load_manifest(write_rows(dir, {{"a", "1", "train"}, {"a", "2", "test"}, {"b", "1", "train"}, {"b", "2", "test"}}));
  EXPECT_THROW(protocol_split(m, Protocol::fivefold(0)), ConfigError);
  EXPECT_THROW(protocol_split(m, Protocol::fixed("test9")), ConfigError);
  TempDir dir2;
  const auto folded = load_manifest(write_rows(dir2, fivefold_rows(2)));
  EXPECT_THROW(protocol_split(folded, Protocol::fivefold(5)), ConfigError);
  EXPECT_THROW(protocol_split(folded, Protocol::fivefold(-1)), ConfigError);
  TempDir dir3;
  const auto no_test = load_manifest(write_rows(dir3, {{"a", "1", "train"}, {"b", "1", "train"}}));
  EXPECT_THROW(protocol_split(no_test, Protocol::fixed()), ConfigError);
  TempDir dir4;
  const auto lopsided = load_manifest(write_rows(dir4, {{"a", "1", "train"}, {"a", "2", "test"}, {"b", "1", "train"}}));
  EXPECT_THROW(protocol_split(lopsided, Protocol::fixed()), ConfigError);
}

// --- batching ------------------------------------------------------------------

TEST(Batching, FortyFiveInTwentiesGivesTwentyTwentyFive) {
  const auto plan = batch_plan(shuffled_order(45, 1), 20);
  ASSERT_EQ(plan.size(), 3u);
  EXPECT_EQ(plan[0].size(), 20u);
  EXPECT_EQ(plan[1].size(), 20u);
  EXPECT_EQ(plan[2].size(), 5u);
  EXPECT_THROW(batch_plan(shuffled_order(3, 1), 0), ConfigError);
}

TEST(Batching, PropertyShuffleIsSeededPermutation) {
  for (std::size_t n : {1u, 2u, 7u, 45u, 200u}) {
    const auto a = shuffled_order(n, 3), b = shuffled_order(n, 3), c = shuffled_order(n, 4);
    EXPECT_EQ(a, b);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sorted[i], i);
    auto sc = c;
    std::sort(sc.begin(), sc.end());
    EXPECT_EQ(sc, sorted);
    if (n >= 7) EXPECT_NE(a, c);
  }
}

TEST(Batching, RowsStayPairedAndScaled) {
  TempDir dir;
  std::vector<Row> rows;
  for (int i = 0; i < 45; ++i) rows.push_back({"s" + std::to_string(i % 4), std::to_string(i), i % 2 ? "train" : "test"});
  const auto m = load_manifest(write_rows(dir, rows));
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.records.size(); ++i) index[m.records[i].id()] = i;
  const auto batches = make_batches(m.records, 20, 9, 4);
  ASSERT_EQ(batches.size(), 3u);
  std::multiset<std::string> seen;
  for (const auto& b : batches) {
    for (std::size_t r = 0; r < b.labels.size(); ++r) {
      const std::size_t i = index.at(b.ids[r]);
      seen.insert(b.ids[r]);
      EXPECT_EQ(b.labels[r], m.records[i].label);
      EXPECT_GE(b.labels[r], 0);
      EXPECT_LT(b.labels[r], 4);
      EXPECT_EQ(b.rgb.at({r, 1, 2, 0}), static_cast<double>(i) / 255.0);
      EXPECT_EQ(b.depth.at({r, 3, 0, 0}), static_cast<double>(255 - i) / 255.0);
    }
  }
  EXPECT_EQ(seen.size(), 45u);
  EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), 45u);
}

TEST(Batching, FullIntensityScalesToOne) {
  TempDir dir;
  std::filesystem::create_directories(dir / "img");
  write_ppm(dir / "img/a.ppm", Image8(2, 2, 3, 255));
  write_pgm(dir / "img/a_d.pgm", Image8(2, 2, 1, 0));
  std::vector<Record> recs(1);
  recs[0].rgb = dir / "img/a.ppm";
  recs[0].depth = dir / "img/a_d.pgm";
  const Batch b = load_batch(recs, {0}, 2);
  for (double v : b.rgb.data()) EXPECT_EQ(v, 1.0);
  for (double v : b.depth.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(b.depth.shape(), (Shape{1, 2, 2, 1}));
}

TEST(Batching, BadImagesNameThePath) {
  TempDir dir;
  write_pair(dir.path(), "a", 1, 4);
  auto recs = plain_records(1);
  recs[0].rgb = dir / "img/a.ppm";
  recs[0].depth = dir / "img/a_d.pgm";
  try {
    load_batch(recs, {0}, 8);
    ADD_FAILURE();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("a.ppm"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "img/a_d.pgm") << "garbage";
  try {
    load_batch(recs, {0}, 4);
    ADD_FAILURE();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("a_d.pgm"), std::string::npos) << e.what();
  }
}

// --- synthetic data ------------------------------------------------------------

TEST(Synthetic, CountsAndLabels) {
  TempDir dir;
  SyntheticSpec spec;
  spec.classes = 10;
  spec.per_class = 20;
  spec.size = 16;
  const auto m = load_manifest(generate_synthetic(spec, dir.path()));
  EXPECT_EQ(m.records.size(), 200u);
  EXPECT_EQ(m.num_classes(), 10u);
  std::map<int, int> per_label, train_per_label;
  for (const auto& r : m.records) {
    ++per_label[r.label];
    if (r.split == "train") ++train_per_label[r.label];
    EXPECT_EQ(m.subjects[r.label], r.subject);
  }
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ(per_label[c], 20);
    EXPECT_EQ(train_per_label[c], 20 - 20 / 3);
  }
  EXPECT_EQ(m.subjects.front(), "s0");
}

TEST(Synthetic, SameSeedSameBytes) {
  TempDir a, b, c;
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 4;
  spec.test_per_class = 1;
  spec.size = 16;
  generate_synthetic(spec, a.path());
  generate_synthetic(spec, b.path());
  spec.seed = 2;
  generate_synthetic(spec, c.path());
  for (const auto& name : {"rgb/s0_0.ppm", "depth/s2_3.pgm"}) {
    EXPECT_EQ(file_bytes(a / name), file_bytes(b / name)) << name;
  }
  EXPECT_NE(read_ppm(a / "rgb/s1_2.ppm"), read_ppm(c / "rgb/s1_2.ppm"));
}

TEST(Synthetic, NearestTemplateSeparatesCleanData) {
  TempDir dir;
  SyntheticSpec spec;
  spec.classes = 10;
  spec.per_class = 12;
  spec.size = 32;
  const auto m = load_manifest(generate_synthetic(spec, dir.path()));
  const auto t = synthetic_templates(spec);
  std::size_t correct = 0;
  for (const auto& r : m.records) {
    const Image8 rgb = read_ppm(r.rgb), depth = read_pgm8(r.depth);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      const double d = sq_distance(rgb.data, t.rgb[t.rgb_index(c)]) + sq_distance(depth.data, t.depth[t.depth_index(c)]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += static_cast<int>(best) == r.label;
  }
  EXPECT_EQ(correct, m.records.size());
}

TEST(Synthetic, NoiseClassesCarryNoTemplate) {
  TempDir dir;
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 3;
  spec.test_per_class = 1;
  spec.size = 32;
  spec.noise_depth_classes = {1};
  spec.noise_rgb_classes = {2};
  generate_synthetic(spec, dir.path());
  const auto t = synthetic_templates(spec);
  auto mean_of = [](const std::vector<std::uint8_t>& v) {
    double s = 0;
    for (auto x : v) s += x / 255.0;
    return s / v.size();
  };
  const Image8 noisy_depth = read_pgm8(dir / "depth/s1_0.pgm");
  const Image8 clean_depth = read_pgm8(dir / "depth/s0_0.pgm");
  EXPECT_NEAR(mean_of(noisy_depth.data), 0.5, 0.05);
  EXPECT_GT(sq_distance(noisy_depth.data, t.depth[1]), 10 * sq_distance(clean_depth.data, t.depth[0]));
  const Image8 noisy_rgb = read_ppm(dir / "rgb/s2_0.ppm");
  EXPECT_NEAR(mean_of(noisy_rgb.data), 0.5, 0.05);
}

TEST(Synthetic, ComplementaryTemplatesShared) {
  SyntheticSpec spec;
  spec.classes = 6;
  spec.size = 16;
  spec.complementary = true;
  const auto t = synthetic_templates(spec);
  EXPECT_EQ(t.rgb.size(), 3u);
  EXPECT_EQ(t.depth.size(), 3u);
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(t.rgb_index(c), c / 2);
    EXPECT_EQ(t.depth_index(c), c % 3);
  }
  // No two classes share both templates.
  std::set<std::pair<std::size_t, std::size_t>> combos;
  for (std::size_t c = 0; c < 6; ++c) combos.insert({t.rgb_index(c), t.depth_index(c)});
  EXPECT_EQ(combos.size(), 6u);
  spec.classes = 5;
  EXPECT_THROW(synthetic_templates(spec), ConfigError);
}

TEST(Synthetic, RawDepthClipsBackToRange) {
  TempDir dir;
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 2;
  spec.test_per_class = 1;
  spec.size = 16;
  spec.raw_depth = true;
  generate_synthetic(spec, dir.path());
  const Image16 raw = read_pgm16(dir / "depth_raw/s0_0.pgm");
  EXPECT_EQ(raw.width, 16u);
  const Image8 clipped = depth_clip_normalize(raw);
  EXPECT_EQ(clipped.width, 16u);
  const Manifest m = load_manifest(dir / "manifest_raw.csv");
  const Manifest processed = load_manifest(dir / "manifest.csv");
  ASSERT_EQ(m.records.size(), processed.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(m.records[i].depth.parent_path().filename(), "depth_raw");
    EXPECT_EQ(m.records[i].rgb, processed.records[i].rgb);
    EXPECT_EQ(read_pgm16(m.records[i].depth).width, 16u);
  }
}

TEST(Synthetic, InvalidSpecsRejected) {
  TempDir dir;
  SyntheticSpec spec;
  spec.classes = 1;
  EXPECT_THROW(generate_synthetic(spec, dir.path()), ConfigError);
  spec.classes = 2;
  spec.size = 8;
  EXPECT_THROW(generate_synthetic(spec, dir.path()), ConfigError);
  spec.size = 16;
  spec.per_class = 3;
  spec.test_per_class = 3;
  EXPECT_THROW(generate_synthetic(spec, dir.path()), ConfigError);
}
