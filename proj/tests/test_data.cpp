#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "cortexplain/data.hpp"
#include "cortexplain/error.hpp"
#include "doctest.h"

using namespace cx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cx_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

// Values exactly representable in f32.
Tensor f32_field(std::size_t V, std::size_t C, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(V, C);
  for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(rng.normal()));
  return t;
}

SynthConfig small_synth() {
  SynthConfig c;
  c.n_per_class = 6;
  c.high_level = 4;
  c.input_level = 2;
  return c;
}

double pearson(const Tensor& a, const Tensor& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("ICOF: size from the header, exact round trip, byte-identical resave") {
  const auto dir = scratch("icof");
  const Tensor t = f32_field(10242, 3, 1);
  write_icof(dir / "a.icof", 5, t);
  CHECK(fs::file_size(dir / "a.icof") == 20 + 10242 * 3 * 4);
  const IcofFile f = read_icof(dir / "a.icof");
  CHECK(f.level == 5);
  CHECK(max_abs_diff(f.values, t) == 0.0);
  write_icof(dir / "b.icof", f.level, f.values);
  CHECK(slurp(dir / "a.icof") == slurp(dir / "b.icof"));
}

TEST_CASE("ICOF: corrupt files raise format errors") {
  const auto dir = scratch("icof_bad");
  write_icof(dir / "ok.icof", 1, f32_field(42, 2, 2));
  const std::string good = slurp(dir / "ok.icof");

  std::string bad = good;
  bad[0] = 'X';
  spit(dir / "magic.icof", bad);
  CHECK_THROWS_AS(read_icof(dir / "magic.icof"), FormatError);

  spit(dir / "short.icof", good.substr(0, good.size() - 4));
  CHECK_THROWS_AS(read_icof(dir / "short.icof"), FormatError);

  spit(dir / "long.icof", good + "xxxx");
  CHECK_THROWS_AS(read_icof(dir / "long.icof"), FormatError);

  spit(dir / "header.icof", good.substr(0, 10));
  CHECK_THROWS_AS(read_icof(dir / "header.icof"), FormatError);

  bad = good;
  bad[12] = 43;  // n_vertices no longer matches level 1
  spit(dir / "count.icof", bad);
  CHECK_THROWS_AS(read_icof(dir / "count.icof"), FormatError);

  bad = good;
  bad[4] = 9;  // version
  spit(dir / "version.icof", bad);
  CHECK_THROWS_AS(read_icof(dir / "version.icof"), FormatError);

  CHECK_THROWS_AS(read_icof(dir / "missing.icof"), IoError);
  CHECK_THROWS_AS(write_icof(dir / "rows.icof", 1, Tensor::matrix(41, 2)), ShapeError);
}

TEST_CASE("mask files hold 0/1 only and must match the feature level") {
  const auto dir = scratch("mask");
  VertexMask m(162, 0);
  for (std::size_t i = 0; i < m.size(); i += 3) m[i] = 1;
  write_mask(dir / "m.icof", 2, m);
  CHECK(read_mask(dir / "m.icof", 2) == m);
  CHECK_THROWS_AS(read_mask(dir / "m.icof", 3), FormatError);
  Tensor t = Tensor::matrix(162, 1);
  t[5] = 0.5;
  write_icof(dir / "frac.icof", 2, t);
  CHECK_THROWS_AS(read_mask(dir / "frac.icof", 2), FormatError);
  write_icof(dir / "two.icof", 2, Tensor::matrix(162, 2));
  CHECK_THROWS_AS(read_mask(dir / "two.icof", 2), FormatError);
}

TEST_CASE("manifest and sample round trip; duplicates and missing files fail") {
  const auto dir = scratch("manifest");
  SurfaceSample s;
  s.subject_id = "sub-x";
  s.label = kPreterm;
  s.level = 2;
  s.features = {f32_field(162, 3, 3), f32_field(162, 3, 4)};
  s.mask = std::array<VertexMask, 2>{VertexMask(162, 0), VertexMask(162, 1)};
  Manifest m;
  m.base_dir = dir;
  m.records.push_back(save_sample(s, dir));
  m.records.back().split = "test";
  write_manifest(dir / "manifest.jsonl", m);
  const Manifest back = read_manifest(dir / "manifest.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back.records[0].subject_id == "sub-x");
  CHECK(back.records[0].split == "test");
  const SurfaceSample t = load_sample(back.records[0], back.base_dir);
  CHECK(t.label == kPreterm);
  CHECK(t.level == 2);
  CHECK(max_abs_diff(t.features[0], s.features[0]) == 0.0);
  CHECK(max_abs_diff(t.features[1], s.features[1]) == 0.0);
  REQUIRE(t.mask.has_value());
  CHECK((*t.mask)[1] == (*s.mask)[1]);

  Manifest dup = m;
  dup.records.push_back(m.records[0]);
  write_manifest(dir / "dup.jsonl", dup);
  CHECK_THROWS_AS(read_manifest(dir / "dup.jsonl"), FormatError);

  spit(dir / "garbage.jsonl", "{not json\n");
  CHECK_THROWS_AS(read_manifest(dir / "garbage.jsonl"), FormatError);

  ManifestRecord gone = m.records[0];
  gone.lh = "nowhere.icof";
  CHECK_THROWS_AS(load_sample(gone, dir), IoError);
}

TEST_CASE("cap mask counts match a direct angular count") {
  const auto mesh = IcoMesh::build(4);
  const Vec3 c{0.3, -0.2, 0.93};
  const double n = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
  for (const double deg : {10.0, 30.0, 75.0}) {
    const VertexMask m = cap_mask(mesh, c, deg);
    std::size_t expect = 0;
    for (const auto& p : mesh.positions()) {
      const double cosang = (p[0] * c[0] + p[1] * c[1] + p[2] * c[2]) / n;
      expect += std::acos(std::clamp(cosang, -1.0, 1.0)) < deg * std::acos(-1.0) / 180.0;
    }
    CHECK(static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)) == expect);
  }
}

TEST_CASE("synthetic subjects: deterministic, lesions only on preterm masks") {
  const SynthConfig cfg = small_synth();
  const auto pyr = shared_pyramid(cfg.high_level);
  const auto a = synth_subject(cfg, *pyr, "sub-00042", kPreterm);
  const auto b = synth_subject(cfg, *pyr, "sub-00042", kPreterm);
  const auto f = synth_subject(cfg, *pyr, "sub-00042", kFullterm);
  CHECK(max_abs_diff(a.features[0], b.features[0]) == 0.0);
  CHECK(max_abs_diff(a.features[1], b.features[1]) == 0.0);
  REQUIRE(a.mask.has_value());
  REQUIRE(f.mask.has_value());
  for (int h = 0; h < 2; ++h) {
    const auto hs = static_cast<std::size_t>(h);
    const auto& mk = (*a.mask)[hs];
    CHECK(std::count(mk.begin(), mk.end(), 1) > 0);
    CHECK(std::count((*f.mask)[hs].begin(), (*f.mask)[hs].end(), 1) == 0);
    std::size_t inside_changed = 0, inside = 0;
    for (std::size_t v = 0; v < mk.size(); ++v) {
      const double d2 = a.features[hs](v, 2) - f.features[hs](v, 2);
      if (!mk[v]) {
        CHECK(d2 == 0.0);
      } else {
        ++inside;
        inside_changed += d2 != 0.0;
        CHECK(a.features[hs](v, 0) <= f.features[hs](v, 0));  // negative amplitude on thickness
      }
    }
    CHECK(inside_changed >= inside - inside / 50);
  }
  // Fullterm noise is z-scored, then mapped to offset + scale * z.
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, s = 0;
    const Tensor& x = f.features[0];
    for (std::size_t v = 0; v < x.rows(); ++v) m += x(v, c);
    m /= static_cast<double>(x.rows());
    for (std::size_t v = 0; v < x.rows(); ++v) s += std::pow(x(v, c) - m, 2);
    s = std::sqrt(s / static_cast<double>(x.rows()));
    CHECK(m == doctest::Approx(kChannelOffset[c]).epsilon(1e-6).scale(1.0));
    CHECK(s == doctest::Approx(kChannelScale[c]).epsilon(1e-5));
  }
}

TEST_CASE("zero amplitude makes the classes indistinguishable") {
  SynthConfig cfg = small_synth();
  cfg.amplitude = {0.0, 0.0, 0.0};
  const auto pyr = shared_pyramid(cfg.high_level);
  for (const char* id : {"sub-00001", "sub-00999"}) {
    const auto p = synth_subject(cfg, *pyr, id, kPreterm);
    const auto f = synth_subject(cfg, *pyr, id, kFullterm);
    CHECK(max_abs_diff(p.features[0], f.features[0]) == 0.0);
    CHECK(max_abs_diff(p.features[1], f.features[1]) == 0.0);
  }
}

TEST_CASE("synth_generate writes a stratified, reproducible cohort") {
  const SynthConfig cfg = small_synth();
  const auto d1 = scratch("gen1"), d2 = scratch("gen2");
  const Manifest m1 = synth_generate(cfg, d1);
  synth_generate(cfg, d2);
  CHECK(m1.size() == 12);
  CHECK(m1.count_label(kPreterm) == 6);
  CHECK(m1.filter_split("train").size() == 10);  // round(6 * 0.75) = 5 per class
  CHECK(m1.filter_split("train").count_label(kPreterm) == 5);
  CHECK(slurp(d1 / "manifest.jsonl") == slurp(d2 / "manifest.jsonl"));
  for (const auto& r : m1.records) {
    CHECK(slurp(d1 / r.lh) == slurp(d2 / r.lh));
    CHECK(slurp(d1 / r.rh) == slurp(d2 / r.rh));
    CHECK(r.lh_mask.has_value());
  }
  const Manifest back = read_manifest(d1 / "manifest.jsonl");
  CHECK(load_samples(back).size() == 12);
  SynthConfig bad = cfg;
  bad.jitter_deg = cfg.radius_deg;  // more than radius / 2
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("coarsening: full subsets are footprint means, constants stay constant") {
  const SynthConfig cfg = small_synth();
  const auto pyr = shared_pyramid(cfg.high_level);
  const auto s = synth_subject(cfg, *pyr, "sub-00007", kPreterm);
  Rng rng(1);
  const auto d = coarsen_random(s, 2, rng, CoarsenOptions::deterministic());
  CHECK(d.level == 2);
  CHECK(d.subject_id == s.subject_id);
  CHECK(d.label == s.label);
  for (std::uint32_t v = 0; v < ico_vertex_count(2); ++v) {
    const auto region = hex_region(*pyr, 2, v, 2);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0;
      for (auto u : region) m += s.features[1](u, c);
      CHECK(d.features[1](v, c) == doctest::Approx(m / static_cast<double>(region.size())).epsilon(1e-12));
    }
    std::size_t on = 0;
    for (auto u : region) on += (*s.mask)[0][u];
    CHECK((*d.mask)[0][v] == (2 * on > region.size() ? 1 : 0));
  }

  SurfaceSample flat = s;
  for (auto& f : flat.features) f.fill(3.25);
  const auto fr = coarsen_random(flat, 1, rng);
  for (const auto& f : fr.features) {
    for (double v : f.values()) CHECK(v == doctest::Approx(3.25).epsilon(1e-14));
  }
}

TEST_CASE("coarsening: independent draws differ but correlate strongly") {
  const SynthConfig cfg = small_synth();
  const auto pyr = shared_pyramid(cfg.high_level);
  const auto s = synth_subject(cfg, *pyr, "sub-00003", kFullterm);
  Rng r1(10), r2(20);
  const auto a = coarsen_random(s, 2, r1);
  const auto b = coarsen_random(s, 2, r2);
  CHECK(max_abs_diff(a.features[0], b.features[0]) > 0.0);
  CHECK(pearson(a.features[0], b.features[0]) > 0.9);
  Rng r3(10);
  const auto c = coarsen_random(s, 2, r3);
  CHECK(max_abs_diff(a.features[0], c.features[0]) == 0.0);
  CHECK_THROWS_AS(coarsen_random(s, 5, r3), InvalidArgument);
  CHECK_THROWS_AS(coarsen_random(s, 2, r3, CoarsenOptions{0.0, 1.0}), InvalidArgument);
}

TEST_CASE("splits: 700 subjects at 5/7 give 500/200, stratified and seeded") {
  Manifest m;
  for (int i = 0; i < 700; ++i) {
    ManifestRecord r;
    r.subject_id = "s" + std::to_string(i);
    r.label = i < 280 ? kPreterm : kFullterm;
    m.records.push_back(r);
  }
  const auto a = make_splits(m, 500.0 / 700.0, 9);
  const auto b = make_splits(m, 500.0 / 700.0, 9);
  const auto c = make_splits(m, 500.0 / 700.0, 10);
  CHECK(a.train.size() == 500);
  CHECK(a.test.size() == 200);
  const double ratio = 280.0 / 700.0;
  CHECK(std::abs(static_cast<double>(a.train.count_label(kPreterm)) - ratio * 500) <= 1.0);
  CHECK(std::abs(static_cast<double>(a.test.count_label(kPreterm)) - ratio * 200) <= 1.0);
  std::set<std::string> seen;
  for (const auto& r : a.train.records) {
    CHECK(r.split == "train");
    seen.insert(r.subject_id);
  }
  for (const auto& r : a.test.records) {
    CHECK(r.split == "test");
    seen.insert(r.subject_id);
  }
  CHECK(seen.size() == 700);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    same = same && a.train.records[i].subject_id == b.train.records[i].subject_id;
    differs = differs || a.train.records[i].subject_id != c.train.records[i].subject_id;
  }
  CHECK(same);
  CHECK(differs);

  Manifest one_class;
  one_class.records = {m.records.back()};
  CHECK_THROWS_AS(make_splits(one_class, 0.5, 1), InvalidArgument);
}

TEST_CASE("normalization uses training statistics only") {
  const SynthConfig cfg = small_synth();
  const auto pyr = shared_pyramid(cfg.high_level);
  std::vector<SurfaceSample> train, test;
  for (int i = 0; i < 4; ++i) train.push_back(synth_subject(cfg, *pyr, "tr" + std::to_string(i), i % 2));
  test.push_back(synth_subject(cfg, *pyr, "te", 1));
  const ChannelStats st = compute_channel_stats(train);
  for (auto& s : test) {
    for (auto& f : s.features) f.fill(1e6);  // mutating test data...
  }
  const ChannelStats st2 = compute_channel_stats(train);  // ...leaves the statistics alone
  CHECK(st.mean == st2.mean);
  CHECK(st.stddev == st2.stddev);
  CHECK(st.warnings.empty());

  for (auto& s : train) apply_normalization(s, st);
  const ChannelStats after = compute_channel_stats(train);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(after.mean[c]) <= 1e-6);
    CHECK(std::abs(after.stddev[c] - 1.0) <= 1e-3);
  }

  std::vector<SurfaceSample> flat = {train[0]};
  for (auto& f : flat[0].features) {
    for (std::size_t v = 0; v < f.rows(); ++v) f(v, 1) = 0.5;
  }
  const ChannelStats fs = compute_channel_stats(flat);
  CHECK(fs.warnings.size() == 1);
  CHECK(fs.stddev[1] == 1.0);
}

TEST_CASE("balanced schedule: equal class counts, seeded, reshuffled per epoch") {
  const std::vector<int> labels{1, 1, 0, 0, 0, 0, 0, 1, 0, 0};
  const auto e0 = balanced_schedule(labels, 0, 5, 0);
  const auto e0b = balanced_schedule(labels, 0, 5, 0);
  const auto e1 = balanced_schedule(labels, 0, 5, 1);
  std::map<int, std::size_t> per;
  std::set<std::uint64_t> seeds;
  for (const auto& it : e0) {
    ++per[labels[it.index]];
    seeds.insert(it.seed);
  }
  CHECK(per[0] == 7);
  CHECK(per[1] == 7);
  CHECK(seeds.size() == e0.size());
  // Every minority subject appears at least twice (7 draws over 3).
  std::map<std::size_t, int> uses;
  for (const auto& it : e0) ++uses[it.index];
  for (std::size_t i : {0, 1, 7}) CHECK(uses[i] >= 2);
  bool same = e0.size() == e0b.size(), differs = false;
  for (std::size_t i = 0; i < e0.size(); ++i) {
    same = same && e0[i].index == e0b[i].index && e0[i].seed == e0b[i].seed;
    differs = differs || e0[i].seed != e1[i].seed;
  }
  CHECK(same);
  CHECK(differs);
  const auto fixed = balanced_schedule(labels, 4, 5, 0);
  CHECK(fixed.size() == 8);
}
