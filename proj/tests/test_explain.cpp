#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>

#include "cortexplain/data.hpp"
#include "cortexplain/error.hpp"
#include "cortexplain/explain.hpp"
#include "cortexplain/metrics.hpp"
#include "doctest.h"

using namespace cx;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_level = 3;
  c.encoder_channels = {3, 3, 3, 4};
  c.decoder_channels = {3, 3, 3};
  c.head_channels = 3;
  c.seed = 5;
  return c;
}

SurfaceSample noise_sample(int level, std::uint64_t seed, int label = kPreterm) {
  Rng rng(seed);
  SurfaceSample s;
  s.subject_id = "s" + std::to_string(seed);
  s.label = label;
  s.level = level;
  const std::size_t V = ico_vertex_count(level);
  for (auto& f : s.features) {
    f = Tensor::matrix(V, kInputChannels);
    for (auto& v : f.values()) v = rng.normal();
  }
  return s;
}

// Mann-Whitney over all pairs, ties counted as one half.
double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != kPreterm || y[j] != kFullterm) continue;
      den += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

ExplanationMap map_from(int level, const std::array<VertexMask, kHemispheres>& m) {
  ExplanationMap e;
  e.level = level;
  for (int h = 0; h < kHemispheres; ++h) {
    for (auto x : m[static_cast<std::size_t>(h)]) e.values[static_cast<std::size_t>(h)].push_back(x ? 1.0 : 0.0);
  }
  return e;
}

// Predicts preterm when channel 0 averaged over `region` (lh) is above zero.
Predictor region_predictor(VertexMask region) {
  return [region](const SurfaceSample& s) -> std::array<double, 2> {
    double m = 0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < region.size(); ++v) {
      if (region[v]) {
        m += s.features[0](v, 0);
        ++n;
      }
    }
    m /= static_cast<double>(n);
    return {0.0, m};
  };
}

}  // namespace

TEST_CASE("normalize_map spans [0, 1]; flat input gives 0.5") {
  const std::vector<double> v{3.0, -1.0, 2.0, -1.0};
  const auto n = normalize_map(v);
  CHECK(n[0] == 1.0);
  CHECK(n[1] == 0.0);
  CHECK(n[2] == doctest::Approx(0.75));
  const auto flat = normalize_map(std::vector<double>(5, 7.0));
  for (double x : flat) CHECK(x == 0.5);
}

TEST_CASE("AUC equals the pairwise Mann-Whitney count, ties included") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(37);
    std::vector<int> y(37);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = std::round(rng.normal() * 2.0) / 2.0;  // coarse grid forces ties
      y[i] = i % 3 == 0 ? kPreterm : kFullterm;
    }
    CHECK(roc_auc(s, y) == doctest::Approx(auc_pairs(s, y)).epsilon(1e-12));
  }
  const std::vector<int> y{1, 1, 0, 0};
  CHECK(roc_auc(std::vector<double>{4, 3, 2, 1}, y) == 1.0);
  CHECK(roc_auc(std::vector<double>{1, 2, 3, 4}, y) == 0.0);
  CHECK(roc_auc(std::vector<double>{1, 1, 1, 1}, y) == 0.5);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), InvalidArgument);
}

TEST_CASE("classification metrics threshold scores at zero") {
  const std::vector<double> s{2.0, -1.0, 0.5, -0.2, 1.0};
  const std::vector<int> y{1, 1, 0, 0, 1};
  const auto m = classification_metrics(s, y);
  CHECK(m.n == 5);
  CHECK(m.accuracy == doctest::Approx(3.0 / 5.0));
  CHECK(m.sensitivity == doctest::Approx(2.0 / 3.0));
  CHECK(m.specificity == doctest::Approx(0.5));
  CHECK(m.auc == doctest::Approx(auc_pairs(s, y)));
  const auto one = classification_metrics(std::vector<double>{1.0}, std::vector<int>{1});
  CHECK(std::isnan(one.auc));
  CHECK(std::isnan(one.specificity));
}

TEST_CASE("grad_cam_raw on a linear readout matches the closed form") {
  // logits = mean_rows(a) W, so d logit_t / d a[v, c] = W[c, t] / R.
  Rng rng(4);
  const std::size_t R = 10, C = 3;
  Tensor a0 = Tensor::matrix(R, C), w0 = Tensor::matrix(C, 2);
  for (auto& v : a0.values()) v = rng.normal();
  for (auto& v : w0.values()) v = rng.normal();
  for (int t : {0, 1}) {
    Tape tape(true);
    const Var a = tape.variable(a0);
    const Var logits = matmul(mean(a, Axis::kRows), tape.constant(w0));
    const auto map = grad_cam_raw(a, logits, t);
    REQUIRE(map.size() == R);
    for (std::size_t v = 0; v < R; ++v) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += w0(c, static_cast<std::size_t>(t)) / R * a0(v, c);
      CHECK(map[v] == doctest::Approx(std::max(s, 0.0)).epsilon(1e-12));
    }
  }
  Tape frozen(false);
  const Var a = frozen.constant(a0);
  CHECK_THROWS_AS(grad_cam_raw(a, matmul(mean(a, Axis::kRows), frozen.constant(w0)), 0), NumericError);
}

TEST_CASE("CAM is the ReLU of the per-vertex classifier contribution") {
  const AttentionDecoderNet model(tiny());
  const auto s = noise_sample(3, 8);
  Tape tape(false);
  const SurfaceSample* one[] = {&s};
  ForwardOptions opts;
  opts.mode = Mode::kInference;
  opts.parameter_gradients = false;
  const auto r = model.forward(tape, one, opts);
  const Tensor& g = r.gated_features.value();
  const Tensor& w = model.state().parameter("final.cls.weight").value;
  const Tensor& b = model.state().parameter("final.cls.bias").value;
  const std::size_t V = ico_vertex_count(3);
  for (int t : {0, 1}) {
    std::vector<double> raw(2 * V);
    double mean_raw = 0;
    for (std::size_t v = 0; v < 2 * V; ++v) {
      for (std::size_t c = 0; c < g.cols(); ++c) raw[v] += g(v, c) * w(c, static_cast<std::size_t>(t));
      mean_raw += raw[v] / static_cast<double>(2 * V);
    }
    // Global average pooling makes the contributions add up to the logit.
    CHECK(mean_raw + b[static_cast<std::size_t>(t)] ==
          doctest::Approx(r.logits.value()(0, static_cast<std::size_t>(t))).epsilon(1e-10));
    const auto m = cam(model, s, t);
    m.validate();
    for (int h = 0; h < 2; ++h) {
      std::vector<double> part(V);
      for (std::size_t v = 0; v < V; ++v) part[v] = std::max(raw[h * V + v], 0.0);
      const auto expect = normalize_map(part);
      for (std::size_t v = 0; v < V; ++v) {
        CHECK(m.values[static_cast<std::size_t>(h)][v] == doctest::Approx(expect[v]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("Grad-CAM maps every layer to the input level; bad requests throw") {
  const AttentionDecoderNet model(tiny());
  const auto s = noise_sample(3, 9);
  for (const char* layer : {"eb1", "eb2", "eb3", "eb4", "sa", "db1", "db2", "db3", "head"}) {
    const auto m = grad_cam(model, s, kPreterm, layer);
    CHECK(m.level == 3);
    CHECK(m.method == ExplainMethod::kGradCam);
    CHECK_NOTHROW(m.validate());
  }
  CHECK_THROWS_AS(grad_cam(model, s, 0, "nope"), InvalidArgument);
  CHECK_THROWS_AS(grad_cam(model, s, 2, "head"), InvalidArgument);
  // Explaining the predicted class by default.
  const int pred = predicted_class(model.predict(s));
  const auto d = explain(model, s, ExplainMethod::kGradCam);
  const auto e = grad_cam(model, s, pred, "head");
  CHECK(d.values == e.values);
}

TEST_CASE("attention maps: per-stage levels, min 0 and max 1 per hemisphere") {
  const AttentionDecoderNet model(tiny());
  const auto s = noise_sample(3, 10);
  for (int stage = 0; stage < kStageCount; ++stage) {
    const auto m = extract_attention(model, s, stage);
    CHECK(m.level == stage);
    for (const auto& h : m.values) {
      CHECK(*std::min_element(h.begin(), h.end()) == doctest::Approx(0.0));
      CHECK(*std::max_element(h.begin(), h.end()) == doctest::Approx(1.0));
    }
  }
  CHECK(explain(model, s, ExplainMethod::kAttention).level == 3);
  CHECK_THROWS_AS(extract_attention(model, s, 4), InvalidArgument);
}

TEST_CASE("upsample_map keeps prefix vertices and constants") {
  Rng rng(12);
  std::vector<double> coarse(ico_vertex_count(1));
  for (auto& x : coarse) x = rng.uniform();
  const auto fine = upsample_map(coarse, 1, 3);
  REQUIRE(fine.size() == ico_vertex_count(3));
  for (std::size_t v = 0; v < coarse.size(); ++v) CHECK(fine[v] == coarse[v]);
  const auto flat = upsample_map(std::vector<double>(12, 0.3), 0, 2);
  for (double x : flat) CHECK(x == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(upsample_map(coarse, 1, 1) == coarse);
  CHECK_THROWS_AS(upsample_map(coarse, 2, 1), InvalidArgument);
}

TEST_CASE("method names round trip") {
  for (auto m : {ExplainMethod::kAttention, ExplainMethod::kCam, ExplainMethod::kGradCam}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK_THROWS_AS(parse_method("saliency"), InvalidArgument);
}

TEST_CASE("fidelity: +1 for the evidence region, -1 for its complement, 0 without evidence") {
  const int level = 2;
  const auto mesh = IcoMesh::build(level);
  const VertexMask region = cap_mask(mesh, {0.0, 0.0, 1.0}, 40.0);
  auto s = noise_sample(level, 1);
  for (std::size_t v = 0; v < region.size(); ++v) {
    if (region[v]) s.features[0](v, 0) = 1.0;
  }
  const std::vector<double> baseline{0.0, 0.0, 0.0};
  const Predictor predict = region_predictor(region);
  REQUIRE(predicted_class(predict(s)) == kPreterm);

  const VertexMask none(region.size(), 0);
  VertexMask inverse(region.size(), 0);
  for (std::size_t v = 0; v < region.size(); ++v) inverse[v] = !region[v];
  const auto good = map_from(level, {region, none});
  const auto bad = map_from(level, {inverse, inverse});
  CHECK(fidelity_subject(predict, s, good, 0.5, baseline) == 1.0);
  CHECK(fidelity_subject(predict, s, bad, 0.5, baseline) == -1.0);

  const Predictor constant = [](const SurfaceSample&) { return std::array<double, 2>{0.0, 1.0}; };
  CHECK(fidelity_subject(constant, s, good, 0.5, baseline) == 0.0);

  CHECK_THROWS_AS(fidelity_subject(predict, s, good, 0.0, baseline), InvalidArgument);
  CHECK_THROWS_AS(fidelity_subject(predict, s, good, 0.5, std::vector<double>{0.0}), ShapeError);
  const std::vector<SurfaceSample> ss{s, s};
  const std::vector<ExplanationMap> ms{good, bad};
  CHECK(fidelity(predict, ss, ms, 0.5, baseline) == 0.0);
}

TEST_CASE("random maps carry no fidelity on average") {
  const int level = 2;
  const auto mesh = IcoMesh::build(level);
  const VertexMask region = cap_mask(mesh, {0.0, 0.0, 1.0}, 40.0);
  const Predictor predict = region_predictor(region);
  const std::vector<double> baseline{0.0, 0.0, 0.0};
  Rng rng(77);
  double total = 0;
  const int trials = 200;
  for (int i = 0; i < trials; ++i) {
    auto s = noise_sample(level, 1000 + static_cast<std::uint64_t>(i));
    s.label = predicted_class(predict(s));
    total += fidelity_subject(predict, s, random_map(level, s.subject_id, rng), 0.5, baseline);
  }
  CHECK(std::abs(total / trials) <= 0.1);
}

TEST_CASE("sparsity and ground-truth overlap on hand-built maps") {
  ExplanationMap m;
  m.level = 0;
  m.values[0] = {0.9, 0.9, 0.9, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  m.values[1] = std::vector<double>(12, 0.0);
  m.values[1][0] = 0.7;
  CHECK(sparsity(m, 0.5) == doctest::Approx((9.0 / 12.0 + 11.0 / 12.0) / 2.0));
  CHECK(sparsity(m, 0.8) == doctest::Approx((9.0 / 12.0 + 1.0) / 2.0));

  std::array<VertexMask, 2> gt{VertexMask(12, 0), VertexMask(12, 0)};
  gt[0][1] = gt[0][2] = gt[0][3] = 1;
  // pred {l0, l1, l2, r0}, truth {l1, l2, l3}: 2 shared, 5 in the union.
  const auto o = gt_overlap(m, gt, 0.5);
  CHECK(o.iou == doctest::Approx(2.0 / 5.0));
  CHECK(o.dice == doctest::Approx(4.0 / 7.0));
  CHECK(o.dice == doctest::Approx(2.0 * o.iou / (1.0 + o.iou)));

  ExplanationMap empty = m;
  for (auto& h : empty.values) std::fill(h.begin(), h.end(), 0.0);
  const auto e = gt_overlap(empty, {VertexMask(12, 0), VertexMask(12, 0)}, 0.5);
  CHECK(e.iou == 1.0);
  CHECK(e.dice == 1.0);
  CHECK(gt_overlap(empty, gt, 0.5).iou == 0.0);
}

TEST_CASE("stability counts correct predictions over coarsened copies") {
  SynthConfig cfg;
  cfg.high_level = 4;
  cfg.input_level = 2;
  const auto pyr = shared_pyramid(4);
  const auto hi = synth_subject(cfg, *pyr, "sub-1", kPreterm);
  const Predictor yes = [](const SurfaceSample&) { return std::array<double, 2>{0.0, 1.0}; };
  const Predictor no = [](const SurfaceSample&) { return std::array<double, 2>{1.0, 0.0}; };
  CHECK(stability(yes, hi, 2, 5, 1, nullptr) == 1.0);
  CHECK(stability(no, hi, 2, 5, 1, nullptr) == 0.0);
  // Predictor that flips with the sign of one coarsened value: a fraction in between, reproducible.
  const Predictor coin = [](const SurfaceSample& s) {
    return std::array<double, 2>{0.0, s.features[0](100, 1)};
  };
  const double a = stability(coin, hi, 2, 20, 3, nullptr);
  CHECK(a == stability(coin, hi, 2, 20, 3, nullptr));
  CHECK(a * 20 == std::round(a * 20));
  CHECK_THROWS_AS(stability(yes, hi, 2, 1, 1, nullptr), InvalidArgument);
}

TEST_CASE("evaluate_explanations aggregates per subject and skips empty masks for IoU") {
  const int level = 2;
  const auto mesh = IcoMesh::build(level);
  const VertexMask region = cap_mask(mesh, {0.0, 0.0, 1.0}, 40.0);
  const Predictor predict = region_predictor(region);
  const std::vector<double> baseline{0.0, 0.0, 0.0};

  auto p = noise_sample(level, 1);
  for (std::size_t v = 0; v < region.size(); ++v) {
    if (region[v]) p.features[0](v, 0) = 1.0;
  }
  p.mask = std::array<VertexMask, 2>{region, VertexMask(region.size(), 0)};
  auto f = noise_sample(level, 2, kFullterm);
  for (std::size_t v = 0; v < region.size(); ++v) {
    if (region[v]) f.features[0](v, 0) = -1.0;
  }
  f.mask = std::array<VertexMask, 2>{VertexMask(region.size(), 0), VertexMask(region.size(), 0)};
  const auto m = map_from(level, {region, VertexMask(region.size(), 0)});
  const std::vector<SurfaceSample> ss{p, f};
  const std::vector<ExplanationMap> ms{m, m};
  const auto rep = evaluate_explanations(predict, ss, ms, baseline, MetricOptions{});
  REQUIRE(rep.subjects.size() == 2);
  // Fullterm: kept input still reads negative, complement reads 0 (not above zero): both correct.
  CHECK(rep.subjects[0].fidelity == 1.0);
  CHECK(rep.subjects[1].fidelity == 0.0);
  CHECK(rep.fidelity == 0.5);
  REQUIRE(rep.gt_iou.has_value());
  CHECK(*rep.gt_iou == 1.0);
  CHECK(rep.subjects[0].iou.has_value());
  CHECK_FALSE(rep.subjects[1].iou.has_value());
  CHECK_FALSE(rep.stability.has_value());
  CHECK(rep.curve.size() == 9);
  for (const auto& pt : rep.curve) CHECK(pt.iou.has_value());

  const auto dir = std::filesystem::temp_directory_path() / "cx_test_explain_report";
  std::filesystem::create_directories(dir);
  write_metric_report(dir / "r.json", rep);
  CHECK(std::filesystem::file_size(dir / "r.json") > 0);
}

TEST_CASE("map export: ICOF round trip and a well-formed PLY") {
  const AttentionDecoderNet model(tiny());
  const auto s = noise_sample(3, 21);
  const auto m = explain(model, s, ExplainMethod::kAttention);
  const auto dir = std::filesystem::temp_directory_path() / "cx_test_explain_export";
  std::filesystem::remove_all(dir);
  export_map_icof(dir, m);
  const auto lh = read_icof(dir / (s.subject_id + "_attention_lh.icof"));
  CHECK(lh.level == 3);
  REQUIRE(lh.values.rows() == m.values[0].size());
  for (std::size_t v = 0; v < lh.values.rows(); ++v) {
    CHECK(lh.values[v] == doctest::Approx(m.values[0][v]).epsilon(1e-6));
  }
  export_map_ply(dir / "lh.ply", m, 0);
  std::ifstream in(dir / "lh.ply");
  std::string line;
  std::size_t lines = 0;
  bool vert = false, face = false;
  while (std::getline(in, line)) {
    ++lines;
    vert = vert || line == "element vertex 642";
    face = face || line == "element face 1280";
  }
  CHECK(vert);
  CHECK(face);
  CHECK(lines == 13 + 642 + 1280);  // 13 header lines
  CHECK_THROWS_AS(export_map_ply(dir / "x.ply", m, 2), InvalidArgument);
}
