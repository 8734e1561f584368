#include "cortexplain/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "cortexplain/error.hpp"
#include "json.hpp"

namespace cx {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("roc_auc: score and label counts differ");
  // Sort descending and sweep thresholds; tied scores form one diagonal step.
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  const auto P = static_cast<double>(std::count(labels.begin(), labels.end(), kPreterm));
  const double N = static_cast<double>(labels.size()) - P;
  if (P == 0.0 || N == 0.0) throw InvalidArgument("roc_auc: both classes must be present");
  double tp = 0.0, fp = 0.0, area = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    double dtp = 0.0, dfp = 0.0;
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == kPreterm ? dtp : dfp) += 1.0;
    area += (dfp / N) * (tp + 0.5 * dtp) / P;
    tp += dtp;
    fp += dfp;
  }
  return area;
}

ClassificationMetrics classification_metrics(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw InvalidArgument("classification_metrics: need matching, non-empty scores and labels");
  }
  ClassificationMetrics m;
  m.n = scores.size();
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > 0.0;
    const bool pos = labels[i] == kPreterm;
    (pred ? (pos ? tp : fp) : (pos ? fn : tn)) += 1.0;
  }
  m.accuracy = (tp + tn) / static_cast<double>(m.n);
  m.sensitivity = tp + fn > 0 ? tp / (tp + fn) : kNaN;
  m.specificity = tn + fp > 0 ? tn / (tn + fp) : kNaN;
  m.auc = (tp + fn > 0 && tn + fp > 0) ? roc_auc(scores, labels) : kNaN;
  return m;
}

Predictor model_predictor(const AttentionDecoderNet& model) {
  return [&model](const SurfaceSample& s) { return model.predict(s); };
}

void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidArgument("threshold tau must lie in (0, 1)");
}

SurfaceSample mask_features(const SurfaceSample& sample, const std::array<std::vector<bool>, kHemispheres>& keep,
                            std::span<const double> baseline) {
  if (baseline.size() != sample.channels()) throw ShapeError("mask_features: baseline has the wrong channel count");
  SurfaceSample out = sample;
  for (int h = 0; h < kHemispheres; ++h) {
    Tensor& f = out.features[static_cast<std::size_t>(h)];
    const auto& k = keep[static_cast<std::size_t>(h)];
    if (k.size() != f.rows()) throw ShapeError("mask_features: keep mask does not match the sample");
    for (std::size_t v = 0; v < f.rows(); ++v) {
      if (k[v]) continue;
      for (std::size_t c = 0; c < f.cols(); ++c) f(v, c) = baseline[c];
    }
  }
  return out;
}

double fidelity_subject(const Predictor& predict, const SurfaceSample& sample, const ExplanationMap& map,
                        double tau, std::span<const double> baseline) {
  check_tau(tau);
  if (map.level != sample.level) throw ShapeError("fidelity: map level differs from the input level");
  std::array<std::vector<bool>, kHemispheres> keep, rest;
  for (int h = 0; h < kHemispheres; ++h) {
    const auto& v = map.values[static_cast<std::size_t>(h)];
    auto& k = keep[static_cast<std::size_t>(h)];
    auto& r = rest[static_cast<std::size_t>(h)];
    k.resize(v.size());
    r.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      k[i] = v[i] > tau;
      r[i] = !k[i];
    }
  }
  const double kept = predicted_class(predict(mask_features(sample, keep, baseline))) == sample.label;
  const double complement = predicted_class(predict(mask_features(sample, rest, baseline))) == sample.label;
  return kept - complement;
}

double fidelity(const Predictor& predict, std::span<const SurfaceSample> samples,
                std::span<const ExplanationMap> maps, double tau, std::span<const double> baseline) {
  if (samples.size() != maps.size() || samples.empty()) throw InvalidArgument("fidelity: need one map per sample");
  double s = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) s += fidelity_subject(predict, samples[i], maps[i], tau, baseline);
  return s / static_cast<double>(samples.size());
}

double sparsity(const ExplanationMap& map, double tau) {
  check_tau(tau);
  double s = 0.0;
  for (const auto& v : map.values) {
    if (v.empty()) throw ShapeError("sparsity: empty map");
    const auto above = std::count_if(v.begin(), v.end(), [tau](double x) { return x > tau; });
    s += 1.0 - static_cast<double>(above) / static_cast<double>(v.size());
  }
  return s / kHemispheres;
}

double stability(const Predictor& predict, const SurfaceSample& high, int target_level, int k,
                 std::uint64_t seed, const ChannelStats* stats, const CoarsenOptions& options) {
  if (k < 2) throw InvalidArgument("stability: K must be at least 2");
  const std::uint64_t base = derive_seed(seed, high.subject_id);
  int correct = 0;
  for (int i = 0; i < k; ++i) {
    Rng rng(derive_seed(base, static_cast<std::uint64_t>(i)));
    SurfaceSample s = coarsen_random(high, target_level, rng, options);
    if (stats) apply_normalization(s, *stats);
    correct += predicted_class(predict(s)) == high.label;
  }
  return static_cast<double>(correct) / k;
}

Overlap gt_overlap(const ExplanationMap& map, const std::array<VertexMask, kHemispheres>& mask, double tau) {
  check_tau(tau);
  std::size_t inter = 0, uni = 0, a = 0, b = 0;
  for (int h = 0; h < kHemispheres; ++h) {
    const auto& v = map.values[static_cast<std::size_t>(h)];
    const auto& m = mask[static_cast<std::size_t>(h)];
    if (v.size() != m.size()) throw ShapeError("gt_overlap: mask does not match the map");
    for (std::size_t i = 0; i < v.size(); ++i) {
      const bool x = v[i] > tau, y = m[i] != 0;
      inter += x && y;
      uni += x || y;
      a += x;
      b += y;
    }
  }
  if (uni == 0) return {1.0, 1.0};
  return {static_cast<double>(inter) / static_cast<double>(uni), 2.0 * static_cast<double>(inter) / static_cast<double>(a + b)};
}

namespace {

bool has_lesion(const SurfaceSample& s) {
  if (!s.mask) return false;
  for (const auto& m : *s.mask) {
    if (std::any_of(m.begin(), m.end(), [](auto x) { return x != 0; })) return true;
  }
  return false;
}

}  // namespace

MetricReport evaluate_explanations(const Predictor& predict, std::span<const SurfaceSample> samples,
                                   std::span<const ExplanationMap> maps, std::span<const double> baseline,
                                   const MetricOptions& options, std::span<const SurfaceSample> high,
                                   const ChannelStats* stats) {
  check_tau(options.tau);
  for (double t : options.curve_taus) check_tau(t);
  if (samples.size() != maps.size() || samples.empty()) throw InvalidArgument("evaluate_explanations: need one map per sample");
  if (!high.empty() && high.size() != samples.size()) throw InvalidArgument("evaluate_explanations: high-resolution set size differs");
  MetricReport rep;
  rep.method = method_name(maps[0].method);
  rep.tau = options.tau;
  double stab = 0.0, iou = 0.0, dice = 0.0;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    SubjectMetrics row;
    row.subject_id = s.subject_id;
    row.label = s.label;
    row.fidelity = fidelity_subject(predict, s, maps[i], options.tau, baseline);
    row.sparsity = sparsity(maps[i], options.tau);
    if (!high.empty()) {
      row.stability = stability(predict, high[i], s.level, options.stability_k, options.seed, stats);
      stab += *row.stability;
    }
    if (has_lesion(s)) {
      const Overlap o = gt_overlap(maps[i], *s.mask, options.tau);
      row.iou = o.iou;
      row.dice = o.dice;
      iou += o.iou;
      dice += o.dice;
      ++n_gt;
    }
    rep.fidelity += row.fidelity;
    rep.sparsity += row.sparsity;
    rep.subjects.push_back(std::move(row));
  }
  const auto n = static_cast<double>(samples.size());
  rep.fidelity /= n;
  rep.sparsity /= n;
  if (!high.empty()) rep.stability = stab / n;
  if (n_gt > 0) {
    rep.gt_iou = iou / static_cast<double>(n_gt);
    rep.gt_dice = dice / static_cast<double>(n_gt);
  }
  for (double t : options.curve_taus) {
    CurvePoint p;
    p.tau = t;
    double ci = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      p.fidelity += fidelity_subject(predict, samples[i], maps[i], t, baseline);
      p.sparsity += sparsity(maps[i], t);
      if (has_lesion(samples[i])) ci += gt_overlap(maps[i], *samples[i].mask, t).iou;
    }
    p.fidelity /= n;
    p.sparsity /= n;
    if (n_gt > 0) p.iou = ci / static_cast<double>(n_gt);
    rep.curve.push_back(p);
  }
  return rep;
}

void write_metric_report(const std::filesystem::path& path, const MetricReport& r) {
  using nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  ordered_json j;
  j["method"] = r.method;
  j["tau"] = r.tau;
  j["fidelity"] = r.fidelity;
  j["sparsity"] = r.sparsity;
  j["stability"] = opt(r.stability);
  j["gt_iou"] = opt(r.gt_iou);
  j["gt_dice"] = opt(r.gt_dice);
  ordered_json curve = ordered_json::array();
  for (const auto& p : r.curve) {
    curve.push_back({{"tau", p.tau}, {"fidelity", p.fidelity}, {"sparsity", p.sparsity}, {"gt_iou", opt(p.iou)}});
  }
  j["curve"] = std::move(curve);
  ordered_json rows = ordered_json::array();
  for (const auto& s : r.subjects) {
    rows.push_back({{"subject_id", s.subject_id},
                    {"label", s.label},
                    {"fidelity", s.fidelity},
                    {"sparsity", s.sparsity},
                    {"stability", opt(s.stability)},
                    {"gt_iou", opt(s.iou)},
                    {"gt_dice", opt(s.dice)}});
  }
  j["subjects"] = std::move(rows);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metric report " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace cx
