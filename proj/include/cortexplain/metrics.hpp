#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cortexplain/data.hpp"
#include "cortexplain/explain.hpp"

namespace cx {

// ---------------------------------------------------------------------------
// Classification

struct ClassificationMetrics {
  double accuracy = 0.0;
  double auc = 0.0;
  double sensitivity = 0.0;  // preterm recall
  double specificity = 0.0;  // fullterm recall
  std::size_t n = 0;
};

// `scores` rank subjects by preterm evidence; predictions threshold at 0.
// AUC is the trapezoid area under the ROC curve (ties handled as diagonal
// segments), equal to the Mann-Whitney statistic.
ClassificationMetrics classification_metrics(std::span<const double> scores, std::span<const int> labels);
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Explanation metrics

// Class logits of one model-ready sample.
using Predictor = std::function<std::array<double, 2>(const SurfaceSample&)>;
Predictor model_predictor(const AttentionDecoderNet& model);

// Copy of `sample` with every vertex outside `keep` replaced by `baseline`.
SurfaceSample mask_features(const SurfaceSample& sample, const std::array<std::vector<bool>, kHemispheres>& keep,
                            std::span<const double> baseline);

// Correctness on the map-thresholded input (kept where map > tau, baseline
// elsewhere) minus correctness on the complement: -1, 0 or 1.
double fidelity_subject(const Predictor& predict, const SurfaceSample& sample, const ExplanationMap& map,
                        double tau, std::span<const double> baseline);
double fidelity(const Predictor& predict, std::span<const SurfaceSample> samples,
                std::span<const ExplanationMap> maps, double tau, std::span<const double> baseline);

// 1 - fraction of vertices above tau, averaged over hemispheres.
double sparsity(const ExplanationMap& map, double tau);

// Fraction of K randomly coarsened (and then normalized, when `stats` is
// given) copies of a high-resolution subject predicted as its label.
double stability(const Predictor& predict, const SurfaceSample& high, int target_level, int k,
                 std::uint64_t seed, const ChannelStats* stats, const CoarsenOptions& options = {});

struct Overlap {
  double iou = 0.0;
  double dice = 0.0;
};
// {map > tau} against the mask over both hemispheres. Two empty sets give 1.
Overlap gt_overlap(const ExplanationMap& map, const std::array<VertexMask, kHemispheres>& mask, double tau);

// ---------------------------------------------------------------------------
// Reports

struct SubjectMetrics {
  std::string subject_id;
  int label = 0;
  double fidelity = 0.0;
  double sparsity = 0.0;
  std::optional<double> stability;
  std::optional<double> iou;
  std::optional<double> dice;
};

struct CurvePoint {
  double tau = 0.0;
  double fidelity = 0.0;
  double sparsity = 0.0;
  std::optional<double> iou;
};

struct MetricReport {
  std::string method;
  double tau = 0.5;
  double fidelity = 0.0;
  double sparsity = 0.0;
  std::optional<double> stability;
  // Over subjects whose mask is non-empty.
  std::optional<double> gt_iou;
  std::optional<double> gt_dice;
  std::vector<CurvePoint> curve;
  std::vector<SubjectMetrics> subjects;
};

// Fills per-subject values and aggregates (means over subjects) at `tau`,
// plus the curve over `curve_taus`. `high` (optional, same order as
// `samples`) enables stability with K perturbations.
struct MetricOptions {
  double tau = 0.5;
  std::vector<double> curve_taus{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  int stability_k = 10;
  std::uint64_t seed = 1;
};
MetricReport evaluate_explanations(const Predictor& predict, std::span<const SurfaceSample> samples,
                                   std::span<const ExplanationMap> maps, std::span<const double> baseline,
                                   const MetricOptions& options, std::span<const SurfaceSample> high = {},
                                   const ChannelStats* stats = nullptr);

void write_metric_report(const std::filesystem::path& path, const MetricReport& report);

void check_tau(double tau);

}  // namespace cx
