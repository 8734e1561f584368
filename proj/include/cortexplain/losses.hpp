#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cortexplain/autodiff.hpp"
#include "cortexplain/model.hpp"

namespace cx {

enum class EntropySign {
  kAsWritten,    // sum A+ log A+ - A- log A-
  kProseIntent,  // both terms negated
};

enum class Reduction { kSum, kMean };

// Where the contrast and entropy terms read attention and features.
enum class RegularizerStages {
  kFinal,  // last decoder attention with the input-level head features
  kAll,    // every stage, summed
};

// CE stage names: "encoder", "db1", "db2", "db3", "final" (classifier).
struct LossConfig {
  double lambda_contrast = 0.2;
  double lambda_entropy = 0.5;
  double lambda_consistency = 0.1;
  double margin = 1.0;
  std::vector<std::string> ce_stages{"encoder", "db1", "db2", "final"};
  EntropySign entropy_sign = EntropySign::kAsWritten;
  // Unit-length f and fbar; raw ones grow with the vertex count and dwarf m.
  bool normalize_features = true;
  // Over positive x negative pairs of a minibatch.
  Reduction pair_reduction = Reduction::kMean;
  // Over the 2V vertices of an entropy map.
  Reduction vertex_reduction = Reduction::kMean;
  RegularizerStages regularizer_stages = RegularizerStages::kFinal;

  void validate() const;
};

struct BatchLossReport {
  std::vector<std::pair<std::string, double>> ce_per_stage;
  double ce = 0.0;  // sum over configured stages
  double contrast = 0.0;
  double entropy = 0.0;
  double consistency = 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  // No positive/negative pair in the batch: contrast and entropy are 0.
  bool pair_terms_skipped = false;
};

struct LossTerms {
  Var ce;
  Var contrast;
  Var entropy;
  Var consistency;
  Var total;
  BatchLossReport report;
};

// Batch-mean softmax cross entropy of B x 2 logits.
Var ce_loss(const Var& logits, const std::vector<int>& labels);

// `attention` is (B*rows) x 1 in [0, 1], `features` (B*rows) x M, one block
// of `rows` per sample. Per sample f = sum over rows of A * F and
// fbar = sum of (1 - A) * F; summed over positive i x negative j pairs:
// |fbar+_i - f-_j| + max(m - |fbar+_i - f+_i|, 0) + max(m - |f-_j - f+_i|, 0).
Var contrast_loss(const Var& attention, const Var& features, const std::vector<int>& labels,
                  std::size_t rows, const LossConfig& config);

// Sum over pairs of (sum_v A+ log A+) - (sum_v A- log A-), log clamped at
// 1e-12; prose_intent negates.
Var entropy_loss(const Var& attention, const std::vector<int>& labels, std::size_t rows,
                 const LossConfig& config);

// Stage attentions from coarse to fine, each (B*2V_s) x 1 with its level.
// For every adjacent pair the coarser map is upsampled (edge vertices
// average their parents) and the per-hemisphere mean squared difference
// is summed over pairs and hemispheres, then averaged over the batch.
Var consistency_loss(const std::vector<std::pair<int, Var>>& stage_attention, std::size_t batch);

std::size_t count_pairs(const std::vector<int>& labels);

LossTerms compute_losses(const ForwardResult& forward, const std::vector<int>& labels,
                         const LossConfig& config);

// "step\tCE\tcontrast\tentropy\tconsistency\ttotal"
std::string format_loss_line(std::size_t step, const BatchLossReport& report);

}  // namespace cx
