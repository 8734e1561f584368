#include "cortexplain/losses.hpp"

#include <algorithm>
#include <cstdio>

#include "cortexplain/error.hpp"

namespace cx {

namespace {

const std::vector<std::string> kCeStageNames{"encoder", "db1", "db2", "db3", "final"};

struct PairIndex {
  IndexList pos;  // per pair, the positive sample
  IndexList neg;  // per pair, the negative sample
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::size_t size() const { return pos->size(); }
};

PairIndex pair_index(const std::vector<int>& labels) {
  std::vector<std::uint32_t> p, n;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == kPreterm ? p : n).push_back(static_cast<std::uint32_t>(i));
  std::vector<std::uint32_t> pi, nj;
  for (auto i : p) {
    for (auto j : n) {
      pi.push_back(i);
      nj.push_back(j);
    }
  }
  return {make_indices(std::move(pi)), make_indices(std::move(nj)), p.size(), n.size()};
}

Var zero_scalar(Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

void check_blocks(const Var& x, const std::vector<int>& labels, std::size_t rows, const char* op) {
  if (rows == 0 || x.rows() != labels.size() * rows) {
    throw ShapeError(std::string(op) + ": " + std::to_string(x.rows()) + " rows for " +
                     std::to_string(labels.size()) + " samples of " + std::to_string(rows));
  }
}

Var reduce_pairs(const Var& total, std::size_t pairs, Reduction r) {
  return r == Reduction::kMean && pairs > 0 ? scale(total, 1.0 / static_cast<double>(pairs)) : total;
}

}  // namespace

void LossConfig::validate() const {
  if (lambda_contrast < 0.0 || lambda_entropy < 0.0 || lambda_consistency < 0.0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (!(margin > 0.0)) throw ConfigError("contrast margin must be positive");
  if (ce_stages.empty()) throw ConfigError("ce_stages must not be empty");
  for (const auto& s : ce_stages) {
    if (std::find(kCeStageNames.begin(), kCeStageNames.end(), s) == kCeStageNames.end()) {
      throw ConfigError("unknown ce stage '" + s + "'");
    }
  }
}

std::size_t count_pairs(const std::vector<int>& labels) {
  const auto p = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kPreterm));
  return p * (labels.size() - p);
}

Var ce_loss(const Var& logits, const std::vector<int>& labels) {
  return mean(cross_entropy(logits, labels), Axis::kAll);
}

Var contrast_loss(const Var& attention, const Var& features, const std::vector<int>& labels,
                  std::size_t rows, const LossConfig& config) {
  check_blocks(attention, labels, rows, "contrast_loss");
  check_blocks(features, labels, rows, "contrast_loss");
  if (attention.cols() != 1) throw ShapeError("contrast_loss: attention must be a column");
  const PairIndex pairs = pair_index(labels);
  Tape& tape = attention.tape();
  if (pairs.size() == 0) return zero_scalar(tape);
  Var f = segment_sum(mul_col(features, attention), rows);
  Var fbar = segment_sum(mul_col(features, add_scalar(scale(attention, -1.0), 1.0)), rows);
  if (config.normalize_features) {
    f = row_normalize(f);
    fbar = row_normalize(fbar);
  }
  const Var f_pos = gather_rows(f, pairs.pos);
  const Var fbar_pos = gather_rows(fbar, pairs.pos);
  const Var f_neg = gather_rows(f, pairs.neg);
  const double m = config.margin;
  const Var pull = row_norm(sub(fbar_pos, f_neg));
  const Var push_self = relu(add_scalar(scale(row_norm(sub(fbar_pos, f_pos)), -1.0), m));
  const Var push_neg = relu(add_scalar(scale(row_norm(sub(f_neg, f_pos)), -1.0), m));
  const Var total = sum(add(add(pull, push_self), push_neg), Axis::kAll);
  return reduce_pairs(total, pairs.size(), config.pair_reduction);
}

Var entropy_loss(const Var& attention, const std::vector<int>& labels, std::size_t rows,
                 const LossConfig& config) {
  check_blocks(attention, labels, rows, "entropy_loss");
  if (attention.cols() != 1) throw ShapeError("entropy_loss: attention must be a column");
  const PairIndex pairs = pair_index(labels);
  Tape& tape = attention.tape();
  if (pairs.size() == 0) return zero_scalar(tape);
  Var per_sample = segment_sum(mul(attention, log_clamped(attention, 1e-12)), rows);
  if (config.vertex_reduction == Reduction::kMean) per_sample = scale(per_sample, 1.0 / static_cast<double>(rows));
  // Each positive appears in n_neg pairs, each negative in n_pos.
  Tensor coef = Tensor::matrix(labels.size(), 1);
  const double sign = config.entropy_sign == EntropySign::kAsWritten ? 1.0 : -1.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    coef[b] = labels[b] == kPreterm ? sign * static_cast<double>(pairs.n_neg)
                                    : -sign * static_cast<double>(pairs.n_pos);
  }
  const Var total = sum(mul(per_sample, tape.constant(std::move(coef))), Axis::kAll);
  return reduce_pairs(total, pairs.size(), config.pair_reduction);
}

Var consistency_loss(const std::vector<std::pair<int, Var>>& stage_attention, std::size_t batch) {
  if (stage_attention.size() < 2) throw InvalidArgument("consistency_loss: needs at least two stages");
  if (batch == 0) throw InvalidArgument("consistency_loss: empty batch");
  const std::size_t copies = kHemispheres * batch;
  Var total;
  for (std::size_t s = 0; s + 1 < stage_attention.size(); ++s) {
    const auto& [coarse_level, coarse] = stage_attention[s];
    const auto& [fine_level, fine] = stage_attention[s + 1];
    if (fine_level != coarse_level + 1) throw ShapeError("consistency_loss: stages must be one level apart");
    const auto tables = level_tables(fine_level, copies);
    if (fine.rows() != copies * tables->vertices || fine.cols() != 1) {
      throw ShapeError("consistency_loss: fine attention has the wrong shape");
    }
    const Var diff = sub(fine, layers::upsample_mean(coarse, *tables));
    const Var per_hemi = segment_mean(mul(diff, diff), tables->vertices);
    const Var term = sum(per_hemi, Axis::kAll);
    total = total.valid() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(batch));
}

LossTerms compute_losses(const ForwardResult& fwd, const std::vector<int>& labels, const LossConfig& config) {
  config.validate();
  if (labels.size() != fwd.batch) throw ShapeError("compute_losses: label count differs from batch size");
  LossTerms t;
  for (const auto& name : config.ce_stages) {
    Var logits;
    if (name == "final") {
      logits = fwd.logits;
    } else {
      const auto idx = static_cast<std::size_t>(
          std::find(kCeStageNames.begin(), kCeStageNames.end(), name) - kCeStageNames.begin());
      logits = fwd.stages[idx].score;
    }
    const Var ce = ce_loss(logits, labels);
    t.report.ce_per_stage.emplace_back(name, ce.value().item());
    t.ce = t.ce.valid() ? add(t.ce, ce) : ce;
  }

  const std::size_t rows_final = kHemispheres * fwd.stages[kStageCount - 1].vertices;
  if (config.regularizer_stages == RegularizerStages::kFinal) {
    const Var& a = fwd.stages[kStageCount - 1].attention;
    t.contrast = contrast_loss(a, fwd.head_features, labels, rows_final, config);
    t.entropy = entropy_loss(a, labels, rows_final, config);
  } else {
    for (int s = 0; s < kStageCount; ++s) {
      const auto& st = fwd.stages[static_cast<std::size_t>(s)];
      const std::size_t rows = kHemispheres * st.vertices;
      const Var& feats = s == kStageCount - 1 ? fwd.head_features : st.features;
      const Var c = contrast_loss(st.attention, feats, labels, rows, config);
      const Var e = entropy_loss(st.attention, labels, rows, config);
      t.contrast = t.contrast.valid() ? add(t.contrast, c) : c;
      t.entropy = t.entropy.valid() ? add(t.entropy, e) : e;
    }
  }
  std::vector<std::pair<int, Var>> maps;
  for (const auto& st : fwd.stages) maps.emplace_back(st.level, st.attention);
  t.consistency = consistency_loss(maps, fwd.batch);

  // A zero weight leaves the term out of the graph entirely.
  t.total = t.ce;
  if (config.lambda_contrast > 0.0) t.total = add(t.total, scale(t.contrast, config.lambda_contrast));
  if (config.lambda_entropy > 0.0) t.total = add(t.total, scale(t.entropy, config.lambda_entropy));
  if (config.lambda_consistency > 0.0) t.total = add(t.total, scale(t.consistency, config.lambda_consistency));

  auto& r = t.report;
  r.ce = t.ce.value().item();
  r.contrast = t.contrast.value().item();
  r.entropy = t.entropy.value().item();
  r.consistency = t.consistency.value().item();
  r.total = t.total.value().item();
  r.pairs = count_pairs(labels);
  r.pair_terms_skipped = r.pairs == 0;
  return t;
}

std::string format_loss_line(std::size_t step, const BatchLossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g", step, r.ce, r.contrast, r.entropy,
                r.consistency, r.total);
  return buf;
}

}  // namespace cx
