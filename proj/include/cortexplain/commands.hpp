#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "cortexplain/config.hpp"
#include "cortexplain/gradcheck.hpp"
#include "cortexplain/metrics.hpp"
#include "cortexplain/training.hpp"

namespace cx {

// Command bodies behind the CLI. Each writes progress to `log`.

// Writes the cohort, manifest.jsonl and config.json under `out_dir`.
Manifest cmd_synth(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct TrainOutcome {
  TrainSummary summary;
  EvalResult test;
  std::filesystem::path checkpoint;
};
// Writes config.json, train_log.tsv, checkpoint.nexc and eval.json under
// `out_dir`. With `resume`, continues from checkpoint.nexc (parameters,
// running statistics, optimizer moments and step counter).
TrainOutcome cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, bool resume,
                       std::ostream& log);

AttentionDecoderNet load_model(const RunConfig& config, const std::filesystem::path& checkpoint);

EvalResult cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, const std::string& split,
                    std::ostream& log);

struct ExplainOptions {
  std::string method = "attention";
  double tau = 0.5;
  int target_class = -1;  // predicted class
  std::string gradcam_layer = "head";
  std::string split = "test";
  std::size_t max_subjects = 0;  // 0 = all
  bool ply = false;
};
// Exports per-subject ICOF maps (and PLY meshes) plus summary.json.
std::vector<ExplanationMap> cmd_explain(const RunConfig& config, const std::filesystem::path& checkpoint,
                                        const ExplainOptions& options, const std::filesystem::path& out_dir,
                                        std::ostream& log);

struct MetricsCommandOptions {
  // attention | cam | gradcam | random
  std::vector<std::string> methods{"attention", "cam", "gradcam", "random"};
  MetricOptions metric{};
  std::string gradcam_layer = "head";
  std::string split = "test";
  std::size_t max_subjects = 0;
};
// One metrics_<method>.json per method under `out_dir`.
std::vector<MetricReport> cmd_metrics(const RunConfig& config, const std::filesystem::path& checkpoint,
                                      const MetricsCommandOptions& options, const std::filesystem::path& out_dir,
                                      std::ostream& log);

// Maps for a list of samples; "random" draws uniform maps from `seed`.
std::vector<ExplanationMap> explain_all(const AttentionDecoderNet& model, std::span<const SurfaceSample> samples,
                                        const std::string& method, const std::string& gradcam_layer,
                                        std::uint64_t seed, int threads);

// Prints one line per check; true when all pass.
bool cmd_gradcheck(const GradCheckOptions& options, std::ostream& log, std::uint64_t suite_seed = 11);

struct AblationRow {
  std::string variant;
  ClassificationMetrics metrics;
  double step0_ce = 0.0;
};
// Trains {full, w/o contrast, w/o entropy, w/o consistency} with shared
// data and seeds under out_dir/<variant>, writes ablation.tsv.
std::vector<AblationRow> cmd_ablate(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace cx
