#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "cortexplain/config.hpp"
#include "cortexplain/losses.hpp"
#include "cortexplain/metrics.hpp"
#include "cortexplain/model.hpp"
#include "cortexplain/optim.hpp"

namespace cx {

struct PreparedData {
  // As stored (usually above the input level), split by manifest tag.
  std::vector<SurfaceSample> train_high;
  std::vector<SurfaceSample> test_high;
  // Full-footprint coarsening to the input level, then normalized.
  std::vector<SurfaceSample> train_input;
  std::vector<SurfaceSample> test_input;
  // Training-set statistics; the model sees normalized features.
  ChannelStats stats;
  // Training-set channel means in model input space (fidelity baseline).
  std::vector<double> baseline;
};

PreparedData prepare_data(const Manifest& manifest, int input_level);

struct TrainHooks {
  std::ostream* log = nullptr;              // one loss line per step
  std::filesystem::path checkpoint;         // empty: no checkpoints
  std::function<void(std::size_t step, const BatchLossReport&)> on_step;
};

struct TrainSummary {
  std::size_t first_step = 0;
  std::size_t steps = 0;  // optimizer step count at return
  std::vector<BatchLossReport> reports;
};

// Runs from the optimizer's current step (zero for a fresh run) to the end
// of the configured epochs or train.max_steps. Batches are a pure function
// of (train.seed, epoch), so a resumed run sees the same batches.
TrainSummary train_model(AttentionDecoderNet& model, AdamState& adam, const PreparedData& data,
                         const RunConfig& config, const TrainHooks& hooks = {});

std::size_t steps_per_epoch(const PreparedData& data, const RunConfig& config);

struct EvalResult {
  std::vector<double> scores;  // logit(preterm) - logit(fullterm)
  std::vector<int> labels;
  ClassificationMetrics metrics;
};
EvalResult evaluate_model(const AttentionDecoderNet& model, std::span<const SurfaceSample> samples, int threads = 1);

// Runs fn(i) for i in [0, n) over `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace cx
