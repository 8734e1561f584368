#include "cortexplain/training.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "cortexplain/checkpoint.hpp"
#include "cortexplain/error.hpp"

namespace cx {

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

PreparedData prepare_data(const Manifest& manifest, int input_level) {
  PreparedData d;
  for (const auto& r : manifest.records) {
    if (r.split != "train" && r.split != "test") {
      throw FormatError("manifest: subject " + r.subject_id + " has split '" + r.split + "'");
    }
    SurfaceSample s = load_sample(r, manifest.base_dir);
    if (s.level < input_level) {
      throw ShapeError("subject " + r.subject_id + " is stored at level " + std::to_string(s.level) +
                       ", below the input level " + std::to_string(input_level));
    }
    (r.split == "train" ? d.train_high : d.test_high).push_back(std::move(s));
  }
  if (d.train_high.empty()) throw InvalidArgument("manifest has no training subjects");
  // Averaging commutes with the per-channel affine map, so statistics of the
  // stored surfaces serve every coarsening of them.
  d.stats = compute_channel_stats(d.train_high);
  Rng unused(0);
  const auto full = CoarsenOptions::deterministic();
  for (auto* pair : {&d.train_high, &d.test_high}) {
    auto& dst = pair == &d.train_high ? d.train_input : d.test_input;
    for (const auto& s : *pair) {
      SurfaceSample c = coarsen_random(s, input_level, unused, full);
      apply_normalization(c, d.stats);
      dst.push_back(std::move(c));
    }
  }
  const ChannelStats in = compute_channel_stats(d.train_input);
  d.baseline = in.mean;
  return d;
}

namespace {

std::vector<AugmentedItem> epoch_schedule(const PreparedData& data, const RunConfig& cfg, std::uint64_t epoch) {
  std::vector<int> labels;
  for (const auto& s : data.train_input) labels.push_back(s.label);
  if (cfg.train.augment) return balanced_schedule(labels, cfg.train.per_class, cfg.train.seed, epoch);
  std::vector<AugmentedItem> items(labels.size());
  for (std::size_t i = 0; i < items.size(); ++i) items[i].index = i;
  Rng rng(derive_seed(cfg.train.seed, epoch, 0x0a11));
  rng.shuffle(items.begin(), items.end());
  return items;
}

}  // namespace

std::size_t steps_per_epoch(const PreparedData& data, const RunConfig& cfg) {
  const std::size_t n = epoch_schedule(data, cfg, 0).size();
  const auto b = static_cast<std::size_t>(cfg.train.batch_size);
  return (n + b - 1) / b;
}

TrainSummary train_model(AttentionDecoderNet& model, AdamState& adam, const PreparedData& data,
                         const RunConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const int L = model.config().input_level;
  const std::size_t spe = steps_per_epoch(data, cfg);
  const auto batch = static_cast<std::size_t>(cfg.train.batch_size);
  const std::size_t total = spe * static_cast<std::size_t>(cfg.train.epochs);
  const std::size_t stop = cfg.train.max_steps > 0 ? std::min(total, cfg.train.max_steps) : total;
  adam.config = cfg.train.adam;
  TrainSummary summary;
  summary.first_step = adam.step;
  auto params = model.state().parameters();
  std::size_t step = adam.step;
  while (step < stop) {
    const std::size_t epoch = step / spe;
    const auto schedule = epoch_schedule(data, cfg, epoch);
    for (std::size_t k = step % spe; k < spe && step < stop; ++k) {
      std::vector<SurfaceSample> inputs;
      std::vector<int> labels;
      for (std::size_t i = k * batch; i < std::min(schedule.size(), (k + 1) * batch); ++i) {
        const auto& item = schedule[i];
        if (cfg.train.augment) {
          Rng rng(item.seed);
          SurfaceSample s = coarsen_random(data.train_high[item.index], L, rng, cfg.train.coarsen);
          apply_normalization(s, data.stats);
          inputs.push_back(std::move(s));
        } else {
          inputs.push_back(data.train_input[item.index]);
        }
        labels.push_back(inputs.back().label);
      }
      std::vector<const SurfaceSample*> ptrs;
      for (const auto& s : inputs) ptrs.push_back(&s);

      model.state().zero_grad();
      Tape tape;
      const ForwardResult fwd = model.forward(tape, ptrs, {Mode::kTrain, true});
      const LossTerms losses = compute_losses(fwd, labels, cfg.loss);
      if (!std::isfinite(losses.report.total)) {
        throw NumericError("training: non-finite loss at step " + std::to_string(step));
      }
      tape.backward(losses.total);
      adam_step(params, adam);
      model.commit_batch_stats(fwd);
      step = adam.step;

      if (hooks.log) *hooks.log << format_loss_line(step - 1, losses.report) << '\n' << std::flush;
      if (hooks.on_step) hooks.on_step(step - 1, losses.report);
      summary.reports.push_back(losses.report);
      const bool epoch_end = step % spe == 0 || step == stop;
      const bool periodic = cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0;
      if (!hooks.checkpoint.empty() && (epoch_end || periodic)) {
        save_checkpoint(hooks.checkpoint, model.state(), &adam);
      }
    }
  }
  summary.steps = step;
  return summary;
}

EvalResult evaluate_model(const AttentionDecoderNet& model, std::span<const SurfaceSample> samples, int threads) {
  EvalResult r;
  r.scores.resize(samples.size());
  r.labels.resize(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto logits = model.predict(samples[i]);
    r.scores[i] = logits[1] - logits[0];
    r.labels[i] = samples[i].label;
  });
  r.metrics = classification_metrics(r.scores, r.labels);
  return r;
}

}  // namespace cx
