#include <algorithm>
#include <cmath>

#include "cortexplain/data.hpp"
#include "cortexplain/error.hpp"

namespace cx {

SplitResult make_splits(const Manifest& manifest, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidArgument("make_splits: train_fraction must lie in (0, 1)");
  }
  SplitResult out;
  out.train.base_dir = manifest.base_dir;
  out.test.base_dir = manifest.base_dir;
  Rng rng(seed);
  for (int label : {kFullterm, kPreterm}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      if (manifest.records[i].label == label) idx.push_back(i);
    }
    if (idx.empty()) {
      throw InvalidArgument(std::string("make_splits: no ") + (label == kPreterm ? "preterm" : "fullterm") +
                            " subjects");
    }
    rng.shuffle(idx.begin(), idx.end());
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      ManifestRecord r = manifest.records[idx[k]];
      r.split = k < n_train ? "train" : "test";
      (k < n_train ? out.train : out.test).records.push_back(std::move(r));
    }
  }
  return out;
}

ChannelStats compute_channel_stats(std::span<const SurfaceSample> train) {
  if (train.empty()) throw InvalidArgument("compute_channel_stats: no training samples");
  const std::size_t C = train[0].channels();
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  std::size_t n = 0;
  // Two passes for a stable variance.
  for (const auto& s : train) {
    if (s.channels() != C) throw ShapeError("compute_channel_stats: channel count differs between samples");
    for (const auto& f : s.features) {
      for (std::size_t v = 0; v < f.rows(); ++v) {
        for (std::size_t c = 0; c < C; ++c) sum[c] += f(v, c);
      }
      n += f.rows();
    }
  }
  ChannelStats st;
  st.mean.resize(C);
  st.stddev.resize(C);
  for (std::size_t c = 0; c < C; ++c) st.mean[c] = sum[c] / static_cast<double>(n);
  for (const auto& s : train) {
    for (const auto& f : s.features) {
      for (std::size_t v = 0; v < f.rows(); ++v) {
        for (std::size_t c = 0; c < C; ++c) sq[c] += (f(v, c) - st.mean[c]) * (f(v, c) - st.mean[c]);
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = std::sqrt(sq[c] / static_cast<double>(n));
    if (sd <= 1e-12 * std::max(1.0, std::abs(st.mean[c]))) {
      st.stddev[c] = 1.0;
      st.warnings.push_back("channel " + std::to_string(c) + " has zero variance; left unscaled");
    } else {
      st.stddev[c] = sd;
    }
  }
  return st;
}

void apply_normalization(SurfaceSample& sample, const ChannelStats& stats) {
  if (sample.channels() != stats.mean.size()) {
    throw ShapeError("apply_normalization: sample has " + std::to_string(sample.channels()) +
                     " channels, statistics have " + std::to_string(stats.mean.size()));
  }
  for (auto& f : sample.features) {
    for (std::size_t v = 0; v < f.rows(); ++v) {
      for (std::size_t c = 0; c < f.cols(); ++c) f(v, c) = (f(v, c) - stats.mean[c]) / stats.stddev[c];
    }
  }
}

std::vector<AugmentedItem> balanced_schedule(std::span<const int> labels, std::size_t per_class,
                                             std::uint64_t seed, std::uint64_t epoch) {
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kFullterm && labels[i] != kPreterm) throw InvalidArgument("balanced_schedule: bad label");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  if (per_class == 0) per_class = std::max(by_class[0].size(), by_class[1].size());
  Rng rng(derive_seed(seed, epoch, 0x5c4ed));
  std::vector<AugmentedItem> out;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    std::vector<std::size_t> order = members;
    for (std::size_t k = 0; k < per_class; ++k) {
      if (k % order.size() == 0) rng.shuffle(order.begin(), order.end());
      out.push_back({order[k % order.size()], 0});
    }
  }
  rng.shuffle(out.begin(), out.end());
  for (std::size_t k = 0; k < out.size(); ++k) out[k].seed = derive_seed(seed, epoch, k + 1);
  return out;
}

}  // namespace cx
