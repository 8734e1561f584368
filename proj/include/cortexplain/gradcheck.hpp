#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cortexplain/autodiff.hpp"

namespace cx {

// Builds a scalar on `tape` from leaves created for each parameter, in the
// order the parameters were given. Must be deterministic.
using ScalarFunction = std::function<Var(Tape& tape, const std::vector<Var>& leaves)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error; keeps components that are
  // zero on both sides from dividing by zero.
  double rel_floor = 1e-6;
  // A coordinate that fails is retried at step/10 and step/100 (a kink
  // inside the original interval); at most this fraction of all
  // coordinates may pass that way (0 disables the retry).
  double max_kink_fraction = 0.01;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 7;
};

struct GradCheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t kinks = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t kinks = 0;
  bool passed = false;
};

// Compares tape gradients with central finite differences, coordinate by
// coordinate: rel = |g_tape - g_fd| / max(|g_tape|, |g_fd|, rel_floor).
GradCheckReport grad_check(const ScalarFunction& f, const std::vector<Parameter*>& params,
                           const GradCheckOptions& options = {});

}  // namespace cx

namespace cx {

struct SuiteResult {
  std::string name;
  GradCheckReport report;
  // Evaluation points rejected for sitting on a kink (full-model cases).
  std::size_t redraws = 0;
};

// Central-difference checks of every layer (hex conv, pooling, transposed
// conv, upsampling, self-attention, attention head, normalization) on
// level-1 meshes, of each loss term, and of the weighted total through a
// tiny full model at input level 3 (three poolings need level >= 3).
std::vector<SuiteResult> gradcheck_suite(const GradCheckOptions& options = {}, std::uint64_t seed = 11);

}  // namespace cx
