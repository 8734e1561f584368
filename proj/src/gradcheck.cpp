#include "cortexplain/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cortexplain/rng.hpp"

namespace cx {

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Parameter*>& params) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (auto* p : params) leaves.push_back(tape.parameter(*p));
  return f(tape, leaves).value().item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFunction& f, const std::vector<Parameter*>& params,
                           const GradCheckOptions& options) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    std::vector<Var> leaves;
    for (auto* p : params) leaves.push_back(tape.parameter(*p));
    tape.backward(f(tape, leaves));
  }
  Rng rng(options.seed);
  GradCheckReport report;
  auto rel_error = [&](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), options.rel_floor});
  };
  for (auto* p : params) {
    GradCheckEntry e;
    e.name = p->name;
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && coords.size() > options.max_coords_per_tensor) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (const auto i : coords) {
      const double orig = p->value[i];
      p->value[i] = orig + options.step;
      const double up = evaluate(f, params);
      p->value[i] = orig - options.step;
      const double down = evaluate(f, params);
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double analytic = p->grad[i];
      double abs_err = std::abs(analytic - numeric);
      double rel = rel_error(analytic, numeric);
      if (rel > options.tolerance && options.max_kink_fraction > 0.0) {
        // A ReLU/max/hinge switch inside [x-h, x+h] spoils the central
        // difference; away from it the difference converges again, so
        // retry with shorter steps.
        for (const double shrink : {0.1, 0.01}) {
          const double h = options.step * shrink;
          p->value[i] = orig + h;
          const double u = evaluate(f, params);
          p->value[i] = orig - h;
          const double d = evaluate(f, params);
          p->value[i] = orig;
          const double c = (u - d) / (2.0 * h);
          if (rel_error(analytic, c) <= options.tolerance) {
            rel = rel_error(analytic, c);
            abs_err = std::abs(analytic - c);
            ++e.kinks;
            break;
          }
        }
      }
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      e.max_rel_error = std::max(e.max_rel_error, rel);
      ++e.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.coords_checked += e.coords_checked;
    report.kinks += e.kinks;
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_error <= options.tolerance &&
                  static_cast<double>(report.kinks) <=
                      options.max_kink_fraction * static_cast<double>(report.coords_checked);
  return report;
}

}  // namespace cx
