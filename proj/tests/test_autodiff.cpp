#include <cmath>
#include <memory>
#include <numeric>

#include "cortexplain/autodiff.hpp"
#include "cortexplain/error.hpp"
#include "cortexplain/gradcheck.hpp"
#include "cortexplain/optim.hpp"
#include "cortexplain/rng.hpp"
#include "doctest.h"

using namespace cx;

namespace {

Tensor randn(Rng& rng, std::size_t r, std::size_t c, double s = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.values()) v = s * rng.normal();
  return t;
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.5);
  return t;
}

// Random projection so each output element gets its own weight.
Var project(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.tape().constant(randn(rng, y.rows(), y.cols()))), Axis::kAll);
}

struct Check {
  std::vector<std::unique_ptr<Parameter>> owned;
  std::vector<Parameter*> params;
  Parameter& add(Tensor v) {
    owned.push_back(std::make_unique<Parameter>(Parameter{"p" + std::to_string(owned.size()), std::move(v), {}}));
    params.push_back(owned.back().get());
    return *owned.back();
  }
  double run(const ScalarFunction& f) {
    GradCheckOptions o;
    o.max_kink_fraction = 0.0;  // smooth inputs only here
    const auto rep = grad_check(f, params, o);
    return rep.max_rel_error;
  }
};

constexpr double kPrimTol = 1e-6;

}  // namespace

TEST_CASE("matmul forward matches a triple loop and its gradient matches finite differences") {
  Rng rng(1);
  const Tensor a = randn(rng, 5, 4), b = randn(rng, 4, 3);
  Tape tape;
  const Var c = matmul(tape.constant(a), tape.constant(b));
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      CHECK(c.value()(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
  }
  Check ck;
  ck.add(a);
  ck.add(b);
  CHECK(ck.run([](Tape&, const std::vector<Var>& p) { return project(matmul(p[0], p[1]), 2); }) <= kPrimTol);
}

TEST_CASE("elementwise and broadcast primitives pass gradcheck at 1e-6") {
  Rng rng(3);
  {
    Check ck;
    ck.add(randn(rng, 4, 3));
    ck.add(randn(rng, 4, 3));
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) {
      return add(add(project(add(p[0], p[1]), 1), project(sub(p[0], p[1]), 2)), project(mul(p[0], p[1]), 3));
    }) <= kPrimTol);
  }
  {
    Check ck;
    ck.add(randn(rng, 4, 3));
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) {
      return project(add_scalar(scale(p[0], -1.7), 0.3), 4);
    }) <= kPrimTol);
  }
  {
    Check ck;
    ck.add(randn(rng, 5, 3));
    ck.add(randn(rng, 1, 3));
    ck.add(randn(rng, 5, 1));
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) {
      return add(add(project(add_row(p[0], p[1]), 5), project(mul_row(p[0], p[1]), 6)),
                 project(mul_col(p[0], p[2]), 7));
    }) <= kPrimTol);
  }
  {
    Check ck;
    ck.add(away_from_zero(rng, 6, 2));
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) {
      return add(project(relu(p[0]), 8), project(sigmoid(p[0]), 9));
    }) <= kPrimTol);
  }
  {
    Check ck;
    Tensor pos = Tensor::matrix(4, 3);
    for (auto& v : pos.values()) v = rng.uniform(0.1, 2.0);
    ck.add(pos);
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) { return project(log_clamped(p[0]), 10); }) <= kPrimTol);
  }
}

TEST_CASE("shape and indexing primitives pass gradcheck at 1e-6") {
  Rng rng(4);
  Check ck;
  ck.add(randn(rng, 6, 4));
  ck.add(randn(rng, 2, 4));
  const IndexList idx = make_indices({5, 0, 0, 3, 2, 5, 1});
  CHECK(ck.run([idx](Tape&, const std::vector<Var>& p) {
    Var s = project(transpose(p[0]), 1);
    s = add(s, project(reshape(p[0], 3, 8), 2));
    s = add(s, project(gather_rows(p[0], idx), 3));
    s = add(s, project(concat({p[0], p[1]}, 0), 4));
    s = add(s, project(concat({slice_rows(p[0], 0, 2), p[1]}, 1), 5));
    s = add(s, project(slice_rows(p[0], 2, 3), 6));
    s = add(s, project(slice_cols(p[0], 1, 2), 7));
    return s;
  }) <= kPrimTol);
}

TEST_CASE("reductions pass gradcheck at 1e-6") {
  Rng rng(5);
  Check ck;
  ck.add(randn(rng, 6, 3));
  CHECK(ck.run([](Tape&, const std::vector<Var>& p) {
    Var s = project(sum(p[0], Axis::kRows), 1);
    s = add(s, project(sum(p[0], Axis::kCols), 2));
    s = add(s, sum(p[0], Axis::kAll));
    s = add(s, project(mean(p[0], Axis::kRows), 3));
    s = add(s, project(mean(p[0], Axis::kCols), 4));
    s = add(s, project(segment_sum(p[0], 2), 5));
    s = add(s, project(segment_mean(p[0], 3), 6));
    s = add(s, project(softmax(p[0], 0), 7));
    s = add(s, project(softmax(p[0], 1), 8));
    s = add(s, project(row_norm(p[0]), 9));
    s = add(s, project(row_normalize(p[0]), 10));
    return s;
  }) <= kPrimTol);
}

TEST_CASE("max, min-max, cross entropy and batch norm pass gradcheck at 1e-6") {
  Rng rng(6);
  {
    Check ck;
    // Distinct values so every argmax is strict.
    Tensor x = Tensor::matrix(8, 2);
    std::vector<double> vals(16);
    std::iota(vals.begin(), vals.end(), 0.0);
    rng.shuffle(vals.begin(), vals.end());
    for (std::size_t i = 0; i < 16; ++i) x[i] = 0.3 * vals[i];
    ck.add(x);
    const IndexList groups = make_indices({0, 1, 2, 3, 4, 2, 5, 6, 7, 0, 1, 7});
    CHECK(ck.run([groups](Tape&, const std::vector<Var>& p) {
      return project(max_over_groups(p[0], groups, 4), 1);
    }) <= kPrimTol);
  }
  {
    Check ck;
    Tensor x = Tensor::matrix(10, 1);
    for (std::size_t i = 0; i < 10; ++i) x[i] = 0.37 * static_cast<double>((i * 7) % 10) + 0.01 * rng.normal();
    ck.add(x);
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) { return project(minmax_normalize(p[0], 5), 2); }) <= kPrimTol);
  }
  {
    Check ck;
    ck.add(randn(rng, 5, 2));
    const std::vector<int> labels{0, 1, 1, 0, 1};
    CHECK(ck.run([labels](Tape&, const std::vector<Var>& p) {
      return project(cross_entropy(p[0], labels), 3);
    }) <= kPrimTol);
  }
  {
    Check ck;
    ck.add(randn(rng, 7, 3));
    ck.add(randn(rng, 1, 3));
    ck.add(randn(rng, 1, 3));
    CHECK(ck.run([](Tape&, const std::vector<Var>& p) {
      return project(batch_norm(p[0], p[1], p[2], 1e-5), 4);
    }) <= kPrimTol);
  }
}

TEST_CASE("forward values of the nonlinear primitives") {
  Tape tape;
  const Var z = tape.constant(Tensor::matrix(3, 2, 0.0));
  const Var ce = cross_entropy(z, {0, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) CHECK(ce.value()[i] == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  Rng rng(7);
  const Var x = tape.constant(randn(rng, 4, 5));
  const Var s1 = softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double t = 0.0;
    for (std::size_t c = 0; c < 5; ++c) t += s1.value()(r, c);
    CHECK(t == doctest::Approx(1.0).epsilon(1e-14));
  }

  BatchStats st;
  const Var bn = batch_norm(x, tape.constant(Tensor::matrix(1, 5, 1.0)), tape.constant(Tensor::matrix(1, 5)), 0.0, &st);
  for (std::size_t c = 0; c < 5; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t r = 0; r < 4; ++r) m += bn.value()(r, c) / 4.0;
    for (std::size_t r = 0; r < 4; ++r) v += std::pow(bn.value()(r, c) - m, 2) / 4.0;
    CHECK(std::abs(m) < 1e-14);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }

  Tensor col = Tensor::matrix(6, 1);
  for (std::size_t i = 0; i < 6; ++i) col[i] = static_cast<double>(i) * 2.0 - 1.0;
  col[5] = col[4] = col[3] = 7.0;  // constant second block
  const Var mm = minmax_normalize(tape.constant(col), 3);
  CHECK(mm.value()[0] == 0.0);
  CHECK(mm.value()[2] == 1.0);
  CHECK(mm.value()[1] == doctest::Approx(0.5));
  for (std::size_t i = 3; i < 6; ++i) CHECK(mm.value()[i] == 0.5);

  const Var lc = log_clamped(tape.constant(Tensor::matrix(1, 1, 0.0)), 1e-12);
  CHECK(lc.value()[0] == doctest::Approx(std::log(1e-12)));
}

TEST_CASE("gradients accumulate over every use of a node") {
  Parameter p{"p", Tensor::matrix(1, 1, 3.0), {}};
  Tape tape;
  const Var x = tape.parameter(p);
  tape.backward(add(mul(x, x), scale(x, 2.0)));  // d/dx = 2x + 2
  CHECK(p.grad[0] == doctest::Approx(8.0));
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("tape misuse and bad shapes throw") {
  Tape tape;
  const Var a = tape.variable(Tensor::matrix(2, 3, 1.0));
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(add(a, tape.constant(Tensor::matrix(3, 2))), ShapeError);
  CHECK_THROWS_AS(gather_rows(a, make_indices({2})), ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
  const Var s = sum(a, Axis::kAll);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), InvalidArgument);

  Tape frozen(false);
  const Var b = frozen.variable(Tensor::matrix(1, 1, 1.0));
  CHECK_THROWS_AS(frozen.backward(b), InvalidArgument);
}

TEST_CASE("grad_check catches a wrong gradient") {
  // The tape sees p only through a constant copy, so its gradient is 0.
  Parameter p{"p", Tensor::matrix(2, 2, 0.5), {}};
  const ScalarFunction f = [&p](Tape& tape, const std::vector<Var>& leaves) {
    return add(sum(mul(leaves[0], leaves[0]), Axis::kAll), sum(tape.constant(p.value), Axis::kAll));
  };
  const auto rep = grad_check(f, {&p});
  CHECK_FALSE(rep.passed);
  CHECK(rep.max_rel_error > 0.1);

  const ScalarFunction g = [](Tape&, const std::vector<Var>& leaves) {
    return sum(mul(leaves[0], leaves[0]), Axis::kAll);
  };
  CHECK(grad_check(g, {&p}).passed);
}

TEST_CASE("grad_check retries a kink with shorter steps, within a budget") {
  // relu at 3e-6 from its kink: the 1e-5 central difference straddles it.
  Parameter p{"p", Tensor::matrix(1, 1, 3e-6), {}};
  const ScalarFunction f = [](Tape&, const std::vector<Var>& l) { return sum(relu(l[0]), Axis::kAll); };
  GradCheckOptions strict;
  strict.max_kink_fraction = 0.0;
  CHECK_FALSE(grad_check(f, {&p}, strict).passed);
  GradCheckOptions kink;
  kink.max_kink_fraction = 1.0;
  const auto rep = grad_check(f, {&p}, kink);
  CHECK(rep.passed);
  CHECK(rep.kinks == 1);
  GradCheckOptions budget;  // one kinked coordinate out of one exceeds 1%
  CHECK_FALSE(grad_check(f, {&p}, budget).passed);
}

TEST_CASE("Adam: first step moves each coordinate by lr against the gradient sign") {
  Parameter p{"p", Tensor::matrix(1, 3), {}};
  p.grad = Tensor::matrix(1, 3);
  p.grad[0] = 2.5;
  p.grad[1] = -0.01;
  p.grad[2] = 40.0;
  AdamState st;
  adam_step({&p}, st);
  CHECK(p.value[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(p.value[1] == doctest::Approx(1e-3).epsilon(1e-5));
  CHECK(p.value[2] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(st.step == 1);
}

TEST_CASE("Adam matches a hand-rolled update over several steps") {
  Rng rng(9);
  Parameter p{"p", randn(rng, 2, 2), {}};
  Tensor ref = p.value;
  std::vector<double> m(4, 0.0), v(4, 0.0);
  AdamState st;
  st.config.lr = 0.01;
  for (int t = 1; t <= 5; ++t) {
    p.grad = randn(rng, 2, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      const double g = p.grad[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    adam_step({&p}, st);
  }
  CHECK(max_abs_diff(p.value, ref) < 1e-15);
}

TEST_CASE("Adam minimizes a quadratic") {
  Parameter p{"p", Tensor::matrix(1, 2, 3.0), {}};
  AdamState st;
  st.config.lr = 0.05;
  for (int i = 0; i < 2000; ++i) {
    p.zero_grad();
    Tape tape;
    const Var x = tape.parameter(p);
    tape.backward(sum(mul(add_scalar(x, -1.0), add_scalar(x, -1.0)), Axis::kAll));
    adam_step({&p}, st);
  }
  CHECK(p.value[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(p.value[1] == doctest::Approx(1.0).epsilon(1e-3));
}
