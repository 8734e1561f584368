#include "cortexplain/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cortexplain/error.hpp"

namespace cx {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
MatMap as_mat(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_fail(op, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

std::string dims(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Var::grad() const {
  if (!tape_->has_grad(id_)) throw InvalidArgument("no gradient reached this node");
  return tape_->grad_view(id_);
}

bool Var::has_grad() const { return tape_->has_grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw InvalidArgument("tape: too many nodes");
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Tape::check_owner(const Var& v, const char* op) const {
  if (v.tape_ != this) throw InvalidArgument(std::string(op) + ": variable belongs to another tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& param) {
  Node n;
  n.value = param.value;
  n.requires_grad = recording_;
  n.param = &param;
  return push(std::move(n));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const auto& v : inputs) {
      check_owner(v, "record");
      if (nodes_[v.id_].requires_grad) n.requires_grad = true;
    }
  } else {
    for (const auto& v : inputs) check_owner(v, "record");
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Tensor& Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  check_owner(loss, "backward");
  if (!recording_) throw InvalidArgument("backward: tape recorded without gradients");
  if (consumed_) throw InvalidArgument("backward: tape already consumed");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.value().shape()));
  }
  grad(loss.id_).fill(1.0);
  for (std::int64_t id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(id));
    if (n.param) {
      if (n.param->grad.size() != n.grad.size()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
  consumed_ = true;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same("add", a.value(), b.value());
  Tensor out = a.value();
  out += b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    t.grad(ia) += t.grad(self);
  });
}

Var add_row(const Var& x, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    shape_fail("add_row", "bias " + shape_string(bv.shape()) + " for input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t R = xv.rows(), C = xv.cols();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += bv[c];
  }
  const auto ix = x.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, b}, [ix, ib, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ix)) t.grad(ix) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
      }
    }
  });
}

Var mul_row(const Var& x, const Var& rvec) {
  const Tensor& xv = x.value();
  const Tensor& rv = rvec.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    shape_fail("mul_row", "row " + shape_string(rv.shape()) + " for input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t R = xv.rows(), C = xv.cols();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] *= rv[c];
  }
  const auto ix = x.id(), ir = rvec.id();
  return x.tape().record(std::move(out), {x, rvec}, [ix, ir, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ix)) {
      const Tensor& rv = t.value(ir);
      Tensor& gx = t.grad(ix);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] * rv[c];
      }
    }
    if (t.requires_grad(ir)) {
      const Tensor& xv = t.value(ix);
      Tensor& gr = t.grad(ir);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) gr[c] += g[r * C + c] * xv[r * C + c];
      }
    }
  });
}

Var mul_col(const Var& x, const Var& gate) {
  const Tensor& xv = x.value();
  const Tensor& gv = gate.value();
  if (gv.cols() != 1 || gv.rows() != xv.rows()) {
    shape_fail("mul_col", "gate " + shape_string(gv.shape()) + " for input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t R = xv.rows(), C = xv.cols();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] *= gv[r];
  }
  const auto ix = x.id(), ig = gate.id();
  return x.tape().record(std::move(out), {x, gate}, [ix, ig, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ix)) {
      const Tensor& gv = t.value(ig);
      Tensor& gx = t.grad(ix);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] * gv[r];
      }
    }
    if (t.requires_grad(ig)) {
      const Tensor& xv = t.value(ix);
      Tensor& gg = t.grad(ig);
      for (std::size_t r = 0; r < R; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += g[r * C + c] * xv[r * C + c];
        gg[r] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    shape_fail("matmul", dims(av.rows(), av.cols()) + " times " + dims(bv.rows(), bv.cols()));
  }
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) as_mat(t.grad(ia)).noalias() += as_mat(g) * as_mat(t.value(ib)).transpose();
    if (t.requires_grad(ib)) as_mat(t.grad(ib)).noalias() += as_mat(t.value(ia)).transpose() * as_mat(g);
  });
}

Var transpose(const Var& a) {
  const Tensor& av = a.value();
  Tensor out = Tensor::matrix(av.cols(), av.rows());
  as_mat(out) = as_mat(av).transpose();
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    as_mat(t.grad(ia)) += as_mat(t.grad(self)).transpose();
  });
}

Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  Tensor out = a.value();
  if (rows * cols != out.size()) {
    shape_fail("reshape", shape_string(out.shape()) + " -> " + dims(rows, cols));
  }
  out.reshape({rows, cols});
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var gather_rows(const Var& x, const IndexList& idx) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols(), n = idx->size();
  Tensor out = Tensor::matrix(n, C);
  const auto& ix_list = *idx;
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = ix_list[i];
    if (src >= R) {
      shape_fail("gather_rows", "index " + std::to_string(src) + " out of range for " +
                                    std::to_string(R) + " rows");
    }
    std::copy_n(xv.data() + src * C, C, out.data() + i * C);
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, idx, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    const auto& list = *idx;
    for (std::size_t i = 0; i < list.size(); ++i) {
      double* dst = gx.data() + std::size_t{list[i]} * C;
      const double* src = g.data() + i * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
  std::vector<std::size_t> offsets;
  std::size_t R = 0, C = 0;
  if (axis == 0) {
    C = parts[0].cols();
    for (const auto& p : parts) {
      if (p.cols() != C) shape_fail("concat", "column mismatch along axis 0");
      offsets.push_back(R);
      R += p.rows();
    }
  } else {
    R = parts[0].rows();
    for (const auto& p : parts) {
      if (p.rows() != R) shape_fail("concat", "row mismatch along axis 1");
      offsets.push_back(C);
      C += p.cols();
    }
  }
  Tensor out = Tensor::matrix(R, C);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::size_t pr = pv.rows(), pc = pv.cols();
    for (std::size_t r = 0; r < pr; ++r) {
      const std::size_t dst = axis == 0 ? (offsets[k] + r) * C : r * C + offsets[k];
      std::copy_n(pv.data() + r * pc, pc, out.data() + dst);
    }
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(out), parts, [ids, offsets, axis, C](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& gp = t.grad(ids[k]);
          const std::size_t pr = gp.rows(), pc = gp.cols();
          for (std::size_t r = 0; r < pr; ++r) {
            const std::size_t src = axis == 0 ? (offsets[k] + r) * C : r * C + offsets[k];
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[src + c];
          }
        }
      });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.rows()) shape_fail("slice_rows", "range exceeds " + std::to_string(xv.rows()));
  const std::size_t C = xv.cols();
  Tensor out = Tensor::matrix(count, C);
  std::copy_n(xv.data() + begin * C, count * C, out.data());
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, begin, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    double* dst = gx.data() + begin * C;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.cols()) shape_fail("slice_cols", "range exceeds " + std::to_string(xv.cols()));
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor out = Tensor::matrix(R, count);
  for (std::size_t r = 0; r < R; ++r) std::copy_n(xv.data() + r * C + begin, count, out.data() + r * count);
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, begin, count, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < count; ++c) gx[r * C + begin + c] += g[r * count + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var softmax(const Var& x, int axis) {
  if (axis != 0 && axis != 1) shape_fail("softmax", "axis must be 0 or 1");
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  // Iterate `lines` independent vectors of length `len` with stride `step`.
  const std::size_t lines = axis == 1 ? R : C;
  const std::size_t len = axis == 1 ? C : R;
  const std::size_t step = axis == 1 ? 1 : C;
  const std::size_t line_step = axis == 1 ? C : 1;
  Tensor out = xv;
  for (std::size_t l = 0; l < lines; ++l) {
    double* p = out.data() + l * line_step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, p[k * step]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      p[k * step] = std::exp(p[k * step] - mx);
      z += p[k * step];
    }
    for (std::size_t k = 0; k < len; ++k) p[k * step] /= z;
  }
  const auto ix = x.id();
  return x.tape().record(
      std::move(out), {x}, [ix, lines, len, step, line_step](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t l = 0; l < lines; ++l) {
          const std::size_t base = l * line_step;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * step] * y[base + k * step];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * step;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      });
}

Var log_clamped(const Var& x, double floor) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::log(std::max(v, floor));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, floor](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > floor) gx[i] += g[i] / xv[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

Var reduce_sum(const Var& x, Axis axis, double factor) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor out;
  switch (axis) {
    case Axis::kRows:
      out = Tensor::matrix(1, C);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) out[c] += xv[r * C + c];
      }
      break;
    case Axis::kCols:
      out = Tensor::matrix(R, 1);
      for (std::size_t r = 0; r < R; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += xv[r * C + c];
        out[r] = acc;
      }
      break;
    case Axis::kAll: {
      out = Tensor::matrix(1, 1);
      double acc = 0.0;
      for (double v : xv.values()) acc += v;
      out[0] = acc;
      break;
    }
  }
  for (auto& v : out.values()) v *= factor;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, axis, factor, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) {
        const double gi = axis == Axis::kRows ? g[c] : axis == Axis::kCols ? g[r] : g[0];
        gx[r * C + c] += factor * gi;
      }
    }
  });
}

}  // namespace

Var sum(const Var& x, Axis axis) { return reduce_sum(x, axis, 1.0); }

Var mean(const Var& x, Axis axis) {
  const Tensor& xv = x.value();
  const std::size_t n = axis == Axis::kRows ? xv.rows() : axis == Axis::kCols ? xv.cols() : xv.size();
  if (n == 0) shape_fail("mean", "empty reduction");
  return reduce_sum(x, axis, 1.0 / static_cast<double>(n));
}

Var max_over_groups(const Var& x, const IndexList& groups, std::size_t k) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  if (k == 0 || groups->size() % k != 0) shape_fail("max_over_groups", "group table not a multiple of k");
  const std::size_t G = groups->size() / k;
  Tensor out = Tensor::matrix(G, C);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(G * C);
  const auto& gl = *groups;
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t j = 0; j < k; ++j) {
      if (gl[g * k + j] >= R) {
        shape_fail("max_over_groups", "index " + std::to_string(gl[g * k + j]) + " out of range for " +
                                          std::to_string(R) + " rows");
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      std::uint32_t best = gl[g * k];
      double bv = xv[best * C + c];
      for (std::size_t j = 1; j < k; ++j) {
        const auto r = gl[g * k + j];
        if (xv[r * C + c] > bv) {
          bv = xv[r * C + c];
          best = r;
        }
      }
      out[g * C + c] = bv;
      (*argmax)[g * C + c] = best;
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, argmax, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    const auto& am = *argmax;
    for (std::size_t i = 0; i < am.size(); ++i) gx[std::size_t{am[i]} * C + i % C] += g[i];
  });
}

Var segment_sum(const Var& x, std::size_t block) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  if (block == 0 || R % block != 0) {
    shape_fail("segment_sum", std::to_string(R) + " rows not divisible by " + std::to_string(block));
  }
  const std::size_t S = R / block;
  Tensor out = Tensor::matrix(S, C);
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t s = r / block;
    for (std::size_t c = 0; c < C; ++c) out[s * C + c] += xv[r * C + c];
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, block, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t r = 0; r < R; ++r) {
      const std::size_t s = r / block;
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[s * C + c];
    }
  });
}

Var segment_mean(const Var& x, std::size_t block) {
  return scale(segment_sum(x, block), 1.0 / static_cast<double>(block));
}

Var row_norm(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor out = Tensor::matrix(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += xv[r * C + c] * xv[r * C + c];
    out[r] = std::sqrt(acc);
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, R, C](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t r = 0; r < R; ++r) {
      if (y[r] <= 0.0) continue;
      const double s = g[r] / y[r];
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += s * xv[r * C + c];
    }
  });
}

Var row_normalize(const Var& x, double eps) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  auto norms = std::make_shared<std::vector<double>>(R);
  Tensor out = Tensor::matrix(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += xv[r * C + c] * xv[r * C + c];
    const double n = std::max(std::sqrt(acc), eps);
    (*norms)[r] = n;
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xv[r * C + c] / n;
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, R, C, eps, norms](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t r = 0; r < R; ++r) {
      const double n = (*norms)[r];
      // Below eps the divisor is a constant.
      double yg = 0.0;
      if (n > eps) {
        for (std::size_t c = 0; c < C; ++c) yg += y[r * C + c] * g[r * C + c];
      }
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += (g[r * C + c] - y[r * C + c] * yg) / n;
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& lv = logits.value();
  const std::size_t R = lv.rows(), K = lv.cols();
  if (labels.size() != R) shape_fail("cross_entropy", "label count differs from logit rows");
  auto probs = std::make_shared<Tensor>(Tensor::matrix(R, K));
  Tensor out = Tensor::matrix(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= K) {
      shape_fail("cross_entropy", "label out of range");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, lv[r * K + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(lv[r * K + k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k) (*probs)[r * K + k] = std::exp(lv[r * K + k] - lse);
    out[r] = lse - lv[r * K + static_cast<std::size_t>(labels[r])];
  }
  const auto il = logits.id();
  return logits.tape().record(std::move(out), {logits}, [il, probs, labels, K](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gl = t.grad(il);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      for (std::size_t k = 0; k < K; ++k) {
        const double onehot = static_cast<std::size_t>(labels[r]) == k ? 1.0 : 0.0;
        gl[r * K + k] += g[r] * ((*probs)[r * K + k] - onehot);
      }
    }
  });
}

Var minmax_normalize(const Var& x, std::size_t block) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows();
  if (xv.cols() != 1) shape_fail("minmax_normalize", "expects a column vector");
  if (block == 0 || R % block != 0) shape_fail("minmax_normalize", "rows not divisible by block");
  const std::size_t S = R / block;
  struct Seg {
    std::size_t lo, hi;
    double range;
  };
  auto segs = std::make_shared<std::vector<Seg>>(S);
  Tensor out = Tensor::matrix(R, 1);
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t lo = s * block, hi = s * block;
    for (std::size_t i = s * block; i < (s + 1) * block; ++i) {
      if (xv[i] < xv[lo]) lo = i;
      if (xv[i] > xv[hi]) hi = i;
    }
    const double range = xv[hi] - xv[lo];
    (*segs)[s] = {lo, hi, range};
    for (std::size_t i = s * block; i < (s + 1) * block; ++i) {
      out[i] = range > 1e-12 ? (xv[i] - xv[lo]) / range : 0.5;
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, segs, block](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t s = 0; s < segs->size(); ++s) {
      const Seg& sg = (*segs)[s];
      if (sg.range <= 1e-12) continue;
      double to_lo = 0.0, to_hi = 0.0;
      for (std::size_t i = s * block; i < (s + 1) * block; ++i) {
        gx[i] += g[i] / sg.range;
        to_lo += g[i] * (y[i] - 1.0) / sg.range;
        to_hi -= g[i] * y[i] / sg.range;
      }
      gx[sg.lo] += to_lo;
      gx[sg.hi] += to_hi;
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  if (gamma.value().size() != C || beta.value().size() != C) {
    shape_fail("batch_norm", "affine parameters do not match " + std::to_string(C) + " channels");
  }
  if (R == 0) shape_fail("batch_norm", "empty batch");
  Tensor mu = Tensor::matrix(1, C), var = Tensor::matrix(1, C);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) mu[c] += xv[r * C + c];
  }
  for (auto& v : mu.values()) v /= static_cast<double>(R);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const double d = xv[r * C + c] - mu[c];
      var[c] += d * d;
    }
  }
  for (auto& v : var.values()) v /= static_cast<double>(R);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
  auto xhat = std::make_shared<Tensor>(Tensor::matrix(R, C));
  Tensor out = Tensor::matrix(R, C);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (xv[r * C + c] - mu[c]) * (*inv_std)[c];
      (*xhat)[r * C + c] = h;
      out[r * C + c] = gv[c] * h + bv[c];
    }
  }
  if (stats) *stats = {mu, var};
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta}, [ix, ig, ib, xhat, inv_std, R, C](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        std::vector<double> sum_g(C, 0.0), sum_gh(C, 0.0);
        for (std::size_t r = 0; r < R; ++r) {
          for (std::size_t c = 0; c < C; ++c) {
            sum_g[c] += g[r * C + c];
            sum_gh[c] += g[r * C + c] * (*xhat)[r * C + c];
          }
        }
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad(ig);
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gh[c];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (t.requires_grad(ix)) {
          const Tensor& gamma_v = t.value(ig);
          Tensor& gx = t.grad(ix);
          const double n = static_cast<double>(R);
          for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t c = 0; c < C; ++c) {
              const double k = gamma_v[c] * (*inv_std)[c] / n;
              gx[r * C + c] += k * (n * g[r * C + c] - sum_g[c] - (*xhat)[r * C + c] * sum_gh[c]);
            }
          }
        }
      });
}

}  // namespace cx
