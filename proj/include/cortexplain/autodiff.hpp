#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cortexplain/tensor.hpp"

namespace cx {

// A learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Gradient after Tape::backward; throws if none reached this node.
  const Tensor& grad() const;
  bool has_grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in execution order, so the node
// list is already topologically sorted; backward walks it once in reverse.
// A tape is single-threaded and is consumed by backward().
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Leaf whose gradient is accumulated into `param.grad` by backward().
  Var parameter(Parameter& param);

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  void backward(const Var& loss);

  // Op-author interface.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::uint32_t id) const { return nodes_[id].has_grad; }
  // Zero-initialized on first access.
  Tensor& grad(std::uint32_t id);
  const Tensor& grad_view(std::uint32_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);
  void check_owner(const Var& v, const char* op) const;

  std::vector<Node> nodes_;
  bool recording_;
  bool consumed_ = false;
};

using IndexList = std::shared_ptr<const std::vector<std::uint32_t>>;
inline IndexList make_indices(std::vector<std::uint32_t> v) {
  return std::make_shared<const std::vector<std::uint32_t>>(std::move(v));
}

enum class Axis {
  kRows,  // reduce over rows: R x C -> 1 x C
  kCols,  // reduce over columns: R x C -> R x 1
  kAll,   // -> 1 x 1
};

// Primitive operations. Every op checks its shapes and indices and throws
// ShapeError naming itself on failure.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// x (R x C) + b (1 x C), broadcast over rows.
Var add_row(const Var& x, const Var& b);
// x (R x C) * r (1 x C), broadcast over rows.
Var mul_row(const Var& x, const Var& r);
// x (R x C) * g (R x 1), broadcast over columns.
Var mul_col(const Var& x, const Var& g);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, std::size_t rows, std::size_t cols);
// Output row i is input row idx[i]; backward scatter-adds.
Var gather_rows(const Var& x, const IndexList& idx);
Var concat(const std::vector<Var>& parts, int axis);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var relu(const Var& x);
Var sigmoid(const Var& x);
// axis 1: each row sums to 1; axis 0: each column sums to 1.
Var softmax(const Var& x, int axis);
// log(max(x, floor)); zero gradient below the floor.
Var log_clamped(const Var& x, double floor = 1e-12);
Var sum(const Var& x, Axis axis);
Var mean(const Var& x, Axis axis);
// groups holds G*k row indices; output row g is the per-column max over
// rows groups[g*k .. g*k+k). Gradient goes only to each argmax.
Var max_over_groups(const Var& x, const IndexList& groups, std::size_t k);
// Sum / mean over consecutive blocks of `block` rows: (S*block) x C -> S x C.
Var segment_sum(const Var& x, std::size_t block);
Var segment_mean(const Var& x, std::size_t block);
// Euclidean norm of each row -> R x 1; subgradient 0 at the origin.
Var row_norm(const Var& x);
// Each row divided by max(norm, eps).
Var row_normalize(const Var& x, double eps = 1e-12);
// Per-row softmax cross entropy against integer labels -> R x 1.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
// Min-max normalizes a column vector independently over consecutive
// blocks of `block` rows to [0, 1]. Blocks with range <= 1e-12 become 0.5.
Var minmax_normalize(const Var& x, std::size_t block);

struct BatchStats {
  Tensor mean;
  Tensor var;
};
// Training-mode batch normalization over rows with biased batch variance.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps,
               BatchStats* stats = nullptr);

}  // namespace cx
