#pragma once

// Dense 2-D tensors with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor whose node remembers its inputs and a
// closure computing input gradients. grad() walks the recorded graph in
// reverse topological order. Rank is limited to 2 (scalars are 1x1).

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cmtraj/errors.hpp"

namespace cmtraj {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

namespace detail {

struct Node {
  Matrix value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Returns one gradient per input (empty matrix for inputs without grad).
  std::function<std::vector<Matrix>(const Matrix& grad_out)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_vector(Index rows, Index cols, std::span<const double> data,
                            bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  // Leaf-only mutable access, used by optimizers and EMA updates.
  Matrix& mutable_value();

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->inputs.empty(); }
  const char* op_name() const { return node_->op; }

  double item() const;
  double at(Index r, Index c) const { return node_->value(r, c); }

  // Copy of the value with no graph history.
  Tensor detach() const;
  // Deep copy keeping requires_grad.
  Tensor clone() const;

  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor make_result(const char* op, Matrix value, std::vector<Tensor> inputs,
                            std::function<std::vector<Matrix>(const Matrix&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Recording is on by default; NoGradGuard turns it off for the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Gradients of a scalar `loss` with respect to each tensor in `params`.
/// Parameters not reached by the graph get zero gradients.
std::vector<Matrix> grad(const Tensor& loss, std::span<const Tensor> params);

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x w + b with b a 1 x m row broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise with broadcasting of `b` over rows (1 x m), columns (n x 1) or both.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
// Multiplies row i by the constant weights[i].
Tensor scale_rows(const Tensor& a, std::span<const double> weights);

Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// n x 1 sums over each row.
Tensor row_sum(const Tensor& a);
// 1 x m means over each column.
Tensor col_mean(const Tensor& a);
// n x 1 Euclidean norms of each row; gradient at a zero row is zero.
Tensor row_norm(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor gather_rows(const Tensor& a, std::span<const Index> rows);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);

/// Contiguous key range [begin, end) attended by one query row.
struct KeySpan {
  Index begin = 0;
  Index end = 0;
};

/// Multi-head scaled dot-product attention where query row i attends to the
/// key/value rows spans[i]. `key_bias` (optional, one constant per key row)
/// is added to the logits. An empty span yields a zero output row.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const KeySpan> spans,
                 int heads, std::span<const double> key_bias = {});

}  // namespace cmtraj
