#include "cmtraj/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace cmtraj {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

void check_broadcast(const char* op, const Matrix& a, const Matrix& b) {
  const bool rows_ok = b.rows() == a.rows() || b.rows() == 1;
  const bool cols_ok = b.cols() == a.cols() || b.cols() == 1;
  if (!rows_ok || !cols_ok) {
    throw ContractViolation(std::string(op) + ": cannot broadcast " + shape_str(b) + " to " +
                            shape_str(a));
  }
}

Matrix expand(const Matrix& b, Index rows, Index cols) {
  if (b.rows() == rows && b.cols() == cols) {
    return b;
  }
  if (b.rows() == 1 && b.cols() == 1) {
    return Matrix::Constant(rows, cols, b(0, 0));
  }
  if (b.rows() == 1) {
    return b.replicate(rows, 1);
  }
  return b.replicate(1, cols);
}

Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) {
    return g;
  }
  if (rows == 1 && cols == 1) {
    return Matrix::Constant(1, 1, g.sum());
  }
  if (rows == 1) {
    return g.colwise().sum();
  }
  return g.rowwise().sum();
}

bool needs(const Tensor& t) { return t.requires_grad(); }

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Matrix::Constant(1, 1, value), requires_grad);
}

Tensor Tensor::from_vector(Index rows, Index cols, std::span<const double> data,
                           bool requires_grad) {
  require(static_cast<Index>(data.size()) == rows * cols,
          "Tensor::from_vector: data length does not match shape");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return Tensor(std::move(m), requires_grad);
}

Matrix& Tensor::mutable_value() {
  require(is_leaf(), "Tensor::mutable_value: only leaf tensors may be mutated");
  return node_->value;
}

void Tensor::set_requires_grad(bool flag) {
  require(is_leaf(), "Tensor::set_requires_grad: only leaf tensors");
  node_->requires_grad = flag;
}

double Tensor::item() const {
  require(size() == 1, "Tensor::item: tensor is not a scalar");
  return node_->value(0, 0);
}

Tensor Tensor::detach() const { return Tensor(node_->value, false); }

Tensor Tensor::clone() const { return Tensor(node_->value, node_->requires_grad); }

Tensor Tensor::make_result(const char* op, Matrix value, std::vector<Tensor> inputs,
                           std::function<std::vector<Matrix>(const Matrix&)> backward) {
  if (!value.allFinite()) {
    throw NumericalError(std::string("non-finite value produced by op '") + op + "'");
  }
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->op = op;
  const bool record =
      g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
        return t.requires_grad();
      });
  if (record) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) {
      node->inputs.push_back(t.node_);
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- backward driver ------------------------------------------------------

std::vector<Matrix> grad(const Tensor& loss, std::span<const Tensor> params) {
  require(loss.size() == 1, "grad: loss must be a scalar");

  std::vector<Matrix> result;
  result.reserve(params.size());
  for (const auto& p : params) {
    result.emplace_back(Matrix::Zero(p.rows(), p.cols()));
  }
  if (!loss.requires_grad()) {
    return result;
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const detail::Node*, Matrix> grads;
  grads.emplace(loss.node().get(), Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) {
      continue;
    }
    std::vector<Matrix> input_grads = node->backward(found->second);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      detail::Node* in = node->inputs[i].get();
      if (!in->requires_grad || input_grads[i].size() == 0) {
        continue;
      }
      if (!input_grads[i].allFinite()) {
        throw NumericalError(std::string("non-finite gradient in backward of op '") + node->op +
                             "'");
      }
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, std::move(input_grads[i]));
      } else {
        slot->second += input_grads[i];
      }
    }
    // Intermediate gradients are no longer needed once propagated.
    if (!node->inputs.empty()) {
      grads.erase(found);
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto found = grads.find(params[i].id());
    if (found != grads.end()) {
      result[i] = found->second;
    }
  }
  return result;
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ContractViolation("matmul: inner dimensions differ " + shape_str(a.value()) + " x " +
                            shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return Tensor::make_result("matmul", std::move(out), {a, b}, [a, b](const Matrix& g) {
    std::vector<Matrix> gs(2);
    if (needs(a)) gs[0] = g * b.value().transpose();
    if (needs(b)) gs[1] = a.value().transpose() * g;
    return gs;
  });
}

namespace {

// a + sign * broadcast(b) without materialising the broadcast.
Matrix broadcast_add(const Matrix& a, const Matrix& b, double sign) {
  Matrix out = a;
  if (b.rows() == a.rows() && b.cols() == a.cols()) {
    out += sign * b;
  } else if (b.rows() == 1 && b.cols() == 1) {
    out.array() += sign * b(0, 0);
  } else if (b.rows() == 1) {
    out.rowwise() += sign * b.row(0);
  } else {
    out.colwise() += sign * b.col(0);
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast("add", a.value(), b.value());
  Matrix out = broadcast_add(a.value(), b.value(), 1.0);
  return Tensor::make_result("add", std::move(out), {a, b}, [a, b](const Matrix& g) {
    std::vector<Matrix> gs(2);
    if (needs(a)) gs[0] = g;
    if (needs(b)) gs[1] = reduce_to(g, b.rows(), b.cols());
    return gs;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_broadcast("sub", a.value(), b.value());
  Matrix out = broadcast_add(a.value(), b.value(), -1.0);
  return Tensor::make_result("sub", std::move(out), {a, b}, [a, b](const Matrix& g) {
    std::vector<Matrix> gs(2);
    if (needs(a)) gs[0] = g;
    if (needs(b)) gs[1] = -reduce_to(g, b.rows(), b.cols());
    return gs;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ContractViolation("linear: shapes " + shape_str(x.value()) + " x " + shape_str(w.value()) + " + " +
                            shape_str(b.value()));
  }
  Matrix out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return Tensor::make_result("linear", std::move(out), {x, w, b}, [x, w, b](const Matrix& g) {
    std::vector<Matrix> gs(3);
    if (needs(x)) gs[0].noalias() = g * w.value().transpose();
    if (needs(w)) gs[1].noalias() = x.value().transpose() * g;
    if (needs(b)) gs[2] = g.colwise().sum();
    return gs;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast("mul", a.value(), b.value());
  Matrix bx = expand(b.value(), a.rows(), a.cols());
  Matrix out = a.value().cwiseProduct(bx);
  return Tensor::make_result("mul", std::move(out), {a, b},
                             [a, b, bx = std::move(bx)](const Matrix& g) {
                               std::vector<Matrix> gs(2);
                               if (needs(a)) gs[0] = g.cwiseProduct(bx);
                               if (needs(b)) {
                                 gs[1] = reduce_to(g.cwiseProduct(a.value()), b.rows(), b.cols());
                               }
                               return gs;
                             });
}

Tensor scale(const Tensor& a, double factor) {
  Matrix out = a.value() * factor;
  return Tensor::make_result("scale", std::move(out), {a}, [factor](const Matrix& g) {
    return std::vector<Matrix>{g * factor};
  });
}

Tensor scale_rows(const Tensor& a, std::span<const double> weights) {
  require(static_cast<Index>(weights.size()) == a.rows(), "scale_rows: one weight per row");
  Eigen::Map<const Eigen::VectorXd> w(weights.data(), a.rows());
  Matrix out = w.asDiagonal() * a.value();
  Eigen::VectorXd wc = w;
  return Tensor::make_result("scale_rows", std::move(out), {a}, [wc](const Matrix& g) {
    return std::vector<Matrix>{wc.asDiagonal() * g};
  });
}

Tensor square(const Tensor& a) {
  Matrix out = a.value().array().square().matrix();
  return Tensor::make_result("square", std::move(out), {a}, [a](const Matrix& g) {
    return std::vector<Matrix>{(2.0 * g.array() * a.value().array()).matrix()};
  });
}

Tensor sqrt(const Tensor& a) {
  if ((a.value().array() < 0.0).any()) {
    throw NumericalError("non-finite value produced by op 'sqrt' (negative input)");
  }
  Matrix out = a.value().array().sqrt().matrix();
  Matrix saved = out;
  return Tensor::make_result("sqrt", std::move(out), {a}, [saved](const Matrix& g) {
    return std::vector<Matrix>{(g.array() / (2.0 * saved.array())).matrix()};
  });
}

Tensor silu(const Tensor& a) {
  Matrix sig = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Matrix out = a.value().cwiseProduct(sig);
  return Tensor::make_result("silu", std::move(out), {a},
                             [a, sig = std::move(sig)](const Matrix& g) {
                               auto s = sig.array();
                               auto x = a.value().array();
                               return std::vector<Matrix>{
                                   (g.array() * (s * (1.0 + x * (1.0 - s)))).matrix()};
                             });
}

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh().matrix();
  Matrix saved = out;
  return Tensor::make_result("tanh", std::move(out), {a}, [saved](const Matrix& g) {
    return std::vector<Matrix>{(g.array() * (1.0 - saved.array().square())).matrix()};
  });
}

Tensor sum(const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  const Index r = a.rows(), c = a.cols();
  return Tensor::make_result("sum", std::move(out), {a}, [r, c](const Matrix& g) {
    return std::vector<Matrix>{Matrix::Constant(r, c, g(0, 0))};
  });
}

Tensor mean(const Tensor& a) {
  require(a.size() > 0, "mean: empty tensor");
  const double n = static_cast<double>(a.size());
  Matrix out = Matrix::Constant(1, 1, a.value().sum() / n);
  const Index r = a.rows(), c = a.cols();
  return Tensor::make_result("mean", std::move(out), {a}, [r, c, n](const Matrix& g) {
    return std::vector<Matrix>{Matrix::Constant(r, c, g(0, 0) / n)};
  });
}

Tensor row_sum(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  const Index c = a.cols();
  return Tensor::make_result("row_sum", std::move(out), {a}, [c](const Matrix& g) {
    return std::vector<Matrix>{g.replicate(1, c)};
  });
}

Tensor col_mean(const Tensor& a) {
  require(a.rows() > 0, "col_mean: empty tensor");
  const double n = static_cast<double>(a.rows());
  Matrix out = a.value().colwise().sum() / n;
  const Index r = a.rows();
  return Tensor::make_result("col_mean", std::move(out), {a}, [r, n](const Matrix& g) {
    return std::vector<Matrix>{g.replicate(r, 1) / n};
  });
}

Tensor row_norm(const Tensor& a) {
  Matrix out = a.value().rowwise().norm();
  Matrix norms = out;
  return Tensor::make_result("row_norm", std::move(out), {a}, [a, norms](const Matrix& g) {
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) {
      if (norms(i, 0) > 0.0) {
        ga.row(i) = a.value().row(i) * (g(i, 0) / norms(i, 0));
      }
    }
    return std::vector<Matrix>{std::move(ga)};
  });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const double m = a.value().row(i).maxCoeff();
    out.row(i) = (a.value().row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  Matrix y = out;
  return Tensor::make_result("softmax_rows", std::move(out), {a}, [y](const Matrix& g) {
    Eigen::VectorXd dots = (g.cwiseProduct(y)).rowwise().sum();
    Matrix ga = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    return std::vector<Matrix>{std::move(ga)};
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index n = x.rows(), d = x.cols();
  require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
          "layer_norm: gain/bias must be 1 x cols");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return Tensor::make_result(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), d](const Matrix& g) {
        std::vector<Matrix> gs(3);
        if (needs(x)) {
          Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
          Matrix dx(g.rows(), d);
          for (Index i = 0; i < g.rows(); ++i) {
            const double s1 = dxhat.row(i).sum();
            const double s2 = dxhat.row(i).dot(xhat.row(i));
            dx.row(i) = (inv_std(i) / static_cast<double>(d)) *
                        (static_cast<double>(d) * dxhat.row(i).array() - s1 -
                         xhat.row(i).array() * s2)
                            .matrix();
          }
          gs[0] = std::move(dx);
        }
        if (needs(gain)) gs[1] = g.cwiseProduct(xhat).colwise().sum();
        if (needs(bias)) gs[2] = g.colwise().sum();
        return gs;
      });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  const Index r = a.rows();
  return Tensor::make_result("gather_rows", std::move(out), {a},
                             [idx = std::move(idx), r](const Matrix& g) {
                               Matrix ga = Matrix::Zero(r, g.cols());
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 ga.row(idx[i]) += g.row(static_cast<Index>(i));
                               }
                               return std::vector<Matrix>{std::move(ga)};
                             });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<Index> widths;
  for (const auto& p : parts) widths.push_back(p.cols());
  return Tensor::make_result("concat_cols", std::move(out), inputs,
                             [offsets, widths](const Matrix& g) {
                               std::vector<Matrix> gs;
                               for (std::size_t i = 0; i < offsets.size(); ++i) {
                                 gs.emplace_back(g.middleCols(offsets[i], widths[i]));
                               }
                               return gs;
                             });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets, heights;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    offsets.push_back(at);
    heights.push_back(p.rows());
    at += p.rows();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result("concat_rows", std::move(out), inputs,
                             [offsets, heights](const Matrix& g) {
                               std::vector<Matrix> gs;
                               for (std::size_t i = 0; i < offsets.size(); ++i) {
                                 gs.emplace_back(g.middleRows(offsets[i], heights[i]));
                               }
                               return gs;
                             });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const KeySpan> spans,
                 int heads, std::span<const double> key_bias) {
  const Index nq = q.rows(), d = q.cols(), dv = v.cols();
  require(k.cols() == d, "attention: query/key widths differ");
  require(k.rows() == v.rows(), "attention: key/value row counts differ");
  require(static_cast<Index>(spans.size()) == nq, "attention: one span per query row");
  require(heads > 0 && d % heads == 0 && dv % heads == 0, "attention: widths not divisible by heads");
  require(key_bias.empty() || static_cast<Index>(key_bias.size()) == k.rows(),
          "attention: one bias per key row");
  const Index dh = d / heads, dvh = dv / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights stored per query: heads x span_len, contiguous.
  std::vector<Index> weight_offset(static_cast<std::size_t>(nq) + 1, 0);
  for (Index i = 0; i < nq; ++i) {
    require(spans[i].begin >= 0 && spans[i].end <= k.rows() && spans[i].begin <= spans[i].end,
            "attention: key span out of range");
    weight_offset[i + 1] = weight_offset[i] + heads * (spans[i].end - spans[i].begin);
  }
  std::vector<double> weights(static_cast<std::size_t>(weight_offset[nq]));

  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  Matrix out = Matrix::Zero(nq, dv);
  for (Index i = 0; i < nq; ++i) {
    const Index b = spans[i].begin, n = spans[i].end - spans[i].begin;
    if (n == 0) continue;
    for (int h = 0; h < heads; ++h) {
      double* w = weights.data() + weight_offset[i] + h * n;
      const double* qi = Q.data() + i * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j) {
        const double* kj = K.data() + (b + j) * d + h * dh;
        double s = 0.0;
        for (Index c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= inv_sqrt;
        if (!key_bias.empty()) s += key_bias[b + j];
        w[j] = s;
        mx = std::max(mx, s);
      }
      double total = 0.0;
      for (Index j = 0; j < n; ++j) {
        w[j] = std::exp(w[j] - mx);
        total += w[j];
      }
      double* oi = out.data() + i * dv + h * dvh;
      for (Index j = 0; j < n; ++j) {
        w[j] /= total;
        const double* vj = V.data() + (b + j) * dv + h * dvh;
        for (Index c = 0; c < dvh; ++c) oi[c] += w[j] * vj[c];
      }
    }
  }

  std::vector<KeySpan> span_copy(spans.begin(), spans.end());
  return Tensor::make_result(
      "attention", std::move(out), {q, k, v},
      [q, k, v, heads, dh, dvh, inv_sqrt, span_copy = std::move(span_copy),
       weights = std::move(weights), weight_offset = std::move(weight_offset)](const Matrix& g) {
        const Index nq = q.rows(), d = q.cols(), dv = v.cols();
        const Matrix& Q = q.value();
        const Matrix& K = k.value();
        const Matrix& V = v.value();
        Matrix gq = Matrix::Zero(nq, d);
        Matrix gk = Matrix::Zero(K.rows(), d);
        Matrix gv = Matrix::Zero(V.rows(), dv);
        std::vector<double> dw;
        for (Index i = 0; i < nq; ++i) {
          const Index b = span_copy[i].begin, n = span_copy[i].end - span_copy[i].begin;
          if (n == 0) continue;
          dw.resize(static_cast<std::size_t>(n));
          for (int h = 0; h < heads; ++h) {
            const double* w = weights.data() + weight_offset[i] + h * n;
            const double* gi = g.data() + i * dv + h * dvh;
            double dot = 0.0;
            for (Index j = 0; j < n; ++j) {
              const double* vj = V.data() + (b + j) * dv + h * dvh;
              double* gvj = gv.data() + (b + j) * dv + h * dvh;
              double s = 0.0;
              for (Index c = 0; c < dvh; ++c) {
                s += gi[c] * vj[c];
                gvj[c] += w[j] * gi[c];
              }
              dw[j] = s;
              dot += w[j] * s;
            }
            const double* qi = Q.data() + i * d + h * dh;
            double* gqi = gq.data() + i * d + h * dh;
            for (Index j = 0; j < n; ++j) {
              const double ds = w[j] * (dw[j] - dot) * inv_sqrt;
              const double* kj = K.data() + (b + j) * d + h * dh;
              double* gkj = gk.data() + (b + j) * d + h * dh;
              for (Index c = 0; c < dh; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
        std::vector<Matrix> gs(3);
        if (needs(q)) gs[0] = std::move(gq);
        if (needs(k)) gs[1] = std::move(gk);
        if (needs(v)) gs[2] = std::move(gv);
        return gs;
      });
}

}  // namespace cmtraj
