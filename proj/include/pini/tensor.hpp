#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace pini {

class Tensor;

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized by Graph::backward, empty otherwise
  bool requires_grad = false;
  bool leaf = true;
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

// Dense row-major tensor of 64-bit reals. Copying a Tensor copies the handle,
// not the storage. Nodes are immutable after construction except for gradient
// accumulation and the explicit leaf mutators used by optimizers and
// finite-difference probes.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  const std::vector<double>& values() const { return node_->values; }
  double at(std::size_t flat_index) const { return node_->values[flat_index]; }
  double value() const;  // scalar tensors only

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);  // leaves only
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  double grad_at(std::size_t i) const;  // 0 when no grad was populated

  // Leaf mutators. Used by optimizers and the finite-difference probe; calling
  // them on a graph intermediate is a logic error.
  void set_at(std::size_t flat_index, double v);
  void fill(double v);
  void assign(const std::vector<double>& values);
  void sgd_step(double lr);  // values -= lr * grad

  detail::NodePtr node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
  detail::NodePtr node_;

  friend Tensor wrap_node(detail::NodePtr);
};

// Ordered record of the primitive operations of one scalar evaluation on the
// current thread. Exactly one Graph may be active at a time; backward replays
// the record once in reverse and populates grad on every requires_grad leaf.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void backward(const Tensor& loss);
  std::size_t recorded_ops() const { return entries_.size(); }

  static bool recording();

 private:
  struct Entry {
    detail::NodePtr out;
    std::vector<detail::NodePtr> inputs;
    std::function<void()> pull;  // accumulates input grads from out->grad
  };

  std::vector<Entry> entries_;
  bool consumed_ = false;

  friend void record_entry(detail::NodePtr, std::vector<detail::NodePtr>, std::function<void()>);
};

// ---- primitive operations -------------------------------------------------
// Each op validates shapes, checks the result for NaN/Inf, and registers a
// backward closure when a Graph is active and any input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
Tensor concat(const Tensor& a, const Tensor& b);  // 1-D
Tensor stack_rows(const std::vector<Tensor>& rows);
Tensor add_rowwise(const Tensor& m, const Tensor& bias);

// out[i] = a.flat[index_map[i]]; backward scatter-adds. Also serves embedding
// lookup, row slicing and patch (dis)assembly.
Tensor gather_flat(const Tensor& a, const std::vector<std::size_t>& index_map,
                   std::vector<std::size_t> out_shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& m);  // {r,c} -> {c}

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor l2_normalize(const Tensor& v);
Tensor normalize_rows(const Tensor& m);
Tensor cosine(const Tensor& a, const Tensor& b);

// softmax(x / temperature), computed with max subtraction
Tensor softmax(const Tensor& v, double temperature);
Tensor softmax_rows(const Tensor& m, double temperature);

// softmax(Q K^T / sqrt(d)) V with Q {m,d}, K {n,d}, V {n,dv}
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Same-padded 3x3 (or k x k) convolution, input {C,H,W}, kernel {O,C,kh,kw}
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

// convenience composites
Tensor row(const Tensor& m, std::size_t i);
Tensor pick(const Tensor& v, std::size_t i);
Tensor affine_vec(const Tensor& v, const Tensor& w, const Tensor& b);    // {k}·{k,n}+{n}
Tensor affine_rows(const Tensor& m, const Tensor& w, const Tensor& b);   // {r,k}·{k,n}+{n}

// Central-difference verification of backward. Evaluates loss_fn twice to
// detect nondeterminism, takes analytic grads from one backward pass, then
// perturbs every scalar parameter by ±h. Returns the worst relative error
// with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                  double h);

}  // namespace pini
