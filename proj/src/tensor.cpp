#include "pini/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace pini {

namespace {

thread_local Graph* g_active = nullptr;

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::domain_error(std::string(op) + ": non-finite result");
    }
  }
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void require(bool ok, const char* op, const char* what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), op, "shape mismatch");
}

}  // namespace

Tensor wrap_node(detail::NodePtr n) { return Tensor(std::move(n)); }

void record_entry(detail::NodePtr out, std::vector<detail::NodePtr> inputs,
                  std::function<void()> pull) {
  g_active->entries_.push_back({std::move(out), std::move(inputs), std::move(pull)});
}

namespace {

bool want_grad(std::initializer_list<const Tensor*> ins) {
  if (!g_active) return false;
  for (const Tensor* t : ins) {
    if (t->node()->requires_grad) return true;
  }
  return false;
}

Tensor make_out(const char* op, std::vector<std::size_t> shape, std::vector<double> values,
                bool requires_grad) {
  check_finite(op, values);
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  n->leaf = false;
  return wrap_node(std::move(n));
}

void accumulate(const detail::NodePtr& n, const std::vector<double>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad) {
  if (shape_product(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape does not match value count");
  }
  check_finite("Tensor", values);
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
  node_->leaf = true;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::vector<double> v(shape_product(shape), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  std::vector<double> v(shape_product(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("Tensor::value: not a scalar");
  return node_->values[0];
}

const std::vector<double>& Tensor::grad() const { return node_->grad; }

double Tensor::grad_at(std::size_t i) const {
  return node_->grad.empty() ? 0.0 : node_->grad[i];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw std::logic_error("set_requires_grad: not a leaf");
  node_->requires_grad = on;
}

void Tensor::set_at(std::size_t flat_index, double v) {
  if (!node_->leaf) throw std::logic_error("set_at: not a leaf");
  node_->values[flat_index] = v;
}

void Tensor::fill(double v) {
  if (!node_->leaf) throw std::logic_error("fill: not a leaf");
  std::fill(node_->values.begin(), node_->values.end(), v);
}

void Tensor::assign(const std::vector<double>& values) {
  if (!node_->leaf) throw std::logic_error("assign: not a leaf");
  if (values.size() != node_->values.size()) {
    throw std::invalid_argument("assign: size mismatch");
  }
  check_finite("assign", values);
  node_->values = values;
}

void Tensor::sgd_step(double lr) {
  if (!node_->leaf) throw std::logic_error("sgd_step: not a leaf");
  if (node_->grad.empty()) return;
  for (std::size_t i = 0; i < node_->values.size(); ++i) {
    node_->values[i] -= lr * node_->grad[i];
  }
  check_finite("sgd_step", node_->values);
}

// ---- Graph -----------------------------------------------------------------

Graph::Graph() {
  if (g_active) throw std::logic_error("Graph: another graph is already active on this thread");
  g_active = this;
}

Graph::~Graph() {
  if (g_active == this) g_active = nullptr;
}

bool Graph::recording() { return g_active != nullptr; }

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("Graph::backward: called twice without re-evaluation");
  if (loss.size() != 1) throw std::invalid_argument("Graph::backward: loss is not scalar");

  std::unordered_set<detail::TensorNode*> seen;
  auto ensure_grad = [&seen](const detail::NodePtr& n) {
    if (seen.insert(n.get()).second) n->grad.assign(n->values.size(), 0.0);
  };
  for (auto& e : entries_) {
    ensure_grad(e.out);
    for (auto& in : e.inputs) ensure_grad(in);
  }
  ensure_grad(loss.node());
  loss.node()->grad[0] = 1.0;

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->pull();
  consumed_ = true;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + b.at(i);
  bool rg = want_grad({&a, &b});
  Tensor out = make_out("add", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_entry(on, {an, bn}, [an, bn, on] {
      if (an->requires_grad) accumulate(an, on->grad);
      if (bn->requires_grad) accumulate(bn, on->grad);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) - b.at(i);
  bool rg = want_grad({&a, &b});
  Tensor out = make_out("sub", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_entry(on, {an, bn}, [an, bn, on] {
      if (an->requires_grad) accumulate(an, on->grad);
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * b.at(i);
  bool rg = want_grad({&a, &b});
  Tensor out = make_out("mul", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_entry(on, {an, bn}, [an, bn, on] {
      if (an->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->values[i];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + c;
  bool rg = want_grad({&a});
  Tensor out = make_out("add", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] { accumulate(an, on->grad); });
  }
  return out;
}

Tensor mul(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * c;
  bool rg = want_grad({&a});
  Tensor out = make_out("mul", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on, c] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// ---- structural ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul", "expects 2-D operands");
  require(a.dim(1) == b.dim(0), "matmul", "shape mismatch");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double s = av[i * k + l];
      if (s == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) v[i * n + j] += s * bv[l * n + j];
    }
  }
  bool rg = want_grad({&a, &b});
  Tensor out = make_out("matmul", {m, n}, std::move(v), rg);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_entry(on, {an, bn}, [an, bn, on, m, k, n] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = g[i * n + j];
            if (gij == 0.0) continue;
            for (std::size_t l = 0; l < k; ++l) an->grad[i * k + l] += gij * bn->values[l * n + j];
          }
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            const double ail = an->values[i * k + l];
            if (ail == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) bn->grad[l * n + j] += ail * g[i * n + j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, "transpose", "expects a 2-D operand");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> v(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.at(i * n + j);
  bool rg = want_grad({&a});
  Tensor out = make_out("transpose", {n, m}, std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  require(shape_product(shape) == a.size(), "reshape", "element count mismatch");
  bool rg = want_grad({&a});
  Tensor out = make_out("reshape", std::move(shape), a.values(), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] { accumulate(an, on->grad); });
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 1 && b.ndim() == 1, "concat", "expects 1-D operands");
  std::vector<double> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  bool rg = want_grad({&a, &b});
  Tensor out = make_out("concat", {a.size() + b.size()}, std::move(v), rg);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    const std::size_t na = a.size();
    record_entry(on, {an, bn}, [an, bn, on, na] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < na; ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < bn->values.size(); ++i) bn->grad[i] += on->grad[na + i];
    });
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  require(!rows.empty(), "stack_rows", "no rows");
  const std::size_t n = rows[0].size();
  std::vector<double> v;
  v.reserve(rows.size() * n);
  bool rg = false;
  for (const auto& r : rows) {
    require(r.ndim() == 1 && r.size() == n, "stack_rows", "row shape mismatch");
    v.insert(v.end(), r.values().begin(), r.values().end());
    rg = rg || (g_active && r.requires_grad());
  }
  rg = rg && g_active;
  Tensor out = make_out("stack_rows", {rows.size(), n}, std::move(v), rg);
  if (rg) {
    std::vector<detail::NodePtr> ins;
    ins.reserve(rows.size());
    for (const auto& r : rows) ins.push_back(r.node());
    auto on = out.node();
    record_entry(on, ins, [ins, on, n] {
      for (std::size_t r = 0; r < ins.size(); ++r) {
        if (!ins[r]->requires_grad) continue;
        for (std::size_t j = 0; j < n; ++j) ins[r]->grad[j] += on->grad[r * n + j];
      }
    });
  }
  return out;
}

Tensor add_rowwise(const Tensor& m, const Tensor& bias) {
  require(m.ndim() == 2 && bias.ndim() == 1 && m.dim(1) == bias.size(), "add_rowwise",
          "shape mismatch");
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> v(m.values());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] += bias.at(j);
  bool rg = want_grad({&m, &bias});
  Tensor out = make_out("add_rowwise", m.shape(), std::move(v), rg);
  if (rg) {
    auto mn = m.node(), bn = bias.node(), on = out.node();
    record_entry(on, {mn, bn}, [mn, bn, on, r, c] {
      if (mn->requires_grad) accumulate(mn, on->grad);
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) bn->grad[j] += on->grad[i * c + j];
      }
    });
  }
  return out;
}

Tensor gather_flat(const Tensor& a, const std::vector<std::size_t>& index_map,
                   std::vector<std::size_t> out_shape) {
  require(shape_product(out_shape) == index_map.size(), "gather_flat",
          "index map does not match output shape");
  std::vector<double> v(index_map.size());
  for (std::size_t i = 0; i < index_map.size(); ++i) {
    require(index_map[i] < a.size(), "gather_flat", "index out of range");
    v[i] = a.at(index_map[i]);
  }
  bool rg = want_grad({&a});
  Tensor out = make_out("gather_flat", std::move(out_shape), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on, index_map] {
      for (std::size_t i = 0; i < index_map.size(); ++i) an->grad[index_map[i]] += on->grad[i];
    });
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
  bool rg = want_grad({&a});
  Tensor out = make_out("sum", {1}, {s}, rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] {
      for (auto& g : an->grad) g += on->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean_rows(const Tensor& m) {
  require(m.ndim() == 2, "mean_rows", "expects a 2-D operand");
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> v(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j] += m.at(i * c + j);
  for (auto& x : v) x /= static_cast<double>(r);
  bool rg = want_grad({&m});
  Tensor out = make_out("mean_rows", {c}, std::move(v), rg);
  if (rg) {
    auto mn = m.node(), on = out.node();
    record_entry(on, {mn}, [mn, on, r, c] {
      const double inv = 1.0 / static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) mn->grad[i * c + j] += on->grad[j] * inv;
    });
  }
  return out;
}

// ---- nonlinearities ---------------------------------------------------------

Tensor exp(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.at(i));
  bool rg = want_grad({&a});
  Tensor out = make_out("exp", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * on->values[i];
    });
  }
  return out;
}

Tensor log(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (a.at(i) <= 0.0) throw std::domain_error("log: nonpositive argument");
    v[i] = std::log(a.at(i));
  }
  bool rg = want_grad({&a});
  Tensor out = make_out("log", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] / an->values[i];
    });
  }
  return out;
}

Tensor softplus(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.at(i);
    v[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  bool rg = want_grad({&a});
  Tensor out = make_out("softplus", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-an->values[i]));
        an->grad[i] += on->grad[i] * sig;
      }
    });
  }
  return out;
}

Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.at(i));
  bool rg = want_grad({&a});
  Tensor out = make_out("tanh", a.shape(), std::move(v), rg);
  if (rg) {
    auto an = a.node(), on = out.node();
    record_entry(on, {an}, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += on->grad[i] * (1.0 - on->values[i] * on->values[i]);
      }
    });
  }
  return out;
}

// ---- geometry --------------------------------------------------------------

namespace {

double norm_of(const std::vector<double>& v, std::size_t begin, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[begin + i] * v[begin + i];
  return std::sqrt(s);
}

}  // namespace

Tensor l2_normalize(const Tensor& v) {
  require(v.ndim() == 1, "l2_normalize", "expects a 1-D operand");
  const double r = norm_of(v.values(), 0, v.size());
  if (r < 1e-12) throw std::domain_error("l2_normalize: zero vector");
  std::vector<double> out_v(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out_v[i] = v.at(i) / r;
  bool rg = want_grad({&v});
  Tensor out = make_out("l2_normalize", v.shape(), std::move(out_v), rg);
  if (rg) {
    auto vn = v.node(), on = out.node();
    record_entry(on, {vn}, [vn, on, r] {
      double dot = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) dot += on->grad[i] * on->values[i];
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        vn->grad[i] += (on->grad[i] - on->values[i] * dot) / r;
      }
    });
  }
  return out;
}

Tensor normalize_rows(const Tensor& m) {
  require(m.ndim() == 2, "normalize_rows", "expects a 2-D operand");
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> v(m.values());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    norms[i] = norm_of(v, i * c, c);
    if (norms[i] < 1e-12) throw std::domain_error("normalize_rows: zero row");
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= norms[i];
  }
  bool rg = want_grad({&m});
  Tensor out = make_out("normalize_rows", m.shape(), std::move(v), rg);
  if (rg) {
    auto mn = m.node(), on = out.node();
    record_entry(on, {mn}, [mn, on, norms, r, c] {
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += on->grad[i * c + j] * on->values[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          mn->grad[i * c + j] +=
              (on->grad[i * c + j] - on->values[i * c + j] * dot) / norms[i];
        }
      }
    });
  }
  return out;
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 1 && b.ndim() == 1 && a.size() == b.size(), "cosine", "shape mismatch");
  const double ra = norm_of(a.values(), 0, a.size());
  const double rb = norm_of(b.values(), 0, b.size());
  if (ra < 1e-12 || rb < 1e-12) throw std::domain_error("cosine: zero vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a.at(i) * b.at(i);
  const double cos_ab = dot / (ra * rb);
  bool rg = want_grad({&a, &b});
  Tensor out = make_out("cosine", {1}, {cos_ab}, rg);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_entry(on, {an, bn}, [an, bn, on, ra, rb, cos_ab] {
      const double g = on->grad[0];
      const std::size_t n = an->values.size();
      if (an->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) {
          an->grad[i] += g * (bn->values[i] / (ra * rb) - cos_ab * an->values[i] / (ra * ra));
        }
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) {
          bn->grad[i] += g * (an->values[i] / (ra * rb) - cos_ab * bn->values[i] / (rb * rb));
        }
      }
    });
  }
  return out;
}

// ---- softmax ---------------------------------------------------------------

namespace {

// writes softmax((x - max) / tau) of one row into out
void softmax_row(const std::vector<double>& x, std::size_t begin, std::size_t n, double tau,
                 std::vector<double>& out) {
  double mx = x[begin];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[begin + i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[begin + i] = std::exp((x[begin + i] - mx) / tau);
    z += out[begin + i];
  }
  for (std::size_t i = 0; i < n; ++i) out[begin + i] /= z;
}

void softmax_row_backward(const std::vector<double>& y, const std::vector<double>& gout,
                          std::size_t begin, std::size_t n, double tau, std::vector<double>& gin) {
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += gout[begin + i] * y[begin + i];
  for (std::size_t i = 0; i < n; ++i) {
    gin[begin + i] += y[begin + i] * (gout[begin + i] - dot) / tau;
  }
}

}  // namespace

Tensor softmax(const Tensor& v, double temperature) {
  require(v.ndim() == 1, "softmax", "expects a 1-D operand");
  require(temperature > 0.0, "softmax", "temperature must be positive");
  std::vector<double> out_v(v.size());
  softmax_row(v.values(), 0, v.size(), temperature, out_v);
  bool rg = want_grad({&v});
  Tensor out = make_out("softmax", v.shape(), std::move(out_v), rg);
  if (rg) {
    auto vn = v.node(), on = out.node();
    record_entry(on, {vn}, [vn, on, temperature] {
      softmax_row_backward(on->values, on->grad, 0, on->values.size(), temperature, vn->grad);
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& m, double temperature) {
  require(m.ndim() == 2, "softmax_rows", "expects a 2-D operand");
  require(temperature > 0.0, "softmax_rows", "temperature must be positive");
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out_v(m.size());
  for (std::size_t i = 0; i < r; ++i) softmax_row(m.values(), i * c, c, temperature, out_v);
  bool rg = want_grad({&m});
  Tensor out = make_out("softmax_rows", m.shape(), std::move(out_v), rg);
  if (rg) {
    auto mn = m.node(), on = out.node();
    record_entry(on, {mn}, [mn, on, r, c, temperature] {
      for (std::size_t i = 0; i < r; ++i) {
        softmax_row_backward(on->values, on->grad, i * c, c, temperature, mn->grad);
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, "attention", "expects 2-D operands");
  require(q.dim(1) == k.dim(1) && k.dim(0) == v.dim(0), "attention", "shape mismatch");
  const Tensor scores = matmul(q, transpose(k));
  const Tensor weights = softmax_rows(scores, std::sqrt(static_cast<double>(q.dim(1))));
  return matmul(weights, v);
}

// ---- convolution -----------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  require(input.ndim() == 3 && kernel.ndim() == 4 && bias.ndim() == 1, "conv2d",
          "expects input {C,H,W}, kernel {O,C,kh,kw}, bias {O}");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t O = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  require(kernel.dim(1) == C && bias.size() == O, "conv2d", "shape mismatch");
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d", "kernel size must be odd");
  const std::ptrdiff_t ph = kh / 2, pw = kw / 2;

  std::vector<double> out_v(O * H * W, 0.0);
  const auto& in = input.values();
  const auto& kv = kernel.values();
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double s = bias.at(o);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t dy = 0; dy < kh; ++dy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - ph;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - pw;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              s += in[(c * H + iy) * W + ix] * kv[((o * C + c) * kh + dy) * kw + dx];
            }
          }
        }
        out_v[(o * H + y) * W + x] = s;
      }
    }
  }
  bool rg = want_grad({&input, &kernel, &bias});
  Tensor out = make_out("conv2d", {O, H, W}, std::move(out_v), rg);
  if (rg) {
    auto in_n = input.node(), k_n = kernel.node(), b_n = bias.node(), on = out.node();
    record_entry(on, {in_n, k_n, b_n}, [in_n, k_n, b_n, on, C, H, W, O, kh, kw, ph, pw] {
      const auto& g = on->grad;
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) {
            const double go = g[(o * H + y) * W + x];
            if (go == 0.0) continue;
            if (b_n->requires_grad) b_n->grad[o] += go;
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t dy = 0; dy < kh; ++dy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - ph;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t dx = 0; dx < kw; ++dx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - pw;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t in_idx = (c * H + iy) * W + ix;
                  const std::size_t k_idx = ((o * C + c) * kh + dy) * kw + dx;
                  if (in_n->requires_grad) in_n->grad[in_idx] += go * k_n->values[k_idx];
                  if (k_n->requires_grad) k_n->grad[k_idx] += go * in_n->values[in_idx];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- composites ------------------------------------------------------------

Tensor row(const Tensor& m, std::size_t i) {
  require(m.ndim() == 2 && i < m.dim(0), "row", "index out of range");
  const std::size_t c = m.dim(1);
  std::vector<std::size_t> idx(c);
  for (std::size_t j = 0; j < c; ++j) idx[j] = i * c + j;
  return gather_flat(m, idx, {c});
}

Tensor pick(const Tensor& v, std::size_t i) {
  require(i < v.size(), "pick", "index out of range");
  return gather_flat(v, {i}, {1});
}

Tensor affine_vec(const Tensor& v, const Tensor& w, const Tensor& b) {
  return reshape(add_rowwise(matmul(reshape(v, {1, v.size()}), w), b), {b.size()});
}

Tensor affine_rows(const Tensor& m, const Tensor& w, const Tensor& b) {
  return add_rowwise(matmul(m, w), b);
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                  double h) {
  if (!(h > 0.0) || h > 1e-2) {
    throw std::invalid_argument("grad_check: h must be in (0, 1e-2]");
  }
  const double v1 = loss_fn().value();
  const double v2 = loss_fn().value();
  if (v1 != v2) throw std::invalid_argument("grad_check: loss_fn is not deterministic");

  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    Tensor loss = loss_fn();
    g.backward(loss);
    analytic.reserve(params.size());
    for (const auto& p : params) {
      std::vector<double> gp(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] = p.grad_at(i);
      analytic.push_back(std::move(gp));
    }
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.at(i);
      p.set_at(i, orig + h);
      const double lp = loss_fn().value();
      p.set_at(i, orig - h);
      const double lm = loss_fn().value();
      p.set_at(i, orig);
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace pini
