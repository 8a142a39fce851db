#include "core/tensor.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>
#include <unordered_set>

#include "core/error.h"
#include "core/fft.h"

namespace svcforge::nn {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace {

std::shared_ptr<Node> make_node(Shape shape) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  return n;
}

// Wires the result node to its parents when any input participates in the
// graph; otherwise the op is a pure value computation.
void attach(const std::shared_ptr<Node>& out,
            std::initializer_list<Tensor> inputs,
            std::function<void()> backward_fn) {
  bool rg = false;
  for (const Tensor& t : inputs)
    if (t.defined() && t.requires_grad()) rg = true;
  if (!rg) return;
  out->requires_grad = true;
  for (const Tensor& t : inputs)
    if (t.defined()) out->parents.push_back(t.node());
  out->backward_fn = std::move(backward_fn);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::kContract,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = make_node(s);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  auto n = make_node(s);
  std::fill(n->value.begin(), n->value.end(), v);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> v,
                         bool requires_grad) {
  require(static_cast<int64_t>(v.size()) == shape_numel(s), ErrorCode::kContract,
          "from_data: size mismatch");
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev, bool requires_grad) {
  auto n = make_node(s);
  for (double& x : n->value) x = rng.normal() * stddev;
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::rand_uniform(const Shape& s, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  auto n = make_node(s);
  for (double& x : n->value) x = rng.uniform(lo, hi);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

double Tensor::item() const {
  require(numel() == 1, ErrorCode::kContract, "item(): tensor is not a scalar");
  return node_->value[0];
}

double* Tensor::grad_data() {
  node_->ensure_grad();
  return node_->grad.data();
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  return Tensor(n);
}

Tensor Tensor::clone_detached() const { return detach(); }

void Tensor::backward() const {
  require(numel() == 1, ErrorCode::kContract,
          "backward(): output must be scalar");
  // Iterative post-order topological sort.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd, const char* /*name*/) {
  auto out = make_node(a.shape());
  const int64_t n = a.numel();
  const double* av = a.data();
  for (int64_t i = 0; i < n; ++i) out->value[i] = fwd(av[i]);
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), bwd]() {
    an->ensure_grad();
    const int64_t n = o->numel();
    for (int64_t i = 0; i < n; ++i)
      an->grad[i] += o->grad[i] * bwd(an->value[i], o->value[i]);
  });
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a.data()[i] + b.data()[i];
  Node* o = out.get();
  attach(out, {a, b}, [o, an = a.node(), bn = b.node()]() {
    const int64_t n = o->numel();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i];
    }
  });
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a.data()[i] - b.data()[i];
  Node* o = out.get();
  attach(out, {a, b}, [o, an = a.node(), bn = b.node()]() {
    const int64_t n = o->numel();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[i] -= o->grad[i];
    }
  });
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a.data()[i] * b.data()[i];
  Node* o = out.get();
  attach(out, {a, b}, [o, an = a.node(), bn = b.node()]() {
    const int64_t n = o->numel();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i] * an->value[i];
    }
  });
  return Tensor(out);
}

Tensor div_t(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  auto out = make_node(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a.data()[i] / b.data()[i];
  Node* o = out.get();
  attach(out, {a, b}, [o, an = a.node(), bn = b.node()]() {
    const int64_t n = o->numel();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        bn->grad[i] -= o->grad[i] * o->value[i] / bn->value[i];
    }
  });
  return Tensor(out);
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; }, "add_scalar");
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; },
      [s](double, double) { return s; }, "mul_scalar");
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; }, "exp");
}

Tensor log_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; }, "log");
}

Tensor tanh_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Tensor sigmoid_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(
      a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; },
      "leaky_relu");
}

Tensor relu_t(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor abs_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
      "abs");
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double x, double) { return x < lo ? 0.0 : 1.0; }, "clamp_min");
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; }, "square");
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, const Shape& s) {
  require(shape_numel(s) == a.numel(), ErrorCode::kContract,
          "reshape: element count mismatch");
  auto out = make_node(s);
  out->value = a.values();
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node()]() {
    an->ensure_grad();
    const int64_t n = o->numel();
    for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
  });
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, ErrorCode::kContract, "transpose: expects 2-D");
  const int64_t r = a.size(0), c = a.size(1);
  auto out = make_node({c, r});
  ECMap am(a.data(), r, c);
  EMap om(out->value.data(), c, r);
  om = am.transpose();
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), r, c]() {
    an->ensure_grad();
    ECMap gm(o->grad.data(), c, r);
    EMap agm(an->grad.data(), r, c);
    agm += gm.transpose();
  });
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
  require(a.ndim() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.size(0),
          ErrorCode::kContract, "slice_rows: bad range");
  const int64_t c = a.size(1);
  auto out = make_node({r1 - r0, c});
  std::copy(a.data() + r0 * c, a.data() + r1 * c, out->value.begin());
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), r0, c]() {
    an->ensure_grad();
    const int64_t n = o->numel();
    for (int64_t i = 0; i < n; ++i) an->grad[r0 * c + i] += o->grad[i];
  });
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  require(a.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.size(1),
          ErrorCode::kContract, "slice_cols: bad range");
  const int64_t r = a.size(0), c = a.size(1), w = c1 - c0;
  auto out = make_node({r, w});
  for (int64_t i = 0; i < r; ++i)
    std::copy(a.data() + i * c + c0, a.data() + i * c + c1,
              out->value.begin() + i * w);
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), r, c, c0, w]() {
    an->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < w; ++j)
        an->grad[i * c + c0 + j] += o->grad[i * w + j];
  });
  return Tensor(out);
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.size(1) == b.size(1),
          ErrorCode::kContract, "concat_rows: column mismatch");
  const int64_t ra = a.size(0), rb = b.size(0), c = a.size(1);
  auto out = make_node({ra + rb, c});
  std::copy(a.data(), a.data() + ra * c, out->value.begin());
  std::copy(b.data(), b.data() + rb * c, out->value.begin() + ra * c);
  Node* o = out.get();
  attach(out, {a, b}, [o, an = a.node(), bn = b.node(), ra, rb, c]() {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < ra * c; ++i) an->grad[i] += o->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < rb * c; ++i) bn->grad[i] += o->grad[ra * c + i];
    }
  });
  return Tensor(out);
}

Tensor flip_rows(const Tensor& a) {
  require(a.ndim() == 2, ErrorCode::kContract, "flip_rows: expects 2-D");
  const int64_t r = a.size(0), c = a.size(1);
  auto out = make_node({r, c});
  for (int64_t i = 0; i < r; ++i)
    std::copy(a.data() + i * c, a.data() + (i + 1) * c,
              out->value.begin() + (r - 1 - i) * c);
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), r, c]() {
    an->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        an->grad[i * c + j] += o->grad[(r - 1 - i) * c + j];
  });
  return Tensor(out);
}

Tensor pad_cols(const Tensor& a, int64_t left, int64_t right) {
  require(a.ndim() == 2 && left >= 0 && right >= 0, ErrorCode::kContract,
          "pad_cols: bad padding");
  const int64_t r = a.size(0), c = a.size(1), w = c + left + right;
  auto out = make_node({r, w});
  for (int64_t i = 0; i < r; ++i)
    std::copy(a.data() + i * c, a.data() + (i + 1) * c,
              out->value.begin() + i * w + left);
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), r, c, w, left]() {
    an->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        an->grad[i * c + j] += o->grad[i * w + left + j];
  });
  return Tensor(out);
}

Tensor expand_cols(const Tensor& v, int64_t cols) {
  require(v.ndim() == 1 || (v.ndim() == 2 && v.size(1) == 1),
          ErrorCode::kContract, "expand_cols: expects (C) or (C,1)");
  const int64_t c = v.size(0);
  auto out = make_node({c, cols});
  for (int64_t i = 0; i < c; ++i)
    std::fill(out->value.begin() + i * cols, out->value.begin() + (i + 1) * cols,
              v.data()[i]);
  Node* o = out.get();
  attach(out, {v}, [o, vn = v.node(), c, cols]() {
    vn->ensure_grad();
    for (int64_t i = 0; i < c; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < cols; ++j) s += o->grad[i * cols + j];
      vn->grad[i] += s;
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& a) {
  auto out = make_node({1});
  double s = 0.0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a.data()[i];
  out->value[0] = s;
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node()]() {
    an->ensure_grad();
    const double g = o->grad[0];
    for (double& x : an->grad) x += g;
  });
  return Tensor(out);
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra / NN ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.size(1) == b.size(0),
          ErrorCode::kContract,
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  const int64_t m = a.size(0), k = a.size(1), n = b.size(1);
  auto out = make_node({m, n});
  {
    ECMap am(a.data(), m, k), bm(b.data(), k, n);
    EMap om(out->value.data(), m, n);
    om.noalias() = am * bm;
  }
  Node* o = out.get();
  attach(out, {a, b}, [o, an = a.node(), bn = b.node(), m, k, n]() {
    ECMap gm(o->grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      ECMap bm(bn->value.data(), k, n);
      EMap agm(an->grad.data(), m, k);
      agm.noalias() += gm * bm.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      ECMap am(an->value.data(), m, k);
      EMap bgm(bn->grad.data(), k, n);
      bgm.noalias() += am.transpose() * gm;
    }
  });
  return Tensor(out);
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require(b.ndim() == 1, ErrorCode::kContract, "add_bias: bias must be 1-D");
  require(x.ndim() == 2 || x.ndim() == 3, ErrorCode::kContract,
          "add_bias: input must be (C,T) or (N,C,T)");
  const int64_t c = x.ndim() == 2 ? x.size(0) : x.size(1);
  require(b.size(0) == c, ErrorCode::kContract, "add_bias: channel mismatch");
  const int64_t nbatch = x.ndim() == 2 ? 1 : x.size(0);
  const int64_t t = x.ndim() == 2 ? x.size(1) : x.size(2);
  auto out = make_node(x.shape());
  for (int64_t nb = 0; nb < nbatch; ++nb)
    for (int64_t i = 0; i < c; ++i) {
      const double bv = b.data()[i];
      const int64_t base = (nb * c + i) * t;
      for (int64_t j = 0; j < t; ++j)
        out->value[base + j] = x.data()[base + j] + bv;
    }
  Node* o = out.get();
  attach(out, {x, b}, [o, xn = x.node(), bn = b.node(), nbatch, c, t]() {
    if (xn->requires_grad) {
      xn->ensure_grad();
      const int64_t n = o->numel();
      for (int64_t i = 0; i < n; ++i) xn->grad[i] += o->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t nb = 0; nb < nbatch; ++nb)
        for (int64_t i = 0; i < c; ++i) {
          double s = 0.0;
          const int64_t base = (nb * c + i) * t;
          for (int64_t j = 0; j < t; ++j) s += o->grad[base + j];
          bn->grad[i] += s;
        }
    }
  });
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& a) {
  require(a.ndim() == 2, ErrorCode::kContract, "softmax_rows: expects 2-D");
  const int64_t r = a.size(0), c = a.size(1);
  auto out = make_node({r, c});
  for (int64_t i = 0; i < r; ++i) {
    const double* row = a.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] - mx);
      out->value[i * c + j] = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (int64_t j = 0; j < c; ++j) out->value[i * c + j] *= inv;
  }
  Node* o = out.get();
  attach(out, {a}, [o, an = a.node(), r, c]() {
    an->ensure_grad();
    for (int64_t i = 0; i < r; ++i) {
      const double* y = o->value.data() + i * c;
      const double* gy = o->grad.data() + i * c;
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      double* gx = an->grad.data() + i * c;
      for (int64_t j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
  return Tensor(out);
}

Tensor layer_norm_cols(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps) {
  require(x.ndim() == 2, ErrorCode::kContract, "layer_norm_cols: expects (C,T)");
  const int64_t c = x.size(0), t = x.size(1);
  require(gamma.ndim() == 1 && gamma.size(0) == c && beta.ndim() == 1 &&
              beta.size(0) == c,
          ErrorCode::kContract, "layer_norm_cols: affine shape mismatch");
  auto out = make_node({c, t});
  auto stats = std::make_shared<std::vector<double>>(2 * t);  // mean, inv_std
  for (int64_t j = 0; j < t; ++j) {
    double mu = 0.0;
    for (int64_t i = 0; i < c; ++i) mu += x.data()[i * t + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t i = 0; i < c; ++i) {
      const double d = x.data()[i * t + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*stats)[j] = mu;
    (*stats)[t + j] = istd;
    for (int64_t i = 0; i < c; ++i) {
      const double xh = (x.data()[i * t + j] - mu) * istd;
      out->value[i * t + j] = gamma.data()[i] * xh + beta.data()[i];
    }
  }
  Node* o = out.get();
  attach(out, {x, gamma, beta},
         [o, xn = x.node(), gn = gamma.node(), bn = beta.node(), stats, c, t]() {
           for (int64_t j = 0; j < t; ++j) {
             const double mu = (*stats)[j], istd = (*stats)[t + j];
             // dy -> dxhat, then the standard two-correction reduction.
             double sum_dxh = 0.0, sum_dxh_xh = 0.0;
             for (int64_t i = 0; i < c; ++i) {
               const double xh = (xn->value[i * t + j] - mu) * istd;
               const double dxh = o->grad[i * t + j] * gn->value[i];
               sum_dxh += dxh;
               sum_dxh_xh += dxh * xh;
             }
             if (xn->requires_grad) {
               xn->ensure_grad();
               const double invc = 1.0 / static_cast<double>(c);
               for (int64_t i = 0; i < c; ++i) {
                 const double xh = (xn->value[i * t + j] - mu) * istd;
                 const double dxh = o->grad[i * t + j] * gn->value[i];
                 xn->grad[i * t + j] +=
                     istd * (dxh - invc * sum_dxh - invc * xh * sum_dxh_xh);
               }
             }
             if (gn->requires_grad) {
               gn->ensure_grad();
               for (int64_t i = 0; i < c; ++i) {
                 const double xh = (xn->value[i * t + j] - mu) * istd;
                 gn->grad[i] += o->grad[i * t + j] * xh;
               }
             }
             if (bn->requires_grad) {
               bn->ensure_grad();
               for (int64_t i = 0; i < c; ++i) bn->grad[i] += o->grad[i * t + j];
             }
           }
         });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Convolutions

namespace {

// Gathers conv patches: cols is (Cin*K, Lout) with zeros outside the input.
void im2col(const double* x, int64_t cin, int64_t l, int64_t k, int64_t stride,
            int64_t pad, int64_t dil, int64_t lout, double* cols) {
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t kk = 0; kk < k; ++kk) {
      double* row = cols + (ci * k + kk) * lout;
      const double* src = x + ci * l;
      for (int64_t o = 0; o < lout; ++o) {
        const int64_t in = o * stride + kk * dil - pad;
        row[o] = (in >= 0 && in < l) ? src[in] : 0.0;
      }
    }
  }
}

// Adjoint of im2col.
void col2im_acc(const double* cols, int64_t cin, int64_t l, int64_t k,
                int64_t stride, int64_t pad, int64_t dil, int64_t lout,
                double* gx) {
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const double* row = cols + (ci * k + kk) * lout;
      double* dst = gx + ci * l;
      for (int64_t o = 0; o < lout; ++o) {
        const int64_t in = o * stride + kk * dil - pad;
        if (in >= 0 && in < l) dst[in] += row[o];
      }
    }
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t padding, int64_t dilation) {
  require(x.ndim() == 2 || x.ndim() == 3, ErrorCode::kContract,
          "conv1d: input must be (Cin,L) or (N,Cin,L)");
  require(w.ndim() == 3, ErrorCode::kContract, "conv1d: weight must be 3-D");
  const bool batched = x.ndim() == 3;
  const int64_t nb = batched ? x.size(0) : 1;
  const int64_t cin = batched ? x.size(1) : x.size(0);
  const int64_t l = batched ? x.size(2) : x.size(1);
  const int64_t cout = w.size(0), k = w.size(2);
  require(w.size(1) == cin, ErrorCode::kContract,
          "conv1d: channel mismatch: weight expects " + std::to_string(w.size(1)) +
              " input channels, got " + std::to_string(cin));
  if (b.defined())
    require(b.ndim() == 1 && b.size(0) == cout, ErrorCode::kContract,
            "conv1d: bias shape mismatch");
  const int64_t lout = (l + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
  require(lout > 0, ErrorCode::kContract, "conv1d: empty output");

  Shape os = batched ? Shape{nb, cout, lout} : Shape{cout, lout};
  auto out = make_node(os);
  {
    std::vector<double> cols(cin * k * lout);
    ECMap wm(w.data(), cout, cin * k);
    for (int64_t n = 0; n < nb; ++n) {
      im2col(x.data() + n * cin * l, cin, l, k, stride, padding, dilation, lout,
             cols.data());
      ECMap cm(cols.data(), cin * k, lout);
      EMap om(out->value.data() + n * cout * lout, cout, lout);
      om.noalias() = wm * cm;
      if (b.defined())
        for (int64_t co = 0; co < cout; ++co)
          om.row(co).array() += b.data()[co];
    }
  }
  Node* o = out.get();
  auto bn = b.defined() ? b.node() : nullptr;
  attach(out, b.defined() ? std::initializer_list<Tensor>{x, w, b}
                          : std::initializer_list<Tensor>{x, w},
         [o, xn = x.node(), wn = w.node(), bn, nb, cin, l, cout, k, lout, stride,
          padding, dilation]() {
           ECMap wm(wn->value.data(), cout, cin * k);
           std::vector<double> cols(cin * k * lout);
           std::vector<double> gcols(cin * k * lout);
           for (int64_t n = 0; n < nb; ++n) {
             ECMap gm(o->grad.data() + n * cout * lout, cout, lout);
             if (wn->requires_grad) {
               wn->ensure_grad();
               im2col(xn->value.data() + n * cin * l, cin, l, k, stride, padding,
                      dilation, lout, cols.data());
               ECMap cm(cols.data(), cin * k, lout);
               EMap wgm(wn->grad.data(), cout, cin * k);
               wgm.noalias() += gm * cm.transpose();
             }
             if (xn->requires_grad) {
               xn->ensure_grad();
               EMap gcm(gcols.data(), cin * k, lout);
               gcm.noalias() = wm.transpose() * gm;
               col2im_acc(gcols.data(), cin, l, k, stride, padding, dilation,
                          lout, xn->grad.data() + n * cin * l);
             }
           }
           if (bn && bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t n = 0; n < nb; ++n)
               for (int64_t co = 0; co < cout; ++co) {
                 double s = 0.0;
                 const double* g = o->grad.data() + (n * cout + co) * lout;
                 for (int64_t j = 0; j < lout; ++j) s += g[j];
                 bn->grad[co] += s;
               }
           }
         });
  return Tensor(out);
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int64_t stride, int64_t padding, int64_t dilation) {
  require(x.ndim() == 2, ErrorCode::kContract,
          "conv_transpose1d: input must be (Cin,L)");
  require(w.ndim() == 3 && w.size(0) == x.size(0), ErrorCode::kContract,
          "conv_transpose1d: weight must be (Cin,Cout,K) matching input");
  const int64_t cin = x.size(0), l = x.size(1);
  const int64_t cout = w.size(1), k = w.size(2);
  const int64_t lout = (l - 1) * stride - 2 * padding + dilation * (k - 1) + 1;
  require(lout > 0, ErrorCode::kContract, "conv_transpose1d: empty output");
  if (b.defined())
    require(b.ndim() == 1 && b.size(0) == cout, ErrorCode::kContract,
            "conv_transpose1d: bias shape mismatch");

  auto out = make_node({cout, lout});
  // tmp(co*K+k, i) = sum_ci w(ci,co,k) x(ci,i); scatter to out(co, i*s+k*d-p).
  {
    std::vector<double> wt(cout * k * cin);
    for (int64_t ci = 0; ci < cin; ++ci)
      for (int64_t co = 0; co < cout; ++co)
        for (int64_t kk = 0; kk < k; ++kk)
          wt[(co * k + kk) * cin + ci] = w.data()[(ci * cout + co) * k + kk];
    std::vector<double> tmp(cout * k * l);
    ECMap wtm(wt.data(), cout * k, cin);
    ECMap xm(x.data(), cin, l);
    EMap tm(tmp.data(), cout * k, l);
    tm.noalias() = wtm * xm;
    for (int64_t co = 0; co < cout; ++co) {
      double* dst = out->value.data() + co * lout;
      if (b.defined()) {
        const double bv = b.data()[co];
        for (int64_t j = 0; j < lout; ++j) dst[j] = bv;
      }
      for (int64_t kk = 0; kk < k; ++kk) {
        const double* src = tmp.data() + (co * k + kk) * l;
        for (int64_t i = 0; i < l; ++i) {
          const int64_t oidx = i * stride + kk * dilation - padding;
          if (oidx >= 0 && oidx < lout) dst[oidx] += src[i];
        }
      }
    }
  }
  Node* o = out.get();
  auto bn = b.defined() ? b.node() : nullptr;
  attach(out, b.defined() ? std::initializer_list<Tensor>{x, w, b}
                          : std::initializer_list<Tensor>{x, w},
         [o, xn = x.node(), wn = w.node(), bn, cin, l, cout, k, lout, stride,
          padding, dilation]() {
           // gtmp(co*K+kk, i) = gy(co, i*s+kk*d-p)
           std::vector<double> gtmp(cout * k * l, 0.0);
           for (int64_t co = 0; co < cout; ++co) {
             const double* g = o->grad.data() + co * lout;
             for (int64_t kk = 0; kk < k; ++kk) {
               double* dst = gtmp.data() + (co * k + kk) * l;
               for (int64_t i = 0; i < l; ++i) {
                 const int64_t oidx = i * stride + kk * dilation - padding;
                 dst[i] = (oidx >= 0 && oidx < lout) ? g[oidx] : 0.0;
               }
             }
           }
           ECMap gtm(gtmp.data(), cout * k, l);
           if (xn->requires_grad) {
             xn->ensure_grad();
             std::vector<double> wt(cout * k * cin);
             for (int64_t ci = 0; ci < cin; ++ci)
               for (int64_t co = 0; co < cout; ++co)
                 for (int64_t kk = 0; kk < k; ++kk)
                   wt[(co * k + kk) * cin + ci] =
                       wn->value[(ci * cout + co) * k + kk];
             ECMap wtm(wt.data(), cout * k, cin);
             EMap xgm(xn->grad.data(), cin, l);
             xgm.noalias() += wtm.transpose() * gtm;
           }
           if (wn->requires_grad) {
             wn->ensure_grad();
             ECMap xm(xn->value.data(), cin, l);
             // dwt = gtmp * x^T, then scatter back to (Cin,Cout,K) layout.
             EMat dwt = gtm * xm.transpose();  // (cout*k, cin)
             for (int64_t ci = 0; ci < cin; ++ci)
               for (int64_t co = 0; co < cout; ++co)
                 for (int64_t kk = 0; kk < k; ++kk)
                   wn->grad[(ci * cout + co) * k + kk] += dwt(co * k + kk, ci);
           }
           if (bn && bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t co = 0; co < cout; ++co) {
               double s = 0.0;
               const double* g = o->grad.data() + co * lout;
               for (int64_t j = 0; j < lout; ++j) s += g[j];
               bn->grad[co] += s;
             }
           }
         });
  return Tensor(out);
}

Tensor avg_pool1d(const Tensor& x, int64_t k) {
  require(x.ndim() == 2 && k >= 1, ErrorCode::kContract,
          "avg_pool1d: expects (C,L) and k >= 1");
  const int64_t c = x.size(0), l = x.size(1), lo = l / k;
  require(lo > 0, ErrorCode::kContract, "avg_pool1d: empty output");
  auto out = make_node({c, lo});
  const double inv = 1.0 / static_cast<double>(k);
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = 0; j < lo; ++j) {
      double s = 0.0;
      const double* src = x.data() + i * l + j * k;
      for (int64_t q = 0; q < k; ++q) s += src[q];
      out->value[i * lo + j] = s * inv;
    }
  Node* o = out.get();
  attach(out, {x}, [o, xn = x.node(), c, l, lo, k, inv]() {
    xn->ensure_grad();
    for (int64_t i = 0; i < c; ++i)
      for (int64_t j = 0; j < lo; ++j) {
        const double g = o->grad[i * lo + j] * inv;
        double* dst = xn->grad.data() + i * l + j * k;
        for (int64_t q = 0; q < k; ++q) dst[q] += g;
      }
  });
  return Tensor(out);
}

Tensor embedding_cols(const Tensor& table, const std::vector<int64_t>& ids) {
  require(table.ndim() == 2, ErrorCode::kContract,
          "embedding_cols: table must be (V,E)");
  const int64_t v = table.size(0), e = table.size(1);
  const int64_t t = static_cast<int64_t>(ids.size());
  for (int64_t id : ids)
    require(0 <= id && id < v, ErrorCode::kContract,
            "embedding_cols: id out of range");
  auto out = make_node({e, t});
  for (int64_t j = 0; j < t; ++j)
    for (int64_t i = 0; i < e; ++i)
      out->value[i * t + j] = table.data()[ids[j] * e + i];
  Node* o = out.get();
  attach(out, {table}, [o, tn = table.node(), ids, e, t]() {
    tn->ensure_grad();
    for (int64_t j = 0; j < t; ++j)
      for (int64_t i = 0; i < e; ++i)
        tn->grad[ids[j] * e + i] += o->grad[i * t + j];
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// STFT magnitude with adjoint backward

Tensor stft_mag(const Tensor& x, int64_t n_fft, int64_t hop, int64_t win_length) {
  require(x.ndim() == 1, ErrorCode::kContract, "stft_mag: expects 1-D signal");
  require((n_fft & (n_fft - 1)) == 0, ErrorCode::kContract,
          "stft_mag: n_fft must be a power of two");
  require(hop >= 1 && win_length >= 1 && win_length <= n_fft,
          ErrorCode::kContract, "stft_mag: bad hop/window");
  const int64_t l = x.size(0);
  require(l >= 1, ErrorCode::kEmptyInput, "stft_mag: empty signal");
  const int64_t bins = n_fft / 2 + 1;
  const int64_t frames = 1 + l / hop;

  // Periodic Hann window, zero-padded to n_fft when win_length < n_fft.
  auto window = std::make_shared<std::vector<double>>(n_fft, 0.0);
  const int64_t wpad = (n_fft - win_length) / 2;
  for (int64_t i = 0; i < win_length; ++i)
    (*window)[wpad + i] =
        0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) /
                             static_cast<double>(win_length));

  // Reflect-padded source sample for global index p in [-n_fft/2, l+n_fft/2).
  auto sample = [&](const double* sig, int64_t p) -> double {
    if (p < 0) p = -p;
    if (p >= l) p = 2 * (l - 1) - p;
    if (p < 0) p = 0;  // degenerate one-sample signals
    return sig[p];
  };

  auto out = make_node({bins, frames});
  auto re = std::make_shared<std::vector<double>>(bins * frames);
  auto im = std::make_shared<std::vector<double>>(bins * frames);
  {
    std::vector<double> frame(n_fft);
    for (int64_t f = 0; f < frames; ++f) {
      const int64_t start = f * hop - n_fft / 2;
      for (int64_t i = 0; i < n_fft; ++i)
        frame[i] = sample(x.data(), start + i) * (*window)[i];
      auto spec = rfft(frame.data(), n_fft, n_fft);
      for (int64_t kb = 0; kb < bins; ++kb) {
        (*re)[kb * frames + f] = spec[kb].real();
        (*im)[kb * frames + f] = spec[kb].imag();
        out->value[kb * frames + f] = std::abs(spec[kb]);
      }
    }
  }
  Node* o = out.get();
  attach(out, {x}, [o, xn = x.node(), re, im, window, n_fft, hop, l, bins,
                    frames]() {
    xn->ensure_grad();
    std::vector<std::complex<double>> spec_grad(n_fft);
    for (int64_t f = 0; f < frames; ++f) {
      // d|X|/dRe = Re/|X|, d|X|/dIm = Im/|X|.
      std::fill(spec_grad.begin(), spec_grad.end(), std::complex<double>(0, 0));
      for (int64_t kb = 0; kb < bins; ++kb) {
        const double g = o->grad[kb * frames + f];
        if (g == 0.0) continue;
        const double rr = (*re)[kb * frames + f], ii = (*im)[kb * frames + f];
        const double mag = std::max(o->value[kb * frames + f], 1e-12);
        spec_grad[kb] = {g * rr / mag, g * ii / mag};
      }
      // Adjoint of the real FFT: g_n = Re(sum_k c_k e^{+i 2pi k n / N}).
      std::vector<std::complex<double>> acc(n_fft, {0, 0});
      for (int64_t kb = 0; kb < bins; ++kb) acc[kb] = spec_grad[kb];
      fft_inplace(acc, true);  // scaled by 1/N
      const int64_t start = f * hop - n_fft / 2;
      for (int64_t i = 0; i < n_fft; ++i) {
        const double gi =
            acc[i].real() * static_cast<double>(n_fft) * (*window)[i];
        if (gi == 0.0) continue;
        int64_t p = start + i;
        // Adjoint of reflect padding folds edge contributions back inside.
        if (p < 0) p = -p;
        if (p >= l) p = 2 * (l - 1) - p;
        if (p < 0) p = 0;
        xn->grad[p] += gi;
      }
    }
  });
  return Tensor(out);
}

Tensor polyphase(const Tensor& x, int64_t period) {
  require(x.ndim() == 1 && period >= 1, ErrorCode::kContract,
          "polyphase: expects 1-D signal and period >= 1");
  const int64_t l = x.size(0);
  const int64_t lp = (l + period - 1) / period;
  auto out = make_node({period, 1, lp});
  for (int64_t r = 0; r < period; ++r)
    for (int64_t j = 0; j < lp; ++j) {
      const int64_t p = j * period + r;
      out->value[r * lp + j] = p < l ? x.data()[p] : 0.0;
    }
  Node* o = out.get();
  attach(out, {x}, [o, xn = x.node(), period, l, lp]() {
    xn->ensure_grad();
    for (int64_t r = 0; r < period; ++r)
      for (int64_t j = 0; j < lp; ++j) {
        const int64_t p = j * period + r;
        if (p < l) xn->grad[p] += o->grad[r * lp + j];
      }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Adam

AdamOptimizer::AdamOptimizer(std::vector<ParamRef> params, double lr,
                             double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].tensor.numel(), 0.0);
    v_[i].assign(params_[i].tensor.numel(), 0.0);
  }
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    const double* g = p.grad().data();
    double* w = p.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      w[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

AdamOptimizer::State AdamOptimizer::export_state() const {
  State s;
  s.t = t_;
  for (size_t i = 0; i < params_.size(); ++i) {
    s.m.emplace_back(params_[i].name, m_[i]);
    s.v.emplace_back(params_[i].name, v_[i]);
  }
  return s;
}

void AdamOptimizer::import_state(const State& s) {
  t_ = s.t;
  for (size_t i = 0; i < params_.size(); ++i) {
    for (const auto& [name, data] : s.m)
      if (name == params_[i].name && data.size() == m_[i].size()) m_[i] = data;
    for (const auto& [name, data] : s.v)
      if (name == params_[i].name && data.size() == v_[i].size()) v_[i] = data;
  }
}

}  // namespace svcforge::nn
