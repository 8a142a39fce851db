#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "core/rng.h"

namespace svcforge::nn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One node of the dynamically built computation graph. Values are double
// precision throughout; gradients are allocated on demand during backward().
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantics handle over a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<double> v,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size(int dim) const { return node_->shape.at(dim); }
  int64_t numel() const { return node_->numel(); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  const std::vector<double>& values() const { return node_->value; }
  double item() const;

  double* grad_data();
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad();

  // Reverse-mode sweep from a scalar output.
  void backward() const;

  // Same values, detached from the graph (no parents, no grad flow).
  Tensor detach() const;
  // Deep value copy, detached.
  Tensor clone_detached() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);       // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_t(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor sigmoid_t(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor relu_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor square(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& s);
Tensor transpose(const Tensor& a);                  // 2-D
Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1);   // 2-D
Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);   // 2-D
Tensor concat_rows(const Tensor& a, const Tensor& b);         // 2-D
Tensor flip_rows(const Tensor& a);                  // 2-D
Tensor pad_cols(const Tensor& a, int64_t left, int64_t right);  // 2-D, zeros
Tensor expand_cols(const Tensor& v, int64_t cols);  // (C) or (C,1) -> (C,cols)

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- linear algebra / nn ----
Tensor matmul(const Tensor& a, const Tensor& b);    // (m,k)x(k,n)
Tensor add_bias(const Tensor& x, const Tensor& b);  // (C,T)/(N,C,T) + (C)
Tensor softmax_rows(const Tensor& a);               // 2-D, softmax over each row
Tensor layer_norm_cols(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);          // (C,T), normalize columns

// x: (Cin,L) or (N,Cin,L); w: (Cout,Cin,K); b: (Cout) or undefined.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t padding, int64_t dilation);
// x: (Cin,L); w: (Cin,Cout,K). Lout = (L-1)*stride - 2*padding + dilation*(K-1) + 1.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int64_t stride, int64_t padding, int64_t dilation);
Tensor avg_pool1d(const Tensor& x, int64_t k);      // (C,L) -> (C, L/k)
// table: (V,E); returns (E,T) where column t is table row ids[t].
Tensor embedding_cols(const Tensor& table, const std::vector<int64_t>& ids);
// x: (L) mono signal; returns (n_fft/2+1, 1+floor(L/hop)) magnitudes with
// reflect center padding and a periodic Hann window of win_length samples.
Tensor stft_mag(const Tensor& x, int64_t n_fft, int64_t hop, int64_t win_length);
// x: (L) -> (period, 1, ceil(L/period)) polyphase components, zero padded.
Tensor polyphase(const Tensor& x, int64_t period);

// ---- parameter update plumbing ----
struct ParamRef {
  std::string name;
  Tensor tensor;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<ParamRef> params, double lr, double beta1,
                double beta2, double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t step_count() const { return t_; }

  // Checkpoint plumbing: moment vectors keyed by parameter name.
  struct State {
    int64_t t = 0;
    std::vector<std::pair<std::string, std::vector<double>>> m;
    std::vector<std::pair<std::string, std::vector<double>>> v;
  };
  State export_state() const;
  void import_state(const State& s);

  const std::vector<ParamRef>& params() const { return params_; }

 private:
  std::vector<ParamRef> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace svcforge::nn
