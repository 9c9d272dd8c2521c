#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pavt/common.hpp"

namespace pavt {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// One value in the computation graph. Leaves have no backprop closure;
// op nodes capture their parents (shared_ptr) and pull gradient into them.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantics handle to a node. Ops are free functions; results are
// recorded on the tape of their inputs (define-by-run).
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> value,
                     bool requires_grad = false, Tape* tape = nullptr);
  static Tensor zeros(Shape shape, bool requires_grad = false, Tape* tape = nullptr);
  static Tensor full(Shape shape, double fill, bool requires_grad = false,
                     Tape* tape = nullptr);
  static Tensor scalar(double v, bool requires_grad = false, Tape* tape = nullptr);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  const std::vector<double>& grad() const;
  double item() const;

  Tape* tape() const { return tape_; }
  TensorNode* node() const { return node_.get(); }
  std::shared_ptr<TensorNode> node_ptr() const { return node_; }

  // Detach to a 2-D snapshot (rank must be <= 2; 1-D becomes a row).
  Mat to_mat() const;

 private:
  friend class Tape;
  friend Tensor make_op(Shape shape, std::vector<double> value,
                        const std::vector<Tensor>& parents,
                        std::function<void(TensorNode&)> backprop);

  std::shared_ptr<TensorNode> node_;
  Tape* tape_ = nullptr;
};

// Ordered record of op nodes. Creation order is a topological order under
// define-by-run, so backward() replays the record in reverse.
class Tape {
 public:
  void record(std::shared_ptr<TensorNode> n) { nodes_.push_back(std::move(n)); }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates grads into every tracked node.
  // loss must be scalar.
  void backward(const Tensor& loss);

 private:
  std::vector<std::shared_ptr<TensorNode>> nodes_;
};

// Core op used by everything else; exposed for modules that add custom nodes
// (attention masking). Parents keep the upstream graph alive; backprop
// receives the output node and pulls grad into the captured parents.
Tensor make_op(Shape shape, std::vector<double> value,
               const std::vector<Tensor>& parents,
               std::function<void(TensorNode&)> backprop);

// ---- raw kernels (no autodiff) -------------------------------------------
void gemm_nn(int m, int k, int n, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_nt(int m, int k, int n, const double* A, const double* B, double* C,
             bool accumulate);  // C[m x n] = A[m x k] * B[n x k]^T
void gemm_tn(int m, int k, int n, const double* A, const double* B, double* C,
             bool accumulate);  // C[m x n] = A[k x m]^T * B[k x n]

// ---- differentiable ops ----------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // v broadcast over rows
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);  // domain error on values <= 0
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);
Tensor softmax_lastdim(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor select_rows(const Tensor& x, const std::vector<int>& idx);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor zero_rows(const Tensor& x, const std::vector<uint8_t>& keep);
Tensor bce_mean(const Tensor& probs, const Tensor& targets);  // clamp 1e-12
Tensor softmax_cross_entropy(const Tensor& logits, int label);

// ---- optimizer -------------------------------------------------------------
struct AdamState {
  std::vector<double> m, v;
  int64_t t = 0;
};
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected Adam. Returns false (params and state untouched)
// if any gradient entry is non-finite.
bool adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const AdamConfig& cfg);

// Parameter initializers.
void fill_trunc_normal(std::vector<double>& buf, double stddev, std::mt19937_64& rng);

}  // namespace pavt
