#include "pavt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pavt {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::leaf(Shape shape, std::vector<double> value, bool requires_grad,
                    Tape* tape) {
  if (numel(shape) != static_cast<int64_t>(value.size()))
    throw ConfigError("tensor leaf: shape " + shape_str(shape) + " does not match " +
                      std::to_string(value.size()) + " values");
  if (requires_grad && !tape)
    throw ConfigError("tensor leaf: a tracked leaf needs a tape");
  Tensor t;
  t.node_ = std::make_shared<TensorNode>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(value);
  t.node_->requires_grad = requires_grad;
  if (requires_grad) t.node_->ensure_grad();
  t.tape_ = tape;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad, Tape* tape) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), 0.0);
  return leaf(std::move(shape), std::move(v), requires_grad, tape);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad, Tape* tape) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), fill);
  return leaf(std::move(shape), std::move(v), requires_grad, tape);
}

Tensor Tensor::scalar(double v, bool requires_grad, Tape* tape) {
  return leaf({1}, {v}, requires_grad, tape);
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad)
    throw ConfigError("tensor: grad requested on an untracked tensor");
  return node_->grad;
}

double Tensor::item() const {
  if (node_->value.size() != 1)
    throw ConfigError("tensor: item() on non-scalar " + shape_str(node_->shape));
  return node_->value[0];
}

Mat Tensor::to_mat() const {
  if (rank() > 2) throw ConfigError("tensor: to_mat on rank-" + std::to_string(rank()));
  Mat m;
  if (rank() == 2) {
    m.rows = dim(0);
    m.cols = dim(1);
  } else {
    m.rows = 1;
    m.cols = static_cast<int>(size());
  }
  m.a = node_->value;
  return m;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ConfigError("backward: loss must be a scalar");
  if (!loss.requires_grad())
    throw ConfigError("backward: loss does not require grad");
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorNode* n = it->get();
    if (n->backprop) n->backprop();
  }
}

Tensor make_op(Shape shape, std::vector<double> value,
               const std::vector<Tensor>& parents,
               std::function<void(TensorNode&)> backprop) {
  bool track = false;
  Tape* tape = nullptr;
  for (const auto& p : parents) {
    if (!p.defined()) continue;
    if (p.requires_grad()) track = true;
    if (p.tape()) {
      if (tape && tape != p.tape())
        throw ConfigError("op: inputs recorded on different tapes");
      tape = p.tape();
    }
  }
  Tensor t;
  t.node_ = std::make_shared<TensorNode>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(value);
  t.tape_ = tape;
  if (track && tape) {
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    // Self captured raw: the tape owns the node for the backward pass, and a
    // shared self-capture would leak the closure cycle.
    TensorNode* self = t.node_.get();
    t.node_->backprop = [self, fn = std::move(backprop)]() { fn(*self); };
    tape->record(t.node_);
  }
  return t;
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

void gemm_nn(int m, int k, int n, const double* A, const double* B, double* C,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    double* ci = C + static_cast<size_t>(i) * n;
    if (!accumulate)
      for (int j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_nt(int m, int k, int n, const double* A, const double* B, double* C,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* ai = A + static_cast<size_t>(i) * k;
    double* ci = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = B + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void gemm_tn(int m, int k, int n, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate)
    for (int64_t i = 0; i < static_cast<int64_t>(m) * n; ++i) C[i] = 0.0;
  for (int p = 0; p < k; ++p) {
    const double* ap = A + static_cast<size_t>(p) * m;
    const double* bp = B + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// ---------------------------------------------------------------------------
// differentiable ops
// ---------------------------------------------------------------------------

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ConfigError(std::string(op) + ": expected a matrix, got " +
                      shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
}

void accumulate_into(TensorNode* n, const std::vector<double>& g) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ConfigError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m) * n);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      gemm_nt(m, n, k, o.grad.data(), bn->value.data(), an->grad.data(), true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      gemm_tn(k, m, n, an->value.data(), o.grad.data(), bn->grad.data(), true);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  auto an = a.node_ptr();
  return make_op({n, m}, std::move(out), {a}, [an, m, n](TensorNode& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        an->grad[static_cast<size_t>(i) * n + j] +=
            o.grad[static_cast<size_t>(j) * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
    accumulate_into(an.get(), o.grad);
    accumulate_into(bn.get(), o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
    accumulate_into(an.get(), o.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i)
        an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i)
        bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node_ptr();
  return make_op(a.shape(), std::move(out), {a}, [an, c](TensorNode& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank2(x, "add_rowvec");
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(v.size()) != cols)
    throw ConfigError("add_rowvec: vector length " + std::to_string(v.size()) +
                      " vs " + std::to_string(cols) + " columns");
  std::vector<double> out(x.data().size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<size_t>(r) * cols + c] =
          x.data()[static_cast<size_t>(r) * cols + c] + v.data()[c];
  auto xn = x.node_ptr();
  auto vn = v.node_ptr();
  return make_op(x.shape(), std::move(out), {x, v}, [xn, vn, rows, cols](TensorNode& o) {
    accumulate_into(xn.get(), o.grad);
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          vn->grad[c] += o.grad[static_cast<size_t>(r) * cols + c];
    }
  });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double u = x.data()[i];
    out[i] = 0.5 * u * (1.0 + std::erf(u * kInvSqrt2));
  }
  auto xn = x.node_ptr();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const double u = xn->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(u * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * u * u);
      xn->grad[i] += o.grad[i] * (cdf + u * pdf);
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  auto xn = x.node_ptr();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i)
      if (xn->value[i] > 0.0) xn->grad[i] += o.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  auto xn = x.node_ptr();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const double y = o.value[i];
      xn->grad[i] += o.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (!(x.data()[i] > 0.0))
      throw NumericError("log: non-positive input " + std::to_string(x.data()[i]) +
                         " at index " + std::to_string(i));
    out[i] = std::log(x.data()[i]);
  }
  auto xn = x.node_ptr();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] / xn->value[i];
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  const int cols = x.shape().back();
  if (static_cast<int>(gamma.size()) != cols || static_cast<int>(beta.size()) != cols)
    throw ConfigError("layernorm: scale/shift length must equal the last dimension");
  const int rows = static_cast<int>(x.size() / cols);
  std::vector<double> out(x.data().size());
  std::vector<double> inv_sigma(rows), xhat(x.data().size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + static_cast<size_t>(r) * cols;
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += xr[c];
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (int c = 0; c < cols; ++c) {
      const size_t i = static_cast<size_t>(r) * cols + c;
      xhat[i] = (xr[c] - mu) * is;
      out[i] = xhat[i] * gamma.data()[c] + beta.data()[c];
    }
  }
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [xn, gn, bn, rows, cols, inv_sigma = std::move(inv_sigma),
                  xhat = std::move(xhat)](TensorNode& o) {
                   for (int r = 0; r < rows; ++r) {
                     const size_t base = static_cast<size_t>(r) * cols;
                     const double* go = o.grad.data() + base;
                     const double* xh = xhat.data() + base;
                     if (gn->requires_grad) {
                       gn->ensure_grad();
                       for (int c = 0; c < cols; ++c) gn->grad[c] += go[c] * xh[c];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (int c = 0; c < cols; ++c) bn->grad[c] += go[c];
                     }
                     if (xn->requires_grad) {
                       xn->ensure_grad();
                       double mean_g = 0.0, mean_gx = 0.0;
                       for (int c = 0; c < cols; ++c) {
                         const double gg = go[c] * gn->value[c];
                         mean_g += gg;
                         mean_gx += gg * xh[c];
                       }
                       mean_g /= cols;
                       mean_gx /= cols;
                       for (int c = 0; c < cols; ++c) {
                         const double gg = go[c] * gn->value[c];
                         xn->grad[base + c] +=
                             (gg - mean_g - xh[c] * mean_gx) * inv_sigma[r];
                       }
                     }
                   }
                 });
}

Tensor softmax_lastdim(const Tensor& x) {
  const int cols = x.shape().back();
  if (cols < 1) throw ConfigError("softmax_lastdim: empty last dimension");
  for (double v : x.data())
    if (std::isnan(v)) throw NumericError("softmax_lastdim: NaN in input");
  const int rows = static_cast<int>(x.size() / cols);
  std::vector<double> out(x.data().size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + static_cast<size_t>(r) * cols;
    double* yr = out.data() + static_cast<size_t>(r) * cols;
    double mx = xr[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    for (int c = 0; c < cols; ++c) yr[c] /= z;
  }
  auto xn = x.node_ptr();
  return make_op(x.shape(), std::move(out), {x}, [xn, rows, cols](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const size_t base = static_cast<size_t>(r) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += o.grad[base + c] * o.value[base + c];
      for (int c = 0; c < cols; ++c)
        xn->grad[base + c] += o.value[base + c] * (o.grad[base + c] - dot);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node_ptr();
  return make_op({1}, {s}, {x}, [xn](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node_ptr();
  return make_op({1}, {s * inv}, {x}, [xn, inv](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += o.grad[0] * inv;
  });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  require_rank2(x, "slice_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  if (r0 < 0 || r1 > rows || r0 >= r1)
    throw ConfigError("slice_rows: bad range [" + std::to_string(r0) + "," +
                      std::to_string(r1) + ") for " + std::to_string(rows) + " rows");
  std::vector<double> out(static_cast<size_t>(r1 - r0) * cols);
  std::copy(x.data().begin() + static_cast<size_t>(r0) * cols,
            x.data().begin() + static_cast<size_t>(r1) * cols, out.begin());
  auto xn = x.node_ptr();
  return make_op({r1 - r0, cols}, std::move(out), {x}, [xn, r0, cols](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const size_t base = static_cast<size_t>(r0) * cols;
    for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[base + i] += o.grad[i];
  });
}

Tensor select_rows(const Tensor& x, const std::vector<int>& idx) {
  require_rank2(x, "select_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(idx.size() * static_cast<size_t>(cols));
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows)
      throw ConfigError("select_rows: index " + std::to_string(idx[i]) +
                        " out of range for " + std::to_string(rows) + " rows");
    std::copy(x.data().begin() + static_cast<size_t>(idx[i]) * cols,
              x.data().begin() + static_cast<size_t>(idx[i] + 1) * cols,
              out.begin() + i * cols);
  }
  auto xn = x.node_ptr();
  return make_op({static_cast<int>(idx.size()), cols}, std::move(out), {x},
                 [xn, idx, cols](TensorNode& o) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   for (size_t i = 0; i < idx.size(); ++i) {
                     const size_t src = i * cols;
                     const size_t dst = static_cast<size_t>(idx[i]) * cols;
                     for (int c = 0; c < cols; ++c)
                       xn->grad[dst + c] += o.grad[src + c];
                   }
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no parts");
  const int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != cols) throw ConfigError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<double> out(static_cast<size_t>(rows) * cols);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.begin() + off);
    off += p.data().size();
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_op({rows, cols}, std::move(out), parts, [nodes](TensorNode& o) {
    size_t off = 0;
    for (auto& n : nodes) {
      if (n->requires_grad) {
        n->ensure_grad();
        for (size_t i = 0; i < n->value.size(); ++i) n->grad[i] += o.grad[off + i];
      }
      off += n->value.size();
    }
  });
}

Tensor zero_rows(const Tensor& x, const std::vector<uint8_t>& keep) {
  require_rank2(x, "zero_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(keep.size()) != rows)
    throw ConfigError("zero_rows: mask length " + std::to_string(keep.size()) +
                      " vs " + std::to_string(rows) + " rows");
  std::vector<double> out(x.data().size(), 0.0);
  for (int r = 0; r < rows; ++r)
    if (keep[r])
      std::copy(x.data().begin() + static_cast<size_t>(r) * cols,
                x.data().begin() + static_cast<size_t>(r + 1) * cols,
                out.begin() + static_cast<size_t>(r) * cols);
  auto xn = x.node_ptr();
  return make_op(x.shape(), std::move(out), {x}, [xn, keep, cols](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t r = 0; r < keep.size(); ++r)
      if (keep[r])
        for (int c = 0; c < cols; ++c)
          xn->grad[r * cols + c] += o.grad[r * cols + c];
  });
}

Tensor bce_mean(const Tensor& probs, const Tensor& targets) {
  require_same_shape(probs, targets, "bce_mean");
  constexpr double clamp = 1e-12;
  const double inv = 1.0 / static_cast<double>(probs.size());
  double loss = 0.0;
  std::vector<uint8_t> clamped(probs.data().size(), 0);
  for (size_t i = 0; i < probs.data().size(); ++i) {
    double p = probs.data()[i];
    if (p < clamp) {
      p = clamp;
      clamped[i] = 1;
    } else if (p > 1.0 - clamp) {
      p = 1.0 - clamp;
      clamped[i] = 1;
    }
    const double t = targets.data()[i];
    loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  auto pn = probs.node_ptr();
  auto tn = targets.node_ptr();
  return make_op({1}, {loss * inv}, {probs, targets},
                 [pn, tn, inv, clamped = std::move(clamped)](TensorNode& o) {
                   if (!pn->requires_grad) return;
                   pn->ensure_grad();
                   for (size_t i = 0; i < pn->value.size(); ++i) {
                     if (clamped[i]) continue;  // flat in the clamped region
                     const double p = pn->value[i];
                     const double t = tn->value[i];
                     pn->grad[i] += o.grad[0] * inv * (-t / p + (1.0 - t) / (1.0 - p));
                   }
                 });
}

Tensor softmax_cross_entropy(const Tensor& logits, int label) {
  const int n = static_cast<int>(logits.size());
  if (label < 0 || label >= n)
    throw ConfigError("softmax_cross_entropy: label " + std::to_string(label) +
                      " out of range for " + std::to_string(n) + " classes");
  double mx = logits.data()[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - mx);
  const double loss = std::log(z) + mx - logits.data()[static_cast<size_t>(label)];
  auto ln = logits.node_ptr();
  return make_op({1}, {loss}, {logits}, [ln, label, mx, z](TensorNode& o) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    for (size_t i = 0; i < ln->value.size(); ++i) {
      const double p = std::exp(ln->value[i] - mx) / z;
      ln->grad[i] += o.grad[0] * (p - (static_cast<int>(i) == label ? 1.0 : 0.0));
    }
  });
}

bool adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size())
    throw ConfigError("adam_step: param/grad size mismatch");
  if (state.m.size() != params.size()) state.m.assign(params.size(), 0.0);
  if (state.v.size() != params.size()) state.v.assign(params.size(), 0.0);
  for (double g : grads)
    if (!std::isfinite(g)) return false;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  return true;
}

void fill_trunc_normal(std::vector<double>& buf, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  for (auto& x : buf) {
    double z = N(rng);
    while (std::abs(z) > 2.0) z = N(rng);
    x = z * stddev;
  }
}

}  // namespace pavt
