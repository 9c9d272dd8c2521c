#include <doctest.h>

#include <cmath>
#include <random>

#include "pavt/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace pavt;
using pavt::testing::Buffers;
using pavt::testing::max_grad_rel_err;

namespace {

std::vector<double> random_vec(size_t n, std::mt19937_64& rng, double lo = -1.0,
                               double hi = 1.0) {
  std::uniform_real_distribution<double> U(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = U(rng);
  return v;
}

}  // namespace

TEST_CASE("matmul identity cases") {
  Tape tape;
  Tensor I = Tensor::leaf({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor B = Tensor::leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor C = matmul(I, B);
  CHECK(C.data() == B.data());

  Tensor A = Tensor::leaf({2, 2}, {1, 2, 3, 4});
  Tensor I2 = Tensor::leaf({2, 2}, {1, 0, 0, 1});
  CHECK(matmul(A, I2).data() == A.data());
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor A = Tensor::zeros({2, 3});
  Tensor B = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(A, B),
                       doctest::Contains("[2x3]"), ConfigError);
}

TEST_CASE("matmul gradient vs central finite differences") {
  auto rng = rng_stream(7);
  Buffers x0 = {random_vec(20, rng), random_vec(15, rng)};
  const auto weights = random_vec(12, rng);

  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor a = Tensor::leaf({4, 5}, in[0], true, &tape);
    Tensor b = Tensor::leaf({5, 3}, in[1], true, &tape);
    Tensor c = matmul(a, b);
    double s = 0.0;
    for (size_t i = 0; i < c.data().size(); ++i) s += weights[i] * c.data()[i];
    return s;
  };

  Tape tape;
  Tensor a = Tensor::leaf({4, 5}, x0[0], true, &tape);
  Tensor b = Tensor::leaf({5, 3}, x0[1], true, &tape);
  Tensor c = matmul(a, b);
  Tensor w = Tensor::leaf({4, 3}, weights);
  tape.backward(sum(mul(c, w)));

  CHECK(max_grad_rel_err(f, x0, {a.grad(), b.grad()}) < 1e-6);
}

TEST_CASE("softmax basics") {
  Tensor x = Tensor::leaf({3}, {0, 0, 0});
  auto y = softmax_lastdim(x);
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor big = Tensor::leaf({2}, {1000.0, 0.0});
  auto yb = softmax_lastdim(big);
  CHECK(std::isfinite(yb.data()[0]));
  CHECK(yb.data()[0] == doctest::Approx(1.0));
  CHECK(yb.data()[1] == doctest::Approx(0.0));

  Tensor bad = Tensor::leaf({2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(softmax_lastdim(bad), NumericError);
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  auto rng = rng_stream(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = random_vec(7, rng, -5, 5);
    Tensor x = Tensor::leaf({7}, v);
    auto y = softmax_lastdim(x);
    double s = 0.0;
    for (double e : y.data()) s += e;
    CHECK(std::abs(s - 1.0) < 1e-9);

    std::uniform_real_distribution<double> U(-10, 10);
    const double c = U(rng);
    for (auto& e : v) e += c;
    auto y2 = softmax_lastdim(Tensor::leaf({7}, v));
    for (size_t i = 0; i < y.data().size(); ++i)
      CHECK(std::abs(y.data()[i] - y2.data()[i]) < 1e-12);
  }
}

TEST_CASE("softmax gradient vs finite differences") {
  auto rng = rng_stream(13);
  Buffers x0 = {random_vec(9, rng, -2, 2)};
  const auto c = random_vec(9, rng);

  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor x = Tensor::leaf({9}, in[0], true, &tape);
    auto y = softmax_lastdim(x);
    double s = 0.0;
    for (size_t i = 0; i < y.data().size(); ++i) s += c[i] * y.data()[i];
    return s;
  };

  Tape tape;
  Tensor x = Tensor::leaf({9}, x0[0], true, &tape);
  tape.backward(sum(mul(softmax_lastdim(x), Tensor::leaf({9}, c))));
  CHECK(max_grad_rel_err(f, x0, {x.grad()}) < 1e-6);
}

TEST_CASE("elementwise basics") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));

  // layernorm of a constant vector is zero before scale/shift
  Tensor x = Tensor::leaf({4}, {3.5, 3.5, 3.5, 3.5});
  Tensor g = Tensor::leaf({4}, {1, 1, 1, 1});
  Tensor b = Tensor::leaf({4}, {0, 0, 0, 0});
  for (double v : layernorm(x, g, b).data()) CHECK(v == doctest::Approx(0.0));

  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), NumericError);
  CHECK_THROWS_AS(log(Tensor::scalar(0.0)), NumericError);
}

TEST_CASE("gelu gradient on 100 random scalars") {
  auto rng = rng_stream(17);
  std::uniform_real_distribution<double> U(-3, 3);
  for (int i = 0; i < 100; ++i) {
    const double v = U(rng);
    auto f = [](const Buffers& in) {
      Tape tape;
      Tensor x = Tensor::leaf({1}, in[0], true, &tape);
      return gelu(x).item();
    };
    Tape tape;
    Tensor x = Tensor::leaf({1}, {v}, true, &tape);
    tape.backward(gelu(x));
    CHECK(max_grad_rel_err(f, {{v}}, {x.grad()}) < 1e-5);
  }
}

TEST_CASE("layernorm and sigmoid gradients") {
  auto rng = rng_stream(19);
  Buffers x0 = {random_vec(12, rng), random_vec(4, rng), random_vec(4, rng)};
  const auto c = random_vec(12, rng);

  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor x = Tensor::leaf({3, 4}, in[0], true, &tape);
    Tensor g = Tensor::leaf({4}, in[1], true, &tape);
    Tensor b = Tensor::leaf({4}, in[2], true, &tape);
    auto y = sigmoid(layernorm(x, g, b));
    double s = 0.0;
    for (size_t i = 0; i < y.data().size(); ++i) s += c[i] * y.data()[i];
    return s;
  };

  Tape tape;
  Tensor x = Tensor::leaf({3, 4}, x0[0], true, &tape);
  Tensor g = Tensor::leaf({4}, x0[1], true, &tape);
  Tensor b = Tensor::leaf({4}, x0[2], true, &tape);
  tape.backward(sum(mul(sigmoid(layernorm(x, g, b)), Tensor::leaf({3, 4}, c))));
  CHECK(max_grad_rel_err(f, x0, {x.grad(), g.grad(), b.grad()}) < 1e-4);
}

TEST_CASE("backward on sum gives all-ones; scaling by zero gives zeros") {
  Tape tape;
  Tensor x = Tensor::leaf({2, 3}, {1, -2, 3, 0.5, 4, -1}, true, &tape);
  tape.backward(sum(x));
  for (double gv : x.grad()) CHECK(gv == doctest::Approx(1.0));

  Tape tape2;
  Tensor y = Tensor::leaf({5}, {1, 2, 3, 4, 5}, true, &tape2);
  tape2.backward(sum(scale(y, 0.0)));
  for (double gv : y.grad()) CHECK(gv == doctest::Approx(0.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  Tensor x = Tensor::leaf({2}, {1, 2}, true, &tape);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ConfigError);
}

TEST_CASE("backward is deterministic for a fixed graph") {
  auto rng = rng_stream(23);
  auto v = random_vec(16, rng);
  std::vector<double> first;
  for (int run = 0; run < 2; ++run) {
    Tape tape;
    Tensor x = Tensor::leaf({4, 4}, v, true, &tape);
    Tensor y = matmul(gelu(x), transpose(x));
    tape.backward(mean(y));
    if (run == 0)
      first = x.grad();
    else
      CHECK(first == x.grad());
  }
}

TEST_CASE("two-layer MLP with BCE full-graph gradient check") {
  auto rng = rng_stream(29);
  const int B = 3, In = 5, Hidden = 4;
  Buffers x0 = {random_vec(B * In, rng), random_vec(In * Hidden, rng),
                random_vec(Hidden, rng), random_vec(Hidden, rng), {0.0}};
  x0[4] = random_vec(1, rng);
  std::vector<double> targets = {1, 0, 1};

  auto build = [&](const Buffers& in, Tape* tape, Tensor (&out)[6]) {
    out[0] = Tensor::leaf({B, In}, in[0], true, tape);
    out[1] = Tensor::leaf({In, Hidden}, in[1], true, tape);
    out[2] = Tensor::leaf({Hidden}, in[2], true, tape);
    out[3] = Tensor::leaf({Hidden, 1}, in[3], true, tape);
    out[4] = Tensor::leaf({1}, in[4], true, tape);
    Tensor h = gelu(add_rowvec(matmul(out[0], out[1]), out[2]));
    Tensor p = sigmoid(add_rowvec(matmul(h, out[3]), out[4]));
    Tensor t = Tensor::leaf({B, 1}, targets);
    out[5] = bce_mean(p, t);
    return out[5];
  };

  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor nodes[6];
    return build(in, &tape, nodes).item();
  };

  Tape tape;
  Tensor nodes[6];
  Tensor loss = build(x0, &tape, nodes);
  tape.backward(loss);
  Buffers analytic;
  for (int i = 0; i < 5; ++i) analytic.push_back(nodes[i].grad());
  CHECK(max_grad_rel_err(f, x0, analytic, 1e-5) < 1e-4);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  std::vector<double> p = {1.0, -2.0, 3.0};
  std::vector<double> g = {0.0, 0.0, 0.0};
  AdamState st;
  AdamConfig cfg;
  CHECK(adam_step(p, g, st, cfg));
  CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam first step approaches -lr * sign(g)") {
  std::vector<double> p = {0.0};
  std::vector<double> g = {0.37};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  CHECK(adam_step(p, g, st, cfg));
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps') = ~lr.
  CHECK(p[0] == doctest::Approx(-cfg.lr).epsilon(1e-4));
}

TEST_CASE("adam rejects non-finite gradients") {
  std::vector<double> p = {1.0};
  std::vector<double> g = {std::nan("")};
  AdamState st;
  AdamConfig cfg;
  CHECK_FALSE(adam_step(p, g, st, cfg));
  CHECK(p[0] == 1.0);
  CHECK(st.t == 0);
}

TEST_CASE("adam converges on a quadratic bowl") {
  std::vector<double> p = {5.0};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.05;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> g = {2.0 * p[0]};
    REQUIRE(adam_step(p, g, st, cfg));
  }
  CHECK(p[0] * p[0] < 1e-6);
}

TEST_CASE("gradient suite across remaining ops") {
  auto rng = rng_stream(31);
  // relu, log, mean, slice/select/concat/zero_rows, add_rowvec, transpose
  Buffers x0 = {random_vec(12, rng, 0.2, 2.0)};
  const auto c = random_vec(6, rng);

  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor x = Tensor::leaf({4, 3}, in[0], true, &tape);
    Tensor part = concat_rows({slice_rows(x, 0, 1), select_rows(x, {2})});
    part = zero_rows(part, {1, 1});
    Tensor y = mul(log(part), relu(part));
    double s = 0.0;
    for (size_t i = 0; i < y.data().size(); ++i) s += c[i] * y.data()[i];
    return s;
  };

  Tape tape;
  Tensor x = Tensor::leaf({4, 3}, x0[0], true, &tape);
  Tensor part = concat_rows({slice_rows(x, 0, 1), select_rows(x, {2})});
  part = zero_rows(part, {1, 1});
  tape.backward(sum(mul(mul(log(part), relu(part)), Tensor::leaf({2, 3}, c))));
  CHECK(max_grad_rel_err(f, x0, {x.grad()}) < 1e-4);
}

TEST_CASE("softmax cross entropy gradient and uniform value") {
  Tensor logits = Tensor::leaf({4}, {0, 0, 0, 0});
  CHECK(softmax_cross_entropy(logits, 2).item() == doctest::Approx(std::log(4.0)));

  auto rng = rng_stream(37);
  Buffers x0 = {random_vec(5, rng, -2, 2)};
  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor x = Tensor::leaf({5}, in[0], true, &tape);
    return softmax_cross_entropy(x, 3).item();
  };
  Tape tape;
  Tensor x = Tensor::leaf({5}, x0[0], true, &tape);
  tape.backward(softmax_cross_entropy(x, 3));
  CHECK(max_grad_rel_err(f, x0, {x.grad()}) < 1e-6);
}
