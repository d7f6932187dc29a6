#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "draft/gradcheck_suite.hpp"
#include "draft/kernels.hpp"
#include "draft/optim.hpp"
#include "draft/tensor.hpp"

using namespace draft;

namespace {

Tensor vec(std::vector<double> v, DType d = DType::f64) {
  const std::size_t n = v.size();
  return Tensor::from({n}, std::move(v), d);
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("softmax examples") {
  auto y = softmax(vec({0, 0}), 0);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(0.5));

  // Closed form: e^i / (e + e^2 + e^3).
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  auto s = softmax(vec({1, 2, 3}), 0);
  for (int i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(std::exp(i + 1.0) / z).epsilon(1e-14));
  CHECK(s[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s[2] == doctest::Approx(0.66524).epsilon(1e-4));

  BoolMask m({2}, std::vector<std::uint8_t>{1, 0});
  auto masked = softmax(vec({5, 5}), 0, &m);
  CHECK(masked[0] == 1.0);
  CHECK(masked[1] == 0.0);

  BoolMask none({2}, false);
  CHECK_THROWS_WITH(softmax(vec({1, 2}), 0, &none), "fully masked softmax row");
}

TEST_CASE("softmax rows sum to one along a middle axis") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<double> v(2 * 4 * 3);
  for (auto& x : v) x = n(rng);
  auto y = softmax(Tensor::from({2, 4, 3}, v, DType::f64), 1);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t l = 0; l < 4; ++l) s += y[(o * 4 + l) * 3 + i];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("layer_norm examples") {
  auto one = vec({1, 1}), zero = vec({0, 0});
  auto y = layer_norm(Tensor::from({1, 2}, {1, 3}, DType::f64), one, zero, 0.0);
  CHECK(y[0] == -1.0);
  CHECK(y[1] == 1.0);

  auto c = layer_norm(Tensor::from({1, 3}, {4, 4, 4}, DType::f64), vec({1, 1, 1}), vec({0, 0, 0}), 1e-5);
  for (int i = 0; i < 3; ++i) CHECK(c[i] == 0.0);

  auto a = layer_norm(Tensor::from({1, 2}, {1, 3}, DType::f64), vec({2, 2}), vec({1, 1}), 0.0);
  CHECK(a[0] == -1.0);
  CHECK(a[1] == 3.0);

  CHECK_THROWS(layer_norm(Tensor::zeros({2, 0}, DType::f64), Tensor::zeros({0}), Tensor::zeros({0}), 1e-5));
}

TEST_CASE("conv1d examples") {
  auto x = Tensor::from({3, 1}, {1, 2, 3}, DType::f64);
  auto k = Tensor::from({2, 1, 1}, {1, 1}, DType::f64);
  auto y = conv1d(x, k, 1, Padding::causal);
  REQUIRE(y.numel() == 3);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 3.0);
  CHECK(y[2] == 5.0);

  auto ident = Tensor::from({1, 1, 1}, {1}, DType::f64);
  for (Padding p : {Padding::causal, Padding::same, Padding::none}) {
    auto z = conv1d(x, ident, 1, p);
    CHECK(bit_equal(z.data(), x.data()));
  }

  auto long_x = Tensor::zeros({16, 1}, DType::f64);
  auto k2 = Tensor::from({3, 1, 1}, {1, 1, 1}, DType::f64);
  auto h = conv1d(conv1d(long_x, k2, 2, Padding::causal), k2, 2, Padding::causal);
  CHECK(h.dim(0) == 4);
  CHECK(conv1d_out_len(10, 3, 2, Padding::none) == 4);
  CHECK_THROWS(conv1d(x, k, 0, Padding::same));
  CHECK_THROWS(conv1d(x, Tensor::zeros({4, 1, 1}, DType::f64), 1, Padding::none));
}

TEST_CASE("causal conv output depends only on the past") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<double> xv(10 * 2), kv(3 * 2 * 2);
  for (auto& v : xv) v = n(rng);
  for (auto& v : kv) v = n(rng);
  auto k = Tensor::from({3, 2, 2}, kv, DType::f64);
  auto base = conv1d(Tensor::from({10, 2}, xv, DType::f64), k, 2, Padding::causal);
  xv[7 * 2] += 10.0;  // raw frame 7 feeds output index >= 4 only
  auto moved = conv1d(Tensor::from({10, 2}, xv, DType::f64), k, 2, Padding::causal);
  for (std::size_t i = 0; i < 4 * 2; ++i) CHECK(base[i] == moved[i]);
  CHECK(base[4 * 2] != moved[4 * 2]);
}

TEST_CASE("backward examples") {
  Tape tape;
  Tape::Scope scope(tape);
  auto x = Tensor::scalar(2.0, DType::f64).set_requires_grad(true);
  auto y = Tensor::scalar(3.0, DType::f64).set_requires_grad(true);
  auto f = mul(x, y);
  backward(f, tape);
  CHECK(x.grad()[0] == 3.0);
  CHECK(y.grad()[0] == 2.0);

  tape.reset();
  auto r = vec({-1, 2}).set_requires_grad(true);
  backward(sum(relu(r)), tape);
  CHECK(r.grad()[0] == 0.0);
  CHECK(r.grad()[1] == 1.0);
}

TEST_CASE("backward twice doubles gradients exactly") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  std::vector<double> av(12), bv(12);
  for (auto& v : av) v = n(rng);
  for (auto& v : bv) v = n(rng);
  Tape tape;
  Tape::Scope scope(tape);
  auto a = Tensor::from({3, 4}, av, DType::f64).set_requires_grad(true);
  auto b = Tensor::from({4, 3}, bv, DType::f64).set_requires_grad(true);
  auto loss = sum(gelu(matmul(a, b)));
  loss = add(loss, sum(mul(a, a)));  // a reached along two paths
  backward(loss, tape);
  std::vector<double> once(a.grad().begin(), a.grad().end());
  backward(loss, tape);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(a.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("backward error paths") {
  Tape tape;
  Tape::Scope scope(tape);
  auto x = vec({1, 2}).set_requires_grad(true);
  auto y = scale(x, 2.0);
  CHECK_THROWS_WITH(backward(y, tape), doctest::Contains("scalar"));
  auto s = sum(y);
  tape.reset();
  CHECK_THROWS_WITH(backward(s, tape), "tensor used after tape reset");
  CHECK_THROWS_WITH(scale(y, 1.0), "tensor used after tape reset");
}

TEST_CASE("frozen tensors receive no gradient") {
  Tape tape;
  Tape::Scope scope(tape);
  auto w = vec({1, 2});
  auto x = vec({3, 4}).set_requires_grad(true);
  backward(sum(mul(w, x)), tape);
  CHECK_FALSE(w.has_grad());
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("float32 tensors hold single-precision values") {
  auto t = Tensor::from({1}, {0.1}, DType::f32);
  CHECK(t[0] == static_cast<double>(0.1f));
  auto u = add(t, Tensor::from({1}, {0.2}, DType::f32));
  CHECK(u[0] == static_cast<double>(0.1f + 0.2f));
  CHECK(u.dtype() == DType::f32);
  CHECK(add(t, vec({1.0})).dtype() == DType::f64);
}

TEST_CASE("verification mode rejects non-finite results from finite inputs") {
  kernels::ExecModeScope mode(kernels::ExecMode::verification);
  CHECK_THROWS_WITH(exp(vec({1000.0})), doctest::Contains("non-finite"));
  CHECK_NOTHROW(exp(vec({std::numeric_limits<double>::infinity()})));
}

TEST_CASE("adam_step examples") {
  std::vector<Tensor> p{vec({1.0})};
  AdamState st({.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8}, p);
  adam_step(p, {{1.0}}, st);
  CHECK(st.t == 1);
  CHECK(p[0][0] - 1.0 == doctest::Approx(-0.1).epsilon(1e-7));

  std::vector<Tensor> q{vec({0.5, -0.5})};
  AdamState zs({}, q);
  adam_step(q, {{0.0, 0.0}}, zs);
  CHECK(zs.t == 1);
  CHECK(q[0][0] == 0.5);
  CHECK(q[0][1] == -0.5);

  // m_t = (1 - beta1^t) g for a constant gradient.
  std::vector<Tensor> r{vec({0.0})};
  AdamState rs({.lr = 0.01}, r);
  adam_step(r, {{2.0}}, rs);
  CHECK(rs.m[0][0] == doctest::Approx(2.0 * (1 - 0.9)));
  adam_step(r, {{2.0}}, rs);
  CHECK(rs.m[0][0] == doctest::Approx(2.0 * (1 - 0.9 * 0.9)));
  CHECK(2.0 - rs.m[0][0] == doctest::Approx(0.9 * (2.0 - 0.2)));

  CHECK_THROWS(adam_step(p, {{1.0, 2.0}}, st));
}

TEST_CASE("finite difference gradcheck examples") {
  auto sq = [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[0])); };
  CHECK(finite_diff_gradcheck(sq, {vec({3.0})}) < 1e-9);
  auto lin = [](const std::vector<Tensor>& in) { return sum(in[0]); };
  CHECK(finite_diff_gradcheck(lin, {vec({0.5, -2.0, 7.0})}, 0.5) == 0.0);

  int calls = 0;
  auto noisy = [&calls](const std::vector<Tensor>& in) { return add_scalar(sum(in[0]), ++calls * 1e-3); };
  CHECK_THROWS_WITH(finite_diff_gradcheck(noisy, {vec({1.0})}), doctest::Contains("deterministic"));
}

TEST_CASE("every primitive passes gradcheck") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (const auto& r : primitive_gradchecks(seed)) {
      INFO(r.name << " seed " << seed);
      CHECK(r.max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("serial and OpenMP kernels agree bit for bit") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  std::vector<double> a(37 * 19), b(19 * 23);
  for (auto& v : a) v = n(rng);
  for (auto& v : b) v = n(rng);
  std::vector<double> c1(37 * 23), c2(37 * 23);
  kernels::GemmArgs g{.m = 37, .n = 23, .k = 19, .a = a, .b = b, .c = c1};
  kernels::serial::gemm(g);
  g.c = c2;
  kernels::omp::gemm(g);
  CHECK(bit_equal(c1, c2));

  std::vector<double> y1(a.size()), y2(a.size());
  kernels::serial::softmax_rows(37, 19, a, {}, y1);
  kernels::omp::softmax_rows(37, 19, a, {}, y2);
  CHECK(bit_equal(y1, y2));
}

TEST_CASE("forward ops are deterministic") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<double> v(5 * 6);
  for (auto& x : v) x = n(rng);
  auto x = Tensor::from({5, 6}, v);
  auto one = [&] { return softmax(matmul(x, transpose(x, 0, 1)), 1); };
  CHECK(bit_equal(one().data(), one().data()));
}

TEST_CASE("straight_through forwards the hard value and routes gradient to soft") {
  Tape tape;
  Tape::Scope scope(tape);
  auto soft = Tensor::from({3}, {0.2, 0.5, 0.3}, DType::f64);
  soft.set_requires_grad(true);
  auto hard = Tensor::from({3}, {0.0, 1.0, 0.0}, DType::f64);
  auto y = straight_through(hard, soft);
  CHECK(y[1] == 1.0);
  CHECK(y[0] == 0.0);
  backward(sum(mul(y, Tensor::from({3}, {1.0, 2.0, 3.0}, DType::f64))), tape);
  CHECK(soft.grad()[0] == 1.0);
  CHECK(soft.grad()[2] == 3.0);
}
