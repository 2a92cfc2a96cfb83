#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "pini/rng.hpp"
#include "pini/tensor.hpp"

using namespace pini;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, RandomStream& rng, bool rg = true) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), rg);
}

}  // namespace

TEST_CASE("softmax matches the analytic two-class values") {
  Tensor x({2}, {1.0, 0.0});
  Tensor p = softmax(x, 1.0);
  CHECK(p.at(0) == doctest::Approx(0.73106).epsilon(1e-4));
  CHECK(p.at(1) == doctest::Approx(0.26894).epsilon(1e-4));

  Tensor q = softmax(x, 0.07);
  CHECK(q.at(0) == doctest::Approx(0.99999938).epsilon(1e-7));
  CHECK(q.at(1) == doctest::Approx(6.2e-7).epsilon(0.05));
}

TEST_CASE("softmax outputs sum to one and stay positive") {
  RandomStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 2 + rng.uniform_index(9);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-20.0, 20.0);
    Tensor p = softmax(Tensor({n}, v), 0.07);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p.at(i) > 0.0);
      s += p.at(i);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("l2_normalize gives the 3-4-5 triangle and unit norms") {
  Tensor v({2}, {3.0, 4.0});
  Tensor u = l2_normalize(v);
  CHECK(u.at(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(u.at(1) == doctest::Approx(0.8).epsilon(1e-12));

  RandomStream rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor x = random_tensor({8}, rng, false);
    Tensor y = l2_normalize(x);
    double norm = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) norm += y.at(i) * y.at(i);
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(l2_normalize(Tensor::zeros({3})), std::domain_error);
}

TEST_CASE("cosine of orthogonal vectors is zero") {
  Tensor a({2}, {1.0, 0.0});
  Tensor b({2}, {0.0, 1.0});
  CHECK(cosine(a, b).value() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("domain and shape errors") {
  CHECK_THROWS_AS(log(Tensor({1}, {-1.0})), std::domain_error);
  CHECK_THROWS_AS(log(Tensor({1}, {0.0})), std::domain_error);
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("backward of x*x at x=3 gives 6") {
  Tensor x = Tensor::scalar(3.0, true);
  Graph g;
  Tensor loss = mul(x, x);
  g.backward(loss);
  CHECK(x.grad_at(0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward of a constant loss leaves grads at zero") {
  Tensor x = Tensor::scalar(3.0, true);
  Graph g;
  Tensor loss = Tensor::scalar(1.5);
  g.backward(loss);
  CHECK(x.grad_at(0) == 0.0);
}

TEST_CASE("backward on non-scalar and double backward throw") {
  Tensor x({2}, {1.0, 2.0}, true);
  {
    Graph g;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
  }
  {
    Graph g;
    Tensor loss = sum(mul(x, x));
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), std::logic_error);
  }
}

TEST_CASE("nested graphs are rejected") {
  Graph g;
  CHECK_THROWS_AS(Graph(), std::logic_error);
}

TEST_CASE("grad_check on softplus matches the analytic derivative at zero") {
  Tensor theta({1}, {0.0}, true);
  auto loss_fn = [&] { return sum(softplus(theta)); };
  {
    Graph g;
    Tensor loss = loss_fn();
    g.backward(loss);
    CHECK(theta.grad_at(0) == doctest::Approx(0.5).epsilon(1e-12));
  }
  CHECK(grad_check(loss_fn, {theta}, 1e-4) < 1e-6);
}

TEST_CASE("grad_check is nearly exact for a linear loss") {
  RandomStream rng(3);
  Tensor theta = random_tensor({5}, rng);
  Tensor c = random_tensor({5}, rng, false);
  auto loss_fn = [&] { return sum(mul(theta, c)); };
  CHECK(grad_check(loss_fn, {theta}, 1e-4) < 1e-9);
}

TEST_CASE("grad_check rejects a bad step size and nondeterministic losses") {
  Tensor theta({1}, {0.3}, true);
  auto loss_fn = [&] { return sum(softplus(theta)); };
  CHECK_THROWS_AS(grad_check(loss_fn, {theta}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(grad_check(loss_fn, {theta}, 0.1), std::invalid_argument);

  RandomStream noise(9);
  auto bad_fn = [&] { return sum(add(softplus(theta), Tensor::scalar(noise.uniform()))); };
  CHECK_THROWS_AS(grad_check(bad_fn, {theta}, 1e-4), std::invalid_argument);
}

TEST_CASE("grad_check passes on every public op with random inputs") {
  RandomStream rng(17);
  const double h = 1e-4;
  const double tol = 1e-5;

  SUBCASE("elementwise, reductions and nonlinearities") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    CHECK(grad_check([&] { return sum(mul(add(a, b), sub(a, b))); }, {a, b}, h) < tol);
    CHECK(grad_check([&] { return mean(exp(mul(a, 0.5))); }, {a}, h) < tol);
    CHECK(grad_check([&] { return sum(tanh(a)); }, {a}, h) < tol);
    CHECK(grad_check([&] { return sum(softplus(neg(a))); }, {a}, h) < tol);
    CHECK(grad_check([&] { return sum(log(add(softplus(a), 0.1))); }, {a}, h) < tol);
    CHECK(grad_check([&] { return sum(mean_rows(mul(a, b))); }, {a, b}, h) < tol);
  }

  SUBCASE("matmul, transpose, reshape, concat, gather") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    CHECK(grad_check([&] { return sum(matmul(a, b)); }, {a, b}, h) < tol);
    CHECK(grad_check([&] { return sum(matmul(transpose(b), transpose(a))); }, {a, b}, h) < tol);
    CHECK(grad_check([&] { return sum(reshape(a, {12})); }, {a}, h) < tol);

    Tensor u = random_tensor({3}, rng);
    Tensor v = random_tensor({2}, rng);
    CHECK(grad_check([&] { return sum(tanh(concat(u, v))); }, {u, v}, h) < tol);
    CHECK(grad_check([&] { return sum(mul(stack_rows({u, u}), 0.5)); }, {u}, h) < tol);

    std::vector<std::size_t> idx = {0, 2, 2, 5};
    CHECK(grad_check([&] { return sum(gather_flat(a, idx, {4})); }, {a}, h) < tol);
  }

  SUBCASE("normalization, cosine and softmax") {
    Tensor u = random_tensor({6}, rng);
    Tensor v = random_tensor({6}, rng);
    Tensor m = random_tensor({4, 6}, rng);
    CHECK(grad_check([&] { return sum(l2_normalize(u)); }, {u}, h) < tol);
    CHECK(grad_check([&] { return sum(mul(normalize_rows(m), 0.7)); }, {m}, h) < tol);
    CHECK(grad_check([&] { return cosine(u, v); }, {u, v}, h) < tol);
    CHECK(grad_check([&] { return sum(mul(softmax(u, 0.5), u)); }, {u}, h) < tol);
    CHECK(grad_check([&] { return sum(mul(softmax_rows(m, 2.0), m)); }, {m}, h) < tol);
  }

  SUBCASE("attention and affine helpers") {
    Tensor q = random_tensor({2, 4}, rng);
    Tensor k = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({3, 5}, rng);
    CHECK(grad_check([&] { return sum(attention(q, k, v)); }, {q, k, v}, h) < tol);

    Tensor x = random_tensor({4}, rng);
    Tensor w = random_tensor({4, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    CHECK(grad_check([&] { return sum(tanh(affine_vec(x, w, b))); }, {x, w, b}, h) < tol);
    CHECK(grad_check([&] { return sum(tanh(affine_rows(q, w, b))); }, {q, w, b}, h) < tol);
  }

  SUBCASE("conv2d") {
    Tensor img = random_tensor({2, 5, 5}, rng);
    Tensor ker = random_tensor({3, 2, 3, 3}, rng);
    Tensor bias = random_tensor({3}, rng);
    CHECK(grad_check([&] { return sum(tanh(conv2d(img, ker, bias))); }, {img, ker, bias}, h) < tol);
  }
}

TEST_CASE("leaf mutators are rejected on intermediates") {
  Tensor x = Tensor::scalar(1.0, true);
  Graph g;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(y.set_at(0, 2.0), std::logic_error);
  CHECK_THROWS_AS(y.fill(0.0), std::logic_error);
}

TEST_CASE("non-finite results are rejected") {
  Tensor big = Tensor::full({1}, 1e308);
  CHECK_THROWS_AS(mul(big, big), std::domain_error);
  CHECK_THROWS_AS(exp(Tensor::full({1}, 1e4)), std::domain_error);
}

TEST_CASE("random stream moments and substream independence") {
  RandomStream rng(123);
  double s = 0.0, s2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(mean == doctest::Approx(0.0).epsilon(0.02));
  CHECK(std::abs(mean) < 0.02);
  CHECK(var == doctest::Approx(1.0).epsilon(0.02));

  RandomStream base(7);
  RandomStream a = base.derive(1);
  RandomStream b = base.derive(2);
  RandomStream a2 = base.derive(1);
  CHECK(a.next_u64() != b.next_u64());
  CHECK(RandomStream(7).derive(1).next_u64() == a2.next_u64());
}
