#include <doctest.h>

#include <cmath>
#include <memory>

#include <Eigen/Dense>

#include "lens/autodiff.hpp"
#include "lens/errors.hpp"
#include "lens/gradcheck.hpp"
#include "lens/rng.hpp"

using namespace lens;
using Td = Tensor<double>;

namespace {

Td random_tensor(const Shape& s, CounterRng& rng) {
  Td t(s);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

double phi(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("matmul hand cases") {
  const auto m = Td::matrix({{1, 2}, {3, 4}});
  CHECK(kernels::matmul(m, Td::matrix({{0}, {1}})) == Td::matrix({{2}, {4}}));
  CHECK(kernels::matmul(Td::identity(2), m) == m);
  CHECK(kernels::matmul(Td::zeros({2, 2}), m) == Td::zeros({2, 2}));
  CHECK_THROWS_AS(kernels::matmul(m, Td::zeros({3, 1})), DimensionError);
}

TEST_CASE("gemm agrees with a dense reference for every transpose combination") {
  CounterRng rng(5);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const std::size_t m = 7, n = 5, k = 9;
      Td a = random_tensor(ta ? Shape{k, m} : Shape{m, k}, rng);
      Td b = random_tensor(tb ? Shape{n, k} : Shape{k, n}, rng);
      Td c({m, n});
      kernels::gemm(a.raw(), ta, b.raw(), tb, c.raw(), m, n, k, false);
      Eigen::MatrixXd ea = Eigen::Map<Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(a.raw(), a.dim(0), a.dim(1));
      Eigen::MatrixXd eb = Eigen::Map<Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(b.raw(), b.dim(0), b.dim(1));
      if (ta) ea.transposeInPlace();
      if (tb) eb.transposeInPlace();
      const Eigen::MatrixXd ref = ea * eb;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) CHECK(c.at(i, j) == doctest::Approx(ref(i, j)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("softmax rows") {
  Tape<double> tape(false);
  auto p = softmax_rows(tape, Var<double>(Td::matrix({{2, 0}, {3, 3}}))).value();
  CHECK(p.at(0, 0) == doctest::Approx(std::exp(2.0) / (std::exp(2.0) + 1)));
  CHECK(p.at(0, 1) == doctest::Approx(1 / (std::exp(2.0) + 1)));
  CHECK(p.at(1, 0) == doctest::Approx(0.5));
  auto big = softmax_rows(tape, Var<double>(Td::matrix({{1000, 0}}))).value();
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));
}

TEST_CASE("layer norm") {
  Tape<double> tape(false);
  Var<double> g(Td::ones({2})), b(Td::zeros({2}));
  auto constant = layer_norm(tape, Var<double>(Td::matrix({{3, 3}})), g, b).value();
  CHECK(constant[0] == 0.0);
  CHECK(constant[1] == 0.0);
  auto unit = layer_norm(tape, Var<double>(Td::matrix({{1, -1}})), g, b, 1e-12).value();
  CHECK(unit[0] == doctest::Approx(1.0));
  CHECK(unit[1] == doctest::Approx(-1.0));

  CounterRng rng(3);
  Var<double> x(random_tensor({4, 6}, rng)), gamma(random_tensor({6}, rng)), beta(random_tensor({6}, rng));
  double beta_mean = 0;
  for (double v : beta.value().data()) beta_mean += v / 6;
  // with gamma = 1 the normalized row has zero mean, so the output mean is mean(beta)
  auto y = layer_norm(tape, x, Var<double>(Td::ones({6})), beta).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at(r, c) / 6;
    CHECK(m == doctest::Approx(beta_mean).epsilon(1e-12));
  }
}

TEST_CASE("gelu values") {
  Tape<double> tape(false);
  auto y = gelu(tape, Var<double>(Td({4}, {0.0, 1.0, 10.0, -10.0}))).value();
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(phi(1.0)).epsilon(1e-14));
  CHECK(std::abs(y[2] - 10.0) < 1e-4);
  CHECK(std::abs(y[3]) < 1e-4);
}

TEST_CASE("float gelu tracks the double erf oracle") {
  Tape<float> tape(false);
  Tensor<float> x({2001});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = -10.0f + 0.01f * static_cast<float>(i);
  auto y = gelu(tape, Var<float>(x)).value();
  double worst = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double xi = x[i];
    worst = std::max(worst, std::abs(y[i] - xi * phi(xi)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("backward hand cases") {
  Tape<double> tape;
  Var<double> w = Var<double>::parameter(Td::matrix({{1, 2, 3}, {4, 5, 6}}));
  Var<double> x(Td::matrix({{7}, {8}, {9}}));
  auto loss = sum(tape, matmul(tape, w, x));
  tape.backward(loss);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(w.grad().at(r, 0) == 7.0);
    CHECK(w.grad().at(r, 1) == 8.0);
    CHECK(w.grad().at(r, 2) == 9.0);
  }
  tape.backward(loss);
  CHECK(w.grad().at(1, 2) == 18.0);

  Tape<double> other;
  Var<double> unused = Var<double>::parameter(Td::ones({2}));
  Var<double> z = Var<double>::parameter(Td::ones({2}));
  other.backward(sum(other, z));
  CHECK(unused.grad().empty());
  CHECK_THROWS_AS(other.backward(z), ContractError);
}

TEST_CASE("detach blocks gradients and frozen leaves stay untouched") {
  Tape<double> tape;
  Var<double> x = Var<double>::parameter(Td({3}, {1, 2, 3}));
  Var<double> frozen(Td({3}, {4, 5, 6}));
  auto loss = sum(tape, mul(tape, mul(tape, x, detach(x)), frozen));
  tape.backward(loss);
  // d/dx of x * sg(x) * f is sg(x) * f
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[2] == 18.0);
  CHECK(frozen.grad().empty());
}

TEST_CASE("grad_check on analytic functions") {
  std::function<Var<double>(Tape<double>&, const Var<double>&)> square = [](Tape<double>& t, const Var<double>& x) {
    return sum(t, mul(t, x, x));
  };
  CHECK(grad_check<double>(square, Td({3}, {1, 2, 3}), 1e-5) < 1e-6);
  std::function<Var<double>(Tape<double>&, const Var<double>&)> linear = [](Tape<double>& t, const Var<double>& x) {
    return sum(t, scale(t, x, 3.0));
  };
  CHECK(grad_check<double>(linear, Td({4}, {1, -2, 3, 0.5}), 1e-6) < 1e-8);
}

TEST_CASE("every registered op passes the gradient check") {
  const auto results = run_gradcheck_suite(gradcheck_cases());
  CHECK(results.size() >= 30);
  for (const auto& r : results) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed);
    CHECK(r.probes >= 100);
  }
}

TEST_CASE("a corrupted backward rule is caught") {
  // x -> 2x with the gradient rule of x -> 3x
  GradCheckCase broken{"broken_scale", [](CounterRng& rng) {
                         auto x = Var<double>::parameter(random_tensor({4, 5}, rng));
                         ScalarFn<double> f = [x](Tape<double>& t) {
                           Td out = x.value();
                           for (auto& v : out.data()) v *= 2.0;
                           auto node = std::make_shared<Node<double>>(Node<double>{out, {}, true, false});
                           Var<double> y(node);
                           auto px = x.node();
                           t.record(node, [px, node] {
                             px->ensure_grad();
                             for (std::size_t i = 0; i < node->grad.numel(); ++i) px->grad[i] += 3.0 * node->grad[i];
                           });
                           return sum(t, mul(t, y, y));
                         };
                         return std::make_pair(f, std::vector<Var<double>>{x});
                       }};
  const auto results = run_gradcheck_suite({broken});
  REQUIRE(results.size() == 1);
  CHECK_FALSE(results[0].passed);
}

TEST_CASE("dropout mask keeps the expected fraction") {
  CounterRng rng(11);
  const double p = 0.3;
  const std::size_t n = 200000;
  auto mask = dropout_mask<double>(Shape{n}, p, rng);
  std::size_t zeros = 0;
  for (double v : mask.data()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1.0 / (1.0 - p)));
    }
  }
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  CHECK(std::abs(static_cast<double>(zeros) / n - p) < 3 * sigma);
}

TEST_CASE("counter rng streams are reproducible and distinct") {
  CounterRng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  CounterRng c(42, 5);
  CounterRng d(42);
  for (int i = 0; i < 5; ++i) d.next_u64();
  CHECK(c.next_u64() == d.next_u64());
  CHECK(CounterRng(1).fork(1).key() != CounterRng(1).fork(2).key());
  double sum = 0, sq = 0;
  CounterRng n(9);
  for (int i = 0; i < 100000; ++i) {
    const double v = n.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::abs(sum / 1e5) < 0.02);
  CHECK(std::abs(sq / 1e5 - 1.0) < 0.02);
  for (int i = 0; i < 1000; ++i) CHECK(n.below(7) < 7);
}
