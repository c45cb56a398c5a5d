#include <doctest.h>

#include <cmath>

#include "bregmanlens/tensor.hpp"
#include "test_util.hpp"

using namespace blns;
using testutil::random_tensor;

namespace {

// Independent oracle: naive triple-loop product.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += a(i, t) * b(t, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and orthogonal cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(r(i, j) == m(i, j));

  Tensor row({1, 2}, {1, 0});
  Tensor col({2, 1}, {0, 5});
  Tensor z = matmul(row, col);
  CHECK(z.dim(0) == 1);
  CHECK(z.dim(1) == 1);
  CHECK(z(0, 0) == 0.0);
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  CHECK(testutil::max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);

  // transpose variants against the same oracle
  Tensor at = transpose(a);
  CHECK(testutil::max_abs_diff(matmul_tn(at, b), naive_matmul(a, b)) < 1e-12);
  Tensor bt = transpose(b);
  CHECK(testutil::max_abs_diff(matmul_nt(a, bt), naive_matmul(a, b)) < 1e-12);
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  Tensor a({2, 3});
  Tensor b({2, 2});
  try {
    matmul(a, b);
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
    CHECK(std::string(e.what()).find("3") != std::string::npos);
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("stable_softmax uniform input") {
  Tensor z({4});
  Tensor p = stable_softmax(z);
  for (int i = 0; i < 4; ++i) CHECK(p(i) == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("stable_softmax survives large logits via max shift") {
  Tensor z({2}, {1000.0, 0.0});
  Tensor p = stable_softmax(z);
  CHECK(p.all_finite());
  CHECK(std::fabs(p(0) - 1.0) < 1e-12);
  CHECK(std::fabs(p(1)) < 1e-12);
}

TEST_CASE("stable_softmax direct-evaluation oracle") {
  Tensor z({2}, {std::log(1.0), std::log(3.0)});
  Tensor p = stable_softmax(z);
  // oracle: exp(z_i) / sum exp(z_j) evaluated directly (values are small)
  const double e0 = std::exp(z(0)), e1 = std::exp(z(1));
  CHECK(p(0) == doctest::Approx(e0 / (e0 + e1)).epsilon(1e-14));
  CHECK(p(1) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("stable_softmax contract: sums to one, order-preserving, positive") {
  Rng rng(11);
  for (int it = 0; it < 50; ++it) {
    const int n = 1 + int(rng.uniform_below(16));
    Tensor z = random_tensor({n}, rng, 10.0);
    Tensor p = stable_softmax(z);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      CHECK(p(i) > 0.0);
      sum += p(i);
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (z(i) < z(j)) CHECK(p(i) <= p(j));
  }
}

TEST_CASE("stable_softmax rejects empty input") {
  CHECK_THROWS_AS((void)stable_softmax(Tensor({0, 1}, {})), Error);
  // rank-1 length-0 tensors are unconstructible (dimensions must be positive)
  CHECK_THROWS_AS((void)Tensor({0}), Error);
}

TEST_CASE("layer_norm zero-variance input maps to bias") {
  Tensor x = Tensor::full({3}, 1.0);
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias({3});
  Tensor y = layer_norm(x, gain, bias);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(y(i)) < 1e-9);

  Tensor bias2({3}, {0.5, -1.0, 2.0});
  Tensor zero_gain({3});
  Tensor y2 = layer_norm(x, zero_gain, bias2);
  for (int i = 0; i < 3; ++i) CHECK(y2(i) == bias2(i));
}

TEST_CASE("layer_norm normalizes to unit variance up to eps") {
  Tensor x({2}, {1.0, -1.0});
  Tensor gain = Tensor::full({2}, 1.0);
  Tensor bias({2});
  Tensor y = layer_norm(x, gain, bias);
  // oracle: mean 0, var 1, so y = x / sqrt(1 + eps)
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(std::fabs(y(0) - expect) < 1e-12);
  CHECK(std::fabs(y(0) - 1.0) < 1e-4);
  CHECK(std::fabs(y(1) + 1.0) < 1e-4);
}

TEST_CASE("layer_norm rejects d < 2") {
  Tensor x({1}, {3.0});
  CHECK_THROWS_AS((void)layer_norm(x, x, x), Error);
}

TEST_CASE("pairwise_sum matches plain summation") {
  Rng rng(3);
  std::vector<double> xs(1001);
  double plain = 0.0;
  for (auto& v : xs) {
    v = rng.normal();
    plain += v;
  }
  CHECK(pairwise_sum(xs.data(), xs.size()) == doctest::Approx(plain).epsilon(1e-12));
}
