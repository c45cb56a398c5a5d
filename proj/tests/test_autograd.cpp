#include <doctest.h>

#include <cmath>
#include <vector>

#include "bregmanlens/autograd.hpp"
#include "test_util.hpp"

using namespace blns;
using testutil::central_diff;
using testutil::grad_rel_err;
using testutil::random_tensor;

namespace {

std::vector<double> flat(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.size());
}

// Checks reverse-mode gradients of `build` (maps a leaf tensor to a scalar
// var) against central finite differences.
void check_gradient(const std::vector<int>& shape,
                    const std::function<GradTape::Var(GradTape&, GradTape::Var)>& build,
                    Rng& rng, double tol = 1e-4, double scale = 1.0) {
  Tensor x = random_tensor(shape, rng, scale);

  GradTape tape;
  GradTape::Var leaf = tape.leaf(x, true);
  GradTape::Var loss = build(tape, leaf);
  tape.backward(loss);
  std::vector<double> analytic = flat(tape.grad(leaf));

  auto f = [&](const std::vector<double>& vals) {
    GradTape t2;
    GradTape::Var l2 = t2.leaf(Tensor(shape, vals), false);
    return t2.value(build(t2, l2)).item();
  };
  std::vector<double> numeric = central_diff(f, flat(x));
  CHECK(grad_rel_err(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("backward of sum is all ones") {
  GradTape tape;
  Rng rng(1);
  GradTape::Var x = tape.leaf(random_tensor({3, 4}, rng), true);
  GradTape::Var loss = tape.sum_all(x);
  tape.backward(loss);
  const Tensor& g = tape.grad(x);
  for (size_t i = 0; i < g.size(); ++i) CHECK(g.data()[i] == 1.0);
}

TEST_CASE("backward of x.x at (1,2) is (2,4)") {
  GradTape tape;
  GradTape::Var x = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  GradTape::Var loss = tape.sum_all(tape.mul(x, x));
  tape.backward(loss);
  CHECK(tape.grad(x)(0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(tape.grad(x)(1) == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("backward rejects non-scalar loss") {
  GradTape tape;
  GradTape::Var x = tape.leaf(Tensor({2, 2}), true);
  try {
    tape.backward(x);
    FAIL("expected contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::contract);
  }
}

TEST_CASE("gradients of individual primitives match finite differences") {
  Rng rng(42);

  SUBCASE("matmul") {
    Tensor w = random_tensor({4, 3}, rng);
    check_gradient({2, 4}, [w](GradTape& t, GradTape::Var x) {
      return t.sum_all(t.mul(t.matmul(x, t.constant(w)), t.matmul(x, t.constant(w))));
    }, rng);
  }
  SUBCASE("matmul_nt") {
    Tensor w = random_tensor({3, 4}, rng);
    check_gradient({2, 4}, [w](GradTape& t, GradTape::Var x) {
      return t.sum_all(t.matmul_nt(x, t.constant(w)));
    }, rng);
  }
  SUBCASE("layer_norm_rows") {
    Tensor g = random_tensor({5}, rng), b = random_tensor({5}, rng);
    check_gradient({3, 5}, [g, b](GradTape& t, GradTape::Var x) {
      GradTape::Var y = t.layer_norm_rows(x, t.constant(g), t.constant(b));
      return t.sum_all(t.mul(y, y));
    }, rng);
  }
  SUBCASE("layer_norm_rows gain and bias") {
    Rng r2(43);
    Tensor x = random_tensor({3, 5}, r2);
    check_gradient({5}, [x](GradTape& t, GradTape::Var g) {
      GradTape::Var y = t.layer_norm_rows(t.constant(x), g, t.scale(g, 0.5));
      return t.sum_all(t.mul(y, y));
    }, r2);
  }
  SUBCASE("gelu") {
    check_gradient({2, 6}, [](GradTape& t, GradTape::Var x) {
      return t.sum_all(t.gelu(x));
    }, rng);
  }
  SUBCASE("sigmoid") {
    check_gradient({2, 6}, [](GradTape& t, GradTape::Var x) {
      return t.sum_all(t.mul(t.sigmoid(x), t.sigmoid(x)));
    }, rng);
  }
  SUBCASE("causal_softmax_scaled") {
    check_gradient({4, 4}, [](GradTape& t, GradTape::Var x) {
      GradTape::Var p = t.causal_softmax_scaled(x, 0.7);
      return t.sum_all(t.mul(p, p));
    }, rng);
  }
  SUBCASE("cross_entropy_mean") {
    std::vector<int> targets = {1, 0, 2};
    check_gradient({3, 4}, [targets](GradTape& t, GradTape::Var x) {
      return t.cross_entropy_mean(x, targets);
    }, rng);
  }
  SUBCASE("slicing and concatenation") {
    check_gradient({4, 6}, [](GradTape& t, GradTape::Var x) {
      GradTape::Var top = t.slice_rows(x, 0, 2);
      GradTape::Var bottom = t.slice_rows(x, 2, 2);
      GradTape::Var left = t.slice_cols(x, 0, 3);
      GradTape::Var right = t.slice_cols(x, 3, 3);
      GradTape::Var rows = t.concat_rows({bottom, top});
      GradTape::Var cols = t.concat_cols({right, left});
      return t.add(t.sum_all(t.mul(rows, rows)), t.sum_all(t.mul(cols, cols)));
    }, rng);
  }
  SUBCASE("embedding_gather") {
    std::vector<int> ids = {2, 0, 2, 1};
    check_gradient({3, 4}, [ids](GradTape& t, GradTape::Var table) {
      GradTape::Var rows = t.embedding_gather(table, ids);
      return t.sum_all(t.mul(rows, rows));
    }, rng);
  }
  SUBCASE("add_rowvec and add_tiled_rows") {
    Tensor v = random_tensor({4}, rng);
    check_gradient({6, 4}, [v](GradTape& t, GradTape::Var x) {
      GradTape::Var y = t.add_rowvec(x, t.constant(v));
      GradTape::Var tiled = t.add_tiled_rows(y, t.slice_rows(x, 0, 2), 3);
      return t.sum_all(t.mul(tiled, tiled));
    }, rng);
  }
}

TEST_CASE("random composite graphs match finite differences (100 instances)") {
  Rng rng(2024);
  for (int it = 0; it < 100; ++it) {
    const int n = 2 + int(rng.uniform_below(3));
    const int d = 2 + int(rng.uniform_below(4));
    Tensor w1 = random_tensor({d, d}, rng);
    Tensor g = random_tensor({d}, rng), b = random_tensor({d}, rng);
    std::vector<int> targets;
    for (int i = 0; i < n; ++i) targets.push_back(int(rng.uniform_below(uint64_t(d))));
    check_gradient({n, d}, [w1, g, b, targets](GradTape& t, GradTape::Var x) {
      GradTape::Var h = t.gelu(t.matmul(x, t.constant(w1)));
      GradTape::Var ln = t.layer_norm_rows(t.add(h, x), t.constant(g), t.constant(b));
      GradTape::Var gate = t.sigmoid(t.scale(ln, 0.5));
      GradTape::Var z = t.matmul_nt(t.mul(ln, gate), t.constant(w1));
      return t.cross_entropy_mean(z, targets);
    }, rng);
  }
}
