#include "setflow/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "setflow/rng.hpp"
#include "test_support.hpp"

using namespace setflow;
using namespace setflow::ad;
using testsup::expect_close;
using testsup::fd_gradient;
using testsup::random_tensor;

TEST(Gradient, SquareOfScalar) {
  ParameterSet ps;
  ps.add("theta", Tensor::scalar(3.0));
  auto grads = gradient([](ParameterSet& p) { return mul(p.at("theta"), p.at("theta")); }, ps);
  EXPECT_DOUBLE_EQ(grads.at("theta").value().values[0], 6.0);
}

TEST(Gradient, SumIsOnes) {
  ParameterSet ps;
  ps.add("theta", Tensor({3}, {1.0, 2.0, 3.0}));
  auto grads = gradient([](ParameterSet& p) { return sum_all(p.at("theta")); }, ps);
  for (double g : grads.at("theta").value().values) EXPECT_DOUBLE_EQ(g, 1.0);
}

namespace {

// Two-layer tanh network producing a scalar; parameters live in `ps`.
Var tanh_net_loss(ParameterSet& ps, const Tensor& x) {
  Var in = constant(x);
  Var h = tanh_v(add_rowvec(matmul(in, ps.at("w1")), ps.at("b1")));
  Var out = add_rowvec(matmul(h, ps.at("w2")), ps.at("b2"));
  return sum_all(tanh_v(out));
}

}  // namespace

TEST(Gradient, TanhNetworkMatchesFiniteDifferences) {
  Rng rng(17);
  ParameterSet ps;
  ps.add("w1", random_tensor({3, 5}, rng, 0.8));
  ps.add("b1", random_tensor({5}, rng, 0.3));
  ps.add("w2", random_tensor({5, 2}, rng, 0.8));
  ps.add("b2", random_tensor({2}, rng, 0.3));
  Tensor x = random_tensor({4, 3}, rng);

  auto grads = gradient([&](ParameterSet& p) { return tanh_net_loss(p, x); }, ps);
  auto fd = fd_gradient(
      [&] {
        NoGradGuard ng;
        return tanh_net_loss(ps, x).scalar();
      },
      ps, 1e-4);

  size_t i = 0;
  for (auto& [name, g] : grads) {
    for (size_t k = 0; k < g.value().size(); ++k)
      expect_close(g.value().values[k], fd[i].values[k], 1e-5, 1e-9, name.c_str());
    ++i;
  }
}

TEST(Gradient, ComposedLossesMatchFiniteDifferencesOnManySeeds) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    ParameterSet ps;
    ps.add("w1", random_tensor({2, 3}, rng, 0.7));
    ps.add("b1", random_tensor({3}, rng, 0.2));
    ps.add("w2", random_tensor({3, 1}, rng, 0.7));
    Tensor x = random_tensor({2, 2}, rng);
    auto loss = [&](ParameterSet& p) {
      Var h = tanh_v(add_rowvec(matmul(constant(x), p.at("w1")), p.at("b1")));
      Var o = matmul(h, p.at("w2"));
      return sum_all(mul(o, o));
    };
    auto grads = gradient(loss, ps);
    auto fd = fd_gradient(
        [&] {
          NoGradGuard ng;
          return loss(ps).scalar();
        },
        ps, 1e-4);
    size_t i = 0;
    for (auto& [name, g] : grads) {
      for (size_t k = 0; k < g.value().size(); ++k)
        expect_close(g.value().values[k], fd[i].values[k], 1e-4, 1e-8);
      ++i;
    }
  }
}

TEST(Gradient, NonFiniteLossNamesOffendingOp) {
  ParameterSet ps;
  ps.add("theta", Tensor::scalar(-1.0));
  auto loss = [](ParameterSet& p) { return log_v(p.at("theta")); };
  try {
    gradient(loss, ps);
    FAIL() << "expected EvalError";
  } catch (const EvalError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Gradient, Deterministic) {
  Rng rng(5);
  ParameterSet ps;
  ps.add("w", random_tensor({4, 4}, rng));
  Tensor x = random_tensor({2, 4}, rng);
  auto loss = [&](ParameterSet& p) { return sum_all(tanh_v(matmul(constant(x), p.at("w")))); };
  auto g1 = gradient(loss, ps);
  auto g2 = gradient(loss, ps);
  EXPECT_EQ(g1.at("w").value().values, g2.at("w").value().values);
}

TEST(Vjp, LinearMapGivesJacobianRow) {
  Tensor A({2, 2}, {1, 2, 3, 4});
  auto f = [&](const Var& x) { return matmul(constant(A), x); };
  // f(x) = A x with x a column: J = A, cotangent (1,0) -> first row.
  Tensor x({2, 1}, {0.5, -0.3});
  Tensor ct({2, 1}, {1, 0});
  Tensor r = vjp(f, x, ct);
  EXPECT_DOUBLE_EQ(r.values[0], 1.0);
  EXPECT_DOUBLE_EQ(r.values[1], 2.0);
}

TEST(Vjp, IdentityReturnsCotangent) {
  auto f = [](const Var& x) { return affine(x, 1.0, 0.0); };
  Tensor x({3}, {1, 2, 3});
  Tensor ct({3}, {0.3, -0.7, 2.0});
  Tensor r = vjp(f, x, ct);
  EXPECT_EQ(r.values, ct.values);
}

TEST(Vjp, TanhMatchesAnalyticDerivative) {
  auto f = [](const Var& x) { return tanh_v(x); };
  Tensor x({3}, {0.2, -1.1, 0.7});
  Tensor ct({3}, {1.0, 2.0, -0.5});
  Tensor r = vjp(f, x, ct);
  for (size_t i = 0; i < 3; ++i) {
    double t = std::tanh(x.values[i]);
    EXPECT_NEAR(r.values[i], ct.values[i] * (1 - t * t), 1e-15);
  }
}

TEST(FullJacobian, IdentityOnR3) {
  auto f = [](const Var& x) { return affine(x, 1.0, 0.0); };
  Tensor x({3}, {1, 2, 3});
  Tensor jac = full_jacobian(f, x);
  for (size_t r = 0; r < 3; ++r)
    for (size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(jac.at(r, c), r == c ? 1.0 : 0.0);
}

TEST(FullJacobian, LinearMapRecoversMatrix) {
  Tensor A({3, 3}, {1, 2, 0, -1, 0.5, 3, 0, 0, 2});
  auto f = [&](const Var& x) { return matmul(constant(A), x); };
  Tensor x({3, 1}, {0.1, 0.2, 0.3});
  Tensor jac = full_jacobian(f, x);
  for (size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(jac.values[i], A.values[i]);
}

TEST(FullJacobian, RowsEqualBasisVjpsExactly) {
  Rng rng(11);
  Tensor w = random_tensor({3, 3}, rng);
  auto f = [&](const Var& x) { return tanh_v(matmul(constant(w), x)); };
  Tensor x = random_tensor({3, 1}, rng);
  Tensor jac = full_jacobian(f, x);
  for (size_t k = 0; k < 3; ++k) {
    Tensor e = Tensor::zeros({3});
    e.values[k] = 1.0;
    Tensor row = vjp(f, x, e);
    for (size_t j = 0; j < 3; ++j) EXPECT_EQ(jac.at(k, j), row.values[j]);
  }
}

TEST(ScalarPartial, LinearSlope) {
  auto f = [](Dual x, std::span<const Tensor> side) { return x * side[0].values[0]; };
  std::vector<Tensor> side = {Tensor::scalar(2.0)};
  EXPECT_DOUBLE_EQ(scalar_partial(f, 5.0, side), 2.0);
}

TEST(ScalarPartial, TanhAtZero) {
  auto f = [](Dual x, std::span<const Tensor>) { return tanh(x); };
  EXPECT_DOUBLE_EQ(scalar_partial(f, 0.0, {}), 1.0);
}

TEST(ScalarPartial, SmallNetworkMatchesFiniteDifferences) {
  // One hidden layer in dual arithmetic with frozen side inputs.
  Rng rng(3);
  Tensor w1 = random_tensor({4}, rng), b1 = random_tensor({4}, rng, 0.2);
  Tensor s1 = random_tensor({4}, rng);  // frozen side contribution per hidden unit
  Tensor w2 = random_tensor({4}, rng);
  auto net = [&](Dual x, std::span<const Tensor> side) {
    Dual out{0, 0};
    for (size_t i = 0; i < 4; ++i) {
      Dual h = tanh(x * w1.values[i] + side[0].values[i] * s1.values[i] + b1.values[i]);
      out = out + h * w2.values[i];
    }
    return out;
  };
  std::vector<Tensor> side = {random_tensor({4}, rng)};
  double x0 = 0.37;
  double exact = scalar_partial(net, x0, side);
  double h = 1e-6;
  auto eval = [&](double x) { return net(Dual{x, 0}, side).v; };
  double fd = (eval(x0 + h) - eval(x0 - h)) / (2 * h);
  EXPECT_NEAR(exact, fd, 1e-6);
}

TEST(ParameterSetOps, InsertionOrderPreserved) {
  ParameterSet ps;
  ps.add("zebra", Tensor::scalar(1));
  ps.add("alpha", Tensor::scalar(2));
  ps.add("mid", Tensor::scalar(3));
  std::vector<std::string> names;
  for (auto& [n, v] : ps) names.push_back(n);
  EXPECT_EQ(names, (std::vector<std::string>{"zebra", "alpha", "mid"}));
  EXPECT_THROW(ps.add("alpha", Tensor::scalar(0)), ContractError);
}

TEST(Ops, BlockSumRepeatRoundTrip) {
  Rng rng(9);
  Tensor x = random_tensor({6, 2}, rng);
  Var v(x, true);
  Var s = block_rowsum(v, 3);
  EXPECT_EQ(s.value().rows(), 2u);
  Var r = block_repeat(s, 3);
  backward(r, Tensor::filled({6, 2}, 1.0));
  // d/dx of repeat(blocksum(x)) contracts to 3 everywhere.
  for (double g : v.grad().values) EXPECT_DOUBLE_EQ(g, 3.0);
}

TEST(Ops, SliceConcatInverse) {
  Rng rng(13);
  Tensor x = random_tensor({4, 5}, rng);
  Var v(x, true);
  Var a = slice_cols(v, 0, 2), b = slice_cols(v, 2, 5);
  Var back = concat_cols({a, b});
  EXPECT_EQ(back.value().values, x.values);
  backward(back, Tensor::filled({4, 5}, 1.0));
  for (double g : v.grad().values) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Ops, ColvecMulDivGradients) {
  Rng rng(21);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 1}, rng, 0.5);
  for (double& v : b.values) v += 2.0;  // keep denominators away from zero
  {
    Var va(a, true), vb(b, true);
    Var out = div_colvec(mul_colvec(va, vb), vb);
    // mul then div by the same column is the identity.
    for (size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(out.value().values[i], a.values[i], 1e-14);
  }
  // gradient check through div_colvec
  Var va(a, true), vb(b, true);
  Var out = sum_all(div_colvec(va, vb));
  backward_scalar(out);
  auto fd = testsup::fd_jacobian(
      [&](const Tensor& bb) {
        NoGradGuard ng;
        return Tensor::scalar(sum_all(div_colvec(constant(a), constant(bb))).scalar());
      },
      b, 1e-6);
  for (size_t i = 0; i < 3; ++i) expect_close(vb.grad().values[i], fd.values[i], 1e-6, 1e-9);
}

TEST(NoGrad, SuppressesGraph) {
  ParameterSet ps;
  ps.add("w", Tensor::scalar(2.0));
  NoGradGuard ng;
  Var out = mul(ps.at("w"), ps.at("w"));
  EXPECT_FALSE(out.requires_grad());
}
