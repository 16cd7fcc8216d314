#include "setflow/dynamics.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "setflow/pointset.hpp"
#include "setflow/rng.hpp"
#include "test_support.hpp"

using namespace setflow;
using ad::constant;
using ad::NoGradGuard;
using ad::ParameterSet;
using ad::Var;
using testsup::expect_close;
using testsup::random_tensor;

namespace {

Batch manual_batch(const std::vector<std::vector<double>>& sets, size_t d, double pad = 0.0) {
  Batch b;
  b.batch = sets.size();
  b.dim = d;
  b.n_max = 1;
  for (const auto& s : sets) b.n_max = std::max(b.n_max, s.size() / d);
  b.points = Tensor::filled({b.batch, b.n_max, d}, pad);
  b.mask = Tensor::zeros({b.batch, b.n_max});
  for (size_t i = 0; i < sets.size(); ++i) {
    b.lengths.push_back(sets[i].size() / d);
    for (size_t k = 0; k < sets[i].size(); ++k) b.points.values[i * b.n_max * d + k] = sets[i][k];
    for (size_t k = 0; k < b.lengths[i]; ++k) b.mask.values[i * b.n_max + k] = 1.0;
  }
  return b;
}

void randomize_params(ParameterSet& ps, Rng& rng, double scale) {
  for (auto& [name, v] : ps)
    for (double& x : v.mutable_value().values) x = scale * (2 * rng.uniform() - 1);
}

struct Dyn {
  ParameterSet ps;
  EquivariantDynamics dyn;
};

Dyn make_dyn(DynamicsConfig cfg, uint64_t seed, double randomize = 0.0) {
  Dyn d{ParameterSet{}, EquivariantDynamics{}};
  Rng rng(seed);
  d.dyn = EquivariantDynamics::create(cfg, d.ps, "dyn", rng);
  if (randomize > 0) {
    Rng r2 = rng.fork(99);
    randomize_params(d.ps, r2, randomize);
  }
  return d;
}

DynamicsConfig small_cfg(DynamicsKind kind, size_t d, Aggregation agg = Aggregation::Sum) {
  DynamicsConfig cfg;
  cfg.kind = kind;
  cfg.point_dim = d;
  cfg.hidden_dim = 8;
  cfg.latent_dim = 2;
  cfg.between_dim = 8;
  cfg.aggregation = agg;
  cfg.num_heads = 2;
  cfg.key_dim = 3;
  return cfg;
}

}  // namespace

// --- self-excluded aggregation (conditioner h with h = identity) ----------

TEST(ExclusiveAggregate, SumSubtractsSelf) {
  Batch b = manual_batch({{1, 2, 3}}, 1);
  SetLayout lay = make_layout(b);
  Var H = constant(Tensor({3, 1}, {1, 2, 3}));
  Tensor out = dyn_detail::exclusive_aggregate(H, Aggregation::Sum, lay).value();
  EXPECT_EQ(out.values, (std::vector<double>{5, 4, 3}));
}

TEST(ExclusiveAggregate, MeanDividesByNMinusOne) {
  Batch b = manual_batch({{1, 2, 3}}, 1);
  SetLayout lay = make_layout(b);
  Var H = constant(Tensor({3, 1}, {1, 2, 3}));
  Tensor out = dyn_detail::exclusive_aggregate(H, Aggregation::Mean, lay).value();
  EXPECT_EQ(out.values, (std::vector<double>{2.5, 2.0, 1.5}));
}

TEST(ExclusiveAggregate, MaxReturnsSecondLargestAtMaximum) {
  Batch b = manual_batch({{1, 5, 3}}, 1);
  SetLayout lay = make_layout(b);
  Var H = constant(Tensor({3, 1}, {1, 5, 3}));
  Tensor out = dyn_detail::exclusive_aggregate(H, Aggregation::Max, lay).value();
  EXPECT_EQ(out.values, (std::vector<double>{5, 3, 5}));
}

TEST(ExclusiveAggregate, MaxTieRule) {
  Batch b = manual_batch({{5, 5, 3}, {4, 4, 4}}, 1);
  SetLayout lay = make_layout(b);
  Var H = constant(EquivariantDynamics::points_rows(b));
  Tensor out = dyn_detail::exclusive_aggregate(H, Aggregation::Max, lay).value();
  // duplicate maxima: lowest-indexed one sees the next distinct value
  EXPECT_EQ(out.values[0], 3);
  EXPECT_EQ(out.values[1], 5);
  EXPECT_EQ(out.values[2], 5);
  // all equal: everyone sees the shared value
  EXPECT_EQ(out.values[3], 4);
  EXPECT_EQ(out.values[4], 4);
  EXPECT_EQ(out.values[5], 4);
}

TEST(ExclusiveAggregate, SinglePointSetIsZero) {
  Batch b = manual_batch({{7.0}}, 1);
  SetLayout lay = make_layout(b);
  Var H = constant(Tensor({1, 1}, {7.0}));
  for (auto agg : {Aggregation::Sum, Aggregation::Mean, Aggregation::Max})
    EXPECT_EQ(dyn_detail::exclusive_aggregate(H, agg, lay).value().values[0], 0.0);
}

// --- between / within / attention conditioners ----------------------------

TEST(BetweenPoints, OutputIndependentOfOwnPoint) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 5, 0.6);
  Rng rng(12);
  Batch b = manual_batch({{0.1, 0.2, 0.5, 0.9, 0.4, 0.3, 0.8, 0.1}}, 2);
  Tensor base = dyn.between_points(b, 0.3);
  // perturb point 2 only; rows other than 2 must change, row 2 must not
  Batch b2 = b;
  b2.points.values[4] += 0.01;
  b2.points.values[5] -= 0.02;
  Tensor mod = dyn.between_points(b2, 0.3);
  size_t dh = dyn.config().between_dim;
  // Row 2 aggregates the *other* points; the subtract-self evaluation leaves
  // only rounding-level residue when its own point moves.
  for (size_t c = 0; c < dh; ++c)
    EXPECT_LE(std::abs(base.values[2 * dh + c] - mod.values[2 * dh + c]), 1e-13);
  bool row0_changed = false;
  for (size_t c = 0; c < dh; ++c)
    if (std::abs(base.values[0 * dh + c] - mod.values[0 * dh + c]) > 1e-6) row0_changed = true;
  EXPECT_TRUE(row0_changed);
}

TEST(WithinPoint, FiniteDifferenceDiagonalIsZero) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 3), 9, 0.8);
  Rng rng(4);
  Tensor pts = random_tensor({1, 2, 3}, rng);
  Batch b = manual_batch({{pts.values[0], pts.values[1], pts.values[2], pts.values[3], pts.values[4],
                           pts.values[5]}},
                         3);
  const size_t d = 3, g = dyn.config().latent_dim;
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < d; ++j) {
      Batch up = b, down = b;
      up.points.values[i * d + j] += 1e-5;
      down.points.values[i * d + j] -= 1e-5;
      Tensor wu = dyn.within_point(up), wd = dyn.within_point(down);
      for (size_t k = 0; k < g; ++k) {
        double fd = (wu.values[(i * d + j) * g + k] - wd.values[(i * d + j) * g + k]) / 2e-5;
        EXPECT_LE(std::abs(fd), 1e-8);
      }
    }
}

TEST(AttentionConditioner, SinglePointGivesZeroRow) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::Attention, 2), 3, 0.5);
  Batch b = manual_batch({{0.3, 0.4}}, 2);
  Tensor out = dyn.attention_conditioner(b, 0.1);
  for (double v : out.values) EXPECT_EQ(v, 0.0);
}

TEST(AttentionConditioner, PairAttendsOnlyToNeighbor) {
  // With n = 2 the self-excluded softmax collapses to weight one on the other
  // point, so row 0 is a function of point 1 alone.
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::Attention, 1), 21, 0.7);
  Batch a = manual_batch({{0.1, 0.9}}, 1);
  Batch b = manual_batch({{0.3, 0.9}}, 1);
  Tensor oa = dyn.attention_conditioner(a, 0.0);
  Tensor ob = dyn.attention_conditioner(b, 0.0);
  size_t dh = dyn.config().between_dim;
  for (size_t c = 0; c < dh; ++c)
    EXPECT_LE(std::abs(oa.values[0 * dh + c] - ob.values[0 * dh + c]), 1e-13);
}

TEST(AttentionConditioner, ZeroBlockByFiniteDifferences) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::Attention, 2), 31, 0.6);
  Rng rng(8);
  std::vector<double> pts = {0.05, 0.1, 0.3, 0.8, 0.55, 0.35, 0.9, 0.6};
  Batch b = manual_batch({pts}, 2);
  size_t dh = dyn.config().between_dim;
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = 0; j < 2; ++j) {
      Batch up = b, down = b;
      up.points.values[i * 2 + j] += 1e-6;
      down.points.values[i * 2 + j] -= 1e-6;
      Tensor ou = dyn.attention_conditioner(up, 0.2), od = dyn.attention_conditioner(down, 0.2);
      for (size_t c = 0; c < dh; ++c) {
        double fd = (ou.values[i * dh + c] - od.values[i * dh + c]) / 2e-6;
        EXPECT_LE(std::abs(fd), 1e-6);
      }
    }
}

// --- velocity --------------------------------------------------------------

TEST(Velocity, FreshDynamicsIsIdentityFlow) {
  for (auto kind : {DynamicsKind::DeepSet, DynamicsKind::Attention}) {
    auto [ps, dyn] = make_dyn(small_cfg(kind, 2), 2);
    Batch b = manual_batch({{0.2, 0.3, 0.7, 0.9}, {0.5, 0.5}}, 2);
    Tensor v = dyn.velocity(b, 0.4);
    for (double x : v.values) EXPECT_EQ(x, 0.0);
  }
}

TEST(Velocity, LinearSlotDependence) {
  auto d = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 6);
  for (auto& [name, v] : d.ps)
    for (double& x : v.mutable_value().values) x = 0.0;
  d.ps.at("dyn.tau.skip.w").mutable_value().values[0] = 0.5;
  Batch b = manual_batch({{0.2, -0.4, 1.0, 2.0, -3.0, 0.6}}, 2);
  Tensor v = d.dyn.velocity(b, 0.0);
  for (size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(v.values[i], 0.5 * b.points.values[i]);
}

TEST(Velocity, BitwiseEquivariantUnderPermutation) {
  for (auto kind : {DynamicsKind::DeepSet, DynamicsKind::Attention}) {
    for (auto agg : {Aggregation::Sum, Aggregation::Mean, Aggregation::Max}) {
      auto [ps, dyn] = make_dyn(small_cfg(kind, 2, agg), 77, 0.7);
      Rng rng(55);
      const size_t n = 5;
      std::vector<double> pts;
      for (size_t i = 0; i < n * 2; ++i) pts.push_back(rng.uniform());
      std::vector<size_t> perm = {3, 0, 4, 1, 2};
      std::vector<double> permuted(n * 2);
      for (size_t i = 0; i < n; ++i) {
        permuted[i * 2] = pts[perm[i] * 2];
        permuted[i * 2 + 1] = pts[perm[i] * 2 + 1];
      }
      Tensor v1 = dyn.velocity(manual_batch({pts}, 2), 0.3);
      Tensor v2 = dyn.velocity(manual_batch({permuted}, 2), 0.3);
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < 2; ++j) EXPECT_EQ(v2.values[i * 2 + j], v1.values[perm[i] * 2 + j]);
    }
  }
}

TEST(Velocity, PaddedGarbageDoesNotLeak) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 13, 0.5);
  Batch clean = manual_batch({{0.1, 0.2, 0.6, 0.7}, {0.4, 0.9}}, 2, 0.0);
  Batch dirty = manual_batch({{0.1, 0.2, 0.6, 0.7}, {0.4, 0.9}}, 2, 1234.5);
  Tensor vc = dyn.velocity(clean, 0.5), vd = dyn.velocity(dirty, 0.5);
  // valid slots agree bitwise; padded slots emit zeros either way
  for (size_t b = 0; b < 2; ++b)
    for (size_t k = 0; k < clean.n_max; ++k)
      for (size_t j = 0; j < 2; ++j) {
        size_t idx = (b * clean.n_max + k) * 2 + j;
        if (k < clean.lengths[b])
          EXPECT_EQ(vc.values[idx], vd.values[idx]);
        else
          EXPECT_EQ(vd.values[idx], 0.0);
      }
  auto dc = dyn.divergence(clean, 0.5, TraceMode::ClosedForm);
  auto dd = dyn.divergence(dirty, 0.5, TraceMode::ClosedForm);
  EXPECT_EQ(dc, dd);
}

TEST(Velocity, DeepSetJacobianMatchesFiniteDifferences) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 19, 0.6);
  Batch b = manual_batch({{0.15, 0.3, 0.8, 0.45}}, 2);
  SetLayout lay = make_layout(b);
  auto f_ad = [&](const Var& x) {
    return ad::reshape(dyn.velocity_rows(ad::reshape(x, {2, 2}), 0.7, lay), {4});
  };
  Tensor x0 = b.points.reshaped({4});
  Tensor jac = ad::full_jacobian(f_ad, x0);
  Tensor fd = testsup::fd_jacobian(
      [&](const Tensor& x) {
        NoGradGuard ng;
        return dyn.velocity_rows(constant(x.reshaped({2, 2})), 0.7, lay).value();
      },
      x0, 1e-6);
  for (size_t i = 0; i < 16; ++i) expect_close(jac.values[i], fd.values[i], 1e-5, 1e-7);
}

// --- divergence ------------------------------------------------------------

TEST(Divergence, LinearDynamicsTraceIsHalfTimesSlots) {
  auto d = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 6);
  for (auto& [name, v] : d.ps)
    for (double& x : v.mutable_value().values) x = 0.0;
  d.ps.at("dyn.tau.skip.w").mutable_value().values[0] = 0.5;
  Batch b = manual_batch({{0.2, -0.4, 1.0, 2.0, -3.0, 0.6}}, 2);
  for (auto mode : {TraceMode::ClosedForm, TraceMode::BlockExact, TraceMode::ExactDense}) {
    auto div = d.dyn.divergence(b, 0.0, mode);
    EXPECT_NEAR(div[0], 3.0, 1e-12);
  }
}

TEST(Divergence, ZeroArchitectureHasExactlyZeroTrace) {
  DynamicsConfig cfg = small_cfg(DynamicsKind::DeepSet, 2);
  cfg.trace_mode = TraceMode::Zero;
  auto [ps, dyn] = make_dyn(cfg, 23, 0.8);
  Batch b = manual_batch({{0.2, 0.4, 0.9, 0.1, 0.5, 0.5}}, 2);
  EXPECT_EQ(dyn.divergence(b, 0.2, TraceMode::Zero)[0], 0.0);
  EXPECT_EQ(dyn.divergence(b, 0.2, TraceMode::ClosedForm)[0], 0.0);
  EXPECT_NEAR(dyn.divergence(b, 0.2, TraceMode::ExactDense)[0], 0.0, 1e-12);
}

TEST(Divergence, ZeroModeRejectedOnFullArchitecture) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 3, 0.5);
  Batch b = manual_batch({{0.1, 0.2}}, 2);
  EXPECT_THROW(dyn.divergence(b, 0.0, TraceMode::Zero), ConfigError);
}

TEST(Divergence, ClosedFormMatchesExactDenseAcrossRandomModels) {
  Rng meta(100);
  for (int trial = 0; trial < 30; ++trial) {
    DynamicsConfig cfg;
    cfg.kind = trial % 2 ? DynamicsKind::Attention : DynamicsKind::DeepSet;
    cfg.point_dim = 1 + meta.below(3);
    cfg.hidden_dim = 4 + meta.below(8);
    cfg.latent_dim = meta.below(3);
    cfg.between_dim = 2 * (1 + meta.below(4));
    cfg.aggregation = static_cast<Aggregation>(meta.below(3));
    cfg.num_heads = cfg.between_dim % 2 == 0 ? 2 : 1;
    cfg.key_dim = 2 + meta.below(3);
    auto [ps, dyn] = make_dyn(cfg, 1000 + trial, 0.7);
    size_t n = 2 + meta.below(5);
    std::vector<double> pts;
    for (size_t i = 0; i < n * cfg.point_dim; ++i) pts.push_back(2 * meta.uniform() - 1);
    Batch b = manual_batch({pts}, cfg.point_dim);
    double t = meta.uniform();
    double cf = dyn.divergence(b, t, TraceMode::ClosedForm)[0];
    double be = dyn.divergence(b, t, TraceMode::BlockExact)[0];
    double ed = dyn.divergence(b, t, TraceMode::ExactDense)[0];
    EXPECT_LE(std::abs(cf - ed), 1e-9) << "trial " << trial;
    EXPECT_LE(std::abs(be - ed), 1e-9) << "trial " << trial;
  }
}

TEST(Divergence, HutchinsonIsUnbiased) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2), 47, 0.8);
  Batch b = manual_batch({{0.3, -0.2, 0.8, 0.5, -0.6, 0.1}}, 2);
  double exact = dyn.divergence(b, 0.5, TraceMode::ExactDense)[0];
  Rng rng(2024);
  const int probes = 20000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < probes; ++i) {
    double v = dyn.divergence(b, 0.5, TraceMode::Hutchinson, &rng)[0];
    sum += v;
    sumsq += v * v;
  }
  double mean = sum / probes;
  double se = std::sqrt((sumsq / probes - mean * mean) / probes);
  EXPECT_LE(std::abs(mean - exact), 4 * se + 1e-12);
}

TEST(Divergence, InvariantUnderPermutation) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2, Aggregation::Mean), 71, 0.6);
  std::vector<double> pts = {0.2, 0.8, 0.5, 0.1, 0.9, 0.4, 0.3, 0.6};
  std::vector<double> permuted = {0.9, 0.4, 0.2, 0.8, 0.3, 0.6, 0.5, 0.1};
  Batch a = manual_batch({pts}, 2), p = manual_batch({permuted}, 2);
  for (auto mode : {TraceMode::ClosedForm, TraceMode::BlockExact}) {
    EXPECT_EQ(dyn.divergence(a, 0.3, mode)[0], dyn.divergence(p, 0.3, mode)[0]);
  }
  // Hutchinson: equal when the probe stream is aligned with canonical slots
  Rng r1(5), r2(5);
  EXPECT_EQ(dyn.divergence(a, 0.3, TraceMode::Hutchinson, &r1)[0],
            dyn.divergence(p, 0.3, TraceMode::Hutchinson, &r2)[0]);
}

TEST(Divergence, MaxAggregationStillExact) {
  auto [ps, dyn] = make_dyn(small_cfg(DynamicsKind::DeepSet, 2, Aggregation::Max), 81, 0.9);
  Batch b = manual_batch({{0.3, 0.7, -0.5, 0.2, 0.9, -0.1, 0.05, 0.45}}, 2);
  double cf = dyn.divergence(b, 0.6, TraceMode::ClosedForm)[0];
  double ed = dyn.divergence(b, 0.6, TraceMode::ExactDense)[0];
  EXPECT_LE(std::abs(cf - ed), 1e-9);
}
