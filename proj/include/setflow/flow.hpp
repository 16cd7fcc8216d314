#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "setflow/autodiff.hpp"
#include "setflow/coupling.hpp"
#include "setflow/dynamics.hpp"
#include "setflow/pointset.hpp"
#include "setflow/rng.hpp"

namespace setflow {

// ---------------------------------------------------------------------------
// Domain and bounding transform
// ---------------------------------------------------------------------------

struct Domain {
  std::vector<double> lower, upper;
  bool bounded = false;

  size_t dim() const { return lower.size(); }

  static Domain unbounded(size_t d) {
    Domain dm;
    dm.lower.assign(d, 0.0);
    dm.upper.assign(d, 1.0);
    dm.bounded = false;
    return dm;
  }
  static Domain box(std::vector<double> lo, std::vector<double> hi) {
    require_config(lo.size() == hi.size() && !lo.empty(), "domain: dimension mismatch");
    for (size_t j = 0; j < lo.size(); ++j)
      require_config(lo[j] < hi[j], "domain: lower must be < upper");
    Domain dm;
    dm.lower = std::move(lo);
    dm.upper = std::move(hi);
    dm.bounded = true;
    return dm;
  }
  static Domain unit_square() { return box({0.0, 0.0}, {1.0, 1.0}); }

  bool contains_strict(std::span<const double> p) const {
    if (!bounded) return true;
    for (size_t j = 0; j < p.size(); ++j)
      if (!(p[j] > lower[j] && p[j] < upper[j])) return false;
    return true;
  }
};

// Data is squeezed into [eps, 1-eps] before the logit so boundary points stay
// finite; the squeeze is part of the transform and of its log-determinant.
inline constexpr double kBoundingEps = 1e-5;

enum class BoundingDirection { ToUnbounded, ToDomain };

// Per-coordinate logit/sigmoid wrapping between the box B and R^d, with the
// per-set log|det| over valid slots. ToUnbounded and ToDomain are exact
// inverses of each other.
inline std::pair<Batch, std::vector<double>> bounding_transform(const Batch& batch,
                                                                const Domain& domain,
                                                                BoundingDirection dir) {
  require_config(domain.bounded, "bounding_transform: domain is unbounded");
  require_config(domain.dim() == batch.dim, "bounding_transform: dimension mismatch");
  Batch out = batch;
  std::vector<double> logdet(batch.batch, 0.0);
  const double k = 1.0 - 2.0 * kBoundingEps;
  for (size_t b = 0; b < batch.batch; ++b) {
    for (size_t i = 0; i < batch.lengths[b]; ++i) {
      for (size_t j = 0; j < batch.dim; ++j) {
        const size_t idx = (b * batch.n_max + i) * batch.dim + j;
        const double range = domain.upper[j] - domain.lower[j];
        if (dir == BoundingDirection::ToUnbounded) {
          const double u0 = (batch.points.values[idx] - domain.lower[j]) / range;
          if (!(u0 > 0.0 && u0 < 1.0))
            throw DomainError("bounding_transform: coordinate outside the open domain");
          const double u = kBoundingEps + k * u0;
          out.points.values[idx] = std::log(u / (1.0 - u));
          logdet[b] += -std::log(u * (1.0 - u)) + std::log(k) - std::log(range);
        } else {
          const double u = sigmoid(batch.points.values[idx]);
          const double u0 = (u - kBoundingEps) / k;
          out.points.values[idx] = domain.lower[j] + range * u0;
          logdet[b] -= -std::log(u * (1.0 - u)) + std::log(k) - std::log(range);
        }
      }
    }
  }
  return {out, logdet};
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

enum class SolverScheme { RK4Fixed, Dopri5Adaptive };

struct SolverConfig {
  SolverScheme scheme = SolverScheme::RK4Fixed;
  size_t steps = 20;           // RK4Fixed
  double rtol = 1e-5, atol = 1e-5;  // Dopri5Adaptive
  size_t max_evals = 10000;

  static SolverConfig rk4(size_t steps) {
    SolverConfig c;
    c.scheme = SolverScheme::RK4Fixed;
    c.steps = steps;
    return c;
  }
  static SolverConfig dopri5(double rtol, double atol, size_t max_evals = 10000) {
    SolverConfig c;
    c.scheme = SolverScheme::Dopri5Adaptive;
    c.rtol = rtol;
    c.atol = atol;
    c.max_evals = max_evals;
    return c;
  }

  void validate() const {
    require_config(steps >= 1, "solver: steps must be >= 1");
    require_config(rtol > 0 && atol > 0, "solver: tolerances must be positive");
    require_config(max_evals >= 1, "solver: max_evals must be >= 1");
  }
};

enum class FlowDirection { DensityPass, SamplePass };

namespace flow_detail {

// One classical RK4 step of the augmented system on the tape: next state and
// the step's divergence increment [B,1]. The Hutchinson probe stream is
// derived from (step index, stage), so a gradient-replay of the same step
// draws identical probes.
inline std::pair<ad::Var, ad::Var> rk4_step_var(const EquivariantDynamics& dyn, const SetLayout& lay,
                                                const ad::Var& z, double t, double h, TraceMode mode,
                                                const Rng& probe_base, size_t step_idx, bool want_div) {
  auto eval = [&](const ad::Var& zz, double tt, size_t stage) -> std::pair<ad::Var, ad::Var> {
    if (!want_div)
      return {dyn.velocity_rows(zz, tt, lay), ad::constant(Tensor::zeros({lay.B, 1}))};
    Rng r = probe_base.fork(step_idx * 4 + stage);
    return dyn.velocity_and_divergence(zz, tt, lay, mode, &r);
  };
  auto [v1, d1] = eval(z, t, 0);
  ad::Var z2 = ad::add(z, ad::scale(v1, h / 2));
  auto [v2, d2] = eval(z2, t + h / 2, 1);
  ad::Var z3 = ad::add(z, ad::scale(v2, h / 2));
  auto [v3, d3] = eval(z3, t + h / 2, 2);
  ad::Var z4 = ad::add(z, ad::scale(v3, h));
  auto [v4, d4] = eval(z4, t + h, 3);
  ad::Var vsum = ad::add(ad::add(v1, v4), ad::scale(ad::add(v2, v3), 2.0));
  ad::Var znext = ad::add(z, ad::scale(vsum, h / 6));
  ad::Var dsum = ad::add(ad::add(d1, d4), ad::scale(ad::add(d2, d3), 2.0));
  return {znext, ad::scale(dsum, h / 6)};
}

struct ValueIntegration {
  Tensor z;
  Tensor logdet;  // [B,1]
  long nfe = 0;
};

inline ValueIntegration rk4_integrate_values(const EquivariantDynamics& dyn, const SetLayout& lay,
                                             Tensor z0, double t0, double t1, size_t steps,
                                             TraceMode mode, const Rng& probe_base, bool want_div) {
  ad::NoGradGuard ng;
  ValueIntegration out;
  out.z = std::move(z0);
  out.logdet = Tensor::zeros({lay.B, 1});
  const double h = (t1 - t0) / static_cast<double>(steps);
  for (size_t k = 0; k < steps; ++k) {
    auto [znext, inc] =
        rk4_step_var(dyn, lay, ad::constant(out.z), t0 + h * static_cast<double>(k), h, mode,
                     probe_base, k, want_div);
    out.z = znext.value();
    if (!out.z.all_finite()) throw EvalError("rk4: non-finite state");
    out.logdet.add_inplace(inc.value());
    out.nfe += 4;
  }
  return out;
}

// Dormand-Prince 5(4) embedded pair, standard coefficients. Acceptance is the
// RMS of err/(atol + rtol*|y|) over valid state components and the
// accumulator; the step factor is 0.9*err^(-1/5) clipped to [0.2, 5].
inline ValueIntegration dopri5_integrate_values(const EquivariantDynamics& dyn, const SetLayout& lay,
                                                Tensor z0, double t0, double t1,
                                                const SolverConfig& cfg, TraceMode mode,
                                                const Rng& probe_base, bool want_div) {
  static const double A[7][6] = {
      {0, 0, 0, 0, 0, 0},
      {1.0 / 5, 0, 0, 0, 0, 0},
      {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
      {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0},
      {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
  static const double C[7] = {0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
  static const double B5[7] = {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0};
  static const double B4[7] = {5179.0 / 57600,    0,           7571.0 / 16695, 393.0 / 640,
                               -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

  ad::NoGradGuard ng;
  ValueIntegration out;
  out.z = std::move(z0);
  out.logdet = Tensor::zeros({lay.B, 1});
  const size_t nz = out.z.size();
  const double span = t1 - t0;
  double t = t0;
  double h = 0.1 * span;
  size_t eval_counter = 0;

  auto stage = [&](const Tensor& z, double tt) -> std::pair<Tensor, Tensor> {
    if (!want_div) {
      ad::Var v = dyn.velocity_rows(ad::constant(z), tt, lay);
      return {v.value(), Tensor::zeros({lay.B, 1})};
    }
    Rng r = probe_base.fork(eval_counter++);
    auto [v, dv] = dyn.velocity_and_divergence(ad::constant(z), tt, lay, mode, &r);
    return {v.value(), dv.value()};
  };

  const double done_tol = 1e-14 * std::abs(span);
  while (std::abs(t1 - t) > done_tol) {
    if ((t + h - t1) * (span > 0 ? 1.0 : -1.0) > 0.0) h = t1 - t;
    if (std::abs(h) < 1e-14 * std::abs(span)) throw SolverError("dopri5: step size underflow");
    if (out.nfe + 7 > static_cast<long>(cfg.max_evals))
      throw SolverError("dopri5: max_evals exceeded, last accepted t=" + fmt17(t));

    Tensor kz[7], kl[7];
    for (size_t s = 0; s < 7; ++s) {
      Tensor zs = out.z;
      for (size_t p = 0; p < s; ++p)
        if (A[s][p] != 0.0)
          for (size_t i = 0; i < nz; ++i) zs.values[i] += h * A[s][p] * kz[p].values[i];
      auto [v, dv] = stage(zs, t + C[s] * h);
      if (!v.all_finite() || !dv.all_finite()) throw EvalError("dopri5: non-finite state");
      kz[s] = std::move(v);
      kl[s] = std::move(dv);
    }
    out.nfe += 7;

    Tensor z5 = out.z, l5 = out.logdet;
    for (size_t s = 0; s < 7; ++s) {
      if (B5[s] == 0.0) continue;
      for (size_t i = 0; i < nz; ++i) z5.values[i] += h * B5[s] * kz[s].values[i];
      for (size_t i = 0; i < lay.B; ++i) l5.values[i] += h * B5[s] * kl[s].values[i];
    }

    // error vs the 4th-order solution over valid slots plus the accumulator
    double sumsq = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < nz; ++i) {
      if ((*lay.slot_mask)[i] == 0.0) continue;
      double err = 0.0;
      for (size_t s = 0; s < 7; ++s) err += h * (B5[s] - B4[s]) * kz[s].values[i];
      double sc = cfg.atol + cfg.rtol * std::abs(out.z.values[i]);
      sumsq += (err / sc) * (err / sc);
      ++count;
    }
    for (size_t i = 0; i < lay.B; ++i) {
      double err = 0.0;
      for (size_t s = 0; s < 7; ++s) err += h * (B5[s] - B4[s]) * kl[s].values[i];
      double sc = cfg.atol + cfg.rtol * std::abs(out.logdet.values[i]);
      sumsq += (err / sc) * (err / sc);
      ++count;
    }
    double err_norm = count ? std::sqrt(sumsq / static_cast<double>(count)) : 0.0;

    double factor = err_norm > 0.0 ? 0.9 * std::pow(err_norm, -0.2) : 5.0;
    factor = std::min(5.0, std::max(0.2, factor));
    if (err_norm <= 1.0) {
      t += h;
      out.z = std::move(z5);
      out.logdet = std::move(l5);
    }
    h *= factor;
  }
  return out;
}

inline ValueIntegration integrate_values(const EquivariantDynamics& dyn, const SetLayout& lay,
                                         Tensor z0, double t0, double t1, const SolverConfig& cfg,
                                         TraceMode mode, const Rng& probe_base, bool want_div) {
  cfg.validate();
  if (cfg.scheme == SolverScheme::RK4Fixed)
    return rk4_integrate_values(dyn, lay, std::move(z0), t0, t1, cfg.steps, mode, probe_base, want_div);
  return dopri5_integrate_values(dyn, lay, std::move(z0), t0, t1, cfg, mode, probe_base, want_div);
}

}  // namespace flow_detail

// ---------------------------------------------------------------------------
// Single-block integration (states + log-density increment + nfe)
// ---------------------------------------------------------------------------

struct FlowEval {
  Batch points;
  std::vector<double> delta_logdensity;  // per set
  long nfe = 0;
};

// Integrates one CNF block over its fixed [0,1] time span. The density pass
// runs data-side t=0 to base-side t=1 accumulating the divergence integral
// (to be *added* to the base log-density); the sample pass runs 1 -> 0 and
// skips the accumulator unless diagnostics are requested.
inline FlowEval integrate(const EquivariantDynamics& block, const Batch& X, FlowDirection dir,
                          const SolverConfig& solver, TraceMode mode, Rng rng,
                          bool accumulate_on_sample = false) {
  block.check_mode(mode);
  CanonicalBatch cb = canonicalize(X);
  SetLayout lay = make_layout(cb.batch);
  const bool want_div = dir == FlowDirection::DensityPass || accumulate_on_sample;
  const double t0 = dir == FlowDirection::DensityPass ? 0.0 : 1.0;
  const double t1 = dir == FlowDirection::DensityPass ? 1.0 : 0.0;
  auto res = flow_detail::integrate_values(block, lay, EquivariantDynamics::points_rows(cb.batch), t0,
                                           t1, solver, mode, rng, want_div);
  FlowEval out;
  out.points = X;
  Tensor orig = scatter_to_original(res.z, cb.perm, lay.B, lay.n, lay.d);
  out.points.points = orig.reshaped({lay.B, lay.n, lay.d});
  out.delta_logdensity = res.logdet.values;
  out.nfe = res.nfe;
  return out;
}

// ---------------------------------------------------------------------------
// FlowModel: bounding + coupling stack + stacked CNF blocks + normal base
// ---------------------------------------------------------------------------

struct FlowModel {
  size_t dim = 2;
  Domain domain = Domain::unbounded(2);
  std::vector<CouplingLayer> couplings;     // generative order (applied after the blocks)
  std::vector<EquivariantDynamics> blocks;  // density order (blocks[0] runs first on data)
  TraceMode trace_mode = TraceMode::ClosedForm;
  SolverConfig train_solver = SolverConfig::rk4(20);
  SolverConfig eval_solver = SolverConfig::dopri5(1e-5, 1e-5, 10000);
  ad::ParameterSet params;

  bool has_flow_part() const { return !blocks.empty() || !couplings.empty(); }
};

namespace flow_detail {

// Base log-density per set over valid slots: sum of standard-normal terms.
inline std::vector<double> base_logdensity_values(const Tensor& rows, const SetLayout& lay) {
  std::vector<double> out(lay.B, 0.0);
  for (size_t b = 0; b < lay.B; ++b) {
    double acc = 0.0;
    for (size_t i = 0; i < lay.lengths[b]; ++i)
      for (size_t j = 0; j < lay.d; ++j) {
        double z = rows.values[(b * lay.n + i) * lay.d + j];
        acc += -0.5 * z * z;
      }
    out[b] = acc - 0.5 * kLog2Pi * static_cast<double>(lay.lengths[b] * lay.d);
  }
  return out;
}

}  // namespace flow_detail

struct DensityEval {
  std::vector<double> logp;  // per set
  long nfe = 0;
};

// Batched log p~ over point sets: bounding log-det, inverse coupling stack,
// every block's divergence integral, and the base log-density. Sets are laid
// out canonically by pad_batch, which is what makes the result invariant to
// the caller's point order (bitwise under RK4Fixed).
inline DensityEval log_densities(const FlowModel& model, std::span<const PointSet> sets,
                                 TraceMode mode, const SolverConfig& solver, Rng rng) {
  for (const auto& s : sets) {
    require(s.dim == model.dim, "log_densities: dimension mismatch");
    if (model.domain.bounded)
      for (size_t i = 0; i < s.size(); ++i)
        if (!model.domain.contains_strict(s.point(i)))
          throw DomainError("log_densities: point outside the model domain");
  }
  Batch batch = pad_batch(sets);
  SetLayout lay = make_layout(batch);
  DensityEval out;
  out.logp.assign(lay.B, 0.0);

  std::vector<double> ld_bound(lay.B, 0.0);
  if (model.domain.bounded) {
    auto [bb, ld] = bounding_transform(batch, model.domain, BoundingDirection::ToUnbounded);
    batch = std::move(bb);
    ld_bound = std::move(ld);
  }

  ad::NoGradGuard ng;
  ad::Var z = ad::constant(EquivariantDynamics::points_rows(batch));
  std::vector<double> ld_coup(lay.B, 0.0);
  if (!model.couplings.empty()) {
    ad::Var per_row;
    for (auto it = model.couplings.rbegin(); it != model.couplings.rend(); ++it) {
      auto [zz, ld] = it->inverse_rows(z);
      z = zz;
      per_row = per_row.defined() ? ad::add(per_row, ld) : ld;
    }
    Tensor ld_sets =
        ad::block_rowsum(ad::scale_rows(per_row, lay.point_mask), lay.n).value();
    ld_coup = ld_sets.values;
  }

  Tensor zt = z.value();
  std::vector<double> ld_blocks(lay.B, 0.0);
  for (size_t b = 0; b < model.blocks.size(); ++b) {
    auto res = flow_detail::integrate_values(model.blocks[b], lay, std::move(zt), 0.0, 1.0, solver,
                                             mode, rng.fork(7000 + b), /*want_div=*/true);
    zt = std::move(res.z);
    for (size_t i = 0; i < lay.B; ++i) ld_blocks[i] += res.logdet.values[i];
    out.nfe += res.nfe;
  }

  std::vector<double> base = flow_detail::base_logdensity_values(zt, lay);
  for (size_t i = 0; i < lay.B; ++i)
    out.logp[i] = base[i] + ld_blocks[i] + ld_coup[i] + ld_bound[i];
  return out;
}

inline double log_density(const FlowModel& model, const PointSet& ps, TraceMode mode,
                          const SolverConfig& solver, Rng rng) {
  if (ps.empty()) return 0.0;  // empty product of densities
  return log_densities(model, std::span(&ps, 1), mode, solver, std::move(rng)).logp[0];
}

inline double log_density(const FlowModel& model, const PointSet& ps) {
  return log_density(model, ps, model.trace_mode, model.eval_solver, Rng(0));
}

// ---------------------------------------------------------------------------
// Sampling: base draw, sample pass through blocks in reverse order, coupling
// stack forward, then back into the domain.
// ---------------------------------------------------------------------------

inline std::vector<PointSet> sample_batch(const FlowModel& model, const std::vector<size_t>& counts,
                                          const SolverConfig& solver, Rng& rng) {
  require(!counts.empty(), "sample_batch: empty request");
  for (size_t n : counts) require(n >= 1, "sample: n must be >= 1");
  Batch batch;
  batch.batch = counts.size();
  batch.dim = model.dim;
  batch.n_max = *std::max_element(counts.begin(), counts.end());
  batch.lengths = counts;
  batch.points = Tensor::zeros({batch.batch, batch.n_max, batch.dim});
  batch.mask = Tensor::zeros({batch.batch, batch.n_max});
  for (size_t b = 0; b < batch.batch; ++b)
    for (size_t i = 0; i < counts[b]; ++i) {
      batch.mask.values[b * batch.n_max + i] = 1.0;
      for (size_t j = 0; j < batch.dim; ++j)
        batch.points.values[(b * batch.n_max + i) * batch.dim + j] = rng.normal();
    }

  SetLayout lay = make_layout(batch);
  Tensor zt = EquivariantDynamics::points_rows(batch);
  for (size_t b = model.blocks.size(); b-- > 0;) {
    auto res = flow_detail::integrate_values(model.blocks[b], lay, std::move(zt), 1.0, 0.0, solver,
                                             model.trace_mode, rng.fork(9000 + b), /*want_div=*/false);
    zt = std::move(res.z);
  }
  {
    ad::NoGradGuard ng;
    ad::Var z = ad::constant(zt);
    for (const auto& layer : model.couplings) z = layer.forward_rows(z).first;
    zt = z.value();
  }
  batch.points = zt.reshaped({batch.batch, batch.n_max, batch.dim});
  if (model.domain.bounded)
    batch = bounding_transform(batch, model.domain, BoundingDirection::ToDomain).first;
  std::vector<PointSet> out;
  for (size_t b = 0; b < batch.batch; ++b) out.push_back(batch.extract(b));
  return out;
}

inline PointSet sample(const FlowModel& model, size_t n, const SolverConfig& solver, Rng& rng) {
  return sample_batch(model, {n}, solver, rng)[0];
}

// ---------------------------------------------------------------------------
// Training-path density with parameter gradients.
//
// Discretize-then-optimize through RK4Fixed with per-step recompute
// checkpointing: the forward sweep stores only step-boundary states; the
// backward sweep rebuilds one step's graph at a time and seeds it with the
// incoming adjoint, which keeps peak memory at one step's worth of tape while
// producing gradients bitwise-identical to full retention.
// ---------------------------------------------------------------------------

namespace flow_detail {

class CheckpointedBlock {
 public:
  CheckpointedBlock(const EquivariantDynamics* dyn, SetLayout lay, size_t steps, TraceMode mode,
                    Rng probe_base)
      : dyn_(dyn), lay_(std::move(lay)), steps_(steps), mode_(mode), probe_(probe_base) {}

  Tensor forward(Tensor z0) {
    z_steps_.clear();
    z_steps_.reserve(steps_);
    Tensor z = std::move(z0);
    l_final_ = Tensor::zeros({lay_.B, 1});
    const double h = 1.0 / static_cast<double>(steps_);
    for (size_t k = 0; k < steps_; ++k) {
      z_steps_.push_back(z);
      ad::NoGradGuard ng;
      auto [znext, inc] = rk4_step_var(*dyn_, lay_, ad::constant(z), h * static_cast<double>(k), h,
                                       mode_, probe_, k, /*want_div=*/true);
      z = znext.value();
      if (!z.all_finite()) throw EvalError("rk4: non-finite state");
      l_final_.add_inplace(inc.value());
    }
    return z;
  }

  // Adjoint sweep: dL/d(block input). Parameter gradients accumulate during
  // the replays. gl is constant across steps because the accumulator enters
  // each step additively.
  Tensor backward(const Tensor& gz_out, const Tensor& gl) {
    Tensor gz = gz_out;
    const double h = 1.0 / static_cast<double>(steps_);
    for (size_t k = steps_; k-- > 0;) {
      ad::Var zin(z_steps_[k], true);
      auto [znext, inc] = rk4_step_var(*dyn_, lay_, zin, h * static_cast<double>(k), h, mode_,
                                       probe_, k, /*want_div=*/true);
      ad::backward_multi({{znext, gz}, {inc, gl}});
      gz = zin.grad_or_zero();
    }
    return gz;
  }

  const Tensor& divergence_integral() const { return l_final_; }
  long nfe() const { return static_cast<long>(4 * steps_); }

 private:
  const EquivariantDynamics* dyn_;
  SetLayout lay_;
  size_t steps_;
  TraceMode mode_;
  Rng probe_;
  std::vector<Tensor> z_steps_;
  Tensor l_final_;
};

}  // namespace flow_detail

struct TrainEval {
  std::vector<double> logptilde;  // per set
  long nfe = 0;
  // Seeds dL/d(logptilde) per set and accumulates parameter gradients.
  std::function<void(const std::vector<double>&)> backprop;
};

inline TrainEval logdensity_training(const FlowModel& model, const Batch& input_batch, Rng probe_rng) {
  require(model.train_solver.scheme == SolverScheme::RK4Fixed,
          "training gradients require the fixed-step RK4 solver");
  SetLayout lay = make_layout(input_batch);
  Batch batch = input_batch;
  std::vector<double> ld_bound(lay.B, 0.0);
  if (model.domain.bounded) {
    auto [bb, ld] = bounding_transform(batch, model.domain, BoundingDirection::ToUnbounded);
    batch = std::move(bb);
    ld_bound = std::move(ld);
  }

  // Coupling stack on the tape (gradients flow through both the transformed
  // states and the log-determinant).
  ad::Var z0_var = ad::constant(EquivariantDynamics::points_rows(batch));
  ad::Var ld_coup_var;
  if (!model.couplings.empty()) {
    ad::Var per_row;
    for (auto it = model.couplings.rbegin(); it != model.couplings.rend(); ++it) {
      auto [zz, ld] = it->inverse_rows(z0_var);
      z0_var = zz;
      per_row = per_row.defined() ? ad::add(per_row, ld) : ld;
    }
    ld_coup_var = ad::block_rowsum(ad::scale_rows(per_row, lay.point_mask), lay.n);
  }

  auto blocks = std::make_shared<std::vector<flow_detail::CheckpointedBlock>>();
  Tensor zt = z0_var.value();
  TrainEval ev;
  for (size_t b = 0; b < model.blocks.size(); ++b) {
    blocks->emplace_back(&model.blocks[b], lay, model.train_solver.steps, model.trace_mode,
                         probe_rng.fork(7000 + b));
    zt = blocks->back().forward(std::move(zt));
    ev.nfe += blocks->back().nfe();
  }

  // Final assembly: base density from a leaf on the last state, per-block
  // divergence integrals as leaves, coupling log-det snipped to a leaf (its
  // graph gets one combined traversal later).
  ad::Var zN(zt, true);
  std::vector<ad::Var> l_leaves;
  for (auto& cb : *blocks) l_leaves.push_back(ad::Var(cb.divergence_integral(), true));
  ad::Var ld_coup_leaf;
  if (ld_coup_var.defined()) ld_coup_leaf = ad::Var(ld_coup_var.value(), true);

  ad::Var q = ad::scale_rows(ad::scale(ad::mul(zN, zN), -0.5), lay.point_mask);
  ad::Var base = ad::block_rowsum(ad::rowsum(q), lay.n);
  auto base_const = std::make_shared<std::vector<double>>(lay.B, 0.0);
  for (size_t b = 0; b < lay.B; ++b)
    (*base_const)[b] =
        -0.5 * kLog2Pi * static_cast<double>(lay.lengths[b] * lay.d) + ld_bound[b];
  ad::Var logp = ad::add_rows_const(base, base_const);
  for (auto& l : l_leaves) logp = ad::add(logp, l);
  if (ld_coup_leaf.defined()) logp = ad::add(logp, ld_coup_leaf);

  ev.logptilde = logp.value().values;
  ev.backprop = [logp, zN, l_leaves, ld_coup_leaf, ld_coup_var, z0_var, blocks,
                 B = lay.B](const std::vector<double>& seed) {
    require(seed.size() == B, "backprop: seed size mismatch");
    ad::backward(logp, Tensor({B, 1}, std::vector<double>(seed)));
    Tensor gz = zN.grad_or_zero();
    for (size_t b = blocks->size(); b-- > 0;) {
      Tensor gl = l_leaves[b].grad_or_zero();
      gz = (*blocks)[b].backward(gz, gl);
    }
    if (ld_coup_var.defined())
      ad::backward_multi({{z0_var, gz}, {ld_coup_var, ld_coup_leaf.grad_or_zero()}});
  };
  return ev;
}

}  // namespace setflow
