#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "setflow/autodiff.hpp"
#include "setflow/nets.hpp"
#include "setflow/pointset.hpp"
#include "setflow/rng.hpp"

namespace setflow {

// How the divergence (Jacobian trace) of the dynamics is obtained.
//   ClosedForm — exact, one dual pass through the per-dimension map.
//   Zero       — identically zero (between-points-only dynamics).
//   Hutchinson — unbiased Rademacher probe.
//   BlockExact — exact per-point diagonal blocks, d tangent passes.
//   ExactDense — trace of the full Jacobian; verification/benchmark path.
enum class TraceMode { ClosedForm, Zero, Hutchinson, BlockExact, ExactDense };

enum class Aggregation { Sum, Mean, Max };
enum class DynamicsKind { DeepSet, Attention };

struct DynamicsConfig {
  DynamicsKind kind = DynamicsKind::DeepSet;
  size_t point_dim = 2;
  size_t hidden_dim = 64;
  size_t latent_dim = 2;    // width of the within-point conditioner per dimension; 0 disables it
  size_t between_dim = 64;  // width of the between-points conditioner
  Aggregation aggregation = Aggregation::Sum;
  size_t num_heads = 4;   // attention only
  size_t key_dim = 16;    // attention only
  TraceMode trace_mode = TraceMode::ClosedForm;

  // Zero-trace dynamics transform each point purely from the others, so the
  // conditioner itself is the velocity and must match the point dimension.
  void normalize() {
    if (trace_mode == TraceMode::Zero) {
      between_dim = point_dim;
      if (kind == DynamicsKind::Attention && between_dim % num_heads != 0) num_heads = 1;
    }
  }

  void validate() const {
    require_config(point_dim >= 1, "dynamics: point_dim must be >= 1");
    require_config(hidden_dim >= 1, "dynamics: hidden_dim must be >= 1");
    require_config(between_dim >= 1, "dynamics: between_dim must be >= 1");
    if (kind == DynamicsKind::Attention) {
      require_config(num_heads >= 1 && between_dim % num_heads == 0,
                     "dynamics: num_heads must divide between_dim");
      require_config(key_dim >= 1, "dynamics: key_dim must be >= 1");
    }
    if (trace_mode == TraceMode::Zero)
      require_config(between_dim == point_dim, "dynamics: zero-trace requires between_dim == point_dim");
  }
};

namespace dyn_detail {

// Routing table for the self-excluded max: source row per output entry, so
// the value and tangent passes pick identical paths.
struct Routing {
  std::vector<long> src;  // [rows * cols], -1 for masked/isolated slots
  size_t cols = 0;
};

// Tie rule: every slot holding the maximal value receives that value, except
// the lowest-indexed maximal slot, which receives the largest strictly
// smaller value (or the shared value when all entries are equal).
inline std::shared_ptr<Routing> exclusive_max_routing(const Tensor& H, const SetLayout& lay) {
  auto routing = std::make_shared<Routing>();
  const size_t C = H.cols();
  routing->cols = C;
  routing->src.assign(H.rows() * C, -1);
  for (size_t b = 0; b < lay.B; ++b) {
    const size_t len = lay.lengths[b];
    if (len < 2) continue;
    const size_t base = b * lay.n;
    for (size_t c = 0; c < C; ++c) {
      size_t i1 = 0;
      double m1 = H.at(base, c);
      for (size_t i = 1; i < len; ++i) {
        double v = H.at(base + i, c);
        if (v > m1) {
          m1 = v;
          i1 = i;
        }
      }
      long j2 = -1;
      double m2 = 0;
      for (size_t i = 0; i < len; ++i) {
        double v = H.at(base + i, c);
        if (v < m1 && (j2 < 0 || v > m2)) {
          m2 = v;
          j2 = static_cast<long>(i);
        }
      }
      for (size_t i = 0; i < len; ++i) {
        long s;
        if (i == i1)
          s = j2 >= 0 ? j2 : static_cast<long>(i1 == 0 ? 1 : 0);
        else
          s = static_cast<long>(i1);
        routing->src[(base + i) * C + c] = static_cast<long>(base) + s;
      }
    }
  }
  return routing;
}

inline ad::Var gather_routed(const ad::Var& a, const std::shared_ptr<Routing>& routing) {
  const size_t C = routing->cols;
  const size_t R = routing->src.size() / C;
  Tensor out = Tensor::zeros({R, C});
  for (size_t i = 0; i < routing->src.size(); ++i) {
    long s = routing->src[i];
    out.values[i] = s >= 0 ? a.value().values[static_cast<size_t>(s) * C + (i % C)] : 0.0;
  }
  return ad::detail::make_result(std::move(out), "gather_routed", {a},
                                 [pa = a.ptr(), routing](ad::Node& self) {
                                   if (!pa->requires_grad) return;
                                   pa->ensure_grad();
                                   const size_t C = routing->cols;
                                   for (size_t i = 0; i < routing->src.size(); ++i) {
                                     long s = routing->src[i];
                                     if (s >= 0)
                                       pa->grad.values[static_cast<size_t>(s) * C + (i % C)] +=
                                           self.grad.values[i];
                                   }
                                 });
}

// Self-excluded aggregation over valid slots: row i receives the aggregate of
// the other rows in its set. Sum/Mean use the subtract-self identity; rows of
// single-point sets and padded slots come out zero. Expects pre-masked rows;
// reductions run in ascending (canonical) slot order.
inline ad::Var exclusive_aggregate(const ad::Var& Hm, Aggregation agg, const SetLayout& lay,
                                   std::shared_ptr<Routing> reuse_routing = nullptr) {
  if (agg == Aggregation::Max) {
    auto routing = reuse_routing ? reuse_routing : exclusive_max_routing(Hm.value(), lay);
    return gather_routed(Hm, routing);
  }
  ad::Var rep = ad::block_repeat(ad::block_rowsum(Hm, lay.n), lay.n);
  ad::Var out = ad::scale_rows(ad::sub(rep, Hm), lay.point_mask);
  if (agg == Aggregation::Mean) out = ad::scale_rows(out, lay.inv_nm1);
  return out;
}

inline ad::Var const_col(size_t rows, double v) { return ad::constant(Tensor::filled({rows, 1}, v)); }

}  // namespace dyn_detail

// Scalar per-dimension map: a tanh hidden layer plus a linear bypass, both
// output contributions zero-initialized so a fresh flow is the identity map.
struct TauNet {
  Mlp mlp;
  ad::Var skip_w;  // [in, 1]

  ad::Var operator()(const ad::Var& F) const { return ad::add(mlp(F), ad::matmul(F, skip_w)); }

  DVar dual(const DVar& F) const {
    DVar m = mlp.dual(F);
    return {ad::add(m.v, ad::matmul(F.v, skip_w)), ad::add(m.t, ad::matmul(F.t, skip_w))};
  }
};

// Permutation-equivariant velocity field over a padded batch of point sets,
// factored so every Jacobian diagonal entry comes from the scalar slot of the
// per-dimension map:
//
//   velocity[i, j] = tau(x_ij, g_i[j], h_i, t)
//
// g_i is a masked per-point conditioner with no path from x_ij to output
// group j; h_i aggregates the other points (self excluded) or, for the
// attention variant, attends over them with learned constant queries, so h_i
// never depends on x_i at all.
class EquivariantDynamics {
 public:
  static EquivariantDynamics create(DynamicsConfig cfg, ParameterSet& ps, const std::string& prefix,
                                    Rng& rng) {
    cfg.normalize();
    cfg.validate();
    EquivariantDynamics dyn;
    dyn.cfg_ = cfg;
    const size_t d = cfg.point_dim;
    size_t names_before = ps.size();
    if (cfg.kind == DynamicsKind::DeepSet) {
      dyn.h_net_ = make_mlp(ps, prefix + ".h", {d + 1, cfg.hidden_dim, cfg.between_dim}, rng,
                            /*zero_final=*/cfg.trace_mode == TraceMode::Zero);
    } else {
      dyn.k_net_ = make_mlp(ps, prefix + ".fk", {d + 1, cfg.hidden_dim, cfg.num_heads * cfg.key_dim}, rng);
      dyn.v_net_ = make_mlp(ps, prefix + ".fv", {d + 1, cfg.hidden_dim, cfg.between_dim}, rng,
                            /*zero_final=*/cfg.trace_mode == TraceMode::Zero);
      for (size_t h = 0; h < cfg.num_heads; ++h)
        dyn.queries_.push_back(
            ps.add(prefix + ".q" + std::to_string(h), init_uniform({cfg.key_dim, 1}, cfg.key_dim, rng)));
    }
    if (cfg.trace_mode != TraceMode::Zero) {
      if (cfg.latent_dim > 0)
        dyn.within_ = make_masked_conditioner(ps, prefix + ".g", d, cfg.hidden_dim, cfg.latent_dim, rng);
      const size_t tau_in = 1 + cfg.latent_dim + cfg.between_dim + 1;
      dyn.tau_ = TauNet{make_mlp(ps, prefix + ".tau", {tau_in, cfg.hidden_dim, 1}, rng, /*zero_final=*/true),
                        ps.add(prefix + ".tau.skip.w", Tensor::zeros({tau_in, 1}))};
    }
    for (size_t i = names_before; i < ps.size(); ++i) dyn.own_params_.push_back((ps.begin() + i)->second);
    return dyn;
  }

  const DynamicsConfig& config() const { return cfg_; }
  bool zero_architecture() const { return cfg_.trace_mode == TraceMode::Zero; }

  // Zero-trace dynamics admit any trace mode (all exact modes yield 0); the
  // full architecture has slot-dependent tau, so a constant-zero trace would
  // simply be wrong for it. Checked here and again at model build time.
  void check_mode(TraceMode mode) const {
    if (!zero_architecture() && mode == TraceMode::Zero)
      throw ConfigError("trace mode 'zero' requires between-points-only dynamics");
  }

  // --- graph-level evaluation on canonically ordered rows -----------------

  ad::Var velocity_rows(const ad::Var& X, double t, const SetLayout& lay) const {
    if (zero_architecture()) return conditioner_rows(X, t, lay);
    ad::Var between = conditioner_rows(X, t, lay);
    ad::Var G;
    if (cfg_.latent_dim > 0) G = (*within_)(masked_points(X, lay));
    return assemble_velocity(X, G, between, t, lay);
  }

  // Velocity together with the requested divergence [B,1]; conditioners are
  // evaluated once and shared between the two.
  std::pair<ad::Var, ad::Var> velocity_and_divergence(const ad::Var& X, double t, const SetLayout& lay,
                                                      TraceMode mode, Rng* rng) const {
    check_mode(mode);
    const size_t R = lay.B * lay.n;
    if (mode == TraceMode::Zero)
      return {velocity_rows(X, t, lay), ad::constant(Tensor::zeros({lay.B, 1}))};

    if (mode == TraceMode::Hutchinson) {
      require(rng != nullptr, "hutchinson divergence needs an rng stream");
      Tensor eps = Tensor::zeros({R, lay.d});
      for (size_t r = 0; r < R; ++r)
        for (size_t j = 0; j < lay.d; ++j)
          if ((*lay.slot_mask)[r * lay.d + j] != 0.0) eps.values[r * lay.d + j] = rng->rademacher();
      ad::Var eps_v = ad::constant(eps);
      DVar vel = velocity_rows_dual({X, eps_v}, t, lay);
      ad::Var prod = ad::mul(eps_v, vel.t);
      ad::Var div = ad::block_rowsum(ad::reshape(prod, {R * lay.d, 1}), lay.n * lay.d);
      return {vel.v, div};
    }

    if (mode == TraceMode::ExactDense) {
      ad::Var vel = velocity_rows(X, t, lay);
      return {vel, ad::constant(exact_dense_divergence(X.value(), t, lay))};
    }

    if (zero_architecture())  // ClosedForm / BlockExact on a zero-diagonal construction
      return {velocity_rows(X, t, lay), ad::constant(Tensor::zeros({lay.B, 1}))};

    // Shared conditioners for the exact modes.
    ad::Var between = conditioner_rows(X, t, lay);
    ad::Var G;
    if (cfg_.latent_dim > 0) G = (*within_)(masked_points(X, lay));

    if (mode == TraceMode::ClosedForm) {
      DVar F = features_dual_slot_seed(X, G, between, t, lay);
      DVar u = tau_.dual(F);
      ad::Var partials = ad::scale_rows(u.t, lay.slot_mask);
      ad::Var div = ad::block_rowsum(partials, lay.n * lay.d);
      ad::Var vel = ad::scale_rows(ad::reshape(u.v, {R, lay.d}), lay.point_mask);
      return {vel, div};
    }

    // BlockExact: d tangent passes through the per-point part with the
    // between-points conditioner frozen; exact because that conditioner is
    // self-excluded and contributes nothing to the diagonal blocks.
    ad::Var vel = assemble_velocity(X, G, between, t, lay);
    ad::Var div = ad::constant(Tensor::zeros({lay.B, 1}));
    for (size_t jp = 0; jp < lay.d; ++jp) {
      Tensor seed = Tensor::zeros({R, lay.d});
      for (size_t r = 0; r < R; ++r)
        if ((*lay.slot_mask)[r * lay.d + jp] != 0.0) seed.values[r * lay.d + jp] = 1.0;
      ad::Var seed_v = ad::constant(seed);
      DVar G_d;
      if (cfg_.latent_dim > 0) G_d = within_->dual({masked_points(X, lay), seed_v});
      DVar F = features_dual_general(X, seed_v, G, G_d, between, nullptr, t, lay);
      DVar u = tau_.dual(F);
      auto sel = std::make_shared<std::vector<double>>(R * lay.d, 0.0);
      for (size_t r = 0; r < R; ++r) (*sel)[r * lay.d + jp] = (*lay.slot_mask)[r * lay.d + jp];
      div = ad::add(div, ad::block_rowsum(ad::scale_rows(u.t, sel), lay.n * lay.d));
    }
    return {vel, div};
  }

  ad::Var divergence_rows(const ad::Var& X, double t, const SetLayout& lay, TraceMode mode,
                          Rng* rng) const {
    return velocity_and_divergence(X, t, lay, mode, rng).second;
  }

  // Full forward-mode pass: value and J*tangent of the velocity.
  DVar velocity_rows_dual(const DVar& X, double t, const SetLayout& lay) const {
    const size_t R = lay.B * lay.n;
    DVar between = conditioner_rows_dual(X, t, lay);
    if (zero_architecture()) return between;
    DVar G;
    if (cfg_.latent_dim > 0) G = within_->dual({masked_points(X.v, lay), masked_points(X.t, lay)});
    DVar F = features_dual_general(X.v, masked_points(X.t, lay), G.v, G, between.v, &between, t, lay);
    DVar u = tau_.dual(F);
    ad::Var vel = ad::scale_rows(ad::reshape(u.v, {R, lay.d}), lay.point_mask);
    ad::Var velt = ad::scale_rows(ad::reshape(u.t, {R, lay.d}), lay.point_mask);
    return {vel, velt};
  }

  // --- public batch-level operations (canonical order inside) -------------

  Tensor velocity(const Batch& batch, double t) const {
    ad::NoGradGuard ng;
    CanonicalBatch cb = canonicalize(batch);
    SetLayout lay = make_layout(cb.batch);
    ad::Var out = velocity_rows(ad::constant(points_rows(cb.batch)), t, lay);
    if (!out.value().all_finite()) throw EvalError("velocity: non-finite output");
    Tensor orig = scatter_to_original(out.value(), cb.perm, lay.B, lay.n, lay.d);
    return orig.reshaped({lay.B, lay.n, lay.d});
  }

  std::vector<double> divergence(const Batch& batch, double t, TraceMode mode, Rng* rng = nullptr) const {
    check_mode(mode);
    CanonicalBatch cb = canonicalize(batch);
    SetLayout lay = make_layout(cb.batch);
    Tensor div;
    if (mode == TraceMode::ExactDense) {
      div = exact_dense_divergence(points_rows(cb.batch), t, lay);
    } else {
      ad::NoGradGuard ng;
      div = velocity_and_divergence(ad::constant(points_rows(cb.batch)), t, lay, mode, rng).second.value();
    }
    return div.values;
  }

  Tensor between_points(const Batch& batch, double t = 0.0) const {
    require_config(cfg_.kind == DynamicsKind::DeepSet, "between_points: deep-set dynamics only");
    ad::NoGradGuard ng;
    CanonicalBatch cb = canonicalize(batch);
    SetLayout lay = make_layout(cb.batch);
    Tensor sorted = conditioner_rows(ad::constant(points_rows(cb.batch)), t, lay).value();
    return scatter_to_original(sorted, cb.perm, lay.B, lay.n, cfg_.between_dim)
        .reshaped({lay.B, lay.n, cfg_.between_dim});
  }

  Tensor attention_conditioner(const Batch& batch, double t = 0.0) const {
    require_config(cfg_.kind == DynamicsKind::Attention, "attention_conditioner: attention dynamics only");
    ad::NoGradGuard ng;
    CanonicalBatch cb = canonicalize(batch);
    SetLayout lay = make_layout(cb.batch);
    Tensor sorted = conditioner_rows(ad::constant(points_rows(cb.batch)), t, lay).value();
    return scatter_to_original(sorted, cb.perm, lay.B, lay.n, cfg_.between_dim)
        .reshaped({lay.B, lay.n, cfg_.between_dim});
  }

  Tensor within_point(const Batch& batch) const {
    require_config(cfg_.latent_dim > 0 && !zero_architecture(),
                   "within_point: conditioner disabled (latent_dim == 0)");
    ad::NoGradGuard ng;
    CanonicalBatch cb = canonicalize(batch);
    SetLayout lay = make_layout(cb.batch);
    Tensor sorted = (*within_)(masked_points(ad::constant(points_rows(cb.batch)), lay)).value();
    return scatter_to_original(sorted, cb.perm, lay.B, lay.n, lay.d * cfg_.latent_dim)
        .reshaped({lay.B, lay.n, lay.d, cfg_.latent_dim});
  }

  static Tensor points_rows(const Batch& b) { return b.points.reshaped({b.batch * b.n_max, b.dim}); }

 private:
  DynamicsConfig cfg_;
  std::optional<Mlp> h_net_;  // deep-set
  std::optional<Mlp> k_net_, v_net_;
  std::vector<ad::Var> queries_;  // one learned [key_dim,1] query per head
  std::optional<MaskedConditioner> within_;
  TauNet tau_;
  std::vector<ad::Var> own_params_;

  static ad::Var masked_points(const ad::Var& X, const SetLayout& lay) {
    return ad::scale_rows(X, lay.point_mask);
  }

  ad::Var conditioner_rows(const ad::Var& X, double t, const SetLayout& lay) const {
    if (cfg_.kind == DynamicsKind::DeepSet) {
      ad::Var H = (*h_net_)(point_features(X, t, lay));
      ad::Var Hm = ad::scale_rows(H, lay.point_mask);
      return dyn_detail::exclusive_aggregate(Hm, cfg_.aggregation, lay);
    }
    return attention_rows(X, t, lay);
  }

  DVar conditioner_rows_dual(const DVar& X, double t, const SetLayout& lay) const {
    if (cfg_.kind == DynamicsKind::DeepSet) {
      const size_t R = lay.B * lay.n;
      ad::Var feat = point_features(X.v, t, lay);
      ad::Var feat_t = ad::concat_cols({masked_points(X.t, lay), dyn_detail::const_col(R, 0.0)});
      DVar H = h_net_->dual({feat, feat_t});
      DVar Hm = {ad::scale_rows(H.v, lay.point_mask), ad::scale_rows(H.t, lay.point_mask)};
      if (cfg_.aggregation == Aggregation::Max) {
        auto routing = dyn_detail::exclusive_max_routing(Hm.v.value(), lay);
        return {dyn_detail::gather_routed(Hm.v, routing), dyn_detail::gather_routed(Hm.t, routing)};
      }
      return {dyn_detail::exclusive_aggregate(Hm.v, cfg_.aggregation, lay),
              dyn_detail::exclusive_aggregate(Hm.t, cfg_.aggregation, lay)};
    }
    return attention_rows_dual(X, t, lay);
  }

  ad::Var point_features(const ad::Var& X, double t, const SetLayout& lay) const {
    return ad::concat_cols({masked_points(X, lay), dyn_detail::const_col(lay.B * lay.n, t)});
  }

  // Self-excluded softmax attention with learned constant queries. Scores are
  // row-independent, so masking the diagonal reduces to a subtract-self on
  // the softmax numerator and denominator, and row i's output carries no
  // dependence on x_i whatsoever.
  ad::Var attention_rows(const ad::Var& X, double t, const SetLayout& lay) const {
    ad::Var feat = point_features(X, t, lay);
    ad::Var K = (*k_net_)(feat);
    ad::Var V = (*v_net_)(feat);
    const size_t dv = cfg_.between_dim / cfg_.num_heads;
    std::vector<ad::Var> heads;
    for (size_t h = 0; h < cfg_.num_heads; ++h) {
      ad::Var Kh = ad::slice_cols(K, h * cfg_.key_dim, (h + 1) * cfg_.key_dim);
      ad::Var Vh = ad::slice_cols(V, h * dv, (h + 1) * dv);
      ad::Var s = ad::scale(ad::matmul(Kh, queries_[h]), 1.0 / std::sqrt(double(cfg_.key_dim)));
      ad::Var e = ad::scale_rows(ad::exp_v(ad::add_rows_const(s, score_shift(s.value(), lay))),
                                 lay.point_mask);
      ad::Var Drep = ad::block_repeat(ad::block_rowsum(e, lay.n), lay.n);
      ad::Var eV = ad::mul_colvec(Vh, e);
      ad::Var Trep = ad::block_repeat(ad::block_rowsum(eV, lay.n), lay.n);
      ad::Var numer = ad::sub(Trep, eV);
      ad::Var denom = ad::add_rows_const(ad::sub(Drep, e), lay.lone_set);
      heads.push_back(ad::div_colvec(numer, denom));
    }
    ad::Var out = cfg_.num_heads == 1 ? heads[0] : ad::concat_cols(heads);
    return ad::scale_rows(out, lay.point_mask);
  }

  DVar attention_rows_dual(const DVar& X, double t, const SetLayout& lay) const {
    const size_t R = lay.B * lay.n;
    ad::Var feat = point_features(X.v, t, lay);
    ad::Var feat_t = ad::concat_cols({masked_points(X.t, lay), dyn_detail::const_col(R, 0.0)});
    DVar K = k_net_->dual({feat, feat_t});
    DVar V = v_net_->dual({feat, feat_t});
    const size_t dv = cfg_.between_dim / cfg_.num_heads;
    std::vector<ad::Var> heads_v, heads_t;
    for (size_t h = 0; h < cfg_.num_heads; ++h) {
      ad::Var Kh = ad::slice_cols(K.v, h * cfg_.key_dim, (h + 1) * cfg_.key_dim);
      ad::Var Kh_t = ad::slice_cols(K.t, h * cfg_.key_dim, (h + 1) * cfg_.key_dim);
      ad::Var Vh = ad::slice_cols(V.v, h * dv, (h + 1) * dv);
      ad::Var Vh_t = ad::slice_cols(V.t, h * dv, (h + 1) * dv);
      const double inv_sqrt = 1.0 / std::sqrt(double(cfg_.key_dim));
      ad::Var s = ad::scale(ad::matmul(Kh, queries_[h]), inv_sqrt);
      ad::Var s_t = ad::scale(ad::matmul(Kh_t, queries_[h]), inv_sqrt);
      ad::Var e = ad::scale_rows(ad::exp_v(ad::add_rows_const(s, score_shift(s.value(), lay))),
                                 lay.point_mask);
      ad::Var e_t = ad::mul(e, s_t);
      ad::Var Drep = ad::block_repeat(ad::block_rowsum(e, lay.n), lay.n);
      ad::Var Drep_t = ad::block_repeat(ad::block_rowsum(e_t, lay.n), lay.n);
      ad::Var eV = ad::mul_colvec(Vh, e);
      ad::Var eV_t = ad::add(ad::mul_colvec(Vh_t, e), ad::mul_colvec(Vh, e_t));
      ad::Var Trep = ad::block_repeat(ad::block_rowsum(eV, lay.n), lay.n);
      ad::Var Trep_t = ad::block_repeat(ad::block_rowsum(eV_t, lay.n), lay.n);
      ad::Var numer = ad::sub(Trep, eV);
      ad::Var numer_t = ad::sub(Trep_t, eV_t);
      ad::Var denom = ad::add_rows_const(ad::sub(Drep, e), lay.lone_set);
      ad::Var denom_t = ad::sub(Drep_t, e_t);
      ad::Var out = ad::div_colvec(numer, denom);
      ad::Var out_t = ad::div_colvec(ad::sub(numer_t, ad::mul_colvec(out, denom_t)), denom);
      heads_v.push_back(out);
      heads_t.push_back(out_t);
    }
    ad::Var ov = cfg_.num_heads == 1 ? heads_v[0] : ad::concat_cols(heads_v);
    ad::Var ot = cfg_.num_heads == 1 ? heads_t[0] : ad::concat_cols(heads_t);
    return {ad::scale_rows(ov, lay.point_mask), ad::scale_rows(ot, lay.point_mask)};
  }

  // Per-set max of raw scores over valid rows, negated: a constant softmax
  // shift for numerical range only (mathematically cancels).
  static std::shared_ptr<const std::vector<double>> score_shift(const Tensor& s, const SetLayout& lay) {
    auto shift = std::make_shared<std::vector<double>>(lay.B * lay.n, 0.0);
    for (size_t b = 0; b < lay.B; ++b) {
      double m = 0.0;
      for (size_t i = 0; i < lay.lengths[b]; ++i) m = std::max(m, s.values[b * lay.n + i]);
      for (size_t i = 0; i < lay.n; ++i) (*shift)[b * lay.n + i] = -m;
    }
    return shift;
  }

  // tau input rows, one per (point, dimension) slot: [x_ij | g_i(j) | h_i | t].
  ad::Var assemble_features(const ad::Var& X, const ad::Var& G, const ad::Var& between, double t,
                            const SetLayout& lay) const {
    const size_t R = lay.B * lay.n;
    std::vector<ad::Var> cols;
    cols.push_back(ad::reshape(masked_points(X, lay), {R * lay.d, 1}));
    if (cfg_.latent_dim > 0) cols.push_back(ad::reshape(G, {R * lay.d, cfg_.latent_dim}));
    cols.push_back(ad::repeat_rows(between, lay.d));
    cols.push_back(dyn_detail::const_col(R * lay.d, t));
    return ad::concat_cols(cols);
  }

  ad::Var assemble_velocity(const ad::Var& X, const ad::Var& G, const ad::Var& between, double t,
                            const SetLayout& lay) const {
    ad::Var u = tau_(assemble_features(X, G, between, t, lay));
    return ad::scale_rows(ad::reshape(u, {lay.B * lay.n, lay.d}), lay.point_mask);
  }

  // Dual features with tangent 1 on the x slot and 0 elsewhere (conditioners
  // frozen): the tangent output is exactly d tau / d x_ij.
  DVar features_dual_slot_seed(const ad::Var& X, const ad::Var& G, const ad::Var& between, double t,
                               const SetLayout& lay) const {
    const size_t S = lay.B * lay.n * lay.d;
    ad::Var F = assemble_features(X, G, between, t, lay);
    std::vector<ad::Var> tcols;
    tcols.push_back(dyn_detail::const_col(S, 1.0));
    if (cfg_.latent_dim > 0) tcols.push_back(ad::constant(Tensor::zeros({S, cfg_.latent_dim})));
    tcols.push_back(ad::constant(Tensor::zeros({S, cfg_.between_dim})));
    tcols.push_back(dyn_detail::const_col(S, 0.0));
    return {F, ad::concat_cols(tcols)};
  }

  // General dual features: per-slot x tangent from `x_tan` [B*n, d], within
  // tangent from G_d when the conditioner exists, between tangent from
  // `between_d` (frozen to zero when null).
  DVar features_dual_general(const ad::Var& X, const ad::Var& x_tan, const ad::Var& G, const DVar& G_d,
                             const ad::Var& between, const DVar* between_d, double t,
                             const SetLayout& lay) const {
    const size_t R = lay.B * lay.n, S = R * lay.d;
    ad::Var F = assemble_features(X, G, between, t, lay);
    std::vector<ad::Var> tcols;
    tcols.push_back(ad::reshape(x_tan, {S, 1}));
    if (cfg_.latent_dim > 0) tcols.push_back(ad::reshape(G_d.t, {S, cfg_.latent_dim}));
    if (between_d != nullptr)
      tcols.push_back(ad::repeat_rows(between_d->t, lay.d));
    else
      tcols.push_back(ad::constant(Tensor::zeros({S, cfg_.between_dim})));
    tcols.push_back(dyn_detail::const_col(S, 0.0));
    return {F, ad::concat_cols(tcols)};
  }

  // Trace of the dense Jacobian, set by set, via basis-cotangent reverse
  // passes. Builds input-side graphs even in evaluation contexts, so stray
  // parameter gradients are cleared afterwards.
  Tensor exact_dense_divergence(const Tensor& Xrows, double t, const SetLayout& lay) const {
    Tensor out = Tensor::zeros({lay.B, 1});
    bool saved = ad::grad_mode();
    ad::grad_mode() = true;
    for (size_t b = 0; b < lay.B; ++b) {
      const size_t n = lay.lengths[b];
      if (n == 0) continue;
      Batch one;
      one.batch = 1;
      one.n_max = n;
      one.dim = lay.d;
      one.lengths = {n};
      one.points = Tensor::zeros({1, n, lay.d});
      for (size_t i = 0; i < n * lay.d; ++i)
        one.points.values[i] = Xrows.values[b * lay.n * lay.d + i];
      one.mask = Tensor::filled({1, n}, 1.0);
      SetLayout lone = make_layout(one);
      auto f = [&](const ad::Var& x) {
        return ad::reshape(velocity_rows(ad::reshape(x, {n, lay.d}), t, lone), {n * lay.d});
      };
      Tensor x0 = one.points.reshaped({n * lay.d});
      Tensor jac = ad::full_jacobian(f, x0);
      double tr = 0;
      for (size_t k = 0; k < n * lay.d; ++k) tr += jac.at(k, k);
      out.values[b] = tr;
    }
    ad::grad_mode() = saved;
    for (const ad::Var& p : own_params_) const_cast<ad::Var&>(p).zero_grad();
    return out;
  }
};

}  // namespace setflow
