#pragma once

#include <string>
#include <utility>
#include <vector>

#include "setflow/autodiff.hpp"
#include "setflow/nets.hpp"
#include "setflow/rng.hpp"

namespace setflow {

// Affine coupling layer: the first k dimensions pass through unchanged and
// parameterize scale/shift for the rest,
//   x_{k+1:d} = z_{k+1:d} * exp(s(z_{1:k})) + t(z_{1:k}).
// Bijective for any parameters; log|det| = sum(s). Final layers of s and t
// are zero-initialized so a fresh stack is the identity.
struct CouplingLayer {
  size_t dim = 0, split = 0;
  Mlp s_net, t_net;

  // rows [R, d] -> (transformed rows, per-row logdet [R,1])
  std::pair<ad::Var, ad::Var> forward_rows(const ad::Var& z) const {
    ad::Var z1 = ad::slice_cols(z, 0, split);
    ad::Var z2 = ad::slice_cols(z, split, dim);
    ad::Var s = s_net(z1);
    ad::Var t = t_net(z1);
    ad::Var x2 = ad::add(ad::mul(z2, ad::exp_v(s)), t);
    return {ad::concat_cols({z1, x2}), ad::rowsum(s)};
  }

  std::pair<ad::Var, ad::Var> inverse_rows(const ad::Var& x) const {
    ad::Var x1 = ad::slice_cols(x, 0, split);
    ad::Var x2 = ad::slice_cols(x, split, dim);
    ad::Var s = s_net(x1);
    ad::Var t = t_net(x1);
    ad::Var z2 = ad::mul(ad::sub(x2, t), ad::exp_v(ad::neg(s)));
    return {ad::concat_cols({x1, z2}), ad::neg(ad::rowsum(s))};
  }
};

inline CouplingLayer make_coupling_layer(ParameterSet& ps, const std::string& prefix, size_t dim,
                                         size_t split, size_t hidden, Rng& rng) {
  require_config(dim >= 2, "coupling layer needs point dimension >= 2");
  require_config(split >= 1 && split < dim, "coupling layer: bad split index");
  CouplingLayer layer;
  layer.dim = dim;
  layer.split = split;
  layer.s_net = make_mlp(ps, prefix + ".s", {split, hidden, dim - split}, rng, /*zero_final=*/true);
  layer.t_net = make_mlp(ps, prefix + ".t", {split, hidden, dim - split}, rng, /*zero_final=*/true);
  return layer;
}

// Alternating split index across the stack.
inline std::vector<CouplingLayer> make_coupling_stack(ParameterSet& ps, const std::string& prefix,
                                                      size_t dim, size_t layers, size_t hidden,
                                                      Rng& rng) {
  std::vector<CouplingLayer> stack;
  for (size_t i = 0; i < layers; ++i) {
    size_t split = 1 + i % (dim - 1);
    stack.push_back(make_coupling_layer(ps, prefix + ".c" + std::to_string(i), dim, split, hidden, rng));
  }
  return stack;
}

// Single-point convenience wrappers.
inline std::pair<std::vector<double>, double> coupling_forward(const CouplingLayer& layer,
                                                               std::span<const double> z) {
  require(z.size() == layer.dim, "coupling_forward: dimension mismatch");
  ad::NoGradGuard ng;
  auto [x, ld] = layer.forward_rows(ad::constant(Tensor({1, layer.dim}, {z.begin(), z.end()})));
  return {x.value().values, ld.value().values[0]};
}

inline std::pair<std::vector<double>, double> coupling_inverse(const CouplingLayer& layer,
                                                               std::span<const double> x) {
  require(x.size() == layer.dim, "coupling_inverse: dimension mismatch");
  ad::NoGradGuard ng;
  auto [z, ld] = layer.inverse_rows(ad::constant(Tensor({1, layer.dim}, {x.begin(), x.end()})));
  return {z.value().values, ld.value().values[0]};
}

}  // namespace setflow
