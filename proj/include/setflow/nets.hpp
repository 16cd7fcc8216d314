#pragma once

#include <memory>
#include <string>
#include <vector>

#include "setflow/autodiff.hpp"
#include "setflow/rng.hpp"

namespace setflow {

using ad::ParameterSet;
using ad::Var;

// Value/tangent pair living on the reverse-mode tape. Propagating tangents
// through ops of Vars keeps the directional derivative differentiable w.r.t.
// parameters, which is what lets exact and stochastic trace terms take part
// in training.
struct DVar {
  Var v;
  Var t;
};

inline DVar dual_tanh(const DVar& x) {
  Var y = ad::tanh_v(x.v);
  Var dy = ad::affine(ad::mul(y, y), -1.0, 1.0);  // 1 - y^2
  return {y, ad::mul(x.t, dy)};
}

inline Tensor init_uniform(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  double bound = 1.0 / std::sqrt(static_cast<double>(std::max<size_t>(fan_in, 1)));
  for (double& v : t.values) v = rng.uniform(-bound, bound);
  return t;
}

struct Linear {
  Var w;  // [in, out]
  Var b;  // [out]

  Var operator()(const Var& x) const { return ad::add_rowvec(ad::matmul(x, w), b); }
  DVar dual(const DVar& x) const { return {(*this)(x.v), ad::matmul(x.t, w)}; }
};

inline Linear make_linear(ParameterSet& ps, const std::string& prefix, size_t in, size_t out,
                          Rng& rng, bool zero_init = false) {
  Tensor w = zero_init ? Tensor::zeros({in, out}) : init_uniform({in, out}, in, rng);
  Tensor b = Tensor::zeros({out});
  return Linear{ps.add(prefix + ".w", std::move(w)), ps.add(prefix + ".b", std::move(b))};
}

// Feed-forward stack with tanh on all but the last layer. The final layer may
// be zero-initialized so the containing transformation starts as the identity.
struct Mlp {
  std::vector<Linear> layers;

  Var operator()(Var x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = ad::tanh_v(x);
    }
    return x;
  }

  DVar dual(DVar x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].dual(x);
      if (i + 1 < layers.size()) x = dual_tanh(x);
    }
    return x;
  }

  size_t out_dim() const { return layers.back().w.value().cols(); }
};

inline Mlp make_mlp(ParameterSet& ps, const std::string& prefix, const std::vector<size_t>& dims,
                    Rng& rng, bool zero_final = false) {
  require(dims.size() >= 2, "make_mlp: need at least input and output dims");
  Mlp net;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    bool last = (i + 2 == dims.size());
    net.layers.push_back(make_linear(ps, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1],
                                     rng, last && zero_final));
  }
  return net;
}

struct MaskedLinear {
  Var w;
  Var b;
  std::shared_ptr<const Tensor> mask;  // same shape as w, entries in {0,1}

  Var operator()(const Var& x) const { return ad::add_rowvec(ad::matmul_masked(x, w, mask), b); }
  DVar dual(const DVar& x) const { return {(*this)(x.v), ad::matmul_masked(x.t, w, mask)}; }
};

// Per-point conditioner with the connectivity constraint that output group j
// carries no computation path from input dimension j. Hidden units are
// partitioned into d streams by an exclusion label; stream e never reads
// input e and only feeds output group e. For d == 1 every first-layer weight
// is masked away and the output degenerates to learned constants.
struct MaskedConditioner {
  size_t d = 0, group = 0;
  MaskedLinear l1;
  MaskedLinear l2;

  Var operator()(const Var& x) const { return l2(ad::tanh_v(l1(x))); }

  DVar dual(const DVar& x) const {
    DVar h = l1.dual(x);
    h = dual_tanh(h);
    return l2.dual(h);
  }
};

inline MaskedConditioner make_masked_conditioner(ParameterSet& ps, const std::string& prefix,
                                                 size_t d, size_t hidden, size_t group, Rng& rng) {
  require(d >= 1 && group >= 1, "masked conditioner: bad dims");
  size_t H = std::max(hidden, d);  // at least one hidden unit per stream
  auto m1 = std::make_shared<Tensor>(Tensor::zeros({d, H}));
  auto m2 = std::make_shared<Tensor>(Tensor::zeros({H, d * group}));
  for (size_t u = 0; u < H; ++u) {
    size_t label = u % d;
    for (size_t i = 0; i < d; ++i)
      if (i != label) m1->values[i * H + u] = 1.0;
    for (size_t o = 0; o < d * group; ++o)
      if (o / group == label) m2->values[u * d * group + o] = 1.0;
  }
  MaskedConditioner net;
  net.d = d;
  net.group = group;
  net.l1 = MaskedLinear{ps.add(prefix + ".l0.w", init_uniform({d, H}, d, rng)),
                        ps.add(prefix + ".l0.b", init_uniform({H}, d, rng)), m1};
  net.l2 = MaskedLinear{ps.add(prefix + ".l1.w", init_uniform({H, d * group}, H, rng)),
                        ps.add(prefix + ".l1.b", Tensor::zeros({d * group})), m2};
  return net;
}

}  // namespace setflow
