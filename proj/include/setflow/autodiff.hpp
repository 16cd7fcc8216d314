#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "setflow/common.hpp"
#include "setflow/tensor.hpp"

namespace setflow::ad {

// ---------------------------------------------------------------------------
// Tape machinery: define-by-run reverse mode over Tensor operations.
// ---------------------------------------------------------------------------

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

// Disables graph construction in a scope; evaluation-only code paths run the
// same ops without retaining anything.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
};

// When set, every op scans its output for non-finite values and reports the
// producing op. Enabled on-demand to diagnose a non-finite loss.
inline bool& finite_check_mode() {
  thread_local bool on = false;
  return on;
}

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!has_grad) {
      grad = Tensor::zeros(value.shape);
      has_grad = true;
    }
  }

  void add_grad(const Tensor& g) {
    ensure_grad();
    require(g.size() == grad.size(), "grad accumulation size mismatch");
    for (size_t i = 0; i < g.size(); ++i) grad.values[i] += g.values[i];
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor v, bool requires_grad = false) : n_(std::make_shared<Node>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad && grad_mode();
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor& value() const { return n_->value; }
  Tensor& mutable_value() { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

  const Tensor& grad() const {
    require(n_ && n_->has_grad, "grad accessed before backward");
    return n_->grad;
  }
  Tensor grad_or_zero() const {
    return (n_ && n_->has_grad) ? n_->grad : Tensor::zeros(n_->value.shape);
  }
  void zero_grad() {
    if (n_) {
      n_->has_grad = false;
      n_->grad = Tensor();
    }
  }

  double scalar() const {
    require(n_ && n_->value.size() == 1, "scalar() on non-scalar");
    return n_->value.values[0];
  }

 private:
  std::shared_ptr<Node> n_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }

namespace detail {

inline void check_finite_or_throw(const Tensor& t, const char* op) {
  if (!t.all_finite())
    throw EvalError(std::string("non-finite value produced by op '") + op + "'");
}

template <typename BW>
Var make_result(Tensor out, const char* op, std::initializer_list<Var> parents, BW&& bw) {
  if (finite_check_mode()) check_finite_or_throw(out, op);
  bool need = false;
  if (grad_mode())
    for (const Var& p : parents)
      if (p.requires_grad()) need = true;
  Var r(std::move(out), false);
  if (need) {
    Node* n = r.node();
    n->requires_grad = true;
    n->op = op;
    for (const Var& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::forward<BW>(bw);
  }
  return r;
}

}  // namespace detail

// Runs reverse accumulation from `root`, seeding its gradient with `seed`.
// Multiple backward calls accumulate into leaf gradients.
inline void backward(const Var& root, const Tensor& seed) {
  require(root.defined(), "backward: undefined root");
  require(seed.size() == root.value().size(), "backward: seed shape mismatch");
  if (!root.requires_grad()) return;  // nothing differentiable below

  // Iterative post-order over grad-requiring nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->add_grad(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad) n->backward_fn(*n);
  }
}

inline void backward_scalar(const Var& root) { backward(root, Tensor::filled(root.value().shape, 1.0)); }

// Seeds several roots of one shared graph in a single reverse traversal.
// Needed whenever two outputs share ancestry: seeding them with separate
// backward() calls would re-propagate already-accumulated gradients.
inline void backward_multi(std::initializer_list<std::pair<Var, Tensor>> seeds);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  require(a.value().size() == b.value().size(), "add: size mismatch");
  Tensor out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out.values[i] += b.value().values[i];
  return detail::make_result(std::move(out), "add", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    if (pa->requires_grad) pa->add_grad(self.grad);
    if (pb->requires_grad) pb->add_grad(self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require(a.value().size() == b.value().size(), "sub: size mismatch");
  Tensor out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out.values[i] -= b.value().values[i];
  return detail::make_result(std::move(out), "sub", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    if (pa->requires_grad) pa->add_grad(self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad.values[i] -= self.grad.values[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  require(a.value().size() == b.value().size(), "mul: size mismatch");
  Tensor out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out.values[i] *= b.value().values[i];
  return detail::make_result(std::move(out), "mul", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad.values[i] += self.grad.values[i] * pb->value.values[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad.values[i] += self.grad.values[i] * pa->value.values[i];
    }
  });
}

// k*a + c, elementwise.
inline Var affine(const Var& a, double k, double c) {
  Tensor out = a.value();
  for (double& v : out.values) v = k * v + c;
  return detail::make_result(std::move(out), "affine", {a}, [pa = a.ptr(), k](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad.values[i] += k * self.grad.values[i];
  });
}

inline Var scale(const Var& a, double k) { return affine(a, k, 0.0); }
inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

inline Var matmul(const Var& a, const Var& b) {
  require(a.value().cols() == b.value().rows(), "matmul: inner dimension mismatch");
  Tensor out = Tensor::zeros({a.value().rows(), b.value().cols()});
  la::gemm(a.value(), b.value(), out, false);
  return detail::make_result(std::move(out), "matmul", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      la::gemm_nt(self.grad, pb->value, pa->grad, true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      la::gemm_tn(pa->value, self.grad, pb->grad, true);
    }
  });
}

// x * (w .* mask); the mask is a fixed binary pattern on the weights.
inline Var matmul_masked(const Var& x, const Var& w, const std::shared_ptr<const Tensor>& mask) {
  require(w.value().same_shape(*mask), "matmul_masked: mask shape mismatch");
  Tensor wm = w.value();
  for (size_t i = 0; i < wm.size(); ++i) wm.values[i] *= mask->values[i];
  Tensor out = Tensor::zeros({x.value().rows(), w.value().cols()});
  la::gemm(x.value(), wm, out, false);
  return detail::make_result(std::move(out), "matmul_masked", {x, w},
                             [px = x.ptr(), pw = w.ptr(), wm = std::move(wm), mask](Node& self) {
                               if (px->requires_grad) {
                                 px->ensure_grad();
                                 la::gemm_nt(self.grad, wm, px->grad, true);
                               }
                               if (pw->requires_grad) {
                                 pw->ensure_grad();
                                 Tensor gw = Tensor::zeros(pw->value.shape);
                                 la::gemm_tn(px->value, self.grad, gw, false);
                                 for (size_t i = 0; i < gw.size(); ++i)
                                   pw->grad.values[i] += gw.values[i] * mask->values[i];
                               }
                             });
}

// Adds a row vector b [1,C] to every row of a [R,C].
inline Var add_rowvec(const Var& a, const Var& b) {
  require(a.value().cols() == b.value().size(), "add_rowvec: width mismatch");
  Tensor out = a.value();
  const size_t C = out.cols(), R = out.rows();
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) out.values[r * C + c] += b.value().values[c];
  return detail::make_result(std::move(out), "add_rowvec", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    const size_t C = self.value.cols(), R = self.value.rows();
    if (pa->requires_grad) pa->add_grad(self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t r = 0; r < R; ++r)
        for (size_t c = 0; c < C; ++c) pb->grad.values[c] += self.grad.values[r * C + c];
    }
  });
}

inline Var tanh_v(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values) v = std::tanh(v);
  return detail::make_result(std::move(out), "tanh", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.value.values[i];
      pa->grad.values[i] += self.grad.values[i] * (1.0 - y * y);
    }
  });
}

inline Var exp_v(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values) v = std::exp(v);
  return detail::make_result(std::move(out), "exp", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad.values[i] += self.grad.values[i] * self.value.values[i];
  });
}

inline Var log_v(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values) v = std::log(v);
  return detail::make_result(std::move(out), "log", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad.values[i] += self.grad.values[i] / pa->value.values[i];
  });
}

inline Var sigmoid_v(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values) v = sigmoid(v);
  return detail::make_result(std::move(out), "sigmoid", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.value.values[i];
      pa->grad.values[i] += self.grad.values[i] * y * (1.0 - y);
    }
  });
}

inline Var softplus_v(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values) v = softplus(v);
  return detail::make_result(std::move(out), "softplus", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad.values[i] += self.grad.values[i] * sigmoid(pa->value.values[i]);
  });
}

inline Var sum_all(const Var& a) {
  double s = 0;
  for (double v : a.value().values) s += v;
  return detail::make_result(Tensor::scalar(s), "sum_all", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    double g = self.grad.values[0];
    for (double& v : pa->grad.values) v += g;
  });
}

// Per-row sum: [R,C] -> [R,1].
inline Var rowsum(const Var& a) {
  const size_t R = a.value().rows(), C = a.value().cols();
  Tensor out = Tensor::zeros({R, 1});
  for (size_t r = 0; r < R; ++r) {
    double s = 0;
    for (size_t c = 0; c < C; ++c) s += a.value().values[r * C + c];
    out.values[r] = s;
  }
  return detail::make_result(std::move(out), "rowsum", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const size_t C = pa->value.cols(), R = pa->value.rows();
    for (size_t r = 0; r < R; ++r)
      for (size_t c = 0; c < C; ++c) pa->grad.values[r * C + c] += self.grad.values[r];
  });
}

// Sums each consecutive block of `block` rows: [B*block, C] -> [B, C].
// Rows are accumulated in ascending index order; callers that need a
// permutation-independent result must present rows in canonical order.
inline Var block_rowsum(const Var& a, size_t block) {
  const size_t R = a.value().rows(), C = a.value().cols();
  require(block > 0 && R % block == 0, "block_rowsum: rows not divisible by block");
  const size_t B = R / block;
  Tensor out = Tensor::zeros({B, C});
  for (size_t b = 0; b < B; ++b)
    for (size_t r = 0; r < block; ++r)
      for (size_t c = 0; c < C; ++c) out.values[b * C + c] += a.value().values[(b * block + r) * C + c];
  return detail::make_result(std::move(out), "block_rowsum", {a}, [pa = a.ptr(), block](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const size_t C = self.value.cols(), B = self.value.rows();
    for (size_t b = 0; b < B; ++b)
      for (size_t r = 0; r < block; ++r)
        for (size_t c = 0; c < C; ++c)
          pa->grad.values[(b * block + r) * C + c] += self.grad.values[b * C + c];
  });
}

// Repeats each row of [B, C] `block` times: -> [B*block, C].
inline Var block_repeat(const Var& a, size_t block) {
  const size_t B = a.value().rows(), C = a.value().cols();
  Tensor out = Tensor::zeros({B * block, C});
  for (size_t b = 0; b < B; ++b)
    for (size_t r = 0; r < block; ++r)
      for (size_t c = 0; c < C; ++c) out.values[(b * block + r) * C + c] = a.value().values[b * C + c];
  return detail::make_result(std::move(out), "block_repeat", {a}, [pa = a.ptr(), block](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const size_t C = pa->value.cols(), B = pa->value.rows();
    for (size_t b = 0; b < B; ++b)
      for (size_t r = 0; r < block; ++r)
        for (size_t c = 0; c < C; ++c)
          pa->grad.values[b * C + c] += self.grad.values[(b * block + r) * C + c];
  });
}

// Repeats each row k times consecutively: [R, C] -> [R*k, C].
inline Var repeat_rows(const Var& a, size_t k) {
  const size_t R = a.value().rows(), C = a.value().cols();
  Tensor out = Tensor::zeros({R * k, C});
  for (size_t r = 0; r < R; ++r)
    for (size_t i = 0; i < k; ++i)
      for (size_t c = 0; c < C; ++c) out.values[(r * k + i) * C + c] = a.value().values[r * C + c];
  return detail::make_result(std::move(out), "repeat_rows", {a}, [pa = a.ptr(), k](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const size_t R = pa->value.rows(), C = pa->value.cols();
    for (size_t r = 0; r < R; ++r)
      for (size_t i = 0; i < k; ++i)
        for (size_t c = 0; c < C; ++c)
          pa->grad.values[r * C + c] += self.grad.values[(r * k + i) * C + c];
  });
}

// Multiplies row r by the fixed weight w[r] (masks, 1/(n-1) factors, ...).
inline Var scale_rows(const Var& a, const std::shared_ptr<const std::vector<double>>& w) {
  const size_t R = a.value().rows(), C = a.value().cols();
  require(w->size() == R, "scale_rows: weight length mismatch");
  Tensor out = a.value();
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) out.values[r * C + c] *= (*w)[r];
  return detail::make_result(std::move(out), "scale_rows", {a}, [pa = a.ptr(), w](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const size_t R = pa->value.rows(), C = pa->value.cols();
    for (size_t r = 0; r < R; ++r)
      for (size_t c = 0; c < C; ++c) pa->grad.values[r * C + c] += self.grad.values[r * C + c] * (*w)[r];
  });
}

// Adds the fixed value v[r] to every entry of row r.
inline Var add_rows_const(const Var& a, const std::shared_ptr<const std::vector<double>>& v) {
  const size_t R = a.value().rows(), C = a.value().cols();
  require(v->size() == R, "add_rows_const: length mismatch");
  Tensor out = a.value();
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) out.values[r * C + c] += (*v)[r];
  return detail::make_result(std::move(out), "add_rows_const", {a},
                             [pa = a.ptr()](Node& self) {
                               if (pa->requires_grad) pa->add_grad(self.grad);
                             });
}

// Elementwise a[r,c] * b[r] with b a column [R,1].
inline Var mul_colvec(const Var& a, const Var& b) {
  const size_t R = a.value().rows(), C = a.value().cols();
  require(b.value().size() == R, "mul_colvec: column length mismatch");
  Tensor out = a.value();
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) out.values[r * C + c] *= b.value().values[r];
  return detail::make_result(std::move(out), "mul_colvec", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    const size_t R = pa->value.rows(), C = pa->value.cols();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t r = 0; r < R; ++r)
        for (size_t c = 0; c < C; ++c)
          pa->grad.values[r * C + c] += self.grad.values[r * C + c] * pb->value.values[r];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t r = 0; r < R; ++r) {
        double s = 0;
        for (size_t c = 0; c < C; ++c)
          s += self.grad.values[r * C + c] * pa->value.values[r * C + c];
        pb->grad.values[r] += s;
      }
    }
  });
}

// Elementwise a[r,c] / b[r] with b a column [R,1].
inline Var div_colvec(const Var& a, const Var& b) {
  const size_t R = a.value().rows(), C = a.value().cols();
  require(b.value().size() == R, "div_colvec: column length mismatch");
  Tensor out = a.value();
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) out.values[r * C + c] /= b.value().values[r];
  return detail::make_result(std::move(out), "div_colvec", {a, b}, [pa = a.ptr(), pb = b.ptr()](Node& self) {
    const size_t R = pa->value.rows(), C = pa->value.cols();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t r = 0; r < R; ++r)
        for (size_t c = 0; c < C; ++c)
          pa->grad.values[r * C + c] += self.grad.values[r * C + c] / pb->value.values[r];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t r = 0; r < R; ++r) {
        double s = 0;
        for (size_t c = 0; c < C; ++c)
          s += self.grad.values[r * C + c] * self.value.values[r * C + c];
        pb->grad.values[r] -= s / pb->value.values[r];
      }
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty");
  const size_t R = parts[0].value().rows();
  size_t C = 0;
  for (const Var& p : parts) {
    require(p.value().rows() == R, "concat_cols: row mismatch");
    C += p.value().cols();
  }
  Tensor out = Tensor::zeros({R, C});
  size_t off = 0;
  for (const Var& p : parts) {
    const size_t pc = p.value().cols();
    for (size_t r = 0; r < R; ++r)
      for (size_t c = 0; c < pc; ++c) out.values[r * C + off + c] = p.value().values[r * pc + c];
    off += pc;
  }
  std::vector<std::shared_ptr<Node>> ps;
  for (const Var& p : parts) ps.push_back(p.ptr());
  Var r(std::move(out), false);
  bool need = false;
  if (grad_mode())
    for (const Var& p : parts)
      if (p.requires_grad()) need = true;
  if (finite_check_mode()) detail::check_finite_or_throw(r.value(), "concat_cols");
  if (need) {
    Node* n = r.node();
    n->requires_grad = true;
    n->op = "concat_cols";
    n->parents = ps;
    n->backward_fn = [ps](Node& self) {
      const size_t R = self.value.rows(), C = self.value.cols();
      size_t off = 0;
      for (auto& p : ps) {
        const size_t pc = p->value.cols();
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t r = 0; r < R; ++r)
            for (size_t c = 0; c < pc; ++c)
              p->grad.values[r * pc + c] += self.grad.values[r * C + off + c];
        }
        off += pc;
      }
    };
  }
  return r;
}

inline Var slice_cols(const Var& a, size_t c0, size_t c1) {
  const size_t R = a.value().rows(), C = a.value().cols();
  require(c0 < c1 && c1 <= C, "slice_cols: bad range");
  const size_t W = c1 - c0;
  Tensor out = Tensor::zeros({R, W});
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < W; ++c) out.values[r * W + c] = a.value().values[r * C + c0 + c];
  return detail::make_result(std::move(out), "slice_cols", {a}, [pa = a.ptr(), c0, W](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const size_t R = pa->value.rows(), C = pa->value.cols();
    for (size_t r = 0; r < R; ++r)
      for (size_t c = 0; c < W; ++c) pa->grad.values[r * C + c0 + c] += self.grad.values[r * W + c];
  });
}

inline Var reshape(const Var& a, std::vector<size_t> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), "reshape", {a}, [pa = a.ptr()](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad.values[i] += self.grad.values[i];
  });
}

// Detaches from the graph; value is shared, gradient stops here.
inline Var stop_gradient(const Var& a) { return Var(a.value(), false); }

inline void backward_multi(std::initializer_list<std::pair<Var, Tensor>> seeds) {
  Var root;
  for (const auto& [v, s] : seeds) {
    Var term = sum_all(mul(v, constant(s)));
    root = root.defined() ? add(root, term) : term;
  }
  if (root.defined() && root.requires_grad()) backward_scalar(root);
}

// ---------------------------------------------------------------------------
// ParameterSet: named tensors with deterministic (insertion) iteration order.
// ---------------------------------------------------------------------------

class ParameterSet {
 public:
  Var& add(const std::string& name, Tensor init) {
    require(!index_.count(name), "ParameterSet: duplicate name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, Var(std::move(init), true));
    return items_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Var& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParameterSet: missing '" + name + "'");
    return items_[it->second].second;
  }
  const Var& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ParameterSet: missing '" + name + "'");
    return items_[it->second].second;
  }

  size_t size() const { return items_.size(); }
  size_t total_scalars() const {
    size_t n = 0;
    for (const auto& [k, v] : items_) n += v.value().size();
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& [k, v] : items_) v.zero_grad();
  }

  std::vector<Tensor> value_snapshot() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [k, v] : items_) out.push_back(v.value());
    return out;
  }

  void load_values(const std::vector<Tensor>& vals) {
    require(vals.size() == items_.size(), "load_values: count mismatch");
    for (size_t i = 0; i < vals.size(); ++i) {
      require(vals[i].size() == items_[i].second.value().size(), "load_values: size mismatch");
      items_[i].second.mutable_value().values = vals[i].values;
    }
  }

  std::vector<Tensor> grad_snapshot() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [k, v] : items_) out.push_back(v.grad_or_zero());
    return out;
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Derivative entry points
// ---------------------------------------------------------------------------

// d(loss)/d(theta) for every tensor in `params`. The returned set mirrors
// names, shapes and order. A non-finite loss is re-evaluated with per-op
// checking to name the offending operation.
inline ParameterSet gradient(const std::function<Var(ParameterSet&)>& loss, ParameterSet& params) {
  params.zero_grad();
  Var l = loss(params);
  require(l.value().size() == 1, "gradient: loss must be scalar");
  if (!std::isfinite(l.scalar())) {
    finite_check_mode() = true;
    try {
      loss(params);
      finite_check_mode() = false;
      throw EvalError("non-finite loss (source op not identified)");
    } catch (...) {
      finite_check_mode() = false;
      throw;
    }
  }
  backward_scalar(l);
  ParameterSet grads;
  for (auto& [name, v] : params) grads.add(name, v.grad_or_zero());
  return grads;
}

// cotangent^T * J_f(x): one reverse pass through f.
inline Tensor vjp(const std::function<Var(const Var&)>& f, const Tensor& x, const Tensor& cotangent) {
  Var in(x, true);
  Var out = f(in);
  require(cotangent.size() == out.value().size(), "vjp: cotangent shape mismatch");
  if (!out.requires_grad()) return Tensor::zeros(x.shape);
  backward(out, cotangent);
  return in.grad_or_zero();
}

// Full Jacobian over flattened input/output; row k is a vjp with basis
// cotangent e_k. Quadratic cost, intended for verification and small systems.
inline Tensor full_jacobian(const std::function<Var(const Var&)>& f, const Tensor& x) {
  Var probe(x, false);
  size_t out_dim;
  {
    NoGradGuard ng;
    out_dim = f(probe).value().size();
  }
  Tensor jac = Tensor::zeros({out_dim, x.size()});
  for (size_t k = 0; k < out_dim; ++k) {
    Tensor e = Tensor::zeros({out_dim});
    e.values[k] = 1.0;
    Tensor row = vjp(f, x, e);
    for (size_t j = 0; j < x.size(); ++j) jac.values[k * x.size() + j] = row.values[j];
  }
  return jac;
}

// ---------------------------------------------------------------------------
// Scalar forward-mode duals: exact partials of scalar slots.
// ---------------------------------------------------------------------------

struct Dual {
  double v = 0.0;
  double d = 0.0;
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual operator+(Dual a, double b) { return {a.v + b, a.d}; }
inline Dual operator+(double a, Dual b) { return {a + b.v, b.d}; }
inline Dual operator-(Dual a, double b) { return {a.v - b, a.d}; }
inline Dual operator*(Dual a, double b) { return {a.v * b, a.d * b}; }
inline Dual operator*(double a, Dual b) { return {a * b.v, a * b.d}; }
inline Dual tanh(Dual a) {
  double y = std::tanh(a.v);
  return {y, a.d * (1.0 - y * y)};
}
inline Dual exp(Dual a) {
  double y = std::exp(a.v);
  return {y, a.d * y};
}
inline Dual log(Dual a) { return {std::log(a.v), a.d / a.v}; }

// Exact d(func)/dx at (x, side) with the side inputs held constant; the
// function is evaluated once in dual arithmetic.
inline double scalar_partial(const std::function<Dual(Dual, std::span<const Tensor>)>& func, double x,
                             std::span<const Tensor> side) {
  return func(Dual{x, 1.0}, side).d;
}

}  // namespace setflow::ad
