#include "lens/autodiff.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace lens {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Ptr = std::shared_ptr<Node<T>>;

template <typename T>
bool wants_grad(const Tape<T>& tape, std::initializer_list<const Var<T>*> inputs) {
  if (!tape.recording()) return false;
  for (const auto* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Var<T> make_result(Tensor<T> value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->is_leaf = !requires_grad;
  return Var<T>(std::move(node));
}

template <typename T>
void require_matrix(const Var<T>& x, const char* op) {
  if (x.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  // Intermediate gradients are per-sweep; leaf gradients accumulate.
  for (auto& e : entries_) {
    if (!e.out->grad.empty()) e.out->grad.fill(T(0));
  }
  auto& root = loss.node();
  if (root->is_leaf) {
    root->ensure_grad();
    root->grad[0] += T(1);
    return;
  }
  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->backward_rule();
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t n, std::size_t k,
          bool accumulate) {
  using M = RowMat<T>;
  const Eigen::Index mi = static_cast<Eigen::Index>(m);
  const Eigen::Index ni = static_cast<Eigen::Index>(n);
  const Eigen::Index ki = static_cast<Eigen::Index>(k);
  Eigen::Map<M> cm(c, mi, ni);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += Eigen::Map<const M>(a, mi, ki) * Eigen::Map<const M>(b, ki, ni);
  } else if (!trans_a && trans_b) {
    cm.noalias() += Eigen::Map<const M>(a, mi, ki) * Eigen::Map<const M>(b, ni, ki).transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += Eigen::Map<const M>(a, ki, mi).transpose() * Eigen::Map<const M>(b, ki, ni);
  } else {
    cm.noalias() += Eigen::Map<const M>(a, ki, mi).transpose() * Eigen::Map<const M>(b, ni, ki).transpose();
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  Tensor<T> out(Shape{a.dim(0), b.dim(1)});
  gemm(a.raw(), false, b.raw(), false, out.raw(), a.dim(0), b.dim(1), a.dim(1), false);
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  x.require_finite("softmax_rows input");
  Tensor<T> y(x.shape());
  const std::size_t n = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* in = x.raw() + i * c;
    T* out = y.raw() + i * c;
    const T mx = *std::max_element(in, in + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = std::exp(in[j] - mx);
      total += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= total;
  }
  return y;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  kernels::gemm(a.value().raw(), false, b.value().raw(), false, out.raw(), m, n, k, false);
  auto res = make_result(std::move(out), wants_grad(tape, {&a, &b}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), pb = b.node(), po = res.node();
    tape.record(po, [pa, pb, po, m, n, k] {
      const T* g = po->grad.raw();
      if (pa->requires_grad) {
        pa->ensure_grad();
        kernels::gemm(g, false, pb->value.raw(), true, pa->grad.raw(), m, k, n, true);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        kernels::gemm(pa->value.raw(), true, g, false, pb->grad.raw(), k, n, m, true);
      }
    });
  }
  return res;
}

template <typename T>
Var<T> matmul_bt(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_bt: inner dimensions differ, " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  kernels::gemm(a.value().raw(), false, b.value().raw(), true, out.raw(), m, n, k, false);
  auto res = make_result(std::move(out), wants_grad(tape, {&a, &b}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), pb = b.node(), po = res.node();
    tape.record(po, [pa, pb, po, m, n, k] {
      const T* g = po->grad.raw();
      if (pa->requires_grad) {
        pa->ensure_grad();
        kernels::gemm(g, false, pb->value.raw(), false, pa->grad.raw(), m, k, n, true);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        kernels::gemm(g, true, pa->value.raw(), false, pb->grad.raw(), n, k, m, true);
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const T* bv = b.value().raw();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  auto res = make_result(std::move(out), wants_grad(tape, {&a, &b}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), pb = b.node(), po = res.node();
    tape.record(po, [pa, pb, po] {
      const auto& g = po->grad;
      for (auto* p : {pa.get(), pb.get()}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const T* bv = b.value().raw();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  auto res = make_result(std::move(out), wants_grad(tape, {&a, &b}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), pb = b.node(), po = res.node();
    tape.record(po, [pa, pb, po] {
      const auto& g = po->grad;
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) pa->grad[i] += g[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) pb->grad[i] -= g[i];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const T* bv = b.value().raw();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  auto res = make_result(std::move(out), wants_grad(tape, {&a, &b}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), pb = b.node(), po = res.node();
    tape.record(po, [pa, pb, po] {
      const auto& g = po->grad;
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) pa->grad[i] += g[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) pb->grad[i] += g[i] * pa->value[i];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> mul_const(Tape<T>& tape, const Var<T>& a, const Tensor<T>& c) {
  if (a.shape() != c.shape()) {
    throw DimensionError("mul_const: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(c.shape()));
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  auto res = make_result(std::move(out), wants_grad(tape, {&a}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), po = res.node();
    tape.record(po, [pa, po, c] {
      pa->ensure_grad();
      for (std::size_t i = 0; i < c.numel(); ++i) pa->grad[i] += po->grad[i] * c[i];
    });
  }
  return res;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  auto res = make_result(std::move(out), wants_grad(tape, {&a}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), po = res.node();
    tape.record(po, [pa, po, factor] {
      pa->ensure_grad();
      for (std::size_t i = 0; i < po->grad.numel(); ++i) pa->grad[i] += po->grad[i] * factor;
    });
  }
  return res;
}

template <typename T>
Var<T> add_rowvec(Tape<T>& tape, const Var<T>& x, const Var<T>& b) {
  require_matrix(x, "add_rowvec");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (b.numel() != d) {
    throw DimensionError("add_rowvec: bias " + shape_string(b.shape()) + " does not match " + shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const T* bv = b.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    T* row = out.raw() + i * d;
    for (std::size_t j = 0; j < d; ++j) row[j] += bv[j];
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&x, &b}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), pb = b.node(), po = res.node();
    tape.record(po, [px, pb, po, n, d] {
      const T* g = po->grad.raw();
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < n * d; ++i) px->grad[i] += g[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g[i * d + j];
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> add_tiled(Tape<T>& tape, const Var<T>& x, const Var<T>& p) {
  require_matrix(x, "add_tiled");
  require_matrix(p, "add_tiled");
  const std::size_t rows = x.shape()[0], d = x.shape()[1], t = p.shape()[0];
  if (p.shape()[1] != d || rows % t != 0) {
    throw DimensionError("add_tiled: cannot tile " + shape_string(p.shape()) + " over " + shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const T* pv = p.value().raw();
  for (std::size_t i = 0; i < rows; ++i) {
    T* row = out.raw() + i * d;
    const T* prow = pv + (i % t) * d;
    for (std::size_t j = 0; j < d; ++j) row[j] += prow[j];
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&x, &p}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), pp = p.node(), po = res.node();
    tape.record(po, [px, pp, po, rows, d, t] {
      const T* g = po->grad.raw();
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < rows * d; ++i) px->grad[i] += g[i];
      }
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < d; ++j) pp->grad[(i % t) * d + j] += g[i * d + j];
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> outer(Tape<T>& tape, const Var<T>& s, const Var<T>& r) {
  const std::size_t k = s.numel(), d = r.numel();
  Tensor<T> out(Shape{k, d});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = s.value()[i] * r.value()[j];
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&s, &r}));
  if (res.requires_grad()) {
    Ptr<T> ps = s.node(), pr = r.node(), po = res.node();
    tape.record(po, [ps, pr, po, k, d] {
      const auto& g = po->grad;
      if (ps->requires_grad) {
        ps->ensure_grad();
        for (std::size_t i = 0; i < k; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += g.at(i, j) * pr->value[j];
          ps->grad[i] += acc;
        }
      }
      if (pr->requires_grad) {
        pr->ensure_grad();
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < d; ++j) pr->grad[j] += g.at(i, j) * ps->value[i];
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Normalization and nonlinearities

template <typename T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x) {
  require_matrix(x, "softmax_rows");
  auto res = make_result(kernels::softmax_rows(x.value()), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    tape.record(po, [px, po] {
      const std::size_t n = po->value.rows(), c = po->value.cols();
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* y = po->value.raw() + i * c;
        const T* g = po->grad.raw() + i * c;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        T* gx = px->grad.raw() + i * c;
        for (std::size_t j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return res;
}

template <typename T>
Var<T> log_softmax_rows(Tape<T>& tape, const Var<T>& x) {
  require_matrix(x, "log_softmax_rows");
  x.value().require_finite("log_softmax_rows input");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* in = x.value().raw() + i * c;
    const T mx = *std::max_element(in, in + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = in[j] - lse;
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    tape.record(po, [px, po, n, c] {
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* y = po->value.raw() + i * c;
        const T* g = po->grad.raw() + i * c;
        T gsum = 0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[j];
        T* gx = px->grad.raw() + i * c;
        for (std::size_t j = 0; j < c; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
      }
    });
  }
  return res;
}

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (d < 2) throw DimensionError("layer_norm: need at least 2 features, got " + shape_string(x.shape()));
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match " + shape_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(n);
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    const T* in = x.value().raw() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * is;
      xhat.at(i, j) = h;
      out.at(i, j) = h * gv[j] + bv[j];
    }
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&x, &gamma, &beta}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), pg = gamma.node(), pb = beta.node(), po = res.node();
    tape.record(po, [px, pg, pb, po, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d] {
      const auto& g = po->grad;
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) pg->grad[j] += g.at(i, j) * xhat.at(i, j);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g.at(i, j);
        }
      }
      if (px->requires_grad) {
        px->ensure_grad();
        std::vector<T> dh(d);
        for (std::size_t i = 0; i < n; ++i) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g.at(i, j) * pg->value[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * xhat.at(i, j);
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            px->grad.at(i, j) += inv_std[i] * (dh[j] - mean_dh - xhat.at(i, j) * mean_dh_h);
          }
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> gelu(Tape<T>& tape, const Var<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const std::size_t n = x.numel();
  Eigen::Map<const Arr> xv(x.value().raw(), static_cast<Eigen::Index>(n));
  // Eigen's erf is vectorized for float and falls back to std::erf otherwise.
  Arr cdf = T(0.5) * (T(1) + (xv * (T(1) / std::numbers::sqrt2_v<T>)).erf());
  Tensor<T> out(x.shape());
  Eigen::Map<Arr>(out.raw(), static_cast<Eigen::Index>(n)) = xv * cdf;
  auto res = make_result(std::move(out), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    tape.record(po, [px, po, n, cdf = std::move(cdf)] {
      px->ensure_grad();
      const auto len = static_cast<Eigen::Index>(n);
      Eigen::Map<const Arr> v(px->value.raw(), len), g(po->grad.raw(), len);
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      Eigen::Map<Arr>(px->grad.raw(), len) += g * (cdf + v * (T(-0.5) * v.square()).exp() * inv_sqrt_2pi);
    });
  }
  return res;
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto res = make_result(std::move(out), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    tape.record(po, [px, po] {
      px->ensure_grad();
      for (std::size_t i = 0; i < po->grad.numel(); ++i) {
        if (px->value[i] > T(0)) px->grad[i] += po->grad[i];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Var<T> attention_core(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                      std::size_t heads, const Tensor<T>& prob_mask) {
  require_matrix(q, "attention_core");
  require_same_shape(q, k, "attention_core");
  require_same_shape(q, v, "attention_core");
  const std::size_t rows = q.shape()[0], d = q.shape()[1];
  if (batch == 0 || rows % batch != 0) {
    throw DimensionError("attention_core: " + std::to_string(rows) + " rows not divisible into " +
                         std::to_string(batch) + " sequences");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention_core: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t t = rows / batch, dh = d / heads;
  const bool masked = !prob_mask.empty();
  if (masked && prob_mask.numel() != batch * heads * t * t) {
    throw DimensionError("attention_core: probability mask has " + std::to_string(prob_mask.numel()) +
                         " entries, expected " + std::to_string(batch * heads * t * t));
  }
  const T scl = T(1) / std::sqrt(T(dh));

  using M = RowMat<T>;
  using Stride = Eigen::OuterStride<>;
  using CView = Eigen::Map<const M, 0, Stride>;
  using View = Eigen::Map<M, 0, Stride>;
  const auto ti = static_cast<Eigen::Index>(t);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const Stride stride(static_cast<Eigen::Index>(d));

  Tensor<T> out(Shape{rows, d});
  Tensor<T> probs(Shape{batch * heads * t * t});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * t * d + h * dh;
      CView qm(q.value().raw() + off, ti, dhi, stride);
      CView km(k.value().raw() + off, ti, dhi, stride);
      CView vm(v.value().raw() + off, ti, dhi, stride);
      T* pp = probs.raw() + (b * heads + h) * t * t;
      Eigen::Map<M> pm(pp, ti, ti);
      pm.noalias() = (qm * km.transpose()) * scl;
      for (std::size_t i = 0; i < t; ++i) {
        T* row = pp + i * t;
        const T mx = *std::max_element(row, row + t);
        T total = 0;
        for (std::size_t j = 0; j < t; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        for (std::size_t j = 0; j < t; ++j) row[j] /= total;
      }
      View om(out.raw() + off, ti, dhi, stride);
      if (masked) {
        Eigen::Map<const M> mm(prob_mask.raw() + (b * heads + h) * t * t, ti, ti);
        om.noalias() = pm.cwiseProduct(mm) * vm;
      } else {
        om.noalias() = pm * vm;
      }
    }
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&q, &k, &v}));
  if (res.requires_grad()) {
    Ptr<T> pq = q.node(), pk = k.node(), pv = v.node(), po = res.node();
    tape.record(po, [pq, pk, pv, po, probs = std::move(probs), prob_mask, masked, batch, heads, t, d, dh, scl] {
      for (auto* p : {pq.get(), pk.get(), pv.get()}) {
        if (p->requires_grad) p->ensure_grad();
      }
      const auto ti2 = static_cast<Eigen::Index>(t);
      const auto dhi2 = static_cast<Eigen::Index>(dh);
      const Stride st(static_cast<Eigen::Index>(d));
      M pmasked(ti2, ti2), dp(ti2, ti2);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = b * t * d + h * dh;
          CView qm(pq->value.raw() + off, ti2, dhi2, st);
          CView km(pk->value.raw() + off, ti2, dhi2, st);
          CView vm(pv->value.raw() + off, ti2, dhi2, st);
          CView gm(po->grad.raw() + off, ti2, dhi2, st);
          Eigen::Map<const M> pm(probs.raw() + (b * heads + h) * t * t, ti2, ti2);
          if (masked) {
            Eigen::Map<const M> mm(prob_mask.raw() + (b * heads + h) * t * t, ti2, ti2);
            pmasked = pm.cwiseProduct(mm);
            dp.noalias() = gm * vm.transpose();
            dp = dp.cwiseProduct(mm);
          } else {
            pmasked = pm;
            dp.noalias() = gm * vm.transpose();
          }
          if (pv->requires_grad) {
            View gv(pv->grad.raw() + off, ti2, dhi2, st);
            gv.noalias() += pmasked.transpose() * gm;
          }
          // softmax backward: dS = P o (dP - rowsum(dP o P))
          for (Eigen::Index i = 0; i < ti2; ++i) {
            T dot = 0;
            for (Eigen::Index j = 0; j < ti2; ++j) dot += dp(i, j) * pm(i, j);
            for (Eigen::Index j = 0; j < ti2; ++j) dp(i, j) = pm(i, j) * (dp(i, j) - dot) * scl;
          }
          if (pq->requires_grad) {
            View gq(pq->grad.raw() + off, ti2, dhi2, st);
            gq.noalias() += dp * km;
          }
          if (pk->requires_grad) {
            View gk(pk->grad.raw() + off, ti2, dhi2, st);
            gk.noalias() += dp.transpose() * qm;
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> prepend_token(Tape<T>& tape, const Var<T>& x, const Var<T>& token, std::size_t batch) {
  require_matrix(x, "prepend_token");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (token.numel() != d) {
    throw DimensionError("prepend_token: token " + shape_string(token.shape()) + " vs rows " + shape_string(x.shape()));
  }
  if (batch == 0 || rows % batch != 0) {
    throw DimensionError("prepend_token: " + std::to_string(rows) + " rows not divisible by batch " +
                         std::to_string(batch));
  }
  const std::size_t p = rows / batch, t = p + 1;
  Tensor<T> out(Shape{batch * t, d});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(token.value().raw(), d, out.raw() + b * t * d);
    std::copy_n(x.value().raw() + b * p * d, p * d, out.raw() + (b * t + 1) * d);
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&x, &token}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), pt = token.node(), po = res.node();
    tape.record(po, [px, pt, po, batch, p, t, d] {
      const T* g = po->grad.raw();
      if (pt->requires_grad) {
        pt->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < d; ++j) pt->grad[j] += g[b * t * d + j];
        }
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          const T* src = g + (b * t + 1) * d;
          T* dst = px->grad.raw() + b * p * d;
          for (std::size_t i = 0; i < p * d; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> take_rows(Tape<T>& tape, const Var<T>& x, std::span<const std::size_t> rows) {
  require_matrix(x, "take_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (rows.empty()) throw DimensionError("take_rows: no rows requested");
  Tensor<T> out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw IndexError("take_rows: row " + std::to_string(rows[i]) + " out of range for " + shape_string(x.shape()));
    }
    std::copy_n(x.value().raw() + rows[i] * d, d, out.raw() + i * d);
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape.record(po, [px, po, idx = std::move(idx), d] {
      px->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* src = po->grad.raw() + i * d;
        T* dst = px->grad.raw() + idx[i] * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> concat_cols(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  const std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != n) {
    throw DimensionError("concat_cols: row counts differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out(Shape{n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().raw() + i * p, p, out.raw() + i * (p + q));
    std::copy_n(b.value().raw() + i * q, q, out.raw() + i * (p + q) + p);
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&a, &b}));
  if (res.requires_grad()) {
    Ptr<T> pa = a.node(), pb = b.node(), po = res.node();
    tape.record(po, [pa, pb, po, n, p, q] {
      const T* g = po->grad.raw();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < p; ++j) pa->grad[i * p + j] += g[i * (p + q) + j];
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < q; ++j) pb->grad[i * q + j] += g[i * (p + q) + p + j];
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> contract_index(Tape<T>& tape, const Var<T>& m, const Var<T>& z, std::size_t classes) {
  require_matrix(m, "contract_index");
  require_matrix(z, "contract_index");
  const std::size_t n = m.shape()[0], dz = z.shape()[1];
  if (z.shape()[0] != n || m.shape()[1] != dz * classes) {
    throw DimensionError("contract_index: " + shape_string(m.shape()) + " cannot be viewed as [" +
                         std::to_string(dz) + "," + std::to_string(classes) + "] per row of z " +
                         shape_string(z.shape()));
  }
  Tensor<T> out(Shape{n, classes});
  for (std::size_t b = 0; b < n; ++b) {
    const T* mr = m.value().raw() + b * dz * classes;
    const T* zr = z.value().raw() + b * dz;
    for (std::size_t kk = 0; kk < dz; ++kk) {
      for (std::size_t c = 0; c < classes; ++c) out.at(b, c) += mr[kk * classes + c] * zr[kk];
    }
  }
  auto res = make_result(std::move(out), wants_grad(tape, {&m, &z}));
  if (res.requires_grad()) {
    Ptr<T> pm = m.node(), pz = z.node(), po = res.node();
    tape.record(po, [pm, pz, po, n, dz, classes] {
      if (pm->requires_grad) pm->ensure_grad();
      if (pz->requires_grad) pz->ensure_grad();
      for (std::size_t b = 0; b < n; ++b) {
        const T* g = po->grad.raw() + b * classes;
        for (std::size_t kk = 0; kk < dz; ++kk) {
          if (pm->requires_grad) {
            for (std::size_t c = 0; c < classes; ++c) {
              pm->grad[b * dz * classes + kk * classes + c] += g[c] * pz->value[b * dz + kk];
            }
          }
          if (pz->requires_grad) {
            T acc = 0;
            for (std::size_t c = 0; c < classes; ++c) acc += g[c] * pm->value[b * dz * classes + kk * classes + c];
            pz->grad[b * dz + kk] += acc;
          }
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape) {
  auto res = make_result(x.value().reshaped(std::move(shape)), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    tape.record(po, [px, po] {
      px->ensure_grad();
      for (std::size_t i = 0; i < po->grad.numel(); ++i) px->grad[i] += po->grad[i];
    });
  }
  return res;
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  T total = 0;
  for (auto v : x.value().data()) total += v;
  auto res = make_result(Tensor<T>::scalar(total), wants_grad(tape, {&x}));
  if (res.requires_grad()) {
    Ptr<T> px = x.node(), po = res.node();
    tape.record(po, [px, po] {
      px->ensure_grad();
      const T g = po->grad[0];
      for (auto& v : px->grad.data()) v += g;
    });
  }
  return res;
}

template <typename T>
Var<T> mean(Tape<T>& tape, const Var<T>& x) {
  return scale(tape, sum(tape, x), T(1) / T(x.numel()));
}

template <typename T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels, std::span<const T> class_weights) {
  require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                         " rows");
  }
  if (!class_weights.empty() && class_weights.size() != c) {
    throw DimensionError("cross_entropy: " + std::to_string(class_weights.size()) + " class weights for " +
                         std::to_string(c) + " classes");
  }
  auto probs = kernels::softmax_rows(logits.value());
  std::vector<T> w(n, T(1));
  T wsum = 0, loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(c) + ")");
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    if (!class_weights.empty()) w[i] = class_weights[y];
    // log-softmax from the max-shifted logits for stability
    const T* row = logits.value().raw() + i * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    loss -= w[i] * (row[y] - mx - std::log(total));
    wsum += w[i];
  }
  auto res = make_result(Tensor<T>::scalar(loss / wsum), wants_grad(tape, {&logits}));
  if (res.requires_grad()) {
    Ptr<T> px = logits.node(), po = res.node();
    std::vector<int> lab(labels.begin(), labels.end());
    tape.record(po, [px, po, probs = std::move(probs), w = std::move(w), lab = std::move(lab), wsum, n, c] {
      px->ensure_grad();
      const T g = po->grad[0];
      for (std::size_t i = 0; i < n; ++i) {
        const T f = g * w[i] / wsum;
        for (std::size_t j = 0; j < c; ++j) {
          const T target = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
          px->grad[i * c + j] += f * (probs.at(i, j) - target);
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>(x.value(), false);
}

template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double rate, CounterRng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  Tensor<T> mask(shape, T(1));
  if (rate == 0.0) return mask;
  const T keep = T(1) / T(1.0 - rate);
  for (auto& m : mask.data()) m = rng.uniform() < rate ? T(0) : keep;
  return mask;
}

// ---------------------------------------------------------------------------
// Explicit instantiation

#define LENS_INSTANTIATE(T)                                                                                       \
  template class Tape<T>;                                                                                         \
  template void kernels::gemm<T>(const T*, bool, const T*, bool, T*, std::size_t, std::size_t, std::size_t, bool); \
  template Tensor<T> kernels::matmul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> kernels::softmax_rows<T>(const Tensor<T>&);                                                  \
  template Var<T> matmul<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                              \
  template Var<T> matmul_bt<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                           \
  template Var<T> add<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                                 \
  template Var<T> sub<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                                 \
  template Var<T> mul<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                                 \
  template Var<T> mul_const<T>(Tape<T>&, const Var<T>&, const Tensor<T>&);                                        \
  template Var<T> scale<T>(Tape<T>&, const Var<T>&, T);                                                           \
  template Var<T> add_rowvec<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                          \
  template Var<T> add_tiled<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                           \
  template Var<T> outer<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                               \
  template Var<T> softmax_rows<T>(Tape<T>&, const Var<T>&);                                                       \
  template Var<T> log_softmax_rows<T>(Tape<T>&, const Var<T>&);                                                   \
  template Var<T> layer_norm<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, T);                        \
  template Var<T> gelu<T>(Tape<T>&, const Var<T>&);                                                               \
  template Var<T> relu<T>(Tape<T>&, const Var<T>&);                                                               \
  template Var<T> attention_core<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,           \
                                    std::size_t, const Tensor<T>&);                                               \
  template Var<T> prepend_token<T>(Tape<T>&, const Var<T>&, const Var<T>&, std::size_t);                          \
  template Var<T> take_rows<T>(Tape<T>&, const Var<T>&, std::span<const std::size_t>);                            \
  template Var<T> concat_cols<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> contract_index<T>(Tape<T>&, const Var<T>&, const Var<T>&, std::size_t);                         \
  template Var<T> reshape<T>(Tape<T>&, const Var<T>&, Shape);                                                     \
  template Var<T> sum<T>(Tape<T>&, const Var<T>&);                                                                \
  template Var<T> mean<T>(Tape<T>&, const Var<T>&);                                                               \
  template Var<T> cross_entropy<T>(Tape<T>&, const Var<T>&, std::span<const int>, std::span<const T>);            \
  template Var<T> detach<T>(const Var<T>&);                                                                       \
  template Tensor<T> dropout_mask<T>(const Shape&, double, CounterRng&);

LENS_INSTANTIATE(float)
LENS_INSTANTIATE(double)

#undef LENS_INSTANTIATE

}  // namespace lens
