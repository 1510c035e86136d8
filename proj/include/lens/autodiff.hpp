#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lens/rng.hpp"
#include "lens/tensor.hpp"

namespace lens {

/// A value in the computation graph. Leaves (parameters, inputs) own
/// persistent gradient buffers; intermediates are reset on each backward.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), {}, requires_grad, true})) {}
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Trainable leaf.
  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Empty tensor until some gradient has flowed here.
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }

  /// Deep copy of the value as a fresh leaf with the same requires_grad flag.
  Var clone() const { return Var(node_->value, node_->requires_grad); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations. An operation's inputs are
/// always recorded before it, so replaying in reverse is a valid backward pass.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(std::shared_ptr<Node<T>> out, std::function<void()> backward_rule) {
    entries_.push_back({std::move(out), std::move(backward_rule)});
  }

  /// Reverse-mode sweep seeded with d(loss)/d(loss) = 1.
  void backward(const Var<T>& loss);

 private:
  struct Entry {
    std::shared_ptr<Node<T>> out;
    std::function<void()> backward_rule;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

/// Populates gradients of every requires_grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls; call zero_grad() to reset.
template <typename T>
void backward(const Var<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Operations. All take the tape first; results record a backward rule only
// when the tape is recording and some input requires a gradient.
// 2-D tensors are [rows, cols] row-major.
// ---------------------------------------------------------------------------

/// a[m,k] . b[k,n]
template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

/// a[m,k] . b[n,k]^T; the linear-layer form x . W^T.
template <typename T>
Var<T> matmul_bt(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

/// Elementwise product.
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

/// Elementwise product with a constant (non-differentiated) tensor.
template <typename T>
Var<T> mul_const(Tape<T>& tape, const Var<T>& a, const Tensor<T>& c);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor);

/// x[n,d] + b[d] broadcast over rows. The only broadcasting op.
template <typename T>
Var<T> add_rowvec(Tape<T>& tape, const Var<T>& x, const Var<T>& b);

/// x[B*T,d] + p[T,d] repeated for each of the B blocks of T rows.
template <typename T>
Var<T> add_tiled(Tape<T>& tape, const Var<T>& x, const Var<T>& p);

/// s[k] r[d]^T -> [k,d].
template <typename T>
Var<T> outer(Tape<T>& tape, const Var<T>& s, const Var<T>& r);

template <typename T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> log_softmax_rows(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6));

/// Exact GELU x * Phi(x).
template <typename T>
Var<T> gelu(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x);

/// Multi-head scaled dot-product attention over `batch` sequences packed as
/// rows of q/k/v [batch*T, d]. `prob_mask`, when non-empty, multiplies the
/// attention probabilities ([batch, heads, T, T] flattened); used for dropout.
template <typename T>
Var<T> attention_core(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                      std::size_t heads, const Tensor<T>& prob_mask = {});

/// Inserts token[d] ahead of each block of `per_block` rows: [B*P,d] -> [B*(P+1),d].
template <typename T>
Var<T> prepend_token(Tape<T>& tape, const Var<T>& x, const Var<T>& token, std::size_t batch);

/// Gathers rows of x[n,d].
template <typename T>
Var<T> take_rows(Tape<T>& tape, const Var<T>& x, std::span<const std::size_t> rows);

/// [n,p] ++ [n,q] -> [n,p+q].
template <typename T>
Var<T> concat_cols(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

/// out[b,c] = sum_k m[b, k*C + c] * z[b,k]; i.e. M^T z per row with M viewed as [Dz, C].
template <typename T>
Var<T> contract_index(Tape<T>& tape, const Var<T>& m, const Var<T>& z, std::size_t classes);

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape);

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> mean(Tape<T>& tape, const Var<T>& x);

/// Mean over rows of -w[y] log softmax(x)[y] normalized by sum of w[y].
/// Empty `class_weights` means uniform weights.
template <typename T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels,
                     std::span<const T> class_weights = {});

/// Same value, no gradient path back to x.
template <typename T>
Var<T> detach(const Var<T>& x);

/// Inverted-dropout mask: entries 0 with probability `rate`, else 1/(1-rate).
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double rate, CounterRng& rng);

// Plain (tape-free) kernels shared by the ops and by analysis code.
namespace kernels {

/// C[m,n] (+)= op(A) . op(B) with op = transpose when the flag is set.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t n, std::size_t k,
          bool accumulate);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

}  // namespace kernels

}  // namespace lens
