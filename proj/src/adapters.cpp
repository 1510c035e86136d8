#include "lens/adapters.hpp"

#include <cmath>

#include "lens/errors.hpp"

namespace lens {

const char* role_name(Role r) {
  switch (r) {
    case Role::query:
      return "query";
    case Role::key:
      return "key";
    case Role::value:
      return "value";
    case Role::output:
      return "output";
  }
  return "unknown";
}

template <typename T>
Var<T> linear_forward(Tape<T>& tape, const Var<T>& x, const Linear<T>& layer) {
  return add_rowvec(tape, matmul_bt(tape, x, layer.weight), layer.bias);
}

template <typename T>
Linear<T> make_gaussian_linear(std::size_t in, std::size_t out, double std, CounterRng& rng) {
  Tensor<T> w(Shape{out, in});
  for (auto& v : w.data()) v = static_cast<T>(rng.normal(0.0, std));
  return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>::zeros(Shape{out}))};
}

template <typename T>
Linear<T> make_xavier_linear(std::size_t in, std::size_t out, double gain, CounterRng& rng) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor<T> w(Shape{out, in});
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>::zeros(Shape{out}))};
}

// ---------------------------------------------------------------------------
// LoRA

template <typename T>
LoraAdapter<T>::LoraAdapter(std::size_t members, std::size_t rank_, std::size_t d_in, std::size_t d_out)
    : rank(rank_) {
  if (rank == 0 || 2 * rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " must lie in [1, min(d,k)/2] for a " +
                      std::to_string(d_out) + "x" + std::to_string(d_in) + " projection");
  }
  for (std::size_t i = 0; i < members; ++i) {
    a.push_back(Var<T>::parameter(Tensor<T>::zeros(Shape{rank, d_in})));
    b.push_back(Var<T>::parameter(Tensor<T>::zeros(Shape{d_out, rank})));
  }
}

template <typename T>
void lora_init(LoraAdapter<T>& adapter, const InitSpec& init, std::uint64_t seed, std::uint64_t slot_tag) {
  adapter.init = init;
  for (std::size_t i = 0; i < adapter.members(); ++i) {
    auto rng = CounterRng(member_seed(seed, i)).fork(slot_tag);
    adapter.b[i].mutable_value().fill(T(0));
    auto& a = adapter.a[i].mutable_value();
    const std::size_t r = a.dim(0), d = a.dim(1);
    switch (init.kind) {
      case InitSpec::Kind::gaussian:
        if (init.value < 0.0) throw ConfigError("gaussian init std must be nonnegative");
        for (auto& v : a.data()) v = static_cast<T>(rng.normal(0.0, init.value));
        break;
      case InitSpec::Kind::xavier_uniform: {
        // fan_in = d, fan_out = r for A in R^{r x d}
        const double bound = init.value * std::sqrt(6.0 / static_cast<double>(r + d));
        for (auto& v : a.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      default:
        throw ConfigError("unknown init spec");
    }
  }
}

template <typename T>
Var<T> lora_forward(Tape<T>& tape, const Var<T>& x, const Var<T>& w0, const Var<T>& a, const Var<T>& b) {
  auto base = matmul_bt(tape, x, w0);
  auto low = matmul_bt(tape, matmul_bt(tape, x, a), b);
  return add(tape, base, low);
}

template <typename T>
Tensor<T> merge_lora_weights(const Tensor<T>& w0, const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.rank() != 2 || b.dim(0) != w0.dim(0) || a.dim(1) != w0.dim(1) || b.dim(1) != a.dim(0)) {
    throw DimensionError("merge_lora_weights: W0 " + shape_string(w0.shape()) + ", A " + shape_string(a.shape()) +
                         ", B " + shape_string(b.shape()) + " do not compose");
  }
  Tensor<T> merged = w0;
  kernels::gemm(b.raw(), false, a.raw(), false, merged.raw(), b.dim(0), a.dim(1), a.dim(0), true);
  return merged;
}

// ---------------------------------------------------------------------------
// Batch-Ensemble

template <typename T>
BatchAdapter<T> make_batch_adapter(const Tensor<T>& w0, std::size_t members, BatchMode mode, std::uint64_t seed,
                                   std::uint64_t slot_tag) {
  BatchAdapter<T> adapter;
  adapter.mode = mode;
  adapter.shared = Var<T>::parameter(w0);
  const double center = mode == BatchMode::multiplicative ? 1.0 : 0.0;
  const double stddev = std::sqrt(0.02);
  const std::size_t k = w0.dim(0), d = w0.dim(1);
  for (std::size_t i = 0; i < members; ++i) {
    auto rng = CounterRng(member_seed(seed, i)).fork(slot_tag);
    Tensor<T> r(Shape{d}), s(Shape{k});
    for (auto& v : r.data()) v = static_cast<T>(rng.normal(center, stddev));
    for (auto& v : s.data()) v = static_cast<T>(rng.normal(center, stddev));
    adapter.r.push_back(Var<T>::parameter(std::move(r)));
    adapter.s.push_back(Var<T>::parameter(std::move(s)));
  }
  return adapter;
}

template <typename T>
Var<T> batch_member_weight(Tape<T>& tape, const BatchAdapter<T>& adapter, std::size_t member) {
  if (member >= adapter.members()) {
    throw IndexError("batch member " + std::to_string(member) + " out of range");
  }
  auto rs = outer(tape, adapter.s[member], adapter.r[member]);
  return adapter.mode == BatchMode::multiplicative ? mul(tape, adapter.shared, rs) : add(tape, adapter.shared, rs);
}

template <typename T>
Var<T> batch_forward(Tape<T>& tape, const Var<T>& x, const BatchAdapter<T>& adapter, std::size_t member) {
  return matmul_bt(tape, x, batch_member_weight(tape, adapter, member));
}

// ---------------------------------------------------------------------------
// Projection slot

template <typename T>
ProjectionSlot<T> ProjectionSlot<T>::clone() const {
  ProjectionSlot out;
  out.role = role;
  out.base = base.clone();
  if (lora) {
    LoraAdapter<T> l;
    l.rank = lora->rank;
    l.init = lora->init;
    for (const auto& v : lora->a) l.a.push_back(v.clone());
    for (const auto& v : lora->b) l.b.push_back(v.clone());
    out.lora = std::move(l);
  }
  if (batch) {
    BatchAdapter<T> bt;
    bt.mode = batch->mode;
    bt.shared = batch->shared.clone();
    for (const auto& v : batch->r) bt.r.push_back(v.clone());
    for (const auto& v : batch->s) bt.s.push_back(v.clone());
    out.batch = std::move(bt);
  }
  return out;
}

template <typename T>
Var<T> project(Tape<T>& tape, const Var<T>& x, const ProjectionSlot<T>& slot, std::size_t member) {
  Var<T> out;
  if (slot.lora) {
    if (member >= slot.lora->members()) {
      throw IndexError("member " + std::to_string(member) + " out of range for " +
                       std::to_string(slot.lora->members()) + " LoRA members");
    }
    out = lora_forward(tape, x, slot.base.weight, slot.lora->a[member], slot.lora->b[member]);
  } else if (slot.batch) {
    out = batch_forward(tape, x, *slot.batch, member);
  } else {
    out = matmul_bt(tape, x, slot.base.weight);
  }
  return add_rowvec(tape, out, slot.base.bias);
}

// ---------------------------------------------------------------------------
// Last-layer ensemble

template <typename T>
std::vector<Linear<T>> make_last_layer_heads(std::size_t members, std::size_t features, std::size_t classes) {
  std::vector<Linear<T>> heads;
  for (std::size_t i = 0; i < members; ++i) {
    CounterRng rng(42 + i);
    heads.push_back(make_gaussian_linear<T>(features, classes, 0.01, rng));
  }
  return heads;
}

template <typename T>
std::vector<Var<T>> last_layer_forward(Tape<T>& tape, const Var<T>& features, const std::vector<Linear<T>>& heads) {
  std::vector<Var<T>> out;
  out.reserve(heads.size());
  for (const auto& h : heads) out.push_back(linear_forward(tape, features, h));
  return out;
}

// ---------------------------------------------------------------------------
// EpiNet

template <typename T>
EpinetMlp<T> EpinetMlp<T>::clone() const {
  EpinetMlp out;
  for (const auto& l : layers) out.layers.push_back(l.clone());
  return out;
}

template <typename T>
EpinetMember<T> make_epinet_member(std::size_t member, std::size_t features, std::size_t epistemic_dim,
                                   std::size_t classes, std::size_t hidden, std::uint64_t seed) {
  const std::size_t dims[4] = {features + epistemic_dim, hidden, hidden, epistemic_dim * classes};
  EpinetMember<T> m;
  auto rng = CounterRng(member_seed(seed, member)).fork(0xE91);
  for (int l = 0; l < 3; ++l) m.learnable.layers.push_back(make_gaussian_linear<T>(dims[l], dims[l + 1], 0.01, rng));
  // Frozen prior: default-style U(+-1/sqrt(fan_in)) weights and biases.
  CounterRng prior_rng(42 + member * 1000);
  for (int l = 0; l < 3; ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    Tensor<T> w(Shape{dims[l + 1], dims[l]}), b(Shape{dims[l + 1]});
    for (auto& v : w.data()) v = static_cast<T>(prior_rng.uniform(-bound, bound));
    for (auto& v : b.data()) v = static_cast<T>(prior_rng.uniform(-bound, bound));
    m.prior.layers.push_back({Var<T>(std::move(w)), Var<T>(std::move(b))});
  }
  return m;
}

template <typename T>
Var<T> epinet_mlp_forward(Tape<T>& tape, const Var<T>& input, const EpinetMlp<T>& mlp) {
  Var<T> h = input;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    h = linear_forward(tape, h, mlp.layers[l]);
    if (l + 1 < mlp.layers.size()) h = relu(tape, h);
  }
  return h;
}

template <typename T>
Var<T> epinet_forward(Tape<T>& tape, const Var<T>& features, const Var<T>& base_logits, const Tensor<T>& z,
                      const EpinetMember<T>& member, T prior_scale) {
  z.require_finite("epistemic index");
  const std::size_t classes = base_logits.shape()[1];
  Var<T> zv(z);
  auto input = concat_cols(tape, detach(features), zv);
  auto learn = contract_index(tape, epinet_mlp_forward(tape, input, member.learnable), zv, classes);
  auto prior = contract_index(tape, epinet_mlp_forward(tape, input, member.prior), zv, classes);
  return add(tape, base_logits, add(tape, learn, scale(tape, prior, prior_scale)));
}

// ---------------------------------------------------------------------------
// Snapshot ensemble

SnapshotPlan plan_snapshots(std::size_t total_epochs, std::size_t burn_in, std::size_t members) {
  if (members == 0) throw ConfigError("snapshot ensemble needs at least one member");
  if (burn_in >= total_epochs) {
    throw ConfigError("burn-in " + std::to_string(burn_in) + " must be shorter than " + std::to_string(total_epochs) +
                      " total epochs");
  }
  for (std::size_t b = burn_in; b < total_epochs; ++b) {
    if ((total_epochs - b) % members != 0) continue;
    SnapshotPlan plan{total_epochs, burn_in, b, members, (total_epochs - b) / members, {}};
    for (std::size_t e = b; e <= total_epochs; e += plan.cycle_length) plan.snapshot_epochs.push_back(e);
    return plan;
  }
  throw ConfigError("no burn-in in [" + std::to_string(burn_in) + "," + std::to_string(total_epochs) +
                    ") splits the remaining epochs into " + std::to_string(members) + " equal cycles");
}

// ---------------------------------------------------------------------------

#define LENS_INSTANTIATE(T)                                                                                     \
  template Var<T> linear_forward<T>(Tape<T>&, const Var<T>&, const Linear<T>&);                                 \
  template Linear<T> make_gaussian_linear<T>(std::size_t, std::size_t, double, CounterRng&);                    \
  template Linear<T> make_xavier_linear<T>(std::size_t, std::size_t, double, CounterRng&);                      \
  template struct LoraAdapter<T>;                                                                               \
  template void lora_init<T>(LoraAdapter<T>&, const InitSpec&, std::uint64_t, std::uint64_t);                   \
  template Var<T> lora_forward<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);        \
  template Tensor<T> merge_lora_weights<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template BatchAdapter<T> make_batch_adapter<T>(const Tensor<T>&, std::size_t, BatchMode, std::uint64_t,       \
                                                 std::uint64_t);                                                \
  template Var<T> batch_member_weight<T>(Tape<T>&, const BatchAdapter<T>&, std::size_t);                        \
  template Var<T> batch_forward<T>(Tape<T>&, const Var<T>&, const BatchAdapter<T>&, std::size_t);               \
  template struct ProjectionSlot<T>;                                                                            \
  template Var<T> project<T>(Tape<T>&, const Var<T>&, const ProjectionSlot<T>&, std::size_t);                   \
  template std::vector<Linear<T>> make_last_layer_heads<T>(std::size_t, std::size_t, std::size_t);              \
  template std::vector<Var<T>> last_layer_forward<T>(Tape<T>&, const Var<T>&, const std::vector<Linear<T>>&);   \
  template struct EpinetMlp<T>;                                                                                 \
  template EpinetMember<T> make_epinet_member<T>(std::size_t, std::size_t, std::size_t, std::size_t,            \
                                                 std::size_t, std::uint64_t);                                   \
  template Var<T> epinet_mlp_forward<T>(Tape<T>&, const Var<T>&, const EpinetMlp<T>&);                          \
  template Var<T> epinet_forward<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Tensor<T>&,                   \
                                    const EpinetMember<T>&, T);

LENS_INSTANTIATE(float)
LENS_INSTANTIATE(double)

#undef LENS_INSTANTIATE

}  // namespace lens
