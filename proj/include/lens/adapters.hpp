#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lens/autodiff.hpp"
#include "lens/config.hpp"
#include "lens/rng.hpp"

namespace lens {

/// The four adapted attention projections.
enum class Role : std::size_t { query = 0, key = 1, value = 2, output = 3 };
inline constexpr std::array<Role, 4> kRoles{Role::query, Role::key, Role::value, Role::output};
const char* role_name(Role r);

/// Dense affine map y = x W^T + b with W [out, in].
template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }
  Linear clone() const { return {weight.clone(), bias.clone()}; }
  void set_trainable(bool on) {
    weight.set_requires_grad(on);
    bias.set_requires_grad(on);
  }
};

template <typename T>
Var<T> linear_forward(Tape<T>& tape, const Var<T>& x, const Linear<T>& layer);

/// Weights ~ Normal(0, std^2), bias 0.
template <typename T>
Linear<T> make_gaussian_linear(std::size_t in, std::size_t out, double std, CounterRng& rng);

/// Weights ~ U(+-gain*sqrt(6/(in+out))), bias 0.
template <typename T>
Linear<T> make_xavier_linear(std::size_t in, std::size_t out, double gain, CounterRng& rng);

// ---------------------------------------------------------------------------
// LoRA

/// Per-member low-rank factors of one projection: delta W_i = B_i A_i with
/// A_i [r, d] and B_i [k, r]. B_i is zero at construction.
template <typename T>
struct LoraAdapter {
  std::size_t rank = 0;
  InitSpec init;
  std::vector<Var<T>> a;
  std::vector<Var<T>> b;

  LoraAdapter() = default;
  /// Throws ConfigError unless rank <= min(d_in, d_out) / 2.
  LoraAdapter(std::size_t members, std::size_t rank, std::size_t d_in, std::size_t d_out);

  std::size_t members() const { return a.size(); }
};

/// Redraws every member: B_i = 0, A_i from `init`. Member i draws from
/// CounterRng(member_seed(seed, i)).fork(slot_tag).
template <typename T>
void lora_init(LoraAdapter<T>& adapter, const InitSpec& init, std::uint64_t seed, std::uint64_t slot_tag = 0);

/// h = x W0^T + (x A^T) B^T; the rank-r path never forms B A.
template <typename T>
Var<T> lora_forward(Tape<T>& tape, const Var<T>& x, const Var<T>& w0, const Var<T>& a, const Var<T>& b);

/// W0 + B A, for verification and weight-space analysis only.
template <typename T>
Tensor<T> merge_lora_weights(const Tensor<T>& w0, const Tensor<T>& a, const Tensor<T>& b);

// ---------------------------------------------------------------------------
// Batch-Ensemble

enum class BatchMode { multiplicative, additive };

/// One shared trainable matrix plus rank-one member factors:
/// multiplicative W_i = W o (s_i r_i^T), additive W_i = W + s_i r_i^T.
template <typename T>
struct BatchAdapter {
  BatchMode mode = BatchMode::multiplicative;
  Var<T> shared;
  std::vector<Var<T>> r;  // [d]
  std::vector<Var<T>> s;  // [k]

  std::size_t members() const { return r.size(); }
};

/// Shared matrix copied from `w0`; r, s ~ Normal(1, 0.02) (multiplicative)
/// or Normal(0, 0.02) (additive), 0.02 being the variance.
template <typename T>
BatchAdapter<T> make_batch_adapter(const Tensor<T>& w0, std::size_t members, BatchMode mode, std::uint64_t seed,
                                   std::uint64_t slot_tag = 0);

/// Effective member weight [k, d].
template <typename T>
Var<T> batch_member_weight(Tape<T>& tape, const BatchAdapter<T>& adapter, std::size_t member);

/// x W_i^T with W_i as above.
template <typename T>
Var<T> batch_forward(Tape<T>& tape, const Var<T>& x, const BatchAdapter<T>& adapter, std::size_t member);

// ---------------------------------------------------------------------------
// Projection slot

/// A frozen projection W0 [k, d] with bias, optionally routed through a
/// member-indexed adapter. Biases are never adapted.
template <typename T>
struct ProjectionSlot {
  Role role = Role::query;
  Linear<T> base;
  std::optional<LoraAdapter<T>> lora;
  std::optional<BatchAdapter<T>> batch;

  ProjectionSlot clone() const;
};

/// Slot output for `member`, bias added last.
template <typename T>
Var<T> project(Tape<T>& tape, const Var<T>& x, const ProjectionSlot<T>& slot, std::size_t member);

// ---------------------------------------------------------------------------
// Last-layer ensemble

/// Head i ~ Normal(0, 0.01^2), bias 0, drawn from seed 42 + i.
template <typename T>
std::vector<Linear<T>> make_last_layer_heads(std::size_t members, std::size_t features, std::size_t classes);

/// Per-head logits on shared features.
template <typename T>
std::vector<Var<T>> last_layer_forward(Tape<T>& tape, const Var<T>& features, const std::vector<Linear<T>>& heads);

// ---------------------------------------------------------------------------
// EpiNet

/// ReLU MLP mapping concat(features, z) to a flattened [D_z, C] matrix.
template <typename T>
struct EpinetMlp {
  std::vector<Linear<T>> layers;

  EpinetMlp clone() const;
};

template <typename T>
struct EpinetMember {
  EpinetMlp<T> learnable;  // weights ~ Normal(0, 0.01^2)
  EpinetMlp<T> prior;      // frozen, seeded 42 + i * 1000
};

template <typename T>
EpinetMember<T> make_epinet_member(std::size_t member, std::size_t features, std::size_t epistemic_dim,
                                   std::size_t classes, std::size_t hidden, std::uint64_t seed);

template <typename T>
Var<T> epinet_mlp_forward(Tape<T>& tape, const Var<T>& input, const EpinetMlp<T>& mlp);

/// base_logits + (sigma_L + alpha sigma_P)(sg[features], z), each MLP output
/// contracted with z. `z` is [B, D_z]. Feature gradients do not flow through the epinet path.
template <typename T>
Var<T> epinet_forward(Tape<T>& tape, const Var<T>& features, const Var<T>& base_logits, const Tensor<T>& z,
                      const EpinetMember<T>& member, T prior_scale);

// ---------------------------------------------------------------------------
// Snapshot ensemble

struct SnapshotPlan {
  std::size_t total_epochs = 0;
  std::size_t burn_in = 0;
  std::size_t effective_burn_in = 0;
  std::size_t members = 0;
  std::size_t cycle_length = 0;
  /// Epoch counts after which a snapshot is stored: the end of burn-in, then
  /// each cycle end. Ensemble members are the last `members` entries.
  std::vector<std::size_t> snapshot_epochs;
};

/// Extends burn_in to the smallest b with (total - b) divisible by members.
SnapshotPlan plan_snapshots(std::size_t total_epochs, std::size_t burn_in, std::size_t members);

}  // namespace lens
