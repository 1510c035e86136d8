#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lens/adapters.hpp"
#include "lens/autodiff.hpp"
#include "lens/config.hpp"

namespace lens {

/// Splits images [H, W, ch] (or a batch [B, H, W, ch]) into non-overlapping
/// patches, left-to-right then top-to-bottom, each flattened row-major over
/// (row, col, channel). Output [B * num_patches, patch_size^2 * ch].
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch_size);

template <typename T>
struct EncoderBlock {
  Var<T> norm1_gamma, norm1_beta;
  std::array<ProjectionSlot<T>, 4> attn;  // indexed by Role
  Var<T> norm2_gamma, norm2_beta;
  Linear<T> fc1, fc2;
};

/// Pre-norm ViT encoder without classification head.
template <typename T>
struct Backbone {
  Linear<T> patch_embed;  // [d, patch_dim]
  Var<T> cls_token;       // [d]
  Var<T> pos_embed;       // [seq_len, d]
  std::vector<EncoderBlock<T>> blocks;
  Var<T> norm_gamma, norm_beta;

  static Backbone init(const ModelConfig& cfg, CounterRng& rng);
  /// Deep copy of weights; adapters are not copied.
  Backbone clone_weights() const;
  void set_trainable(bool on);
  /// Visits every tensor with its checkpoint name relative to `prefix`.
  void visit(const std::string& prefix, const std::function<void(const std::string&, Var<T>&)>& fn);
};

template <typename T>
struct MemberState {
  std::optional<Backbone<T>> backbone;  // explicit / snapshot members
  std::optional<Linear<T>> head;
  std::optional<EpinetMember<T>> epinet;
};

struct ParameterCount {
  std::uint64_t total = 0;
  std::uint64_t trainable = 0;
  std::uint64_t per_member_overhead = 0;
};

/// Closed-form parameter accounting for a configuration.
ParameterCount count_parameters(const ModelConfig& cfg);

/// Parameters of the encoder without any classification head.
std::uint64_t backbone_parameter_count(const ModelConfig& cfg);

template <typename T>
struct ForwardOptions {
  /// Dropout on attention probabilities and MLP hidden units when rate > 0.
  bool stochastic = false;
  CounterRng* rng = nullptr;
  /// Overrides the configured dropout rate when set.
  std::optional<double> dropout_rate;
  /// Epistemic index [B, D_z] for epinet; defaults to the member's fixed index.
  const Tensor<T>* epistemic_z = nullptr;
};

/// Micro vision transformer with a member-indexed ensembling mechanism.
template <typename T>
class EnsembleVit {
 public:
  EnsembleVit(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  /// Number of ensemble predictions (MC samples for mc_dropout).
  std::size_t members() const { return cfg_.ensemble_size; }

  /// Patch embedding, class token and positions for `backbone`: [B*T, d].
  Var<T> embed(Tape<T>& tape, const Tensor<T>& images, const Backbone<T>& backbone) const;

  /// Multi-head self-attention of `layer` on already-normalized x [B*T, d].
  Var<T> attention_forward(Tape<T>& tape, const Var<T>& x, std::size_t layer, std::size_t member, std::size_t batch,
                           const ForwardOptions<T>& opts = {}) const;

  /// Final-norm class-token features [B, d] for `member`.
  Var<T> features(Tape<T>& tape, const Tensor<T>& images, std::size_t member, const ForwardOptions<T>& opts = {}) const;

  /// Member-specific head (and epinet) on features [B, d].
  Var<T> head_logits(Tape<T>& tape, const Var<T>& features, std::size_t member,
                     const ForwardOptions<T>& opts = {}) const;

  /// Full forward pass: images [B, H, W, ch] -> logits [B, C].
  Var<T> logits(Tape<T>& tape, const Tensor<T>& images, std::size_t member, const ForwardOptions<T>& opts = {}) const;

  /// Fixed epistemic index of an epinet member, tiled over `batch` rows.
  Tensor<T> member_epistemic_index(std::size_t member, std::size_t batch) const;

  /// All tensors with checkpoint names, in a stable order.
  std::vector<std::pair<std::string, Var<T>>> named_tensors();
  std::vector<std::pair<std::string, Var<T>>> named_trainable();
  std::vector<Var<T>> trainable_parameters();
  std::uint64_t trainable_count();
  std::uint64_t total_count();

  /// Copies every tensor from `values` (name -> tensor). Missing or surplus
  /// names and shape mismatches throw ConfigError.
  void load_state(const std::map<std::string, Tensor<T>>& values);
  std::map<std::string, Tensor<T>> state();

  /// Replaces the base backbone weights (names "backbone/...") and rebuilds
  /// everything derived from them (batch shared matrices, member copies).
  void load_backbone(const std::map<std::string, Tensor<T>>& values);

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  std::vector<MemberState<T>>& member_states() { return member_states_; }
  const std::vector<MemberState<T>>& member_states() const { return member_states_; }

  /// Snapshot ensembles: a method=single network sharing this model's
  /// initial weights, trained live and copied into members.
  EnsembleVit make_snapshot_source() const;
  void store_snapshot(std::size_t member, const EnsembleVit& live);

 private:
  const Backbone<T>& backbone_for(std::size_t member) const;
  const Linear<T>& head_for(std::size_t member) const;
  void check_member(std::size_t member) const;
  void attach_adapters();
  void apply_trainability();

  ModelConfig cfg_;
  std::uint64_t seed_;
  Backbone<T> backbone_;
  std::vector<MemberState<T>> member_states_;
};

extern template class EnsembleVit<float>;
extern template class EnsembleVit<double>;

}  // namespace lens
