#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace lens {

/// Ensembling mechanism attached to the backbone.
enum class Method { single, lora, explicit_ensemble, batch, batch_pp, mc_dropout, snapshot, last_layer, epinet };

std::string to_string(Method m);
Method parse_method(const std::string& name);

/// How LoRA A matrices are drawn. B is always zero at construction.
struct InitSpec {
  enum class Kind { gaussian, xavier_uniform };
  Kind kind = Kind::xavier_uniform;
  double value = 10.0;  // std for gaussian, gain for xavier_uniform

  static InitSpec gaussian(double std) { return {Kind::gaussian, std}; }
  static InitSpec xavier_uniform(double gain) { return {Kind::xavier_uniform, gain}; }
};

std::string to_string(InitSpec::Kind k);
InitSpec::Kind parse_init_kind(const std::string& name);

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 5;
  std::size_t ensemble_size = 1;
  Method method = Method::single;
  std::size_t rank = 4;
  InitSpec init;
  double dropout_rate = 0.0;
  bool backbone_trainable = false;
  std::size_t epistemic_dim = 10;
  double prior_scale = 1.0;
  std::size_t epinet_hidden = 256;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t mlp_hidden() const;
  std::size_t head_dim() const { return embed_dim / num_heads; }

  /// Methods whose members share every parameter up to the classification head.
  bool shared_features() const;
  /// Methods storing a full backbone per member.
  bool per_member_backbone() const { return method == Method::explicit_ensemble || method == Method::snapshot; }

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  /// ViT-Base/32 geometry used for parameter accounting.
  static ModelConfig vit_base_32(std::size_t num_classes = 100);
};

enum class Schedule { warmup_cosine, warmup_exponential };
enum class OptimizerKind { adamw, sgd };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  std::size_t warmup_steps = 100;
  Schedule schedule = Schedule::warmup_cosine;
  double decay_factor = 0.94;
  std::size_t decay_every_epochs = 4;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double momentum = 0.9;
  double max_grad_norm = 1.0;
  double class_weight_beta = 0.0;
  std::size_t snapshot_burn_in = 15;

  void validate() const;
};

/// Everything a CLI run needs; serialized as one flat JSON object.
struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  ModelConfig model;
  TrainConfig train;
  std::string train_data;
  std::string test_data;
  std::string out_dir = "run";
  std::string backbone_checkpoint;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const {
    model.validate();
    train.validate();
  }
};

nlohmann::json to_json(const RunConfig& cfg);
/// Rejects unknown keys and a missing or mismatched schema_version.
RunConfig run_config_from_json(const nlohmann::json& j);

}  // namespace lens
