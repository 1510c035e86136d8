#include "lens/config.hpp"

#include <array>
#include <cmath>
#include <set>
#include <utility>

#include "lens/errors.hpp"

namespace lens {

namespace {

constexpr std::array<std::pair<Method, const char*>, 9> kMethodNames{{
    {Method::single, "single"},
    {Method::lora, "lora"},
    {Method::explicit_ensemble, "explicit"},
    {Method::batch, "batch"},
    {Method::batch_pp, "batch_pp"},
    {Method::mc_dropout, "mc_dropout"},
    {Method::snapshot, "snapshot"},
    {Method::last_layer, "last_layer"},
    {Method::epinet, "epinet"},
}};

}  // namespace

std::string to_string(Method m) {
  for (const auto& [k, name] : kMethodNames) {
    if (k == m) return name;
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (const auto& [k, n] : kMethodNames) {
    if (name == n) return k;
  }
  throw ConfigError("unknown method '" + name + "'");
}

std::string to_string(InitSpec::Kind k) { return k == InitSpec::Kind::gaussian ? "gaussian" : "xavier_uniform"; }

InitSpec::Kind parse_init_kind(const std::string& name) {
  if (name == "gaussian") return InitSpec::Kind::gaussian;
  if (name == "xavier_uniform") return InitSpec::Kind::xavier_uniform;
  throw ConfigError("unknown init spec '" + name + "' (expected gaussian or xavier_uniform)");
}

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
}

bool ModelConfig::shared_features() const {
  return method == Method::single || method == Method::last_layer || method == Method::epinet;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (image_size == 0 || patch_size == 0 || channels == 0) fail("image_size, patch_size and channels must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim < 2) fail("embed_dim must be at least 2");
  if (depth == 0) fail("depth must be positive");
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    fail("num_heads " + std::to_string(num_heads) + " must divide embed_dim " + std::to_string(embed_dim));
  }
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) fail("mlp_ratio must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (ensemble_size == 0) fail("ensemble_size must be positive");
  if (method == Method::single && ensemble_size != 1) fail("method single requires ensemble_size 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0,1)");
  if (method == Method::lora) {
    if (rank == 0) fail("rank must be positive");
    // attention projections are square (k = d)
    if (2 * rank > embed_dim) {
      fail("rank " + std::to_string(rank) + " exceeds min(d,k)/2 = " + std::to_string(embed_dim / 2));
    }
    if (init.kind == InitSpec::Kind::gaussian && init.value < 0.0) fail("gaussian init std must be nonnegative");
  }
  if (method == Method::epinet && (epistemic_dim == 0 || epinet_hidden == 0)) {
    fail("epinet needs positive epistemic_dim and epinet_hidden");
  }
}

ModelConfig ModelConfig::vit_base_32(std::size_t num_classes) {
  ModelConfig c;
  c.image_size = 224;
  c.patch_size = 32;
  c.channels = 3;
  c.embed_dim = 768;
  c.depth = 12;
  c.num_heads = 12;
  c.mlp_ratio = 4.0;
  c.num_classes = num_classes;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (base_lr < 0.0) throw ConfigError("base_lr must be nonnegative");
  if (!(class_weight_beta >= 0.0 && class_weight_beta < 1.0)) throw ConfigError("class_weight_beta must lie in [0,1)");
  if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (schedule == Schedule::warmup_exponential && decay_every_epochs == 0) {
    throw ConfigError("decay_every_epochs must be positive");
  }
}

nlohmann::json to_json(const RunConfig& cfg) {
  const auto& m = cfg.model;
  const auto& t = cfg.train;
  return nlohmann::json{
      {"schema_version", RunConfig::kSchemaVersion},
      {"image_size", m.image_size},
      {"patch_size", m.patch_size},
      {"channels", m.channels},
      {"embed_dim", m.embed_dim},
      {"depth", m.depth},
      {"num_heads", m.num_heads},
      {"mlp_ratio", m.mlp_ratio},
      {"num_classes", m.num_classes},
      {"ensemble_size", m.ensemble_size},
      {"method", to_string(m.method)},
      {"rank", m.rank},
      {"init", to_string(m.init.kind)},
      {"init_value", m.init.value},
      {"dropout_rate", m.dropout_rate},
      {"backbone_trainable", m.backbone_trainable},
      {"epistemic_dim", m.epistemic_dim},
      {"prior_scale", m.prior_scale},
      {"epinet_hidden", m.epinet_hidden},
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"base_lr", t.base_lr},
      {"warmup_steps", t.warmup_steps},
      {"schedule", t.schedule == Schedule::warmup_cosine ? "warmup_cosine" : "warmup_exponential"},
      {"decay_factor", t.decay_factor},
      {"decay_every_epochs", t.decay_every_epochs},
      {"optimizer", t.optimizer == OptimizerKind::adamw ? "adamw" : "sgd"},
      {"beta1", t.beta1},
      {"beta2", t.beta2},
      {"adam_eps", t.adam_eps},
      {"weight_decay", t.weight_decay},
      {"momentum", t.momentum},
      {"max_grad_norm", t.max_grad_norm},
      {"class_weight_beta", t.class_weight_beta},
      {"snapshot_burn_in", t.snapshot_burn_in},
      {"train_data", cfg.train_data},
      {"test_data", cfg.test_data},
      {"out_dir", cfg.out_dir},
      {"backbone_checkpoint", cfg.backbone_checkpoint},
      {"seed", cfg.seed},
      {"jobs", cfg.jobs},
  };
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto reference = to_json(RunConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  if (!j.contains("schema_version") || j.at("schema_version") != RunConfig::kSchemaVersion) {
    throw ConfigError("config schema_version must be " + std::to_string(RunConfig::kSchemaVersion));
  }

  RunConfig cfg;
  auto& m = cfg.model;
  auto& t = cfg.train;
  try {
    auto get = [&j](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("image_size", m.image_size);
    get("patch_size", m.patch_size);
    get("channels", m.channels);
    get("embed_dim", m.embed_dim);
    get("depth", m.depth);
    get("num_heads", m.num_heads);
    get("mlp_ratio", m.mlp_ratio);
    get("num_classes", m.num_classes);
    get("ensemble_size", m.ensemble_size);
    if (j.contains("method")) m.method = parse_method(j.at("method").get<std::string>());
    get("rank", m.rank);
    if (j.contains("init")) m.init.kind = parse_init_kind(j.at("init").get<std::string>());
    get("init_value", m.init.value);
    get("dropout_rate", m.dropout_rate);
    get("backbone_trainable", m.backbone_trainable);
    get("epistemic_dim", m.epistemic_dim);
    get("prior_scale", m.prior_scale);
    get("epinet_hidden", m.epinet_hidden);
    get("epochs", t.epochs);
    get("batch_size", t.batch_size);
    get("base_lr", t.base_lr);
    get("warmup_steps", t.warmup_steps);
    if (j.contains("schedule")) {
      const auto s = j.at("schedule").get<std::string>();
      if (s == "warmup_cosine") {
        t.schedule = Schedule::warmup_cosine;
      } else if (s == "warmup_exponential") {
        t.schedule = Schedule::warmup_exponential;
      } else {
        throw ConfigError("unknown schedule '" + s + "'");
      }
    }
    get("decay_factor", t.decay_factor);
    get("decay_every_epochs", t.decay_every_epochs);
    if (j.contains("optimizer")) {
      const auto s = j.at("optimizer").get<std::string>();
      if (s == "adamw") {
        t.optimizer = OptimizerKind::adamw;
      } else if (s == "sgd") {
        t.optimizer = OptimizerKind::sgd;
      } else {
        throw ConfigError("unknown optimizer '" + s + "'");
      }
    }
    get("beta1", t.beta1);
    get("beta2", t.beta2);
    get("adam_eps", t.adam_eps);
    get("weight_decay", t.weight_decay);
    get("momentum", t.momentum);
    get("max_grad_norm", t.max_grad_norm);
    get("class_weight_beta", t.class_weight_beta);
    get("snapshot_burn_in", t.snapshot_burn_in);
    get("train_data", cfg.train_data);
    get("test_data", cfg.test_data);
    get("out_dir", cfg.out_dir);
    get("backbone_checkpoint", cfg.backbone_checkpoint);
    get("seed", cfg.seed);
    get("jobs", cfg.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace lens
