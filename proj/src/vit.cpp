#include "lens/vit.hpp"

#include <set>

#include "lens/errors.hpp"

namespace lens {

namespace {

constexpr std::uint64_t kBackboneTag = 0xBAC0;
constexpr std::uint64_t kHeadTag = 0x4EAD;
constexpr std::uint64_t kEpistemicTag = 0xE215;

std::uint64_t slot_tag(std::size_t layer, Role role) { return layer * 4 + static_cast<std::size_t>(role) + 1; }

}  // namespace

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch_size) {
  if (images.rank() != 3 && images.rank() != 4) {
    throw DimensionError("patchify: expected [H,W,ch] or [B,H,W,ch], got " + shape_string(images.shape()));
  }
  const bool batched = images.rank() == 4;
  const std::size_t b = batched ? images.dim(0) : 1;
  const std::size_t h = images.dim(batched ? 1 : 0), w = images.dim(batched ? 2 : 1), ch = images.dim(batched ? 3 : 2);
  if (patch_size == 0 || h % patch_size != 0 || w % patch_size != 0) {
    throw ConfigError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
  const std::size_t gh = h / patch_size, gw = w / patch_size, pd = patch_size * patch_size * ch;
  Tensor<T> out(Shape{b * gh * gw, pd});
  T* dst = out.raw();
  for (std::size_t n = 0; n < b; ++n) {
    const T* img = images.raw() + n * h * w * ch;
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        for (std::size_t y = 0; y < patch_size; ++y) {
          const T* src = img + ((py * patch_size + y) * w + px * patch_size) * ch;
          dst = std::copy_n(src, patch_size * ch, dst);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
Backbone<T> Backbone<T>::init(const ModelConfig& cfg, CounterRng& rng) {
  const std::size_t d = cfg.embed_dim;
  Backbone bb;
  bb.patch_embed = make_xavier_linear<T>(cfg.patch_dim(), d, 1.0, rng);
  Tensor<T> cls(Shape{d}), pos(Shape{cfg.seq_len(), d});
  for (auto& v : cls.data()) v = static_cast<T>(rng.normal(0.0, 0.02));
  for (auto& v : pos.data()) v = static_cast<T>(rng.normal(0.0, 0.02));
  bb.cls_token = Var<T>::parameter(std::move(cls));
  bb.pos_embed = Var<T>::parameter(std::move(pos));
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    EncoderBlock<T> blk;
    blk.norm1_gamma = Var<T>::parameter(Tensor<T>::ones(Shape{d}));
    blk.norm1_beta = Var<T>::parameter(Tensor<T>::zeros(Shape{d}));
    for (auto role : kRoles) {
      auto& slot = blk.attn[static_cast<std::size_t>(role)];
      slot.role = role;
      slot.base = make_xavier_linear<T>(d, d, 1.0, rng);
    }
    blk.norm2_gamma = Var<T>::parameter(Tensor<T>::ones(Shape{d}));
    blk.norm2_beta = Var<T>::parameter(Tensor<T>::zeros(Shape{d}));
    blk.fc1 = make_xavier_linear<T>(d, cfg.mlp_hidden(), 1.0, rng);
    blk.fc2 = make_xavier_linear<T>(cfg.mlp_hidden(), d, 1.0, rng);
    bb.blocks.push_back(std::move(blk));
  }
  bb.norm_gamma = Var<T>::parameter(Tensor<T>::ones(Shape{d}));
  bb.norm_beta = Var<T>::parameter(Tensor<T>::zeros(Shape{d}));
  return bb;
}

template <typename T>
Backbone<T> Backbone<T>::clone_weights() const {
  Backbone out;
  out.patch_embed = patch_embed.clone();
  out.cls_token = cls_token.clone();
  out.pos_embed = pos_embed.clone();
  for (const auto& blk : blocks) {
    EncoderBlock<T> c;
    c.norm1_gamma = blk.norm1_gamma.clone();
    c.norm1_beta = blk.norm1_beta.clone();
    for (std::size_t r = 0; r < 4; ++r) {
      c.attn[r].role = blk.attn[r].role;
      c.attn[r].base = blk.attn[r].base.clone();
    }
    c.norm2_gamma = blk.norm2_gamma.clone();
    c.norm2_beta = blk.norm2_beta.clone();
    c.fc1 = blk.fc1.clone();
    c.fc2 = blk.fc2.clone();
    out.blocks.push_back(std::move(c));
  }
  out.norm_gamma = norm_gamma.clone();
  out.norm_beta = norm_beta.clone();
  return out;
}

template <typename T>
void Backbone<T>::visit(const std::string& prefix, const std::function<void(const std::string&, Var<T>&)>& fn) {
  fn(prefix + "patch_embed/weight", patch_embed.weight);
  fn(prefix + "patch_embed/bias", patch_embed.bias);
  fn(prefix + "cls_token", cls_token);
  fn(prefix + "pos_embed", pos_embed);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& blk = blocks[l];
    const std::string p = prefix + "layer" + std::to_string(l) + "/";
    fn(p + "norm1/gamma", blk.norm1_gamma);
    fn(p + "norm1/beta", blk.norm1_beta);
    for (auto role : kRoles) {
      auto& slot = blk.attn[static_cast<std::size_t>(role)];
      fn(p + role_name(role) + "/weight", slot.base.weight);
      fn(p + role_name(role) + "/bias", slot.base.bias);
    }
    fn(p + "norm2/gamma", blk.norm2_gamma);
    fn(p + "norm2/beta", blk.norm2_beta);
    fn(p + "fc1/weight", blk.fc1.weight);
    fn(p + "fc1/bias", blk.fc1.bias);
    fn(p + "fc2/weight", blk.fc2.weight);
    fn(p + "fc2/bias", blk.fc2.bias);
  }
  fn(prefix + "norm/gamma", norm_gamma);
  fn(prefix + "norm/beta", norm_beta);
}

template <typename T>
void Backbone<T>::set_trainable(bool on) {
  visit("", [on](const std::string&, Var<T>& v) { v.set_requires_grad(on); });
}

// ---------------------------------------------------------------------------
// Parameter accounting

std::uint64_t backbone_parameter_count(const ModelConfig& cfg) {
  const std::uint64_t d = cfg.embed_dim, h = cfg.mlp_hidden(), pd = cfg.patch_dim(), t = cfg.seq_len();
  const std::uint64_t block = 2 * (2 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d);
  return (pd * d + d) + d + t * d + cfg.depth * block + 2 * d;
}

ParameterCount count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t d = cfg.embed_dim, c = cfg.num_classes, n = cfg.ensemble_size, layers = cfg.depth;
  const std::uint64_t backbone = backbone_parameter_count(cfg);
  const std::uint64_t head = d * c + c;
  const std::uint64_t backbone_trainable = cfg.backbone_trainable ? backbone : 0;
  ParameterCount pc;
  switch (cfg.method) {
    case Method::single:
    case Method::mc_dropout:
      pc.total = backbone + head;
      pc.trainable = head + backbone_trainable;
      pc.per_member_overhead = 0;
      break;
    case Method::lora: {
      // attention projections are square, so k = d
      const std::uint64_t member = layers * 4 * (cfg.rank * d + d * cfg.rank) + head;
      pc.total = backbone + n * member;
      pc.trainable = n * member + backbone_trainable;
      pc.per_member_overhead = member;
      break;
    }
    case Method::explicit_ensemble:
      pc.total = backbone + n * (backbone + head);
      pc.trainable = n * (backbone + head);
      pc.per_member_overhead = backbone + head;
      break;
    case Method::batch:
    case Method::batch_pp: {
      const std::uint64_t shared = layers * 4 * d * d;
      const std::uint64_t member = layers * 4 * (d + d) + head;
      pc.total = backbone + shared + n * member;
      // the frozen W0 copies are replaced by the shared matrices
      pc.trainable = shared + n * member + (cfg.backbone_trainable ? backbone - shared : 0);
      pc.per_member_overhead = member;
      break;
    }
    case Method::snapshot:
      pc.total = backbone + n * (backbone + head);
      pc.trainable = head + backbone_trainable;
      pc.per_member_overhead = backbone + head;
      break;
    case Method::last_layer:
      pc.total = backbone + n * head;
      pc.trainable = n * head + backbone_trainable;
      pc.per_member_overhead = head;
      break;
    case Method::epinet: {
      const std::uint64_t hid = cfg.epinet_hidden, dz = cfg.epistemic_dim;
      const std::uint64_t mlp = (d + dz) * hid + hid + hid * hid + hid + hid * dz * c + dz * c;
      pc.total = backbone + head + 2 * n * mlp;
      pc.trainable = head + n * mlp + backbone_trainable;
      pc.per_member_overhead = 2 * mlp;
      break;
    }
  }
  return pc;
}

// ---------------------------------------------------------------------------
// EnsembleVit

template <typename T>
EnsembleVit<T>::EnsembleVit(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
  cfg_.validate();
  auto rng = CounterRng(seed_).fork(kBackboneTag);
  backbone_ = Backbone<T>::init(cfg_, rng);

  const std::size_t n = cfg_.ensemble_size, d = cfg_.embed_dim, c = cfg_.num_classes;
  member_states_.resize(n);
  switch (cfg_.method) {
    case Method::single:
    case Method::mc_dropout:
    case Method::epinet: {
      auto head_rng = CounterRng(member_seed(seed_, 0)).fork(kHeadTag);
      member_states_[0].head = make_gaussian_linear<T>(d, c, 0.01, head_rng);
      break;
    }
    case Method::last_layer: {
      auto heads = make_last_layer_heads<T>(n, d, c);
      for (std::size_t i = 0; i < n; ++i) member_states_[i].head = std::move(heads[i]);
      break;
    }
    case Method::snapshot: {
      auto head_rng = CounterRng(member_seed(seed_, 0)).fork(kHeadTag);
      const auto head = make_gaussian_linear<T>(d, c, 0.01, head_rng);
      for (auto& m : member_states_) {
        m.backbone = backbone_.clone_weights();
        m.head = head.clone();
      }
      break;
    }
    default:
      for (std::size_t i = 0; i < n; ++i) {
        auto head_rng = CounterRng(member_seed(seed_, i)).fork(kHeadTag);
        member_states_[i].head = make_gaussian_linear<T>(d, c, 0.01, head_rng);
        if (cfg_.method == Method::explicit_ensemble) member_states_[i].backbone = backbone_.clone_weights();
      }
  }
  if (cfg_.method == Method::epinet) {
    for (std::size_t i = 0; i < n; ++i) {
      member_states_[i].epinet =
          make_epinet_member<T>(i, d, cfg_.epistemic_dim, c, cfg_.epinet_hidden, seed_);
    }
  }
  attach_adapters();
  apply_trainability();
}

template <typename T>
void EnsembleVit<T>::attach_adapters() {
  const std::size_t n = cfg_.ensemble_size, d = cfg_.embed_dim;
  for (std::size_t l = 0; l < backbone_.blocks.size(); ++l) {
    for (auto role : kRoles) {
      auto& slot = backbone_.blocks[l].attn[static_cast<std::size_t>(role)];
      slot.lora.reset();
      slot.batch.reset();
      if (cfg_.method == Method::lora) {
        LoraAdapter<T> adapter(n, cfg_.rank, d, d);
        lora_init(adapter, cfg_.init, seed_, slot_tag(l, role));
        slot.lora = std::move(adapter);
      } else if (cfg_.method == Method::batch || cfg_.method == Method::batch_pp) {
        const auto mode = cfg_.method == Method::batch ? BatchMode::multiplicative : BatchMode::additive;
        slot.batch = make_batch_adapter(slot.base.weight.value(), n, mode, seed_, slot_tag(l, role));
      }
    }
  }
}

template <typename T>
void EnsembleVit<T>::apply_trainability() {
  const bool per_member = cfg_.per_member_backbone();
  backbone_.set_trainable(cfg_.backbone_trainable && !per_member);
  if (cfg_.method == Method::batch || cfg_.method == Method::batch_pp) {
    for (auto& blk : backbone_.blocks) {
      for (auto& slot : blk.attn) slot.base.weight.set_requires_grad(false);
    }
  }
  for (auto& m : member_states_) {
    if (m.backbone) {
      m.backbone->set_trainable(cfg_.method == Method::explicit_ensemble || cfg_.backbone_trainable);
    }
    if (m.head) m.head->set_trainable(true);
    if (m.epinet) {
      for (auto& l : m.epinet->learnable.layers) l.set_trainable(true);
      for (auto& l : m.epinet->prior.layers) l.set_trainable(false);
    }
  }
  // Snapshot members are frozen copies; only the live source trains.
  if (cfg_.method == Method::snapshot) {
    for (auto& m : member_states_) {
      m.backbone->set_trainable(false);
      m.head->set_trainable(false);
    }
  }
}

template <typename T>
void EnsembleVit<T>::check_member(std::size_t member) const {
  if (member >= cfg_.ensemble_size) {
    throw IndexError("member " + std::to_string(member) + " out of range for ensemble of " +
                     std::to_string(cfg_.ensemble_size));
  }
}

template <typename T>
const Backbone<T>& EnsembleVit<T>::backbone_for(std::size_t member) const {
  const auto& m = member_states_[member];
  return m.backbone ? *m.backbone : backbone_;
}

template <typename T>
const Linear<T>& EnsembleVit<T>::head_for(std::size_t member) const {
  const auto& m = member_states_[member];
  return m.head ? *m.head : *member_states_[0].head;
}

template <typename T>
Var<T> EnsembleVit<T>::embed(Tape<T>& tape, const Tensor<T>& images, const Backbone<T>& bb) const {
  if (images.rank() != 4 || images.dim(1) != cfg_.image_size || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.channels) {
    throw DimensionError("expected images [B," + std::to_string(cfg_.image_size) + "," +
                         std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.channels) + "], got " +
                         shape_string(images.shape()));
  }
  const std::size_t batch = images.dim(0);
  Var<T> patches(patchify(images, cfg_.patch_size));
  auto x = linear_forward(tape, patches, bb.patch_embed);
  x = prepend_token(tape, x, bb.cls_token, batch);
  return add_tiled(tape, x, bb.pos_embed);
}

template <typename T>
Var<T> EnsembleVit<T>::attention_forward(Tape<T>& tape, const Var<T>& x, std::size_t layer, std::size_t member,
                                         std::size_t batch, const ForwardOptions<T>& opts) const {
  check_member(member);
  const auto& bb = backbone_for(member);
  if (layer >= bb.blocks.size()) throw IndexError("layer " + std::to_string(layer) + " out of range");
  const auto& slots = bb.blocks[layer].attn;
  auto q = project(tape, x, slots[0], member);
  auto k = project(tape, x, slots[1], member);
  auto v = project(tape, x, slots[2], member);
  Tensor<T> mask;
  const double rate = opts.dropout_rate.value_or(cfg_.dropout_rate);
  if (opts.stochastic && rate > 0.0) {
    if (!opts.rng) throw ContractError("stochastic forward requires an rng");
    const std::size_t t = x.shape()[0] / batch;
    mask = dropout_mask<T>(Shape{batch * cfg_.num_heads * t * t}, rate, *opts.rng);
  }
  auto attn = attention_core(tape, q, k, v, batch, cfg_.num_heads, mask);
  return project(tape, attn, slots[3], member);
}

template <typename T>
Var<T> EnsembleVit<T>::features(Tape<T>& tape, const Tensor<T>& images, std::size_t member,
                                const ForwardOptions<T>& opts) const {
  check_member(member);
  const auto& bb = backbone_for(member);
  const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
  auto x = embed(tape, images, bb);
  const double rate = opts.dropout_rate.value_or(cfg_.dropout_rate);
  const bool drop = opts.stochastic && rate > 0.0;
  if (drop && !opts.rng) throw ContractError("stochastic forward requires an rng");
  for (std::size_t l = 0; l < bb.blocks.size(); ++l) {
    const auto& blk = bb.blocks[l];
    auto h = layer_norm(tape, x, blk.norm1_gamma, blk.norm1_beta);
    x = add(tape, x, attention_forward(tape, h, l, member, batch, opts));
    h = layer_norm(tape, x, blk.norm2_gamma, blk.norm2_beta);
    h = gelu(tape, linear_forward(tape, h, blk.fc1));
    if (drop) h = mul_const(tape, h, dropout_mask<T>(h.shape(), rate, *opts.rng));
    x = add(tape, x, linear_forward(tape, h, blk.fc2));
  }
  x = layer_norm(tape, x, bb.norm_gamma, bb.norm_beta);
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * cfg_.seq_len();
  return take_rows(tape, x, cls_rows);
}

template <typename T>
Tensor<T> EnsembleVit<T>::member_epistemic_index(std::size_t member, std::size_t batch) const {
  check_member(member);
  auto rng = CounterRng(member_seed(seed_, member)).fork(kEpistemicTag);
  std::vector<T> z(cfg_.epistemic_dim);
  for (auto& v : z) v = static_cast<T>(rng.normal());
  Tensor<T> out(Shape{batch, cfg_.epistemic_dim});
  for (std::size_t b = 0; b < batch; ++b) std::copy(z.begin(), z.end(), out.raw() + b * z.size());
  return out;
}

template <typename T>
Var<T> EnsembleVit<T>::head_logits(Tape<T>& tape, const Var<T>& feats, std::size_t member,
                                   const ForwardOptions<T>& opts) const {
  check_member(member);
  auto base = linear_forward(tape, feats, head_for(member));
  if (cfg_.method != Method::epinet) return base;
  const std::size_t batch = feats.shape()[0];
  if (opts.epistemic_z) {
    return epinet_forward(tape, feats, base, *opts.epistemic_z, *member_states_[member].epinet,
                          static_cast<T>(cfg_.prior_scale));
  }
  return epinet_forward(tape, feats, base, member_epistemic_index(member, batch), *member_states_[member].epinet,
                        static_cast<T>(cfg_.prior_scale));
}

template <typename T>
Var<T> EnsembleVit<T>::logits(Tape<T>& tape, const Tensor<T>& images, std::size_t member,
                              const ForwardOptions<T>& opts) const {
  return head_logits(tape, features(tape, images, member, opts), member, opts);
}

template <typename T>
std::vector<std::pair<std::string, Var<T>>> EnsembleVit<T>::named_tensors() {
  std::vector<std::pair<std::string, Var<T>>> out;
  auto push = [&out](const std::string& name, Var<T>& v) { out.emplace_back(name, v); };
  backbone_.visit("backbone/", push);
  if (cfg_.method == Method::batch || cfg_.method == Method::batch_pp) {
    for (std::size_t l = 0; l < backbone_.blocks.size(); ++l) {
      for (auto role : kRoles) {
        auto& slot = backbone_.blocks[l].attn[static_cast<std::size_t>(role)];
        out.emplace_back("shared/layer" + std::to_string(l) + "/" + role_name(role) + "/W", slot.batch->shared);
      }
    }
  }
  for (std::size_t i = 0; i < member_states_.size(); ++i) {
    const std::string m = "member" + std::to_string(i) + "/";
    for (std::size_t l = 0; l < backbone_.blocks.size(); ++l) {
      for (auto role : kRoles) {
        auto& slot = backbone_.blocks[l].attn[static_cast<std::size_t>(role)];
        const std::string p = m + "layer" + std::to_string(l) + "/" + role_name(role) + "/";
        if (slot.lora) {
          out.emplace_back(p + "A", slot.lora->a[i]);
          out.emplace_back(p + "B", slot.lora->b[i]);
        }
        if (slot.batch) {
          out.emplace_back(p + "r", slot.batch->r[i]);
          out.emplace_back(p + "s", slot.batch->s[i]);
        }
      }
    }
    auto& ms = member_states_[i];
    if (ms.backbone) ms.backbone->visit(m + "backbone/", push);
    if (ms.head) {
      out.emplace_back(m + "head/weight", ms.head->weight);
      out.emplace_back(m + "head/bias", ms.head->bias);
    }
    if (ms.epinet) {
      for (std::size_t j = 0; j < ms.epinet->learnable.layers.size(); ++j) {
        auto& layer = ms.epinet->learnable.layers[j];
        out.emplace_back(m + "epinet/learnable/fc" + std::to_string(j) + "/weight", layer.weight);
        out.emplace_back(m + "epinet/learnable/fc" + std::to_string(j) + "/bias", layer.bias);
      }
      for (std::size_t j = 0; j < ms.epinet->prior.layers.size(); ++j) {
        auto& layer = ms.epinet->prior.layers[j];
        out.emplace_back(m + "epinet/prior/fc" + std::to_string(j) + "/weight", layer.weight);
        out.emplace_back(m + "epinet/prior/fc" + std::to_string(j) + "/bias", layer.bias);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Var<T>>> EnsembleVit<T>::named_trainable() {
  auto all = named_tensors();
  std::vector<std::pair<std::string, Var<T>>> out;
  for (auto& nv : all) {
    if (nv.second.requires_grad()) out.push_back(std::move(nv));
  }
  return out;
}

template <typename T>
std::vector<Var<T>> EnsembleVit<T>::trainable_parameters() {
  std::vector<Var<T>> out;
  for (auto& [name, v] : named_trainable()) out.push_back(v);
  return out;
}

template <typename T>
std::uint64_t EnsembleVit<T>::trainable_count() {
  std::uint64_t n = 0;
  for (auto& [name, v] : named_trainable()) n += v.numel();
  return n;
}

template <typename T>
std::uint64_t EnsembleVit<T>::total_count() {
  std::uint64_t n = 0;
  for (auto& [name, v] : named_tensors()) n += v.numel();
  return n;
}

template <typename T>
std::map<std::string, Tensor<T>> EnsembleVit<T>::state() {
  std::map<std::string, Tensor<T>> out;
  for (auto& [name, v] : named_tensors()) out.emplace(name, v.value());
  return out;
}

template <typename T>
void EnsembleVit<T>::load_state(const std::map<std::string, Tensor<T>>& values) {
  auto named = named_tensors();
  if (named.size() != values.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(values.size()) + " tensors, model expects " +
                      std::to_string(named.size()));
  }
  for (auto& [name, v] : named) {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != v.shape()) {
      throw ConfigError("tensor '" + name + "' has shape " + shape_string(it->second.shape()) + ", model expects " +
                        shape_string(v.shape()));
    }
    v.mutable_value() = it->second;
  }
}

template <typename T>
void EnsembleVit<T>::load_backbone(const std::map<std::string, Tensor<T>>& values) {
  backbone_.visit("backbone/", [&values](const std::string& name, Var<T>& v) {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("backbone checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != v.shape()) {
      throw ConfigError("backbone tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                        ", model expects " + shape_string(v.shape()));
    }
    v.mutable_value() = it->second;
  });
  for (auto& m : member_states_) {
    if (m.backbone) m.backbone = backbone_.clone_weights();
  }
  if (cfg_.method == Method::batch || cfg_.method == Method::batch_pp) attach_adapters();
  apply_trainability();
}

template <typename T>
EnsembleVit<T> EnsembleVit<T>::make_snapshot_source() const {
  if (cfg_.method != Method::snapshot) throw ContractError("make_snapshot_source requires method snapshot");
  ModelConfig live_cfg = cfg_;
  live_cfg.method = Method::single;
  live_cfg.ensemble_size = 1;
  EnsembleVit live(live_cfg, seed_);
  live.backbone_ = backbone_.clone_weights();
  live.member_states_[0].head = member_states_[0].head->clone();
  live.apply_trainability();
  return live;
}

template <typename T>
void EnsembleVit<T>::store_snapshot(std::size_t member, const EnsembleVit& live) {
  check_member(member);
  if (cfg_.method != Method::snapshot) throw ContractError("store_snapshot requires method snapshot");
  member_states_[member].backbone = live.backbone_.clone_weights();
  member_states_[member].head = live.member_states_[0].head->clone();
  apply_trainability();
}

template Tensor<float> patchify<float>(const Tensor<float>&, std::size_t);
template Tensor<double> patchify<double>(const Tensor<double>&, std::size_t);
template struct Backbone<float>;
template struct Backbone<double>;
template class EnsembleVit<float>;
template class EnsembleVit<double>;

}  // namespace lens
