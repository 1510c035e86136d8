#include <doctest.h>

#include <filesystem>

#include "lens/errors.hpp"
#include "lens/io.hpp"
#include "lens/model_io.hpp"
#include "lens/vit.hpp"

using namespace lens;

namespace {

ModelConfig small(Method method, std::size_t members = 3) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 2;
  c.embed_dim = 8;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.num_classes = 3;
  c.method = method;
  c.ensemble_size = method == Method::single ? 1 : members;
  c.rank = 2;
  c.epistemic_dim = 2;
  c.epinet_hidden = 4;
  c.dropout_rate = method == Method::mc_dropout ? 0.2 : 0.0;
  return c;
}

Tensor<float> random_images(std::size_t b, const ModelConfig& c, std::uint64_t seed) {
  Tensor<float> t({b, c.image_size, c.image_size, c.channels});
  CounterRng rng(seed);
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

template <typename T>
Tensor<T> eval_logits(const EnsembleVit<T>& m, const Tensor<T>& images, std::size_t member) {
  Tape<T> tape(false);
  return m.logits(tape, images, member).value();
}

constexpr Method kAllMethods[] = {Method::single,     Method::lora,     Method::explicit_ensemble,
                                  Method::batch,      Method::batch_pp, Method::mc_dropout,
                                  Method::snapshot,   Method::last_layer, Method::epinet};

}  // namespace

TEST_CASE("patchify geometry and order") {
  Tensor<float> img({16, 16, 1});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(i);
  auto p = patchify(img, 4);
  CHECK(p.shape() == Shape{16, 16});
  // second patch starts at column 4 of row 0
  CHECK(p.at(1, 0) == 4.0f);
  CHECK(p.at(1, 4) == 20.0f);
  // fifth patch starts at row 4
  CHECK(p.at(4, 0) == 64.0f);

  Tensor<float> whole({8, 8, 3}, 1.5f);
  auto q = patchify(whole, 8);
  CHECK(q.shape() == Shape{1, 192});

  Tensor<float> constant({16, 16, 1}, 2.0f);
  auto c = patchify(constant, 4);
  for (std::size_t r = 1; r < c.rows(); ++r) {
    for (std::size_t j = 0; j < c.cols(); ++j) CHECK(c.at(r, j) == c.at(0, j));
  }
}

TEST_CASE("attention with zero projections returns the output bias") {
  auto cfg = small(Method::single);
  EnsembleVit<double> m(cfg, 3);
  auto& block = m.backbone().blocks[0];
  for (auto& slot : block.attn) slot.base.weight.mutable_value().fill(0.0);
  for (std::size_t j = 0; j < 8; ++j) block.attn[3].base.bias.mutable_value()[j] = 0.1 * static_cast<double>(j);
  Tape<double> tape(false);
  Tensor<double> x({2 * 5, 8});
  CounterRng rng(1);
  for (auto& v : x.data()) v = rng.normal();
  auto y = m.attention_forward(tape, Var<double>(x), 0, 0, 2).value();
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t j = 0; j < 8; ++j) CHECK(y.at(r, j) == doctest::Approx(0.1 * static_cast<double>(j)));
  }
}

TEST_CASE("single-token attention is the value-output chain") {
  auto cfg = small(Method::single);
  EnsembleVit<double> m(cfg, 4);
  const auto& block = m.backbone().blocks[1];
  Tensor<double> x({1, 8});
  CounterRng rng(2);
  for (auto& v : x.data()) v = rng.normal();
  Tape<double> tape(false);
  auto y = m.attention_forward(tape, Var<double>(x), 1, 0, 1).value();
  const auto& wv = block.attn[2].base;
  const auto& wo = block.attn[3].base;
  // reference: v = x Wv^T + bv, out = v Wo^T + bo
  Tensor<double> vv({1, 8}), out({1, 8});
  for (std::size_t k = 0; k < 8; ++k) {
    double s = wv.bias.value()[k];
    for (std::size_t j = 0; j < 8; ++j) s += x[j] * wv.weight.value().at(k, j);
    vv[k] = s;
  }
  for (std::size_t k = 0; k < 8; ++k) {
    double s = wo.bias.value()[k];
    for (std::size_t j = 0; j < 8; ++j) s += vv[j] * wo.weight.value().at(k, j);
    out[k] = s;
  }
  for (std::size_t k = 0; k < 8; ++k) CHECK(y[k] == doctest::Approx(out[k]).epsilon(1e-12));
}

TEST_CASE("forward shape and batch independence") {
  for (auto method : kAllMethods) {
    INFO(to_string(method));
    auto cfg = small(method);
    EnsembleVit<float> m(cfg, 5);
    auto images = random_images(4, cfg, 6);
    for (std::size_t b : {1u, 4u}) {
      Tensor<float> sub({b, 8, 8, 2});
      std::copy_n(images.raw(), sub.numel(), sub.raw());
      CHECK(eval_logits(m, sub, m.members() - 1).shape() == Shape{b, 3});
    }
    // reversing the batch reverses the logits
    Tensor<float> rev(images.shape());
    const std::size_t per = 8 * 8 * 2;
    for (std::size_t i = 0; i < 4; ++i) std::copy_n(images.raw() + (3 - i) * per, per, rev.raw() + i * per);
    auto a = eval_logits(m, images, 0);
    auto r = eval_logits(m, rev, 0);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(a.at(i, c) == doctest::Approx(r.at(3 - i, c)).epsilon(1e-5));
    }
  }
}

TEST_CASE("LoRA members with zero B match the plain backbone bitwise") {
  auto lora_cfg = small(Method::lora, 4);
  auto single_cfg = small(Method::single);
  EnsembleVit<float> lora(lora_cfg, 17);
  EnsembleVit<float> single(single_cfg, 17);
  auto images = random_images(3, lora_cfg, 8);
  Tape<float> tape(false);
  auto base = single.features(tape, images, 0).value();
  for (std::size_t i = 0; i < lora.members(); ++i) CHECK(lora.features(tape, images, i).value() == base);
}

TEST_CASE("identical head seeds give identical members at init") {
  auto cfg = small(Method::lora, 2);
  EnsembleVit<float> m(cfg, 1);
  auto& states = m.member_states();
  states[1].head->weight.mutable_value() = states[0].head->weight.value();
  states[1].head->bias.mutable_value() = states[0].head->bias.value();
  auto images = random_images(5, cfg, 2);
  CHECK(eval_logits(m, images, 0) == eval_logits(m, images, 1));
}

TEST_CASE("reference parameter counts for the ViT-Base/32 profile") {
  auto cfg = ModelConfig::vit_base_32(100);
  cfg.method = Method::lora;
  cfg.rank = 8;
  cfg.ensemble_size = 1;
  CHECK(count_parameters(cfg).trainable == 666724);
  cfg.rank = 128;
  CHECK(count_parameters(cfg).trainable == 9514084);
  cfg.rank = 8;
  cfg.ensemble_size = 16;
  const auto pc = count_parameters(cfg);
  CHECK(pc.trainable == 10667584);
  const double ratio = static_cast<double>(pc.total) / static_cast<double>(backbone_parameter_count(cfg));
  CHECK(std::round(ratio * 100) / 100 == doctest::Approx(1.12));
  cfg.ensemble_size = 1;
  CHECK(count_parameters(cfg).per_member_overhead == 666724);
}

TEST_CASE("closed-form counts match the instantiated model") {
  for (auto method : kAllMethods) {
    for (bool trainable_backbone : {false, true}) {
      INFO(to_string(method) << " backbone_trainable " << trainable_backbone);
      auto cfg = small(method);
      cfg.backbone_trainable = trainable_backbone;
      EnsembleVit<float> m(cfg, 9);
      const auto pc = count_parameters(cfg);
      CHECK(pc.total == m.total_count());
      if (method == Method::snapshot) {
        auto live = m.make_snapshot_source();
        CHECK(pc.trainable == live.trainable_count());
      } else {
        CHECK(pc.trainable == m.trainable_count());
      }
    }
  }
}

TEST_CASE("invalid configurations are rejected") {
  auto cfg = small(Method::lora);
  cfg.rank = 5;  // 2r > d
  CHECK_THROWS_AS(EnsembleVit<float>(cfg, 0), ConfigError);
  cfg = small(Method::single);
  cfg.image_size = 10;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small(Method::single);
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  for (auto method : kAllMethods) {
    INFO(to_string(method));
    auto cfg = small(method);
    EnsembleVit<float> m(cfg, 21);
    CounterRng rng(4);
    for (auto& [name, v] : m.named_tensors()) {
      for (auto& x : v.mutable_value().data()) x = static_cast<float>(rng.normal());
    }
    const auto path = std::filesystem::temp_directory_path() / ("lens_ckpt_" + to_string(method) + ".lens");
    save_model(path, m);
    EnsembleVit<float> loaded(cfg, 99);
    load_model(path, loaded);
    CHECK(loaded.state() == m.state());
    const auto bytes = read_file(path);
    CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);
    std::filesystem::remove(path);
  }
}

TEST_CASE("checkpoint decoding rejects malformed input") {
  NamedTensors recs{{"a", Tensor<float>({2}, {1.0f, 2.0f})}};
  const auto good = encode_checkpoint(recs);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 1)), ConfigError);
  CHECK_THROWS_AS(decode_checkpoint("NOPE" + good.substr(4)), ConfigError);
  NamedTensors dup{{"a", Tensor<float>({1})}, {"a", Tensor<float>({1})}};
  CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(dup)), ConfigError);
}

TEST_CASE("loading a state from another configuration fails") {
  EnsembleVit<float> lora(small(Method::lora, 2), 1);
  EnsembleVit<float> other(small(Method::lora, 3), 1);
  CHECK_THROWS_AS(other.load_state(lora.state()), ConfigError);
  auto s = lora.state();
  s.begin()->second = Tensor<float>({1});
  CHECK_THROWS_AS(lora.load_state(s), ConfigError);
}

TEST_CASE("load_backbone replaces the base weights of every member") {
  auto cfg = small(Method::explicit_ensemble, 2);
  EnsembleVit<float> donor(small(Method::single), 77);
  EnsembleVit<float> m(cfg, 1);
  std::map<std::string, Tensor<float>> values;
  for (auto& [k, v] : donor.state()) {
    if (k.starts_with("backbone/")) values.emplace(k, v);
  }
  m.load_backbone(values);
  CHECK(m.member_states()[1].backbone->cls_token.value() == donor.backbone().cls_token.value());
}
