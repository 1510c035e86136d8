#include <memory>

#include "lens/adapters.hpp"
#include "lens/gradcheck.hpp"
#include "lens/vit.hpp"

namespace lens {

namespace {

using D = double;
using Instance = std::pair<ScalarFn<D>, std::vector<Var<D>>>;

constexpr std::size_t kCoordsPerInput = 16;

Tensor<D> randn(const Shape& shape, CounterRng& rng, double scale = 1.0) {
  Tensor<D> t(shape);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

Var<D> leaf(const Shape& shape, CounterRng& rng, double scale = 1.0) { return Var<D>::parameter(randn(shape, rng, scale)); }

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
Var<D> reduce(Tape<D>& tape, const Var<D>& out, const Tensor<D>& weights) {
  return sum(tape, mul_const(tape, out, weights));
}

template <typename Build>
GradCheckCase unary(std::string name, Shape shape, Build build, double shift = 0.0) {
  return {std::move(name), [shape, build, shift](CounterRng& rng) -> Instance {
            auto x = leaf(shape, rng);
            if (shift != 0.0) {
              // keep inputs away from kinks
              for (auto& v : x.mutable_value().data()) v += v >= 0 ? shift : -shift;
            }
            Tape<D> probe(false);
            auto w = randn(build(probe, x).shape(), rng);
            return {[x, w, build](Tape<D>& t) { return reduce(t, build(t, x), w); }, {x}};
          }};
}

template <typename Build>
GradCheckCase binary(std::string name, Shape sa, Shape sb, Build build) {
  return {std::move(name), [sa, sb, build](CounterRng& rng) -> Instance {
            auto a = leaf(sa, rng);
            auto b = leaf(sb, rng);
            Tape<D> probe(false);
            auto w = randn(build(probe, a, b).shape(), rng);
            return {[a, b, w, build](Tape<D>& t) { return reduce(t, build(t, a, b), w); }, {a, b}};
          }};
}

ModelConfig tiny_config(Method method) {
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
  c.ensemble_size = method == Method::single ? 1 : 2;
  c.rank = 2;
  c.init = InitSpec::gaussian(0.5);
  c.epistemic_dim = 2;
  c.epinet_hidden = 4;
  if (method == Method::single) c.backbone_trainable = true;
  if (method == Method::mc_dropout) c.dropout_rate = 0.3;
  return c;
}

GradCheckCase vit_case(Method method, std::size_t member) {
  return {"vit_loss_" + to_string(method),
          [method, member](CounterRng& rng) -> Instance {
            auto model = std::make_shared<EnsembleVit<D>>(tiny_config(method), rng.next_u64());
            // LoRA B starts at zero, which would hide the A gradient.
            for (auto& [name, v] : model->named_trainable()) {
              if (name.ends_with("/B")) v.mutable_value() = randn(v.shape(), rng, 0.3);
            }
            auto images = randn(Shape{2, 8, 8, 2}, rng);
            std::vector<int> labels{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
            const std::uint64_t mask_seed = rng.next_u64();
            return {[model, images, labels, member, mask_seed](Tape<D>& t) {
                      CounterRng mask_rng(mask_seed);
                      ForwardOptions<D> opts;
                      opts.stochastic = model->config().method == Method::mc_dropout;
                      opts.rng = &mask_rng;
                      auto logits = model->logits(t, images, member, opts);
                      return cross_entropy(t, logits, std::span<const int>(labels));
                    },
                    model->trainable_parameters()};
          }};
}

}  // namespace

std::vector<GradCheckCase> gradcheck_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back(binary("matmul", {3, 4}, {4, 5}, [](Tape<D>& t, auto& a, auto& b) { return matmul(t, a, b); }));
  cases.push_back(binary("matmul_bt", {3, 4}, {5, 4}, [](Tape<D>& t, auto& a, auto& b) { return matmul_bt(t, a, b); }));
  cases.push_back(binary("add", {3, 4}, {3, 4}, [](Tape<D>& t, auto& a, auto& b) { return add(t, a, b); }));
  cases.push_back(binary("sub", {3, 4}, {3, 4}, [](Tape<D>& t, auto& a, auto& b) { return sub(t, a, b); }));
  cases.push_back(binary("mul", {3, 4}, {3, 4}, [](Tape<D>& t, auto& a, auto& b) { return mul(t, a, b); }));
  cases.push_back(unary("mul_const", {3, 4}, [](Tape<D>& t, const Var<D>& x) {
    Tensor<D> c(x.shape());
    for (std::size_t i = 0; i < c.numel(); ++i) c[i] = 0.5 + 0.25 * static_cast<double>(i % 5);
    return mul_const(t, x, c);
  }));
  cases.push_back(unary("scale", {3, 4}, [](Tape<D>& t, const Var<D>& x) { return scale(t, x, 0.7); }));
  cases.push_back(binary("add_rowvec", {3, 4}, {4}, [](Tape<D>& t, auto& a, auto& b) { return add_rowvec(t, a, b); }));
  cases.push_back(binary("add_tiled", {6, 4}, {3, 4}, [](Tape<D>& t, auto& a, auto& b) { return add_tiled(t, a, b); }));
  cases.push_back(binary("outer", {3}, {4}, [](Tape<D>& t, auto& a, auto& b) { return outer(t, a, b); }));
  cases.push_back(unary("softmax_rows", {3, 5}, [](Tape<D>& t, const Var<D>& x) { return softmax_rows(t, x); }));
  cases.push_back(unary("log_softmax_rows", {3, 5}, [](Tape<D>& t, const Var<D>& x) { return log_softmax_rows(t, x); }));
  cases.push_back({"layer_norm", [](CounterRng& rng) -> Instance {
                     auto x = leaf({3, 6}, rng), g = leaf({6}, rng), b = leaf({6}, rng);
                     auto w = randn({3, 6}, rng);
                     return {[x, g, b, w](Tape<D>& t) { return reduce(t, layer_norm(t, x, g, b), w); }, {x, g, b}};
                   }});
  cases.push_back(unary("gelu", {3, 5}, [](Tape<D>& t, const Var<D>& x) { return gelu(t, x); }));
  cases.push_back(unary("relu", {3, 5}, [](Tape<D>& t, const Var<D>& x) { return relu(t, x); }, 0.05));
  for (bool masked : {false, true}) {
    cases.push_back({masked ? "attention_core_masked" : "attention_core", [masked](CounterRng& rng) -> Instance {
                       auto q = leaf({6, 4}, rng), k = leaf({6, 4}, rng), v = leaf({6, 4}, rng);
                       Tensor<D> mask = masked ? dropout_mask<D>(Shape{2 * 2 * 3 * 3}, 0.3, rng) : Tensor<D>{};
                       auto w = randn({6, 4}, rng);
                       return {[q, k, v, w, mask](Tape<D>& t) {
                                 return reduce(t, attention_core(t, q, k, v, 2, 2, mask), w);
                               },
                               {q, k, v}};
                     }});
  }
  cases.push_back(binary("prepend_token", {6, 4}, {4},
                         [](Tape<D>& t, auto& a, auto& b) { return prepend_token(t, a, b, 2); }));
  cases.push_back(unary("take_rows", {5, 3}, [](Tape<D>& t, const Var<D>& x) {
    static const std::vector<std::size_t> rows{4, 0, 0, 2};
    return take_rows(t, x, rows);
  }));
  cases.push_back(binary("concat_cols", {3, 2}, {3, 4}, [](Tape<D>& t, auto& a, auto& b) { return concat_cols(t, a, b); }));
  cases.push_back(binary("contract_index", {3, 8}, {3, 2},
                         [](Tape<D>& t, auto& m, auto& z) { return contract_index(t, m, z, 4); }));
  cases.push_back(unary("reshape", {3, 4}, [](Tape<D>& t, const Var<D>& x) { return reshape(t, x, Shape{2, 6}); }));
  cases.push_back(unary("sum", {3, 4}, [](Tape<D>& t, const Var<D>& x) { return sum(t, x); }));
  cases.push_back(unary("mean", {3, 4}, [](Tape<D>& t, const Var<D>& x) { return mean(t, x); }));
  for (bool weighted : {false, true}) {
    cases.push_back({weighted ? "cross_entropy_weighted" : "cross_entropy", [weighted](CounterRng& rng) -> Instance {
                       auto x = leaf({4, 5}, rng);
                       std::vector<int> labels(4);
                       for (auto& y : labels) y = static_cast<int>(rng.below(5));
                       std::vector<D> w;
                       if (weighted) {
                         for (int c = 0; c < 5; ++c) w.push_back(0.5 + rng.uniform());
                       }
                       return {[x, labels, w](Tape<D>& t) {
                                 return cross_entropy(t, x, std::span<const int>(labels), std::span<const D>(w));
                               },
                               {x}};
                     }});
  }
  cases.push_back({"lora_forward", [](CounterRng& rng) -> Instance {
                     auto x = leaf({3, 6}, rng), w0 = leaf({4, 6}, rng), a = leaf({2, 6}, rng), b = leaf({4, 2}, rng);
                     auto w = randn({3, 4}, rng);
                     return {[x, w0, a, b, w](Tape<D>& t) { return reduce(t, lora_forward(t, x, w0, a, b), w); },
                             {x, w0, a, b}};
                   }});
  for (auto mode : {BatchMode::multiplicative, BatchMode::additive}) {
    cases.push_back({mode == BatchMode::multiplicative ? "batch_forward_multiplicative" : "batch_forward_additive",
                     [mode](CounterRng& rng) -> Instance {
                       auto adapter = make_batch_adapter<D>(randn({4, 6}, rng), 2, mode, rng.next_u64());
                       auto x = leaf({3, 6}, rng);
                       auto w = randn({3, 4}, rng);
                       return {[adapter, x, w](Tape<D>& t) { return reduce(t, batch_forward(t, x, adapter, 1), w); },
                               {x, adapter.shared, adapter.r[1], adapter.s[1]}};
                     }});
  }
  cases.push_back({"epinet_forward", [](CounterRng& rng) -> Instance {
                     auto member = make_epinet_member<D>(0, 5, 2, 3, 4, rng.next_u64());
                     for (auto& l : member.learnable.layers) {
                       l.weight.mutable_value() = randn(l.weight.shape(), rng, 0.5);
                       l.bias.mutable_value() = randn(l.bias.shape(), rng, 0.5);
                     }
                     // features are detached inside the epinet path, so they stay fixed here
                     Var<D> feats(randn({3, 5}, rng));
                     auto base = leaf({3, 3}, rng);
                     auto z = randn({3, 2}, rng);
                     auto w = randn({3, 3}, rng);
                     std::vector<Var<D>> inputs{base};
                     for (auto& l : member.learnable.layers) {
                       inputs.push_back(l.weight);
                       inputs.push_back(l.bias);
                     }
                     return {[member, feats, base, z, w](Tape<D>& t) {
                               return reduce(t, epinet_forward(t, feats, base, z, member, D(1)), w);
                             },
                             inputs};
                   }});
  for (auto m : {Method::single, Method::lora, Method::batch, Method::batch_pp, Method::explicit_ensemble,
                 Method::mc_dropout, Method::last_layer, Method::epinet}) {
    cases.push_back(vit_case(m, m == Method::single || m == Method::mc_dropout ? 0 : 1));
  }
  return cases;
}

std::vector<GradCheckResult> run_gradcheck_suite(const std::vector<GradCheckCase>& cases, std::size_t min_probes,
                                                 double tol, std::uint64_t seed, double h) {
  std::vector<GradCheckResult> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    CounterRng rng = CounterRng(seed).fork(c);
    GradCheckResult r{cases[c].name, 0.0, 0, false};
    for (std::size_t instance = 0; r.probes < min_probes; ++instance) {
      auto [fn, inputs] = cases[c].make(rng);
      const auto stats = grad_check_stats<D>(fn, inputs, h, kCoordsPerInput, rng.next_u64());
      if (stats.probes == 0) break;
      r.max_error = std::max(r.max_error, stats.max_error);
      r.probes += stats.probes;
    }
    r.passed = r.probes >= min_probes && r.max_error < tol;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lens
