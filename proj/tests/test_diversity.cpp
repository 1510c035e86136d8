#include <doctest.h>

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "lens/diversity.hpp"
#include "lens/errors.hpp"
#include "lens/linalg.hpp"

using namespace lens;

namespace {

Tensor<double> randn(const Shape& s, CounterRng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Eigen::MatrixXd to_eigen(const Tensor<double>& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m(r, c) = t.at(r, c);
  }
  return m;
}

Tensor<double> column(const Tensor<double>& m, std::size_t c) {
  Tensor<double> v({m.dim(0)});
  for (std::size_t r = 0; r < m.dim(0); ++r) v[r] = m.at(r, c);
  return v;
}

/// W + c * u v^T
Tensor<double> add_rank_one(const Tensor<double>& w, const Tensor<double>& u, const Tensor<double>& v, double c) {
  Tensor<double> out = w;
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    for (std::size_t k = 0; k < w.dim(1); ++k) out.at(r, k) += c * u[r] * v[k];
  }
  return out;
}

}  // namespace

TEST_CASE("Jacobi SVD agrees with Eigen") {
  CounterRng rng(1);
  for (auto shape : {Shape{12, 7}, Shape{7, 12}, Shape{16, 16}, Shape{1, 5}}) {
    const auto a = randn(shape, rng);
    const auto svd = svd_jacobi(a);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(to_eigen(a));
    const auto& sv = ref.singularValues();
    REQUIRE(svd.s.numel() == static_cast<std::size_t>(sv.size()));
    for (std::size_t i = 0; i < svd.s.numel(); ++i) CHECK(svd.s[i] == doctest::Approx(sv(i)).epsilon(1e-10));
    CHECK(max_abs_diff(svd_reconstruct(svd), a) < 1e-10);
    const Eigen::MatrixXd u = to_eigen(svd.u), v = to_eigen(svd.v);
    const auto k = static_cast<Eigen::Index>(svd.s.numel());
    CHECK((u.transpose() * u - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((v.transpose() * v - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("Jacobi SVD on rank-deficient input keeps orthonormal factors") {
  CounterRng rng(2);
  auto u = randn({10}, rng), v = randn({6}, rng);
  const auto a = add_rank_one(Tensor<double>({10, 6}), u, v, 1.0);
  const auto svd = svd_jacobi(a);
  CHECK(svd.s[1] < 1e-12);
  CHECK(max_abs_diff(svd_reconstruct(svd), a) < 1e-5);
  const Eigen::MatrixXd uu = to_eigen(svd.u);
  CHECK((uu.transpose() * uu - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("intruder dimensions") {
  CounterRng rng(3);
  const auto w = randn({32, 32}, rng);
  const auto same = svd_intruder_analysis(w, w);
  CHECK(same.count == 0);
  for (std::size_t i = 0; i < same.similarity.dim(0); ++i) CHECK(same.similarity.at(i, i) == doctest::Approx(1.0));

  Tensor<double> doubled = w;
  for (auto& x : doubled.data()) x *= 2;
  CHECK(svd_intruder_analysis(w, doubled).count == 0);

  // lift a direction outside the top-16 subspace above the largest singular value
  const auto svd = svd_jacobi(w);
  const auto u = column(svd.u, 24), v = column(svd.v, 24);
  const auto spiked = add_rank_one(w, u, v, 2.0 * svd.s[0]);
  const auto r = svd_intruder_analysis(w, spiked);
  CHECK(r.count >= 1);
  CHECK(r.intruders.front() == 0);
}

TEST_CASE("singular vector similarity") {
  CounterRng rng(4);
  const auto w = randn({12, 10}, rng);
  const std::vector<std::vector<Tensor<double>>> identical{{w}, {w}, {w}};
  const auto s = singular_vector_similarity(identical, 4);
  CHECK(s.shape() == Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.at(i, i) == doctest::Approx(1.0));

  Tensor<double> flipped = w;
  for (auto& x : flipped.data()) x = -x;
  const auto f = singular_vector_similarity({{w}, {flipped}}, 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.at(i, i) == doctest::Approx(1.0));

  // each member dominated by its own orthogonal spike
  Tensor<double> e1({12}), e2({12});
  e1[0] = 1;
  e2[1] = 1;
  auto noise_a = randn({12, 10}, rng), noise_b = randn({12, 10}, rng);
  for (auto& x : noise_a.data()) x *= 0.01;
  for (auto& x : noise_b.data()) x *= 0.01;
  const auto a = add_rank_one(noise_a, e1, randn({10}, rng), 10.0);
  const auto b = add_rank_one(noise_b, e2, randn({10}, rng), 10.0);
  CHECK(singular_vector_similarity({{a}, {b}}, 4).at(0, 0) < 0.05);
}

TEST_CASE("diversity score") {
  CounterRng rng(5);
  const auto w = randn({16, 16}, rng);
  CHECK(diversity_score({{w}, {w}}) == doctest::Approx(0.0).epsilon(1e-12));
  std::vector<std::vector<Tensor<double>>> independent;
  for (int i = 0; i < 4; ++i) independent.push_back({randn({64, 64}, rng), randn({64, 64}, rng)});
  CHECK(diversity_score(independent) == doctest::Approx(1.0).epsilon(0.03));
  // zero-variance members carry no correlation information
  CHECK(diversity_score({{Tensor<double>({4, 4})}, {Tensor<double>({4, 4})}}) == 0.0);
}

TEST_CASE("disagreement and JSD") {
  const std::vector<int> a{0, 1, 2, 3}, b{1, 0, 3, 2}, c{0, 1, 3, 2};
  CHECK(disagreement_rate(a, a) == 0.0);
  CHECK(disagreement_rate(a, b) == 1.0);
  CHECK(disagreement_rate(a, c) == 0.5);

  const std::vector<double> p{0.2, 0.5, 0.3};
  CHECK(jsd(p, p) == 0.0);
  CHECK(jsd(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == doctest::Approx(std::numbers::ln2));
  CounterRng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(5), y(5);
    double sx = 0, sy = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      sx += (x[i] = rng.uniform());
      sy += (y[i] = rng.uniform());
    }
    for (std::size_t i = 0; i < 5; ++i) {
      x[i] /= sx;
      y[i] /= sy;
    }
    CHECK(jsd(x, y) == doctest::Approx(jsd(y, x)).epsilon(1e-14));
    CHECK(jsd(x, y) >= 0.0);
    CHECK(jsd(x, y) <= std::numbers::ln2 + 1e-15);
  }
  CHECK_THROWS_AS(jsd(std::vector<double>{0.5, 0.6}, std::vector<double>{0.5, 0.5}), DomainError);
}

TEST_CASE("function-space export and summary") {
  CounterRng rng(7);
  const std::size_t n = 3, s = 6, c = 4;
  Tensor<double> probs({n, s, c});
  for (std::size_t i = 0; i < n * s; ++i) {
    double tot = 0;
    for (std::size_t k = 0; k < c; ++k) tot += (probs[i * c + k] = rng.uniform());
    for (std::size_t k = 0; k < c; ++k) probs[i * c + k] /= tot;
  }
  const auto fs = export_function_space(probs);
  CHECK(fs.shape() == Shape{n, s * c});
  CHECK(fs.at(1, 5) == probs[s * c + 5]);

  Tensor<double> copies({2, s, c});
  std::copy_n(probs.raw(), s * c, copies.raw());
  std::copy_n(probs.raw(), s * c, copies.raw() + s * c);
  const auto dup = summarize_diversity(copies, {}, {});
  CHECK(dup.disagreement.at(0, 1) == 0.0);
  CHECK(dup.jsd.at(0, 1) == 0.0);
  CHECK(dup.diversity_score == 0.0);

  const auto w0 = randn({8, 8}, rng);
  std::vector<std::vector<Tensor<double>>> updates{{randn({8, 8}, rng)}, {randn({8, 8}, rng)}, {randn({8, 8}, rng)}};
  const auto summary = summarize_diversity(probs, updates, {w0}, 4);
  CHECK(summary.diversity_score > 0.5);
  CHECK(summary.singular_similarity.shape() == Shape{4, 4});
  const auto j = to_json(summary);
  for (const char* key : {"disagreement", "jsd", "intruder_counts", "diversity_score", "weight_cosine",
                          "singular_vector_similarity", "function_space"}) {
    CHECK(j.contains(key));
  }
  CHECK_FALSE(to_json(summary, false).contains("function_space"));
}

TEST_CASE("LoRA value updates are the low-rank products") {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_classes = 3;
  cfg.method = Method::lora;
  cfg.ensemble_size = 2;
  cfg.rank = 2;
  EnsembleVit<float> m(cfg, 1);
  auto zero = value_updates(m);
  REQUIRE(zero.size() == 2);
  REQUIRE(zero[0].size() == cfg.depth);
  for (double x : zero[1][0].data()) CHECK(x == 0.0);

  CounterRng rng(8);
  auto& slot = m.backbone().blocks[1].attn[static_cast<std::size_t>(Role::value)];
  for (auto& x : slot.lora->b[1].mutable_value().data()) x = static_cast<float>(rng.normal());
  const auto u = value_updates(m);
  const auto expected = merge_lora_weights(Tensor<float>({8, 8}), slot.lora->a[1].value(), slot.lora->b[1].value());
  CHECK(max_abs_diff(u[1][1], expected.cast<double>()) < 1e-6);
  CHECK(value_initial(m)[1] == slot.base.weight.value().cast<double>());
}
