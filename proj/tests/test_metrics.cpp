#include <doctest.h>

#include <cmath>
#include <numbers>

#include "lens/errors.hpp"
#include "lens/metrics.hpp"
#include "lens/rng.hpp"
#include "oracles.hpp"

using namespace lens;
using namespace lens::oracle;

TEST_CASE("ensemble aggregation") {
  Tensor<double> two({2, 1, 2}, {1, 0, 0, 1});
  auto agg = ensemble_aggregate(two);
  CHECK(agg.mean[0] == 0.5);
  CHECK(agg.mean[1] == 0.5);
  CHECK(agg.var[0] == 0.25);
  CHECK(agg.var[1] == 0.25);
  Tensor<double> one({1, 2, 2}, {0.3, 0.7, 0.9, 0.1});
  auto single = ensemble_aggregate(one);
  CHECK(single.mean == Tensor<double>({2, 2}, {0.3, 0.7, 0.9, 0.1}));
  for (double v : single.var.data()) CHECK(v == 0.0);
}

TEST_CASE("ECE hand cases") {
  CHECK(ece(std::vector<double>{0.95, 0.85, 0.65, 0.55}, std::vector<int>{1, 0, 1, 1}) ==
        doctest::Approx(0.425).epsilon(1e-12));
  CHECK(ece(std::vector<double>{1.0, 1.0, 1.0}, std::vector<int>{1, 1, 1}) == 0.0);
  CHECK(bin_index(0.1, 10) == 1);
  CHECK(bin_index(0.3, 10) == 3);
  CHECK(bin_index(1.0, 10) == 9);
  CHECK(bin_index(0.0, 10) == 0);
  CHECK_THROWS_AS(bin_index(1.5, 10), DomainError);
}

TEST_CASE("ECE matches the naive binning reference") {
  CounterRng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<double> conf(n);
    std::vector<int> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
      // grid-aligned confidences land exactly on bin edges
      conf[i] = rng.below(4) == 0 ? static_cast<double>(rng.below(11)) / 10 : rng.uniform();
      correct[i] = static_cast<int>(rng.below(2));
    }
    CHECK(ece(conf, correct) == doctest::Approx(naive_ece(conf, correct, 10)).epsilon(1e-12));
  }
}

TEST_CASE("NLL and Brier") {
  Tensor<double> perfect({2, 3}, {1, 0, 0, 0, 0, 1});
  const std::vector<int> labels{0, 2};
  CHECK(nll(perfect, labels) == 0.0);
  CHECK(brier(perfect, labels) == 0.0);
  Tensor<double> uniform({2, 3}, 1.0 / 3);
  CHECK(nll(uniform, labels) == doctest::Approx(std::log(3.0)));
  CHECK(brier(Tensor<double>({1, 2}, {0.8, 0.2}), std::vector<int>{0}) == doctest::Approx(0.08).epsilon(1e-12));
  CHECK(brier(Tensor<double>({1, 2}, {0.0, 1.0}), std::vector<int>{0}) == 2.0);
  CHECK(std::isfinite(nll(Tensor<double>({1, 2}, {1.0, 0.0}), std::vector<int>{1})));
}

TEST_CASE("macro F1") {
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(macro_f1(labels, labels, 2) == 1.0);
  CHECK(macro_f1(std::vector<int>{0, 0, 0, 0}, labels, 2) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CounterRng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(40), c = 2 + rng.below(5);
    std::vector<int> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng.below(c));
      y[i] = static_cast<int>(rng.below(c));
    }
    CHECK(macro_f1(p, y, c) == doctest::Approx(naive_macro_f1(p, y, c)).epsilon(1e-12));
  }
}

TEST_CASE("OOD separability hand cases") {
  CHECK(auroc(std::vector<double>{0.9, 0.6}, std::vector<double>{0.8, 0.5}) == 0.75);
  CHECK(auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.2, 0.1}) == 1.0);
  CHECK(fpr_at_95(std::vector<double>{0.9, 0.8}, std::vector<double>{0.2, 0.1}) == 0.0);
  CHECK(auroc(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5, 0.5}) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{}, std::vector<double>{0.5}), UndefinedError);
}

TEST_CASE("AUROC, AUPRC and FPR95 match brute-force references") {
  CounterRng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto pos = tied_scores(1 + rng.below(30), rng, 0.7);
    const auto neg = tied_scores(1 + rng.below(30), rng, 0.0);
    CHECK(auroc(pos, neg) == naive_auroc(pos, neg));
    CHECK(auprc(pos, neg) == doctest::Approx(naive_auprc(pos, neg)).epsilon(1e-12));
    CHECK(fpr_at_95(pos, neg) == naive_fpr95(pos, neg));
  }
}

TEST_CASE("ensembling never increases NLL") {
  CounterRng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(6), s = 1 + rng.below(20), c = 2 + rng.below(6);
    Tensor<double> probs({n, s, c});
    for (std::size_t i = 0; i < n; ++i) {
      auto m = random_simplex(s, c, rng);
      std::copy(m.data().begin(), m.data().end(), probs.data().begin() + i * s * c);
    }
    std::vector<int> labels(s);
    for (auto& y : labels) y = static_cast<int>(rng.below(c));
    PredictionSet ps{probs, labels};
    double mean_member = 0;
    for (std::size_t i = 0; i < n; ++i) mean_member += nll(ps.member(i), labels) / n;
    CHECK(nll(ensemble_aggregate(probs).mean, labels) < mean_member);
  }
  Tensor<double> same({3, 4, 2});
  CounterRng r2(5);
  auto m = random_simplex(4, 2, r2);
  for (std::size_t i = 0; i < 3; ++i) std::copy(m.data().begin(), m.data().end(), same.data().begin() + i * 8);
  const std::vector<int> y{0, 1, 1, 0};
  CHECK(nll(ensemble_aggregate(same).mean, y) == doctest::Approx(nll(m, y)).epsilon(1e-14));
}

TEST_CASE("temperature scaling") {
  auto p = temperature_scale(Tensor<double>({1, 2}, {2, 0}), 2.0);
  CHECK(p[0] == doctest::Approx(std::numbers::e / (std::numbers::e + 1)).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK_THROWS_AS(temperature_scale(Tensor<double>({1, 2}), 0.0), DomainError);

  CounterRng rng(6);
  Tensor<double> logits({50, 7});
  for (auto& v : logits.data()) v = 3 * rng.normal();
  const auto base = argmax_rows(temperature_scale(logits, 1.0));
  for (double t : {0.1, 0.5, 2.0, 7.3}) CHECK(argmax_rows(temperature_scale(logits, t)) == base);
}

TEST_CASE("fitted temperature recovers the mis-scaling") {
  CounterRng rng(7);
  const std::size_t s = 10000, c = 5;
  Tensor<double> truth({s, c});
  for (auto& v : truth.data()) v = 1.5 * rng.normal();
  const auto p = temperature_scale(truth, 1.0);
  std::vector<int> labels(s);
  for (std::size_t i = 0; i < s; ++i) {
    double u = rng.uniform(), acc = 0;
    int y = static_cast<int>(c) - 1;
    for (std::size_t k = 0; k < c; ++k) {
      acc += p.at(i, k);
      if (u < acc) {
        y = static_cast<int>(k);
        break;
      }
    }
    labels[i] = y;
  }
  Tensor<double> scaled = truth;
  for (auto& v : scaled.data()) v *= 2.0;
  CHECK(std::abs(fit_temperature(scaled, labels) - 2.0) <= 0.05);
  CHECK(std::abs(fit_temperature(truth, labels) - 1.0) <= 0.05);

  // every label class 0 with constant logits: every T ties, smallest wins
  Tensor<double> flat({10, 3}, 0.0);
  CHECK(fit_temperature(flat, std::vector<int>(10, 0)) == default_temperature_grid().front());
}

TEST_CASE("calibration report schema") {
  CounterRng rng(8);
  auto probs = random_simplex(40, 4, rng);
  std::vector<int> labels(40);
  for (auto& y : labels) y = static_cast<int>(rng.below(4));
  auto j = to_json(calibration_report(probs, labels));
  for (const char* key : {"accuracy", "macro_f1", "ece", "nll", "brier", "temperature", "bins"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["bins"].size() == kDefaultBins);
  std::size_t counted = 0;
  for (const auto& b : j["bins"]) counted += b["count"].get<std::size_t>();
  CHECK(counted == 40);
}

TEST_CASE("prediction set validation") {
  PredictionSet bad{Tensor<double>({1, 1, 2}, {0.7, 0.7}), {0}};
  CHECK_THROWS(bad.validate());
  PredictionSet good{Tensor<double>({1, 1, 2}, {0.3, 0.7}), {1}};
  CHECK_NOTHROW(good.validate());
}
