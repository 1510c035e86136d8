#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "lens/rng.hpp"
#include "lens/tensor.hpp"

// Brute-force references shared by the unit tests and the acceptance runner.
namespace lens::oracle {

inline Tensor<double> random_simplex(std::size_t rows, std::size_t c, CounterRng& rng, double sharpness = 2.0) {
  Tensor<double> t({rows, c});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += (t.at(r, k) = std::exp(sharpness * rng.normal()));
    for (std::size_t k = 0; k < c; ++k) t.at(r, k) /= s;
  }
  return t;
}

inline double naive_ece(const std::vector<double>& conf, const std::vector<int>& correct, std::size_t bins) {
  double total = 0;
  for (std::size_t m = 0; m < bins; ++m) {
    const double lo = static_cast<double>(m) / bins, hi = static_cast<double>(m + 1) / bins;
    double n = 0, acc = 0, c = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool in = (conf[i] >= lo && conf[i] < hi) || (m + 1 == bins && conf[i] == 1.0);
      if (!in) continue;
      ++n;
      acc += correct[i];
      c += conf[i];
    }
    if (n > 0) total += n / conf.size() * std::abs(acc / n - c / n);
  }
  return total;
}

inline double naive_auroc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (pos.size() * neg.size());
}

/// Step-wise precision-recall area over every distinct threshold.
inline double naive_auprc(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::vector<double> thresholds(pos);
  thresholds.insert(thresholds.end(), neg.begin(), neg.end());
  std::sort(thresholds.rbegin(), thresholds.rend());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double area = 0, prev_recall = 0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (double p : pos) tp += p >= t;
    for (double n : neg) fp += n >= t;
    const double recall = tp / pos.size();
    area += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return area;
}

inline double naive_fpr95(const std::vector<double>& pos, const std::vector<double>& neg) {
  double best_t = -std::numeric_limits<double>::infinity();
  bool found = false;
  std::vector<double> all(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  for (double t : all) {
    double tp = 0;
    for (double p : pos) tp += p >= t;
    if (tp / pos.size() >= 0.95 && (!found || t > best_t)) {
      best_t = t;
      found = true;
    }
  }
  double fp = 0;
  for (double n : neg) fp += n >= best_t;
  return fp / neg.size();
}

inline double naive_macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t classes) {
  std::vector<std::vector<double>> confusion(classes, std::vector<double>(classes, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) confusion[labels[i]][preds[i]] += 1;
  double total = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    double predicted = 0, actual = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      predicted += confusion[k][c];
      actual += confusion[c][k];
    }
    const double tp = confusion[c][c];
    if (tp == 0) continue;
    const double p = tp / predicted, r = tp / actual;
    total += 2 * p * r / (p + r);
  }
  return total / classes;
}

/// Scores on a coarse grid so that ties occur.
inline std::vector<double> tied_scores(std::size_t n, CounterRng& rng, double shift) {
  std::vector<double> s(n);
  for (auto& v : s) v = std::round((rng.normal() + shift) * 4) / 4;
  return s;
}


/// x W^T computed entry by entry in double.
inline Tensor<double> dense_apply(const Tensor<double>& x, const Tensor<double>& w) {
  Tensor<double> y({x.dim(0), w.dim(0)});
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t k = 0; k < w.dim(0); ++k) {
      double s = 0;
      for (std::size_t j = 0; j < x.dim(1); ++j) s += x.at(i, j) * w.at(k, j);
      y.at(i, k) = s;
    }
  }
  return y;
}

}  // namespace lens::oracle
