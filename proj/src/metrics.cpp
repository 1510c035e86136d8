#include "lens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lens/errors.hpp"

namespace lens {

namespace {

void require_rows(const Tensor<double>& probs, std::span<const int> labels, const char* what) {
  if (probs.rank() != 2) throw DimensionError(std::string(what) + ": expected [S,C], got " + shape_string(probs.shape()));
  if (probs.dim(0) != labels.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(probs.dim(0)) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= probs.dim(1)) {
      throw IndexError(std::string(what) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

void require_binary_sets(std::span<const double> pos, std::span<const double> neg, const char* what) {
  if (pos.empty() || neg.empty()) throw UndefinedError(std::string(what) + " needs nonempty positive and negative sets");
}

struct Scored {
  double score;
  bool positive;
};

/// Scores sorted descending; callers walk groups of equal score.
std::vector<Scored> sorted_desc(std::span<const double> pos, std::span<const double> neg) {
  std::vector<Scored> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  return all;
}

}  // namespace

Tensor<double> PredictionSet::member(std::size_t i) const {
  if (i >= members()) throw IndexError("member " + std::to_string(i) + " out of range");
  const std::size_t n = samples() * classes();
  return Tensor<double>(Shape{samples(), classes()},
                        std::vector<double>(probs.raw() + i * n, probs.raw() + (i + 1) * n));
}

void PredictionSet::validate(double tol) const {
  if (probs.rank() != 3) throw DimensionError("PredictionSet probs must be [N,S,C], got " + shape_string(probs.shape()));
  if (labels.size() != samples()) throw DimensionError("PredictionSet label count does not match samples");
  const std::size_t c = classes();
  for (std::size_t row = 0; row < members() * samples(); ++row) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double p = probs.raw()[row * c + k];
      if (!(p >= 0.0)) throw DomainError("PredictionSet holds a negative or NaN probability");
      s += p;
    }
    if (std::abs(s - 1.0) > tol) throw DomainError("PredictionSet row does not sum to 1");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw IndexError("PredictionSet label out of range");
  }
}

Aggregate ensemble_aggregate(const Tensor<double>& probs) {
  if (probs.rank() != 3) throw DimensionError("ensemble_aggregate expects [N,S,C], got " + shape_string(probs.shape()));
  const std::size_t n = probs.dim(0), sc = probs.dim(1) * probs.dim(2);
  Aggregate out{Tensor<double>(Shape{probs.dim(1), probs.dim(2)}), Tensor<double>(Shape{probs.dim(1), probs.dim(2)})};
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < sc; ++j) out.mean.raw()[j] += probs.raw()[i * sc + j];
  }
  for (auto& v : out.mean.data()) v *= inv;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < sc; ++j) {
      const double d = probs.raw()[i * sc + j] - out.mean.raw()[j];
      out.var.raw()[j] += d * d;
    }
  }
  for (auto& v : out.var.data()) v *= inv;
  return out;
}

std::vector<int> argmax_rows(const Tensor<double>& probs) {
  const std::size_t c = probs.cols();
  std::vector<int> out(probs.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = probs.raw() + r * c;
    out[r] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

std::vector<double> max_rows(const Tensor<double>& probs) {
  const std::size_t c = probs.cols();
  std::vector<double> out(probs.rows());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = *std::max_element(probs.raw() + r * c, probs.raw() + (r + 1) * c);
  return out;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw DimensionError("accuracy: length mismatch");
  if (preds.empty()) throw UndefinedError("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::size_t bin_index(double confidence, std::size_t bins) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) throw DomainError("confidence must lie in [0,1]");
  const auto m_count = static_cast<double>(bins);
  auto m = std::min(static_cast<std::size_t>(std::floor(confidence * m_count)), bins - 1);
  // Edges are the doubles m/M; correct for rounding in confidence * M.
  while (m > 0 && confidence < static_cast<double>(m) / m_count) --m;
  while (m + 1 < bins && confidence >= static_cast<double>(m + 1) / m_count) ++m;
  return m;
}

std::vector<ReliabilityBin> reliability_bins(std::span<const double> confidences, std::span<const int> correct,
                                             std::size_t bins) {
  if (confidences.size() != correct.size()) throw DimensionError("reliability_bins: length mismatch");
  if (bins == 0) throw DomainError("bin count must be positive");
  std::vector<ReliabilityBin> out(bins);
  for (std::size_t m = 0; m < bins; ++m) {
    out[m].lo = static_cast<double>(m) / static_cast<double>(bins);
    out[m].hi = static_cast<double>(m + 1) / static_cast<double>(bins);
  }
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    auto& b = out[bin_index(confidences[i], bins)];
    ++b.count;
    b.conf += confidences[i];
    b.acc += correct[i] ? 1.0 : 0.0;
  }
  for (auto& b : out) {
    if (b.count > 0) {
      b.conf /= static_cast<double>(b.count);
      b.acc /= static_cast<double>(b.count);
    }
  }
  return out;
}

double ece(std::span<const double> confidences, std::span<const int> correct, std::size_t bins) {
  if (confidences.empty()) throw UndefinedError("ECE of an empty set");
  const auto table = reliability_bins(confidences, correct, bins);
  double total = 0.0;
  for (const auto& b : table) {
    total += static_cast<double>(b.count) * std::abs(b.acc - b.conf);
  }
  return total / static_cast<double>(confidences.size());
}

double ece(const Tensor<double>& probs, std::span<const int> labels, std::size_t bins) {
  require_rows(probs, labels, "ece");
  const auto conf = max_rows(probs);
  const auto preds = argmax_rows(probs);
  std::vector<int> correct(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) correct[i] = preds[i] == labels[i];
  return ece(conf, correct, bins);
}

double nll(const Tensor<double>& probs, std::span<const int> labels) {
  require_rows(probs, labels, "nll");
  if (labels.empty()) throw UndefinedError("NLL of an empty set");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total -= std::log(std::max(probs.at(i, static_cast<std::size_t>(labels[i])), kProbFloor));
  }
  return total / static_cast<double>(labels.size());
}

double brier(const Tensor<double>& probs, std::span<const int> labels) {
  require_rows(probs, labels, "brier");
  if (labels.empty()) throw UndefinedError("Brier score of an empty set");
  const std::size_t c = probs.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const double d = probs.at(i, k) - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0);
      total += d * d;
    }
  }
  return total / static_cast<double>(labels.size());
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t classes) {
  if (preds.size() != labels.size()) throw DimensionError("macro_f1: length mismatch");
  if (classes < 2) throw DomainError("macro_f1 needs at least 2 classes");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto p = static_cast<std::size_t>(preds[i]), y = static_cast<std::size_t>(labels[i]);
    if (p >= classes || y >= classes) throw IndexError("macro_f1: class index out of range");
    if (p == y) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    // F1 = 2pr/(p+r) = 2tp/(2tp+fp+fn); zero when the class never appears.
    const auto denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0 && tp[c] > 0) total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return total / static_cast<double>(classes);
}

double auroc(std::span<const double> pos, std::span<const double> neg) {
  require_binary_sets(pos, neg, "AUROC");
  // Mann-Whitney U with mid-ranks over ascending scores.
  std::vector<Scored> all = sorted_desc(pos, neg);
  std::reverse(all.begin(), all.end());
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].positive) rank_sum += mid_rank;
    }
    i = j;
  }
  const auto np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double auprc(std::span<const double> pos, std::span<const double> neg) {
  require_binary_sets(pos, neg, "AUPRC");
  const auto all = sorted_desc(pos, neg);
  const auto np = static_cast<double>(pos.size());
  double tp = 0, fp = 0, prev_recall = 0, area = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) {
      (all[j].positive ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / np;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return area;
}

double fpr_at_95(std::span<const double> pos, std::span<const double> neg) {
  require_binary_sets(pos, neg, "FPR@95");
  const auto all = sorted_desc(pos, neg);
  const auto np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) {
      (all[j].positive ? tp : fp) += 1.0;
      ++j;
    }
    if (tp / np >= 0.95) return fp / nn;
    i = j;
  }
  return 1.0;
}

OodScores ood_scores(const Tensor<double>& in_probs, const Tensor<double>& out_probs) {
  if (in_probs.rank() != 2 || out_probs.rank() != 2 || in_probs.cols() != out_probs.cols()) {
    throw DimensionError("ood_scores expects [S,C] sets with equal C");
  }
  const auto pos = max_rows(in_probs), neg = max_rows(out_probs);
  return {auroc(pos, neg), auprc(pos, neg), fpr_at_95(pos, neg)};
}

Tensor<double> temperature_scale(const Tensor<double>& logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  const std::size_t c = logits.cols();
  Tensor<double> out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double* x = logits.raw() + r * c;
    double* y = out.raw() + r * c;
    const double mx = *std::max_element(x, x + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (y[k] = std::exp((x[k] - mx) / temperature));
    for (std::size_t k = 0; k < c; ++k) y[k] /= s;
  }
  return out;
}

Tensor<double> ensemble_probs(const Tensor<double>& member_logits, double temperature) {
  if (member_logits.rank() != 3) throw DimensionError("ensemble_probs expects [N,S,C]");
  return temperature_scale(member_logits, temperature);
}

std::vector<double> default_temperature_grid() {
  std::vector<double> grid;
  for (int i = 2; i <= 100; ++i) grid.push_back(0.05 * i);
  return grid;
}

double fit_temperature(const Tensor<double>& logits, std::span<const int> labels, const std::vector<double>& grid) {
  if (grid.empty()) throw DomainError("temperature grid is empty");
  if (logits.rank() != 2 && logits.rank() != 3) throw DimensionError("fit_temperature expects [S,C] or [N,S,C]");
  double best_t = grid.front(), best = std::numeric_limits<double>::infinity();
  for (double t : grid) {
    const auto probs = temperature_scale(logits, t);
    const double v = logits.rank() == 2 ? nll(probs, labels) : nll(ensemble_aggregate(probs).mean, labels);
    if (v < best || (v == best && t < best_t)) {
      best = v;
      best_t = t;
    }
  }
  return best_t;
}

CalibrationReport calibration_report(const Tensor<double>& mean_probs, std::span<const int> labels, double temperature) {
  require_rows(mean_probs, labels, "calibration_report");
  CalibrationReport r;
  const auto preds = argmax_rows(mean_probs);
  const auto conf = max_rows(mean_probs);
  std::vector<int> correct(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) correct[i] = preds[i] == labels[i];
  r.accuracy = accuracy(preds, labels);
  r.macro_f1 = macro_f1(preds, labels, mean_probs.cols());
  r.ece = ece(conf, correct);
  r.nll = nll(mean_probs, labels);
  r.brier = brier(mean_probs, labels);
  r.temperature = temperature;
  r.bins = reliability_bins(conf, correct);
  return r;
}

nlohmann::json to_json(const CalibrationReport& r) {
  nlohmann::json j{{"accuracy", r.accuracy}, {"macro_f1", r.macro_f1}, {"ece", r.ece},
                   {"nll", r.nll},           {"brier", r.brier},       {"temperature", r.temperature}};
  if (r.ood) {
    j["auroc"] = r.ood->auroc;
    j["auprc"] = r.ood->auprc;
    j["fpr95"] = r.ood->fpr95;
  }
  j["bins"] = nlohmann::json::array();
  for (const auto& b : r.bins) {
    j["bins"].push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"conf", b.conf}, {"acc", b.acc}});
  }
  return j;
}

}  // namespace lens
