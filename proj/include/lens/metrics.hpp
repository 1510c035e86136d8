#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "lens/tensor.hpp"

namespace lens {

/// Per-member class probabilities [N, S, C] with labels [S].
struct PredictionSet {
  Tensor<double> probs;
  std::vector<int> labels;

  std::size_t members() const { return probs.dim(0); }
  std::size_t samples() const { return probs.dim(1); }
  std::size_t classes() const { return probs.dim(2); }
  /// Member i as [S, C].
  Tensor<double> member(std::size_t i) const;
  /// Throws DimensionError / DomainError / IndexError on malformed sets.
  void validate(double tol = 1e-6) const;
};

struct Aggregate {
  Tensor<double> mean;  // [S, C]
  Tensor<double> var;   // [S, C], population variance across members
};

Aggregate ensemble_aggregate(const Tensor<double>& probs);

inline constexpr double kProbFloor = 1e-12;
inline constexpr std::size_t kDefaultBins = 10;

std::vector<int> argmax_rows(const Tensor<double>& probs);
std::vector<double> max_rows(const Tensor<double>& probs);
double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Bin m covers [m/M, (m+1)/M); the last bin is closed at 1.
std::size_t bin_index(double confidence, std::size_t bins);

struct ReliabilityBin {
  double lo = 0, hi = 0;
  std::size_t count = 0;
  double conf = 0;  // mean confidence, 0 for an empty bin
  double acc = 0;
};

std::vector<ReliabilityBin> reliability_bins(std::span<const double> confidences, std::span<const int> correct,
                                             std::size_t bins = kDefaultBins);
double ece(std::span<const double> confidences, std::span<const int> correct, std::size_t bins = kDefaultBins);
/// ECE of the max-probability confidence against argmax correctness.
double ece(const Tensor<double>& probs, std::span<const int> labels, std::size_t bins = kDefaultBins);

double nll(const Tensor<double>& probs, std::span<const int> labels);
double brier(const Tensor<double>& probs, std::span<const int> labels);
double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t classes);

/// Binary separability with `pos` as the positive (in-distribution) class.
double auroc(std::span<const double> pos, std::span<const double> neg);
double auprc(std::span<const double> pos, std::span<const double> neg);
/// False-positive rate at the largest threshold whose TPR reaches 0.95.
double fpr_at_95(std::span<const double> pos, std::span<const double> neg);

struct OodScores {
  double auroc = 0, auprc = 0, fpr95 = 0;
};

/// Scores are the max of each aggregated probability row.
OodScores ood_scores(const Tensor<double>& in_probs, const Tensor<double>& out_probs);

Tensor<double> temperature_scale(const Tensor<double>& logits, double temperature);
/// Member logits [N, S, C] -> per-member tempered probabilities [N, S, C].
Tensor<double> ensemble_probs(const Tensor<double>& member_logits, double temperature);

std::vector<double> default_temperature_grid();
/// Grid value minimizing NLL of the tempered (ensemble-mean) probabilities;
/// ties keep the smallest T. Accepts [S, C] or member logits [N, S, C].
double fit_temperature(const Tensor<double>& logits, std::span<const int> labels,
                       const std::vector<double>& grid = default_temperature_grid());

struct CalibrationReport {
  double accuracy = 0, macro_f1 = 0, ece = 0, nll = 0, brier = 0;
  std::optional<OodScores> ood;
  double temperature = 1.0;
  std::vector<ReliabilityBin> bins;
};

CalibrationReport calibration_report(const Tensor<double>& mean_probs, std::span<const int> labels,
                                     double temperature = 1.0);
nlohmann::json to_json(const CalibrationReport& r);

}  // namespace lens
