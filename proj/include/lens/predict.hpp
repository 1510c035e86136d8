#pragma once

#include <cstddef>
#include <cstdint>

#include "lens/data.hpp"
#include "lens/metrics.hpp"
#include "lens/vit.hpp"

namespace lens {

struct PredictOptions {
  std::size_t batch_size = 250;
  std::size_t jobs = 1;
  /// Seed of the dropout masks for mc_dropout sampling.
  std::uint64_t mc_seed = 0;
};

/// Per-member logits [N, S, C] in evaluation mode. mc_dropout draws one
/// dropout sample per member; epinet members use their fixed epistemic index.
template <typename T>
Tensor<double> member_logits(const EnsembleVit<T>& model, const Tensor<float>& images, const PredictOptions& opts = {});

/// Tempered per-member probabilities with labels.
template <typename T>
PredictionSet predict(const EnsembleVit<T>& model, const Dataset& data, double temperature = 1.0,
                      const PredictOptions& opts = {});

/// S stochastic passes with dropout rate `rate` on attention probabilities
/// and MLP hidden units: probabilities [S, B, C].
template <typename T>
Tensor<double> mc_dropout_predict(const EnsembleVit<T>& model, const Tensor<float>& images, std::size_t samples,
                                  double rate, std::uint64_t seed, std::size_t batch_size = 250);

}  // namespace lens
