#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "lens/tensor.hpp"
#include "lens/vit.hpp"

namespace lens {

double disagreement_rate(std::span<const int> preds_i, std::span<const int> preds_j);

/// Jensen-Shannon divergence in nats; 0 log 0 = 0.
double jsd(std::span<const double> p, std::span<const double> q);

inline constexpr std::size_t kDefaultTopK = 16;
inline constexpr double kIntruderThreshold = 0.3;

struct IntruderResult {
  std::size_t count = 0;
  std::vector<std::size_t> intruders;  // ranks of intruding final vectors
  Tensor<double> similarity;           // [k, k], |cos(u_final_a, u_init_b)|
};

IntruderResult svd_intruder_analysis(const Tensor<double>& w_init, const Tensor<double>& w_final,
                                     std::size_t top_k = kDefaultTopK, double threshold = kIntruderThreshold);

/// members[i][l] is member i's matrix at layer l. Returns the [k, k] matrix of
/// |cos| between top singular vectors of two members, averaged over layers
/// and member pairs. The diagonal compares corresponding ranks.
Tensor<double> singular_vector_similarity(const std::vector<std::vector<Tensor<double>>>& members,
                                          std::size_t top_k = kDefaultTopK);

/// 1 - mean Pearson correlation over (layer, member pair) of flattened
/// matrices. Zero-variance pairs are skipped; if none remain the score is 0.
double diversity_score(const std::vector<std::vector<Tensor<double>>>& members);

/// [N, S*C]: member i's probability matrix flattened row-major.
Tensor<double> export_function_space(const Tensor<double>& probs);

/// Per-member, per-layer value-projection update: B A for LoRA, effective
/// W_i - W0 for Batch-Ensemble, W_final - W_init for per-member backbones.
/// Empty for methods without member-specific backbone weights.
template <typename T>
std::vector<std::vector<Tensor<double>>> value_updates(const EnsembleVit<T>& model);

/// Per-layer initial value-projection weights W0.
template <typename T>
std::vector<Tensor<double>> value_initial(const EnsembleVit<T>& model);

struct DiversitySummary {
  Tensor<double> disagreement;                        // [N, N]
  Tensor<double> jsd;                                 // [N, N], between per-member mean distributions
  std::vector<std::vector<std::size_t>> intruders;    // [N][L]
  double diversity_score = 0;
  Tensor<double> weight_cosine;                       // [N, N], empty without weight updates
  Tensor<double> singular_similarity;                 // [k, k], empty without weight updates
  Tensor<double> function_space;                      // [N, S*C]
};

/// Function-space statistics from member probabilities [N, S, C] plus
/// weight-space statistics from `updates` / `initial` (may be empty).
DiversitySummary summarize_diversity(const Tensor<double>& probs,
                                     const std::vector<std::vector<Tensor<double>>>& updates,
                                     const std::vector<Tensor<double>>& initial, std::size_t top_k = kDefaultTopK);

nlohmann::json to_json(const DiversitySummary& s, bool include_function_space = true);

}  // namespace lens
