#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "lens/adapters.hpp"
#include "lens/config.hpp"
#include "lens/data.hpp"
#include "lens/vit.hpp"

namespace lens {

/// Moment buffers aligned with a fixed parameter list.
template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01, momentum = 0.9;
  std::vector<Tensor<T>> m;  // first moment / momentum buffer
  std::vector<Tensor<T>> v;  // second moment (AdamW only)
  std::uint64_t step = 0;

  static OptimizerState create(const TrainConfig& cfg, std::span<const Var<T>> params);
};

/// Decoupled-decay AdamW on each parameter's accumulated gradient.
/// Throws NumericError before touching any parameter if a gradient is non-finite.
template <typename T>
void adamw_step(std::span<Var<T>> params, OptimizerState<T>& state, double lr);

/// SGD with heavy-ball momentum; weight decay is added to the gradient.
template <typename T>
void sgd_step(std::span<Var<T>> params, OptimizerState<T>& state, double lr);

template <typename T>
void optimizer_step(std::span<Var<T>> params, OptimizerState<T>& state, double lr);

struct SchedulePlan {
  double base_lr = 1e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
  Schedule shape = Schedule::warmup_cosine;
  double decay_factor = 0.94;
  std::size_t decay_every_epochs = 4;
  std::size_t steps_per_epoch = 1;
};

/// Linear warmup from 0, then cosine to 0 at total_steps, or a stepwise
/// exponential decay base * factor^floor(epoch / every).
double lr_at(std::size_t step, const SchedulePlan& plan);

/// Cyclic variant for snapshot ensembles: warmup + cosine over the burn-in,
/// then a cosine restart from base_lr to 0 over each cycle.
double snapshot_lr_at(std::size_t step, const SchedulePlan& plan, const SnapshotPlan& snapshots);

/// Global L2 norm over all gradients; scales them by max_norm / norm when the
/// norm exceeds max_norm. Returns the pre-clip norm.
template <typename T>
double clip_gradients(std::span<Var<T>> params, double max_norm);

/// w_c = (1 - beta) / (1 - beta^{n_c}), normalized to mean 1.
std::vector<double> effective_number_weights(std::span<const std::size_t> class_counts, double beta);

template <typename T>
Var<T> weighted_ce_loss(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels,
                        std::span<const std::size_t> class_counts, double beta);

struct HistoryRecord {
  std::size_t epoch = 0;
  std::optional<std::size_t> member;  // nullopt: mean over trained members
  double loss = 0;
  double acc = 0;
  double lr = 0;
};

nlohmann::json to_json(const HistoryRecord& r);

template <typename T>
struct TrainResult {
  EnsembleVit<T> model;
  std::vector<HistoryRecord> history;
  std::uint64_t steps = 0;
};

struct TrainHooks {
  std::function<void(const HistoryRecord&)> on_record;
};

/// Trains `cfg.model` on `train` from the seed in `cfg`. Serial runs are
/// bitwise reproducible; `cfg.jobs > 1` parallelizes members whose
/// parameters are disjoint without changing results.
/// Throws RunError carrying the step index when the loss diverges.
template <typename T>
TrainResult<T> train_run(const RunConfig& cfg, const Dataset& train, const TrainHooks& hooks = {},
                         std::optional<EnsembleVit<T>> initial = std::nullopt);

/// Visiting order of one epoch: a Fisher-Yates shuffle keyed by (seed, epoch, stream).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, std::uint64_t stream);

}  // namespace lens
