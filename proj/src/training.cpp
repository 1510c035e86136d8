#include "lens/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include <spdlog/spdlog.h>

#include "lens/errors.hpp"

namespace lens {

namespace {

constexpr std::uint64_t kShuffleTag = 0x5AFF;
constexpr std::uint64_t kDropoutTag = 0xD50F;
constexpr std::uint64_t kEpinetTag = 0xE21D;
constexpr std::size_t kFeatureBatch = 250;

template <typename T>
Tensor<T> images_as(const Tensor<float>& images) {
  if constexpr (std::is_same_v<T, float>) {
    return images;
  } else {
    return images.cast<T>();
  }
}

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t c = logits.cols();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const T* row = logits.raw() + r * c;
    hits += static_cast<int>(std::max_element(row, row + c) - row) == labels[r];
  }
  return hits;
}

struct MemberStats {
  double loss_sum = 0;
  std::size_t batches = 0;
  std::size_t correct = 0;
  std::size_t seen = 0;
};

}  // namespace

template <typename T>
OptimizerState<T> OptimizerState<T>::create(const TrainConfig& cfg, std::span<const Var<T>> params) {
  OptimizerState st;
  st.kind = cfg.optimizer;
  st.beta1 = cfg.beta1;
  st.beta2 = cfg.beta2;
  st.eps = cfg.adam_eps;
  st.weight_decay = cfg.weight_decay;
  st.momentum = cfg.momentum;
  for (const auto& p : params) {
    st.m.push_back(Tensor<T>::zeros(p.shape()));
    if (st.kind == OptimizerKind::adamw) st.v.push_back(Tensor<T>::zeros(p.shape()));
  }
  return st;
}

namespace {

template <typename T>
void check_step_inputs(std::span<Var<T>> params, const OptimizerState<T>& state, double lr) {
  if (!(lr >= 0.0)) throw DomainError("learning rate must be nonnegative");
  if (params.size() != state.m.size()) throw DimensionError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != state.m[i].shape()) throw DimensionError("optimizer moment shape mismatch");
    params[i].mutable_grad().require_finite("gradient");
  }
}

}  // namespace

template <typename T>
void adamw_step(std::span<Var<T>> params, OptimizerState<T>& state, double lr) {
  check_step_inputs(params, state, lr);
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].mutable_value();
    const auto& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t e = 0; e < p.numel(); ++e) {
      const double gi = g[e];
      const double mi = b1 * m[e] + (1.0 - b1) * gi;
      const double vi = b2 * v[e] + (1.0 - b2) * gi * gi;
      m[e] = static_cast<T>(mi);
      v[e] = static_cast<T>(vi);
      const double pi = p[e];
      p[e] = static_cast<T>(pi - lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps) - lr * state.weight_decay * pi);
    }
  }
}

template <typename T>
void sgd_step(std::span<Var<T>> params, OptimizerState<T>& state, double lr) {
  check_step_inputs(params, state, lr);
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].mutable_value();
    const auto& g = params[i].grad();
    auto& buf = state.m[i];
    for (std::size_t e = 0; e < p.numel(); ++e) {
      const double gi = g[e] + state.weight_decay * p[e];
      const double b = state.momentum * buf[e] + gi;
      buf[e] = static_cast<T>(b);
      p[e] = static_cast<T>(p[e] - lr * b);
    }
  }
}

template <typename T>
void optimizer_step(std::span<Var<T>> params, OptimizerState<T>& state, double lr) {
  if (state.kind == OptimizerKind::adamw) {
    adamw_step(params, state, lr);
  } else {
    sgd_step(params, state, lr);
  }
}

double lr_at(std::size_t step, const SchedulePlan& plan) {
  if (step > plan.total_steps) {
    throw DomainError("step " + std::to_string(step) + " exceeds total_steps " + std::to_string(plan.total_steps));
  }
  const auto s = static_cast<double>(step);
  if (step < plan.warmup_steps) return plan.base_lr * s / static_cast<double>(plan.warmup_steps);
  if (plan.shape == Schedule::warmup_exponential) {
    const std::size_t epoch = step / std::max<std::size_t>(plan.steps_per_epoch, 1);
    return plan.base_lr *
           std::pow(plan.decay_factor, static_cast<double>(epoch / std::max<std::size_t>(plan.decay_every_epochs, 1)));
  }
  if (plan.total_steps <= plan.warmup_steps) return plan.base_lr;
  const double frac = (s - static_cast<double>(plan.warmup_steps)) /
                      static_cast<double>(plan.total_steps - plan.warmup_steps);
  return plan.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double snapshot_lr_at(std::size_t step, const SchedulePlan& plan, const SnapshotPlan& snapshots) {
  const std::size_t burn_steps = snapshots.effective_burn_in * plan.steps_per_epoch;
  if (step < burn_steps) {
    SchedulePlan burn = plan;
    burn.shape = Schedule::warmup_cosine;
    burn.total_steps = burn_steps;
    burn.warmup_steps = std::min(plan.warmup_steps, burn_steps);
    return lr_at(step, burn);
  }
  const std::size_t cycle_steps = snapshots.cycle_length * plan.steps_per_epoch;
  const std::size_t pos = (step - burn_steps) % cycle_steps;
  return plan.base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(pos) / static_cast<double>(cycle_steps)));
}

template <typename T>
double clip_gradients(std::span<Var<T>> params, double max_norm) {
  if (!(max_norm > 0.0)) throw DomainError("max_norm must be positive");
  double sq = 0.0;
  for (auto& p : params) {
    for (T g : p.mutable_grad().data()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const auto scale = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (T& g : p.mutable_grad().data()) g *= scale;
    }
  }
  return norm;
}

std::vector<double> effective_number_weights(std::span<const std::size_t> class_counts, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw DomainError("beta must lie in [0,1)");
  if (class_counts.empty()) throw DomainError("class counts are empty");
  std::vector<double> w(class_counts.size());
  double total = 0.0;
  for (std::size_t c = 0; c < w.size(); ++c) {
    if (class_counts[c] < 1) throw DomainError("every class count must be at least 1");
    w[c] = (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(class_counts[c])));
    total += w[c];
  }
  const double mean = total / static_cast<double>(w.size());
  for (auto& v : w) v /= mean;
  return w;
}

template <typename T>
Var<T> weighted_ce_loss(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels,
                        std::span<const std::size_t> class_counts, double beta) {
  if (beta == 0.0) return cross_entropy(tape, logits, labels);
  const auto w = effective_number_weights(class_counts, beta);
  std::vector<T> wt(w.begin(), w.end());
  return cross_entropy(tape, logits, labels, std::span<const T>(wt));
}

nlohmann::json to_json(const HistoryRecord& r) {
  return nlohmann::json{{"epoch", r.epoch},
                        {"member", r.member ? nlohmann::json(*r.member) : nlohmann::json(nullptr)},
                        {"loss", r.loss},
                        {"acc", r.acc},
                        {"lr", r.lr}};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, std::uint64_t stream) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng = CounterRng(seed).fork(kShuffleTag).fork(epoch).fork(stream);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

template <typename T>
TrainResult<T> train_run(const RunConfig& cfg, const Dataset& train, const TrainHooks& hooks,
                         std::optional<EnsembleVit<T>> initial) {
  cfg.validate();
  const auto& mc = cfg.model;
  const auto& tc = cfg.train;
  if (train.size() == 0) throw ConfigError("training set is empty");
  if (train.height() != mc.image_size || train.width() != mc.image_size || train.channels() != mc.channels) {
    throw ConfigError("training images are " + shape_string(train.images.shape()) + " but the model expects " +
                      std::to_string(mc.image_size) + "x" + std::to_string(mc.image_size) + "x" +
                      std::to_string(mc.channels));
  }
  if (train.num_classes != mc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(train.num_classes) + " classes, model expects " +
                      std::to_string(mc.num_classes));
  }

  TrainResult<T> result{initial ? std::move(*initial) : EnsembleVit<T>(mc, cfg.seed), {}, 0};
  auto& model = result.model;

  std::optional<SnapshotPlan> snap;
  std::optional<EnsembleVit<T>> live;
  if (mc.method == Method::snapshot && tc.epochs > 0) {
    snap = plan_snapshots(tc.epochs, tc.snapshot_burn_in, mc.ensemble_size);
    live.emplace(model.make_snapshot_source());
  }
  EnsembleVit<T>& trainee = live ? *live : model;
  const auto& tcfg = trainee.config();

  auto params = trainee.trainable_parameters();
  auto opt = OptimizerState<T>::create(tc, params);

  const std::size_t n = train.size();
  const std::size_t batch = std::min(tc.batch_size, n);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  SchedulePlan plan{tc.base_lr,       tc.warmup_steps,       tc.epochs * steps_per_epoch, tc.schedule,
                    tc.decay_factor, tc.decay_every_epochs, steps_per_epoch};
  const auto class_counts = train.class_counts();
  if (tc.class_weight_beta > 0.0) {
    for (auto c : class_counts) {
      if (c == 0) throw ConfigError("class weighting needs every class present in the training set");
    }
  }

  const bool grouped = tcfg.shared_features();
  const bool frozen_features = grouped && !tcfg.backbone_trainable;
  const std::size_t units = grouped ? (tcfg.method == Method::single ? 1 : tcfg.ensemble_size)
                                    : (tcfg.method == Method::mc_dropout ? 1 : tcfg.ensemble_size);
  const bool per_member_order = tcfg.method == Method::explicit_ensemble;
  const bool parallel = cfg.jobs > 1 && units > 1 &&
                        (tcfg.method == Method::explicit_ensemble ||
                         (tcfg.method == Method::lora && !tcfg.backbone_trainable));
  const auto inv_units = static_cast<T>(1.0 / static_cast<double>(units));

  // Frozen shared features are a pure function of the input.
  Tensor<T> cached;
  if (frozen_features) {
    cached = Tensor<T>(Shape{n, tcfg.embed_dim});
    for (std::size_t b0 = 0; b0 < n; b0 += kFeatureBatch) {
      const std::size_t b1 = std::min(n, b0 + kFeatureBatch);
      std::vector<std::size_t> idx(b1 - b0);
      for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = b0 + k;
      Tape<T> tape(false);
      auto f = trainee.features(tape, images_as<T>(train.gather_images(idx)), 0);
      std::copy_n(f.value().raw(), f.numel(), cached.raw() + b0 * tcfg.embed_dim);
    }
  }

  spdlog::info("training {} ({} unit(s), {} trainable parameters, {} steps)", to_string(mc.method), units,
               trainee.trainable_count(), plan.total_steps);

  std::size_t step = 0;
  std::size_t next_snapshot = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> orders;
    if (per_member_order) {
      for (std::size_t i = 0; i < units; ++i) orders.push_back(epoch_order(n, cfg.seed, epoch, i + 1));
    } else {
      orders.push_back(epoch_order(n, cfg.seed, epoch, 0));
    }
    std::vector<MemberStats> stats(units);
    double lr = 0.0;

    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      lr = snap ? snapshot_lr_at(step, plan, *snap) : lr_at(step, plan);
      for (auto& p : params) p.zero_grad();
      const std::size_t lo = s * batch, hi = std::min(n, lo + batch);
      auto batch_indices = [&](std::size_t unit) {
        const auto& order = orders[per_member_order ? unit : 0];
        return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                         order.begin() + static_cast<std::ptrdiff_t>(hi));
      };
      CounterRng step_rng = CounterRng(cfg.seed).fork(kDropoutTag).fork(step);

      // non-finite activations surface as NumericError mid-forward
      try {
        if (grouped) {
          const auto idx = batch_indices(0);
          const auto labels = train.gather_labels(idx);
          Tape<T> tape;
          Var<T> feats;
          if (frozen_features) {
            Tensor<T> f(Shape{idx.size(), tcfg.embed_dim});
            for (std::size_t k = 0; k < idx.size(); ++k) {
              std::copy_n(cached.raw() + idx[k] * tcfg.embed_dim, tcfg.embed_dim, f.raw() + k * tcfg.embed_dim);
            }
            feats = Var<T>(std::move(f));
          } else {
            feats = trainee.features(tape, images_as<T>(train.gather_images(idx)), 0);
          }
          Var<T> total;
          for (std::size_t i = 0; i < units; ++i) {
            ForwardOptions<T> opts;
            Tensor<T> z;
            if (tcfg.method == Method::epinet) {
              CounterRng zr = CounterRng(cfg.seed).fork(kEpinetTag).fork(step).fork(i);
              z = Tensor<T>(Shape{idx.size(), tcfg.epistemic_dim});
              for (auto& v : z.data()) v = static_cast<T>(zr.normal());
              opts.epistemic_z = &z;
            }
            auto logits = trainee.head_logits(tape, feats, i, opts);
            auto ce = weighted_ce_loss(tape, logits, labels, class_counts, tc.class_weight_beta);
            stats[i].loss_sum += static_cast<double>(ce.value().item());
            ++stats[i].batches;
            stats[i].correct += count_correct(logits.value(), labels);
            stats[i].seen += labels.size();
            total = total.defined() ? add(tape, total, ce) : ce;
          }
          auto loss = scale(tape, total, inv_units);
          if (!std::isfinite(static_cast<double>(loss.value().item()))) throw RunError("loss diverged", step);
          backward(loss, tape);
        } else {
          auto run_member = [&](std::size_t i) {
            const auto idx = batch_indices(i);
            const auto labels = train.gather_labels(idx);
            CounterRng drop_rng = step_rng.fork(i);
            ForwardOptions<T> opts;
            if (tcfg.method == Method::mc_dropout) {
              opts.stochastic = true;
              opts.rng = &drop_rng;
            }
            Tape<T> tape;
            auto logits = trainee.logits(tape, images_as<T>(train.gather_images(idx)), i, opts);
            auto ce = weighted_ce_loss(tape, logits, labels, class_counts, tc.class_weight_beta);
            stats[i].loss_sum += static_cast<double>(ce.value().item());
            ++stats[i].batches;
            stats[i].correct += count_correct(logits.value(), labels);
            stats[i].seen += labels.size();
            if (!std::isfinite(static_cast<double>(ce.value().item()))) return;
            backward(scale(tape, ce, inv_units), tape);
          };
          if (parallel) {
            const std::size_t jobs = std::min(cfg.jobs, units);
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(jobs);
            for (std::size_t j = 0; j < jobs; ++j) {
              pool.emplace_back([&, j] {
                try {
                  for (std::size_t i = j; i < units; i += jobs) run_member(i);
                } catch (...) {
                  errors[j] = std::current_exception();
                }
              });
            }
            for (auto& t : pool) t.join();
            for (auto& e : errors) {
              if (e) std::rethrow_exception(e);
            }
          } else {
            for (std::size_t i = 0; i < units; ++i) run_member(i);
          }
          for (const auto& st : stats) {
            if (!std::isfinite(st.loss_sum)) throw RunError("loss diverged", step);
          }
        }
      } catch (const NumericError& e) {
        throw RunError(e.what(), step);
      }
      try {
        clip_gradients<T>(params, tc.max_grad_norm);
        optimizer_step<T>(params, opt, lr);
      } catch (const NumericError& e) {
        throw RunError(e.what(), step);
      }
    }

    double loss_mean = 0.0, acc_mean = 0.0;
    for (std::size_t i = 0; i < units; ++i) {
      HistoryRecord rec{epoch, i, stats[i].loss_sum / static_cast<double>(stats[i].batches),
                        static_cast<double>(stats[i].correct) / static_cast<double>(stats[i].seen), lr};
      loss_mean += rec.loss / static_cast<double>(units);
      acc_mean += rec.acc / static_cast<double>(units);
      result.history.push_back(rec);
      if (hooks.on_record) hooks.on_record(rec);
    }
    HistoryRecord agg{epoch, std::nullopt, loss_mean, acc_mean, lr};
    result.history.push_back(agg);
    if (hooks.on_record) hooks.on_record(agg);
    spdlog::info("epoch {:>3}  loss {:.4f}  acc {:.4f}  lr {:.3g}", epoch + 1, loss_mean, acc_mean, lr);

    if (snap) {
      // Members are the last `members` entries of snapshot_epochs.
      const auto& at = snap->snapshot_epochs;
      const std::size_t first_member = at.size() - snap->members;
      for (std::size_t k = first_member; k < at.size(); ++k) {
        if (at[k] == epoch + 1) {
          model.store_snapshot(k - first_member, *live);
          next_snapshot = k - first_member + 1;
        }
      }
    }
  }
  if (snap && tc.epochs > 0 && next_snapshot != snap->members) {
    throw ContractError("snapshot schedule stored " + std::to_string(next_snapshot) + " of " +
                        std::to_string(snap->members) + " members");
  }
  result.steps = step;
  return result;
}

#define LENS_INSTANTIATE_TRAINING(T)                                                                              \
  template struct OptimizerState<T>;                                                                            \
  template void adamw_step<T>(std::span<Var<T>>, OptimizerState<T>&, double);                                   \
  template void sgd_step<T>(std::span<Var<T>>, OptimizerState<T>&, double);                                     \
  template void optimizer_step<T>(std::span<Var<T>>, OptimizerState<T>&, double);                               \
  template double clip_gradients<T>(std::span<Var<T>>, double);                                                 \
  template Var<T> weighted_ce_loss<T>(Tape<T>&, const Var<T>&, std::span<const int>,                            \
                                      std::span<const std::size_t>, double);                                    \
  template TrainResult<T> train_run<T>(const RunConfig&, const Dataset&, const TrainHooks&,                     \
                                       std::optional<EnsembleVit<T>>);

LENS_INSTANTIATE_TRAINING(float)
LENS_INSTANTIATE_TRAINING(double)

}  // namespace lens
