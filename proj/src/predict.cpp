#include "lens/predict.hpp"

#include <algorithm>
#include <thread>

#include "lens/errors.hpp"

namespace lens {

namespace {

constexpr std::uint64_t kMcTag = 0x3C0D;

template <typename T>
Tensor<T> as_t(Tensor<float> images) {
  if constexpr (std::is_same_v<T, float>) {
    return images;
  } else {
    return images.cast<T>();
  }
}

template <typename T>
Tensor<float> slice_images(const Tensor<float>& images, std::size_t lo, std::size_t hi) {
  const std::size_t pixels = images.numel() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = hi - lo;
  return Tensor<float>(shape, std::vector<float>(images.raw() + lo * pixels, images.raw() + hi * pixels));
}

void require_geometry(const ModelConfig& cfg, const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(1) != cfg.image_size || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.channels) {
    throw ConfigError("images " + shape_string(images.shape()) + " do not match the model geometry " +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                      std::to_string(cfg.channels));
  }
}

/// Runs `fn(member)` for every member, split across `jobs` threads.
template <typename Fn>
void for_members(std::size_t members, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, members));
  if (jobs == 1) {
    for (std::size_t i = 0; i < members; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&, j] {
      try {
        for (std::size_t i = j; i < members; i += jobs) fn(i);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

template <typename T>
Tensor<double> member_logits(const EnsembleVit<T>& model, const Tensor<float>& images, const PredictOptions& opts) {
  const auto& cfg = model.config();
  require_geometry(cfg, images);
  const std::size_t n = model.members(), s = images.dim(0), c = cfg.num_classes;
  Tensor<double> out(Shape{n, s, c});
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t lo = 0; lo < s; lo += bs) {
    const std::size_t hi = std::min(s, lo + bs);
    const auto x = as_t<T>(slice_images<T>(images, lo, hi));
    auto write = [&](std::size_t i, const Tensor<T>& logits) {
      for (std::size_t e = 0; e < logits.numel(); ++e) out.raw()[(i * s + lo) * c + e] = logits[e];
    };
    if (cfg.shared_features() && !cfg.backbone_trainable) {
      Tape<T> tape(false);
      const auto feats = model.features(tape, x, 0);
      for (std::size_t i = 0; i < n; ++i) write(i, model.head_logits(tape, feats, i).value());
    } else if (cfg.method == Method::mc_dropout) {
      for_members(n, opts.jobs, [&](std::size_t i) {
        CounterRng rng = CounterRng(opts.mc_seed).fork(kMcTag).fork(i).fork(lo);
        ForwardOptions<T> fo;
        fo.stochastic = true;
        fo.rng = &rng;
        Tape<T> tape(false);
        write(i, model.logits(tape, x, 0, fo).value());
      });
    } else {
      for_members(n, opts.jobs, [&](std::size_t i) {
        Tape<T> tape(false);
        write(i, model.logits(tape, x, i).value());
      });
    }
  }
  return out;
}

template <typename T>
PredictionSet predict(const EnsembleVit<T>& model, const Dataset& data, double temperature,
                      const PredictOptions& opts) {
  if (data.num_classes != model.config().num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                      std::to_string(model.config().num_classes));
  }
  return PredictionSet{ensemble_probs(member_logits(model, data.images, opts), temperature), data.labels};
}

template <typename T>
Tensor<double> mc_dropout_predict(const EnsembleVit<T>& model, const Tensor<float>& images, std::size_t samples,
                                  double rate, std::uint64_t seed, std::size_t batch_size) {
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout rate must lie in [0,1)");
  require_geometry(model.config(), images);
  const std::size_t s = images.dim(0), c = model.config().num_classes;
  Tensor<double> logits(Shape{samples, s, c});
  const std::size_t bs = std::max<std::size_t>(1, batch_size);
  for (std::size_t lo = 0; lo < s; lo += bs) {
    const std::size_t hi = std::min(s, lo + bs);
    const auto x = as_t<T>(slice_images<T>(images, lo, hi));
    for (std::size_t k = 0; k < samples; ++k) {
      CounterRng rng = CounterRng(seed).fork(kMcTag).fork(k).fork(lo);
      ForwardOptions<T> fo;
      fo.stochastic = true;
      fo.rng = &rng;
      fo.dropout_rate = rate;
      Tape<T> tape(false);
      const auto out = model.logits(tape, x, 0, fo).value();
      for (std::size_t e = 0; e < out.numel(); ++e) logits.raw()[(k * s + lo) * c + e] = out[e];
    }
  }
  return temperature_scale(logits, 1.0);
}

template Tensor<double> member_logits<float>(const EnsembleVit<float>&, const Tensor<float>&, const PredictOptions&);
template Tensor<double> member_logits<double>(const EnsembleVit<double>&, const Tensor<float>&, const PredictOptions&);
template PredictionSet predict<float>(const EnsembleVit<float>&, const Dataset&, double, const PredictOptions&);
template PredictionSet predict<double>(const EnsembleVit<double>&, const Dataset&, double, const PredictOptions&);
template Tensor<double> mc_dropout_predict<float>(const EnsembleVit<float>&, const Tensor<float>&, std::size_t, double,
                                                  std::uint64_t, std::size_t);
template Tensor<double> mc_dropout_predict<double>(const EnsembleVit<double>&, const Tensor<float>&, std::size_t,
                                                   double, std::uint64_t, std::size_t);

}  // namespace lens
