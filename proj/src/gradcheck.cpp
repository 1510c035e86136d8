#include "lens/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lens {

template <typename T>
double grad_check(const ScalarFn<T>& f, std::vector<Var<T>> inputs, T h, std::size_t max_coords, std::uint64_t seed) {
  return grad_check_stats(f, std::move(inputs), h, max_coords, seed).max_error;
}

template <typename T>
GradCheckStats grad_check_stats(const ScalarFn<T>& f, std::vector<Var<T>> inputs, T h, std::size_t max_coords,
                                std::uint64_t seed) {
  std::vector<bool> had_grad;
  for (auto& v : inputs) {
    had_grad.push_back(v.requires_grad());
    v.set_requires_grad(true);
    v.zero_grad();
  }
  {
    Tape<T> tape;
    auto loss = f(tape);
    backward(loss, tape);
  }
  auto eval = [&f] {
    Tape<T> tape(false);
    return static_cast<double>(f(tape).value().item());
  };

  CounterRng rng(seed);
  double worst = 0.0;
  std::size_t probes = 0;
  for (auto& v : inputs) {
    const Tensor<T> analytic = v.grad().empty() ? Tensor<T>::zeros(v.shape()) : v.grad();
    std::vector<std::size_t> coords(v.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords != 0 && coords.size() > max_coords) {
      // partial Fisher-Yates for a reproducible sample
      for (std::size_t i = 0; i < max_coords; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(max_coords);
    }
    auto& x = v.mutable_value();
    for (auto i : coords) {
      const T orig = x[i];
      x[i] = orig + h;
      const double up = eval();
      x[i] = orig - h;
      const double down = eval();
      x[i] = orig;
      const double fd = (up - down) / (2.0 * static_cast<double>(h));
      const double err = std::abs(static_cast<double>(analytic[i]) - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
      ++probes;
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i].set_requires_grad(had_grad[i]);
  return {worst, probes};
}

template <typename T>
double grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, const Tensor<T>& x, T h) {
  auto leaf = Var<T>::parameter(x);
  return grad_check<T>([&](Tape<T>& tape) { return f(tape, leaf); }, {leaf}, h);
}

template GradCheckStats grad_check_stats<float>(const ScalarFn<float>&, std::vector<Var<float>>, float, std::size_t,
                                                std::uint64_t);
template GradCheckStats grad_check_stats<double>(const ScalarFn<double>&, std::vector<Var<double>>, double,
                                                 std::size_t, std::uint64_t);
template double grad_check<float>(const ScalarFn<float>&, std::vector<Var<float>>, float, std::size_t, std::uint64_t);
template double grad_check<double>(const ScalarFn<double>&, std::vector<Var<double>>, double, std::size_t,
                                   std::uint64_t);
template double grad_check<float>(const std::function<Var<float>(Tape<float>&, const Var<float>&)>&,
                                  const Tensor<float>&, float);
template double grad_check<double>(const std::function<Var<double>(Tape<double>&, const Var<double>&)>&,
                                   const Tensor<double>&, double);

}  // namespace lens
