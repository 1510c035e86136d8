#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lens/autodiff.hpp"

namespace lens {

/// Scalar-valued function of tensors recorded on the given tape.
template <typename T>
using ScalarFn = std::function<Var<T>(Tape<T>&)>;

/// Compares autodiff gradients of `f` with central differences, perturbing
/// the leaves in `inputs` in place. Returns the max over checked coordinates
/// of |autodiff - fd| / max(1, |fd|). When `max_coords` is nonzero, at most
/// that many coordinates per input are sampled (deterministically from `seed`).
template <typename T>
double grad_check(const ScalarFn<T>& f, std::vector<Var<T>> inputs, T h, std::size_t max_coords = 0,
                  std::uint64_t seed = 0);

struct GradCheckStats {
  double max_error = 0;
  std::size_t probes = 0;  // coordinates compared
};

/// grad_check that also reports how many coordinates were compared.
template <typename T>
GradCheckStats grad_check_stats(const ScalarFn<T>& f, std::vector<Var<T>> inputs, T h, std::size_t max_coords = 0,
                                std::uint64_t seed = 0);

/// Single-input convenience form: f(x) at the point x.
template <typename T>
double grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, const Tensor<T>& x, T h);

/// A registered differentiable operation: `make` draws a random instance,
/// returning the scalar function and the leaves to perturb.
struct GradCheckCase {
  std::string name;
  std::function<std::pair<ScalarFn<double>, std::vector<Var<double>>>(CounterRng&)> make;
};

struct GradCheckResult {
  std::string name;
  double max_error = 0;
  std::size_t probes = 0;
  bool passed = false;
};

/// Every autodiff op, each adapter forward, and end-to-end micro-ViT losses.
std::vector<GradCheckCase> gradcheck_cases();

/// Draws instances of each case until at least `min_probes` coordinates have
/// been compared; a case passes when its max relative error is below `tol`.
std::vector<GradCheckResult> run_gradcheck_suite(const std::vector<GradCheckCase>& cases, std::size_t min_probes = 100,
                                                 double tol = 1e-4, std::uint64_t seed = 0, double h = 1e-6);

}  // namespace lens
