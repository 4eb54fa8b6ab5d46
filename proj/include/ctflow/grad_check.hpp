#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "ctflow/autograd.hpp"

namespace ctflow {

/// |a - b| / max(|a|, |b|, 1e-12)
double relative_error(double a, double b);

/// Worst per-coordinate relative error between backward() and central
/// differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). `f` must return a
/// single-element tensor.
double grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                  double eps = 1e-6);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Same comparison for the parameters of a model. `loss` rebuilds the graph on
/// every call. Tensors with at most `coords_per_tensor` elements are checked
/// exhaustively; larger ones on a seeded random subset of that size.
GradCheckReport grad_check_parameters(const std::function<Var<double>()>& loss, const ParameterList<double>& params,
                                      double eps, std::size_t coords_per_tensor, std::uint64_t seed);

/// As above, but the differences are taken on `reference`, an extended
/// precision copy of the model whose parameters mirror `params` name for name.
/// Keeps the f64 gradient honest where f64 roundoff would swamp small entries.
GradCheckReport grad_check_parameters(const std::function<Var<double>()>& loss, const ParameterList<double>& params,
                                      const std::function<Var<long double>()>& reference,
                                      const ParameterList<long double>& reference_params, double eps,
                                      std::size_t coords_per_tensor, std::uint64_t seed);

}  // namespace ctflow
