#include "ctflow/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ctflow/errors.hpp"

namespace ctflow {

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / denom;
}

double grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x, double eps) {
  auto input = Var<double>::parameter(x);
  backward(f(input));
  const Tensor<double> analytic = input.grad();

  double worst = 0.0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(Var<double>(probe)).value()[0];
    probe[i] = x[i] - eps;
    const double down = f(Var<double>(probe)).value()[0];
    probe[i] = x[i];
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

namespace {

// `shifted(k, i, d)` is the loss with coordinate i of parameter k moved by d.
GradCheckReport compare(const ParameterList<double>& params, double eps, std::size_t coords_per_tensor,
                        std::uint64_t seed, const std::function<long double(std::size_t, std::size_t, double)>& shifted) {
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    const Tensor<double> analytic = Var<double>(p.var).grad();
    std::vector<std::size_t> coords(p.var.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const long double up = shifted(k, i, eps), down = shifted(k, i, -eps);
      const double numeric = static_cast<double>((up - down) / (2.0L * eps));
      const double err = relative_error(analytic[i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_parameter = p.name;
        report.worst_index = i;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

template <typename T>
long double shifted_loss(const std::function<Var<T>()>& loss, const ParameterList<T>& params, std::size_t k,
                         std::size_t i, double delta) {
  Var<T> var = params[k].var;
  Tensor<T>& value = var.mutable_value();
  const T saved = value[i];
  value[i] = saved + static_cast<T>(delta);
  const long double out = loss().value()[0];
  value[i] = saved;
  return out;
}

}  // namespace

GradCheckReport grad_check_parameters(const std::function<Var<double>()>& loss, const ParameterList<double>& params,
                                      double eps, std::size_t coords_per_tensor, std::uint64_t seed) {
  for (const auto& p : params) Var<double>(p.var).zero_grad();
  backward(loss());
  return compare(params, eps, coords_per_tensor, seed, [&](std::size_t k, std::size_t i, double d) {
    return shifted_loss(loss, params, k, i, d);
  });
}

GradCheckReport grad_check_parameters(const std::function<Var<double>()>& loss, const ParameterList<double>& params,
                                      const std::function<Var<long double>()>& reference,
                                      const ParameterList<long double>& reference_params, double eps,
                                      std::size_t coords_per_tensor, std::uint64_t seed) {
  if (reference_params.size() != params.size()) throw ShapeError("reference parameters do not match");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (reference_params[k].name != params[k].name || reference_params[k].var.numel() != params[k].var.numel()) {
      throw ShapeError("reference parameter " + reference_params[k].name + " does not match " + params[k].name);
    }
  }
  for (const auto& p : params) Var<double>(p.var).zero_grad();
  backward(loss());
  NoGradGuard no_grad;
  return compare(params, eps, coords_per_tensor, seed, [&](std::size_t k, std::size_t i, double d) {
    return shifted_loss(reference, reference_params, k, i, d);
  });
}

}  // namespace ctflow
