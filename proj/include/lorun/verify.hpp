#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lorun/autodiff.hpp"

namespace lorun {

struct CheckResult {
  std::string check;
  double metric = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  int adjoint_trials = 100;
  bool corrupt_adjoint = false;  // test hook: perturbs every operator adjoint
};

/// Names of the registered checks, in report order.
std::vector<std::string> registered_checks();

std::vector<CheckResult> run_verify(const VerifyOptions& options = {});

/// {"check": ..., "metric": ..., "threshold": ..., "pass": ...}
std::string to_json_line(const CheckResult& r);

using ScalarFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Relative error ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||) between reverse-mode
/// gradients and central differences (step h) of a scalar function of the inputs.
double gradient_error(const std::vector<TensorD>& inputs, const ScalarFn& f, double h = 1e-6);

}  // namespace lorun
