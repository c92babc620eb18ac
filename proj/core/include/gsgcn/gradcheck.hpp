#pragma once

#include <cstdint>

#include "gsgcn/autodiff.hpp"

namespace gsgcn {

struct GradCheckOptions {
  double epsilon = 0;      // 0 selects the per-build default of 1e-3
  // Significance floor for the relative-error denominator. 0 selects the
  // per-build default: 1e-8 for 64-bit probes; 2e-2 for 32-bit ones, whose
  // loss evaluations resolve gradients only down to about 2e-4.
  double denom_floor = 0;
  std::uint32_t seed = 11;  // fixture seed for parameters and input
  bool inject_bug = false;  // sabotage one backward rule; the check must then fail
};

struct GradCheckResult {
  double max_rel_error = 0;
  double tolerance = 0;
  double epsilon = 0;
  bool passed = false;
  std::int64_t param_entries = 0;
  FdReport report;
};

// Central-difference verification of the end-to-end micro model (3-joint
// chain, T=8, M=2, 3 classes): focal loss of a fixed random sample against
// every parameter entry.
GradCheckResult run_micro_grad_check(const GradCheckOptions& options = {});

}  // namespace gsgcn
