// 64-bit verification build: the micro-model gradient check must hold at the
// tight tolerance, and an injected backward bug must break it.
#include <cstdio>

#include "gsgcn/gradcheck.hpp"

int main() {
  using namespace gsgcn;
  static_assert(sizeof(real) == 8, "this test requires the GSGCN_REAL64 build");

  GradCheckOptions opt;
  const GradCheckResult r = run_micro_grad_check(opt);
  std::printf("gradcheck64: max_rel_error=%.3e tolerance=%.0e entries=%lld kink_skipped=%lld\n",
              r.max_rel_error, r.tolerance, static_cast<long long>(r.param_entries),
              static_cast<long long>(r.report.kink_skipped));
  bool ok = r.passed;

  GradCheckOptions bug = opt;
  bug.inject_bug = true;
  const GradCheckResult rb = run_micro_grad_check(bug);
  std::printf("gradcheck64 (injected bug): max_rel_error=%.3e -> %s\n", rb.max_rel_error,
              rb.passed ? "unexpected PASS" : "detected");
  ok = ok && !rb.passed && rb.max_rel_error > 0.1;

  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}
