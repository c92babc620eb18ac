#include "gsgcn/gradcheck.hpp"

#include <limits>
#include <random>

#include "gsgcn/model.hpp"
#include "gsgcn/training.hpp"

namespace gsgcn {

GradCheckResult run_micro_grad_check(const GradCheckOptions& options) {
  GradCheckResult result;
#ifdef GSGCN_REAL64
  result.tolerance = 1e-4;
  const double denom_floor = options.denom_floor > 0 ? options.denom_floor : 1e-8;
  const int stencil = 4;  // truncation-limited: fourth order wins
#else
  result.tolerance = 1e-2;
  const double denom_floor = options.denom_floor > 0 ? options.denom_floor : 2e-2;
  const int stencil = 2;  // probe-noise-limited: fewer, wider-spaced probes win
#endif
  result.epsilon = options.epsilon > 0 ? options.epsilon : 1e-3;

  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, options.seed);

  std::mt19937 rng(options.seed + 1);
  const int m = cfg.group_size, t_len = cfg.window_length, k = 3;
  Tensor input({m, cfg.in_channels, t_len, k});
  {
    std::uniform_real_distribution<real> coord(real(-0.4), real(0.4));
    std::uniform_real_distribution<real> conf(real(0.7), real(1.0));
    std::uniform_real_distribution<real> speed(real(-0.1), real(0.1));
    for (int p = 0; p < m; ++p) {
      for (int t = 0; t < t_len; ++t) {
        for (int j = 0; j < k; ++j) {
          input.at({p, 0, t, j}) = coord(rng);
          input.at({p, 1, t, j}) = coord(rng);
          input.at({p, 2, t, j}) = conf(rng);
          input.at({p, 3, t, j}) = speed(rng);
          input.at({p, 4, t, j}) = speed(rng);
        }
      }
    }
  }
  std::vector<Tensor> distances;
  {
    std::uniform_real_distribution<real> dist(real(0.05), real(1.2));
    Tensor d({1, t_len / 2, k});
    for (auto& v : d.vec()) v = dist(rng);
    distances.push_back(std::move(d));
  }
  const std::vector<std::uint8_t> present(static_cast<size_t>(m), 1);
  const int label = 1;

  auto loss_fn = [&]() -> Var {
    ForwardCtx ctx;
    ctx.mode = BnMode::train;  // batch fixed: statistics come from this sample alone
    Var logits = model.forward(input, distances, present, ctx);
    Var loss = focal_loss(softmax(logits, 0), label, real(2));
    if (options.inject_bug) {
      const Var& victim = model.params().entries().front().var;
      loss = add(loss, make_custom(Tensor::scalar(0), {victim},
                                   [](const Tensor& g, std::vector<Tensor>& gi) {
                                     for (auto& v : gi[0].vec()) v += real(0.5) * g[0];
                                   },
                                   "injected_bug"));
    }
    return loss;
  };

  std::vector<Var> params = model.params().vars();
  result.param_entries = model.params().total_elements();
  const double stop_above = options.inject_bug ? result.tolerance
                                               : std::numeric_limits<double>::infinity();
  result.max_rel_error = finite_diff_check(loss_fn, std::span<Var>(params), result.epsilon,
                                           &result.report, denom_floor, stop_above, stencil);
  result.passed = result.max_rel_error < result.tolerance;
  return result;
}

}  // namespace gsgcn
