#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gsgcn/model.hpp"
#include "support/test_util.hpp"

using namespace gsgcn;
using namespace gsgcn::testutil;

namespace {

struct MicroSample {
  Tensor input;
  std::vector<Tensor> distances;
  std::vector<std::uint8_t> present;
};

MicroSample make_micro_sample(const ModelConfig& cfg, std::uint32_t seed, int num_joints = 3) {
  std::mt19937 rng(seed);
  MicroSample s;
  s.input = Tensor({cfg.group_size, cfg.in_channels, cfg.window_length, num_joints});
  std::uniform_real_distribution<real> coord(real(-0.5), real(0.5));
  std::uniform_real_distribution<real> conf(real(0.6), real(1.0));
  for (std::int64_t i = 0; i < s.input.numel(); ++i) s.input[i] = coord(rng);
  // confidence channel in [0.6, 1]
  for (int p = 0; p < cfg.group_size; ++p) {
    for (int t = 0; t < cfg.window_length; ++t) {
      for (int j = 0; j < num_joints; ++j) s.input.at({p, 2, t, j}) = conf(rng);
    }
  }
  std::uniform_real_distribution<real> dd(real(0.05), real(1.5));
  for (int k = 1; k < cfg.group_size; ++k) {
    Tensor d({1, cfg.window_length / 2, num_joints});
    for (auto& v : d.vec()) v = dd(rng);
    s.distances.push_back(std::move(d));
  }
  s.present.assign(static_cast<size_t>(cfg.group_size), 1);
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig bad = ModelConfig::micro();
  bad.window_length = 10;  // not divisible by 4
  CHECK_THROWS_WITH_AS(GsGcnModel(bad, 1), doctest::Contains("divisible by 4"), ModelError);
  bad = ModelConfig::micro();
  bad.extractor_channels1 = 7;  // not divisible by 3 branches
  CHECK_THROWS_AS(GsGcnModel(bad, 1), ModelError);
  bad = ModelConfig::micro();
  bad.in_channels = 4;
  CHECK_THROWS_AS(GsGcnModel(bad, 1), ModelError);
}

TEST_CASE("micro forward shapes follow the stride contract") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 3);
  MicroSample s = make_micro_sample(cfg, 5);
  ForwardCtx ctx;
  ctx.mode = BnMode::eval;
  NoGradGuard ng;
  ForwardTrace trace;
  Var logits = model.forward(s.input, s.distances, s.present, ctx, &trace);
  CHECK(logits.shape() == Shape{3});
  CHECK(trace.features[0].shape() == Shape{12, 4, 3});   // T 8 -> 4
  CHECK(trace.embedded[1].shape() == Shape{12, 4, 3});
  CHECK(trace.fused.shape() == Shape{12, 2, 3});         // T/2 -> T/4
  CHECK(trace.pooled.shape() == Shape{12});
}

TEST_CASE("reference person features pass through bit-identically") {
  const ModelConfig cfg = ModelConfig::micro();
  MicroSample s = make_micro_sample(cfg, 9);
  for (std::uint32_t seed = 0; seed < 20; ++seed) {
    GsGcnModel model(cfg, seed);
    ForwardCtx ctx;
    ctx.mode = BnMode::eval;
    NoGradGuard ng;
    ForwardTrace trace;
    model.forward(s.input, s.distances, s.present, ctx, &trace);
    CHECK(bitwise_equal(trace.features[0].value(), trace.embedded[0].value()));
  }
}

TEST_CASE("eval forward is deterministic bit-for-bit") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 21);
  MicroSample s = make_micro_sample(cfg, 22);
  Tensor p1 = model.predict(s.input, s.distances, s.present);
  Tensor p2 = model.predict(s.input, s.distances, s.present);
  CHECK(bitwise_equal(p1, p2));
  real total = 0;
  for (std::int64_t i = 0; i < p1.numel(); ++i) total += p1[i];
  CHECK(std::abs(total - 1) < real(1e-5));
}

TEST_CASE("zero input stays finite") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 2);
  MicroSample s = make_micro_sample(cfg, 2);
  s.input.fill(0);
  Tensor p = model.predict(s.input, s.distances, s.present);
  CHECK(p.all_finite());
}

TEST_CASE("per-person extractors are not shared") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 17);
  MicroSample s = make_micro_sample(cfg, 18);
  NoGradGuard ng;
  ForwardCtx ctx;
  ctx.mode = BnMode::eval;
  Var z = Var::constant(Tensor({cfg.in_channels, cfg.window_length, 3},
                               std::vector<real>(static_cast<size_t>(cfg.in_channels) * 8 * 3,
                                                 real(0.3))));
  Var f0 = model.extract_person_features(0, z, ctx);
  Var f1 = model.extract_person_features(1, z, ctx);
  CHECK_FALSE(bitwise_equal(f0.value(), f1.value()));
}

TEST_CASE("distance_embed rejects the reference person") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 4);
  NoGradGuard ng;
  ForwardCtx ctx;
  ctx.mode = BnMode::eval;
  Var f = Var::constant(Tensor({cfg.extractor_channels2, cfg.window_length / 2, 3}));
  Tensor d({1, cfg.window_length / 2, 3});
  CHECK_THROWS_AS(model.distance_embed(0, f, d, ctx), ModelError);
  CHECK_THROWS_AS(model.distance_embed(5, f, d, ctx), ModelError);
}

TEST_CASE("absent non-reference persons silence their input") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 31);
  MicroSample s = make_micro_sample(cfg, 32);
  s.present = {1, 0};
  Tensor p1 = model.predict(s.input, s.distances, s.present);
  // change the absent person's input wildly: the logits must not move
  for (int t = 0; t < cfg.window_length; ++t) {
    for (int j = 0; j < 3; ++j) {
      for (int c = 0; c < cfg.in_channels; ++c) s.input.at({1, c, t, j}) = real(42);
    }
  }
  Tensor p2 = model.predict(s.input, s.distances, s.present);
  CHECK(bitwise_equal(p1, p2));
}

TEST_CASE("distance gate is monotone at a non-negative initialization") {
  // eval-mode bn is pass-through at init; force W >= 0, b = 0:
  // gate(d) = relu(W e^{-d}) is entrywise non-increasing in d
  const ModelConfig cfg = ModelConfig::micro();
  for (std::uint32_t seed : {1u, 2u, 3u, 4u, 5u}) {
    GsGcnModel model(cfg, seed);
    Var w = model.params().find("mlp1.w");
    for (auto& v : w.mutable_value().vec()) v = std::abs(v);
    NoGradGuard ng;
    ForwardCtx ctx;
    ctx.mode = BnMode::eval;
    std::mt19937 rng(seed + 100);
    Tensor f = Tensor::ones({cfg.extractor_channels2, cfg.window_length / 2, 3});
    Tensor d1 = random_tensor({1, cfg.window_length / 2, 3}, rng, real(0.05), real(1.0));
    Tensor d2 = d1;
    for (auto& v : d2.vec()) v += real(0.5);  // entrywise larger distances
    Var g1 = model.distance_embed(1, Var::constant(f), d1, ctx);
    Var g2 = model.distance_embed(1, Var::constant(f), d2, ctx);
    for (std::int64_t i = 0; i < g1.value().numel(); ++i) {
      CHECK(g1.value()[i] >= g2.value()[i] - real(1e-6));
    }
  }
}

TEST_CASE("swapping non-reference persons with their parameters fixes the logits") {
  ModelConfig cfg = ModelConfig::micro();
  cfg.group_size = 3;  // need two non-reference persons to swap
  GsGcnModel model(cfg, 41);
  MicroSample s = make_micro_sample(cfg, 42);
  const Tensor before = model.predict(s.input, s.distances, s.present);

  // swap persons 1 and 2 in the sample
  MicroSample swapped = s;
  const int k = 3;
  for (int c = 0; c < cfg.in_channels; ++c) {
    for (int t = 0; t < cfg.window_length; ++t) {
      for (int j = 0; j < k; ++j) {
        std::swap(swapped.input.at({1, c, t, j}), swapped.input.at({2, c, t, j}));
      }
    }
  }
  std::swap(swapped.distances[0], swapped.distances[1]);

  // swap extractor1<->extractor2 and mlp1<->mlp2 parameters and buffers
  auto swap_params = [&](const std::string& a, const std::string& b) {
    for (const auto& e : model.params().entries()) {
      const std::string& name = e.var.name();
      if (name.rfind(a, 0) == 0) {
        Var other = model.params().find(b + name.substr(a.size()));
        std::swap(const_cast<Var&>(e.var).mutable_value(), other.mutable_value());
      }
    }
  };
  auto swap_buffers = [&](const std::string& a, const std::string& b) {
    for (const auto& named : model.buffers()) {
      if (named.name.rfind(a, 0) == 0) {
        for (const auto& other : model.buffers()) {
          if (other.name == b + named.name.substr(a.size())) {
            std::swap(named.stats->running_mean, other.stats->running_mean);
            std::swap(named.stats->running_var, other.stats->running_var);
          }
        }
      }
    }
  };
  swap_params("extractor1.", "extractor2.");
  swap_params("mlp1.", "mlp2.");
  swap_buffers("extractor1.", "extractor2.");
  swap_buffers("mlp1.", "mlp2.");

  // swap the fusion input-channel blocks [C2, 2*C2) and [2*C2, 3*C2)
  const int c2 = cfg.extractor_channels2;
  for (const auto& e : model.params().entries()) {
    const std::string& name = e.var.name();
    if (name.rfind("fusion.", 0) != 0) continue;
    Tensor& t = const_cast<Var&>(e.var).mutable_value();
    const bool input_facing = (name.find(".w") != std::string::npos &&
                               name.find("proj") == std::string::npos &&
                               name.find("tconv") == std::string::npos) ||
                              name == "fusion.res.w";
    if (!input_facing || t.rank() != 2 || t.dim(1) != 3 * c2) continue;
    for (int r = 0; r < t.dim(0); ++r) {
      for (int c = 0; c < c2; ++c) {
        std::swap(t.at({r, c2 + c}), t.at({r, 2 * c2 + c}));
      }
    }
  }

  const Tensor after = model.predict(swapped.input, swapped.distances, swapped.present);
  CHECK(approx_tensor(before, after, 2e-4));
}

TEST_CASE("parameter registry") {
  const ModelConfig cfg = ModelConfig::micro();
  GsGcnModel model(cfg, 1);
  CHECK(model.params().total_elements() > 0);
  CHECK_THROWS_AS(model.params().find("nonexistent"), ModelError);
  // masks carry no weight decay
  for (const auto& e : model.params().entries()) {
    if (e.var.name().find("mask") != std::string::npos) CHECK_FALSE(e.decay);
    if (e.var.name().find("proj_w") != std::string::npos) CHECK(e.decay);
  }
  // no distance MLPs once the embedding is disabled
  ModelConfig no_gate = cfg;
  no_gate.distance_embedding = false;
  GsGcnModel plain(no_gate, 1);
  for (const auto& e : plain.params().entries()) {
    CHECK(e.var.name().rfind("mlp", 0) != 0);
  }
}

TEST_CASE("group size one degrades to a single-person classifier") {
  ModelConfig cfg = ModelConfig::micro();
  cfg.group_size = 1;
  GsGcnModel model(cfg, 8);
  MicroSample s = make_micro_sample(cfg, 8);
  Tensor p = model.predict(s.input, {}, {1});
  CHECK(p.numel() == cfg.num_classes);
  CHECK(p.all_finite());
}
