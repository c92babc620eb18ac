#include "gsgcn/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace gsgcn {

// ---- ParamStore ------------------------------------------------------------

Var ParamStore::add(const std::string& name, Tensor init, std::mt19937& rng, real init_scale,
                    bool decay) {
  std::uniform_real_distribution<real> dist(-init_scale, init_scale);
  for (auto& v : init.vec()) v = dist(rng);
  return add_const_init(name, std::move(init), decay);
}

Var ParamStore::add_const_init(const std::string& name, Tensor init, bool decay) {
  if (index_.count(name)) throw ModelError("duplicate parameter name: " + name);
  Var v = Var::param(std::move(init), name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{v, decay});
  return v;
}

std::vector<Var> ParamStore::vars() const {
  std::vector<Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.var);
  return out;
}

Var ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ModelError("no parameter named " + name);
  return entries_[it->second].var;
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.var.value().numel();
  return n;
}

// ---- BnStatsSink -----------------------------------------------------------

void BnStatsSink::add(int site, const Tensor& mean, const Tensor& var) {
  if (site >= static_cast<int>(counts_.size())) {
    counts_.resize(static_cast<size_t>(site) + 1, 0);
    mean_sums_.resize(static_cast<size_t>(site) + 1);
    var_sums_.resize(static_cast<size_t>(site) + 1);
  }
  auto& c = counts_[static_cast<size_t>(site)];
  if (c == 0) {
    mean_sums_[static_cast<size_t>(site)] = mean;
    var_sums_[static_cast<size_t>(site)] = var;
  } else {
    for (std::int64_t i = 0; i < mean.numel(); ++i) {
      mean_sums_[static_cast<size_t>(site)][i] += mean[i];
      var_sums_[static_cast<size_t>(site)][i] += var[i];
    }
  }
  ++c;
}

void BnStatsSink::merge(const BnStatsSink& other) {
  for (int s = 0; s < other.num_sites(); ++s) {
    if (other.counts_[static_cast<size_t>(s)] == 0) continue;
    if (s >= static_cast<int>(counts_.size())) {
      counts_.resize(static_cast<size_t>(s) + 1, 0);
      mean_sums_.resize(static_cast<size_t>(s) + 1);
      var_sums_.resize(static_cast<size_t>(s) + 1);
    }
    if (counts_[static_cast<size_t>(s)] == 0) {
      counts_[static_cast<size_t>(s)] = other.counts_[static_cast<size_t>(s)];
      mean_sums_[static_cast<size_t>(s)] = other.mean_sums_[static_cast<size_t>(s)];
      var_sums_[static_cast<size_t>(s)] = other.var_sums_[static_cast<size_t>(s)];
    } else {
      counts_[static_cast<size_t>(s)] += other.counts_[static_cast<size_t>(s)];
      for (std::int64_t i = 0; i < mean_sums_[static_cast<size_t>(s)].numel(); ++i) {
        mean_sums_[static_cast<size_t>(s)][i] += other.mean_sums_[static_cast<size_t>(s)][i];
        var_sums_[static_cast<size_t>(s)][i] += other.var_sums_[static_cast<size_t>(s)][i];
      }
    }
  }
}

std::int64_t BnStatsSink::count(int site) const {
  return site < static_cast<int>(counts_.size()) ? counts_[static_cast<size_t>(site)] : 0;
}

Tensor BnStatsSink::mean_avg(int site) const {
  Tensor t = mean_sums_[static_cast<size_t>(site)];
  const real inv = real(1) / static_cast<real>(counts_[static_cast<size_t>(site)]);
  for (auto& v : t.vec()) v *= inv;
  return t;
}

Tensor BnStatsSink::var_avg(int site) const {
  Tensor t = var_sums_[static_cast<size_t>(site)];
  const real inv = real(1) / static_cast<real>(counts_[static_cast<size_t>(site)]);
  for (auto& v : t.vec()) v *= inv;
  return t;
}

// ---- BnLayer ---------------------------------------------------------------

Var BnLayer::forward(const Var& x, int channel_axis, ForwardCtx& ctx) const {
  if (ctx.mode == BnMode::eval) {
    return batch_norm(x, gamma, beta, channel_axis, BnMode::eval, stats.get());
  }
  // Train mode normalizes with the statistics of x itself. Running statistics
  // are not touched here; the trainer folds the sink contents in once per
  // batch so concurrent per-sample forwards stay race-free.
  const Shape& s = x.shape();
  const int channels = s[static_cast<size_t>(channel_axis)];
  Shape bshape(s.size(), 1);
  bshape[static_cast<size_t>(channel_axis)] = channels;
  std::vector<int> axes;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    if (i != channel_axis) axes.push_back(i);
  }
  Var mu = mean(x, axes, true);
  Var xc = sub(x, mu);
  Var var = mean(mul(xc, xc), axes, true);
  if (ctx.stats) {
    Tensor m({channels}, mu.value().vec());
    Tensor v({channels}, var.value().vec());
    ctx.stats->add(site_index, m, v);
  }
  Var rsig = pow_scalar(add_scalar(var, real(1e-5)), real(-0.5));
  Var g = reshape(gamma, bshape);
  Var b = reshape(beta, bshape);
  return add(mul(mul(xc, rsig), g), b);
}

// ---- ModelConfig -----------------------------------------------------------

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.layout = "path3";
  c.group_size = 2;
  c.in_channels = 5;
  c.window_length = 8;
  c.num_classes = 3;
  c.extractor_channels1 = 6;
  c.extractor_channels2 = 12;
  c.fusion_channels = 12;
  return c;
}

void ModelConfig::validate() const {
  if (group_size < 1) throw ModelError("config: group size M must be >= 1");
  if (in_channels != 3 && in_channels != 5) {
    throw ModelError("config: in_channels must be 5 (with speed) or 3 (without)");
  }
  if (window_length < 4 || window_length % 4 != 0) {
    throw ModelError("config: window length T must be positive and divisible by 4, got " +
                     std::to_string(window_length));
  }
  if (num_classes < 2) throw ModelError("config: need at least 2 classes");
  if (spatial_scales < 1) throw ModelError("config: need at least 1 spatial scale");
  const int branches = static_cast<int>(g3d_windows.size()) + 1;
  for (int c : {extractor_channels1, extractor_channels2, fusion_channels}) {
    if (c % branches != 0) {
      throw ModelError("config: channel count " + std::to_string(c) +
                       " not divisible by the " + std::to_string(branches) + " block branches");
    }
  }
  for (int tau : g3d_windows) {
    if (tau < 1 || tau % 2 == 0) {
      throw ModelError("config: window sizes must be odd, got " + std::to_string(tau));
    }
  }
}

// ---- layer forwards ----------------------------------------------------------

namespace detail {

namespace {

// (c_out, C) x (C, T*K) channel mix, reshaped back to (c_out, T, K).
Var mix_channels(const Var& w, const Var& x) {
  const Shape& s = x.shape();
  Var flat = reshape(x, {s[0], s[1] * s[2]});
  Var mixed = matmul(w, flat);
  return reshape(mixed, {w.shape()[0], s[1], s[2]});
}

Var add_channel_bias(const Var& x, const Var& bias) {
  return add(x, reshape(bias, {static_cast<int>(bias.value().numel()), 1, 1}));
}

}  // namespace

Var MsGcnUnit::forward(const Var& x, ForwardCtx& ctx) const {
  std::vector<Var> parts;
  parts.reserve(scale_w.size());
  for (size_t s = 0; s < scale_w.size(); ++s) {
    Var mixed = mix_channels(scale_w[s], x);
    Var a_eff = add(adj[s], masks[s]);
    parts.push_back(matmul(mixed, a_eff));
  }
  Var cat = concat(std::span<const Var>(parts), 0);
  Var proj = mix_channels(proj_w, cat);
  proj = add_channel_bias(proj, proj_b);
  return relu(bn.forward(proj, 0, ctx));
}

Var G3dPathway::forward(const Var& x, ForwardCtx& ctx) const {
  const Shape& s = x.shape();
  const int t_in = s[1], k = s[2];
  if (t_in % stride != 0) {
    throw ModelError("g3d pathway: T=" + std::to_string(t_in) + " not divisible by stride " +
                     std::to_string(stride));
  }
  const int t_out = t_in / stride;
  const int pad = tau / 2;
  std::vector<Var> parts;
  parts.reserve(scale_w.size());
  for (size_t si = 0; si < scale_w.size(); ++si) {
    Var mixed = mix_channels(scale_w[si], x);
    Var padded = pad_zero(mixed, 1, pad, pad);
    std::vector<Var> taps;
    taps.reserve(static_cast<size_t>(tau));
    const int c = mixed.shape()[0];
    for (int b = 0; b < tau; ++b) {
      Var tap = slice(padded, 1, b, b + (t_out - 1) * stride + 1, stride);
      taps.push_back(reshape(tap, {c, t_out, 1, k}));
    }
    Var unfolded = reshape(concat(std::span<const Var>(taps), 2), {c, t_out, tau * k});
    // Windowed graph convolution collapsed to one (tauK, K) contraction:
    // conv then slot-mean, scaled 1/tau so a constant sequence maps to A x.
    Var a_eff = add(adj[si], masks[si]);
    Var g = mul_scalar(mean(reshape(transpose(a_eff, {1, 0}), {tau * k, tau, k}), {1}, false),
                       real(1) / static_cast<real>(tau));
    parts.push_back(matmul(unfolded, g));
  }
  Var cat = concat(std::span<const Var>(parts), 0);
  Var proj = mix_channels(proj_w, cat);
  proj = add_channel_bias(proj, proj_b);
  return bn.forward(proj, 0, ctx);
}

Var TemporalConv::forward(const Var& x, ForwardCtx& ctx) const {
  const Shape& s = x.shape();
  const int t_in = s[1];
  if (t_in % stride != 0) {
    throw ModelError("temporal conv: T=" + std::to_string(t_in) + " not divisible by stride " +
                     std::to_string(stride));
  }
  const int t_out = t_in / stride;
  Var padded = pad_zero(x, 1, 1, 1);
  std::vector<Var> taps;
  for (int b = 0; b < 3; ++b) {
    taps.push_back(slice(padded, 1, b, b + (t_out - 1) * stride + 1, stride));
  }
  Var cat = concat(std::span<const Var>(taps), 0);  // (3C, T_out, K), tap-major
  Var out = mix_channels(w, cat);
  out = add_channel_bias(out, b);
  return bn.forward(out, 0, ctx);
}

Var StgcBlock::forward(const Var& x, ForwardCtx& ctx) const {
  Var a = g3d_a.forward(x, ctx);
  Var bpath = g3d_b.forward(x, ctx);
  Var m = tconv.forward(msgcn.forward(x, ctx), ctx);
  Var cat = concat({a, bpath, m}, 0);
  Var res;
  if (residual_identity) {
    res = x;
  } else {
    const Shape& s = x.shape();
    Var sub_x = cfg.temporal_stride == 1 ? x : slice(x, 1, 0, s[1], cfg.temporal_stride);
    res = res_bn.forward(mix_channels(res_w, sub_x), 0, ctx);
  }
  return relu(add(cat, res));
}

Var DistanceMlp::forward(const Var& neg_exp_distance, ForwardCtx& ctx) const {
  const Shape& s = neg_exp_distance.shape();  // (1, T/2, K)
  Var flat = reshape(neg_exp_distance, {1, s[1] * s[2]});
  Var lin = reshape(matmul(w, flat), {w.shape()[0], s[1], s[2]});
  lin = add(lin, reshape(b, {w.shape()[0], 1, 1}));
  return relu(bn.forward(lin, 0, ctx));
}

}  // namespace detail

// ---- model construction ---------------------------------------------------------

BnLayer GsGcnModel::make_bn(const std::string& prefix, int channels, std::mt19937& rng) {
  (void)rng;
  BnLayer bn;
  bn.gamma = params_.add_const_init(prefix + "bn.gamma", Tensor::ones({channels}));
  bn.beta = params_.add_const_init(prefix + "bn.beta", Tensor::zeros({channels}));
  bn.stats = std::make_shared<BnStats>();
  bn.stats->running_mean = Tensor::zeros({channels});
  bn.stats->running_var = Tensor::ones({channels});
  bn.site_index = bn_sites_++;
  buffers_.push_back(NamedStats{prefix + "bn", bn.stats});
  return bn;
}

detail::MsGcnUnit GsGcnModel::make_msgcn(const std::string& prefix, int in_ch, int out_ch,
                                         std::mt19937& rng) {
  detail::MsGcnUnit u;
  const int scales = config_.spatial_scales;
  u.scale_width = std::max(1, out_ch / scales);
  const real w_scale = real(1) / std::sqrt(static_cast<real>(in_ch));
  for (int s = 0; s < scales; ++s) {
    u.scale_w.push_back(params_.add(prefix + "w" + std::to_string(s),
                                    Tensor({u.scale_width, in_ch}), rng, w_scale));
    u.masks.push_back(params_.add_const_init(
        prefix + "mask" + std::to_string(s),
        Tensor({graph_.num_joints, graph_.num_joints}), /*decay=*/false));
    u.adj.push_back(adj_const_[static_cast<size_t>(s)]);
  }
  const int cat_w = scales * u.scale_width;
  u.proj_w = params_.add(prefix + "proj_w", Tensor({out_ch, cat_w}), rng,
                         real(1) / std::sqrt(static_cast<real>(cat_w)));
  u.proj_b = params_.add_const_init(prefix + "proj_b", Tensor::zeros({out_ch}));
  u.bn = make_bn(prefix, out_ch, rng);
  return u;
}

detail::G3dPathway GsGcnModel::make_g3d(const std::string& prefix, int in_ch, int out_ch, int tau,
                                        int stride, std::mt19937& rng) {
  detail::G3dPathway p;
  p.tau = tau;
  p.stride = stride;
  const int scales = config_.spatial_scales;
  p.scale_width = std::max(1, out_ch / scales);
  const int wk = tau * graph_.num_joints;
  const real w_scale = real(1) / std::sqrt(static_cast<real>(in_ch));
  for (int s = 0; s < scales; ++s) {
    p.scale_w.push_back(params_.add(prefix + "w" + std::to_string(s),
                                    Tensor({p.scale_width, in_ch}), rng, w_scale));
    p.masks.push_back(params_.add_const_init(prefix + "mask" + std::to_string(s),
                                             Tensor({wk, wk}), /*decay=*/false));
    p.adj.push_back(adj_windowed_.at({tau, s + 1}));
  }
  const int cat_w = scales * p.scale_width;
  p.proj_w = params_.add(prefix + "proj_w", Tensor({out_ch, cat_w}), rng,
                         real(1) / std::sqrt(static_cast<real>(cat_w)));
  p.proj_b = params_.add_const_init(prefix + "proj_b", Tensor::zeros({out_ch}));
  p.bn = make_bn(prefix, out_ch, rng);
  return p;
}

detail::TemporalConv GsGcnModel::make_tconv(const std::string& prefix, int in_ch, int out_ch,
                                            int stride, std::mt19937& rng) {
  detail::TemporalConv t;
  t.stride = stride;
  t.w = params_.add(prefix + "w", Tensor({out_ch, 3 * in_ch}), rng,
                    real(1) / std::sqrt(static_cast<real>(3 * in_ch)));
  t.b = params_.add_const_init(prefix + "b", Tensor::zeros({out_ch}));
  t.bn = make_bn(prefix, out_ch, rng);
  return t;
}

detail::StgcBlock GsGcnModel::make_block(const std::string& prefix, const StgcBlockConfig& cfg,
                                         std::mt19937& rng) {
  if (cfg.out_channels % cfg.branches() != 0) {
    throw ModelError(prefix + ": out_channels " + std::to_string(cfg.out_channels) +
                     " not divisible by " + std::to_string(cfg.branches()) + " branches");
  }
  detail::StgcBlock b;
  b.cfg = cfg;
  const int branch_out = cfg.out_channels / cfg.branches();
  b.g3d_a = make_g3d(prefix + "g3d3.", cfg.in_channels, branch_out, cfg.g3d_windows[0],
                     cfg.temporal_stride, rng);
  b.g3d_b = make_g3d(prefix + "g3d5.", cfg.in_channels, branch_out, cfg.g3d_windows[1],
                     cfg.temporal_stride, rng);
  b.msgcn = make_msgcn(prefix + "msgcn.", cfg.in_channels, branch_out, rng);
  b.tconv = make_tconv(prefix + "tconv.", branch_out, branch_out, cfg.temporal_stride, rng);
  b.residual_identity = cfg.in_channels == cfg.out_channels && cfg.temporal_stride == 1;
  if (!b.residual_identity) {
    b.res_w = params_.add(prefix + "res.w", Tensor({cfg.out_channels, cfg.in_channels}), rng,
                          real(1) / std::sqrt(static_cast<real>(cfg.in_channels)));
    b.res_bn = make_bn(prefix + "res.", cfg.out_channels, rng);
  }
  return b;
}

GsGcnModel::GsGcnModel(ModelConfig config, std::uint32_t seed) : config_(std::move(config)) {
  config_.validate();
  if (config_.layout.size() > 5 && config_.layout.ends_with(".json")) {
    std::ifstream in(config_.layout);
    if (!in) throw ModelError("cannot open skeleton layout file: " + config_.layout);
    std::stringstream ss;
    ss << in.rdbuf();
    graph_ = load_skeleton_graph_json(ss.str());
  } else {
    graph_ = build_skeleton_graph(config_.layout);
  }
  adjacency_ = build_adjacency_set(graph_, config_.spatial_scales, config_.g3d_windows);
  for (const Tensor& a : adjacency_.scales) adj_const_.push_back(Var::constant(a));
  for (const auto& [key, w] : adjacency_.windowed) {
    adj_windowed_.emplace(key, Var::constant(w));
  }

  std::mt19937 rng(seed);
  const int m = config_.group_size;
  for (int k = 0; k < m; ++k) {
    const std::string prefix = "extractor" + std::to_string(k) + ".";
    detail::PersonExtractor ex;
    StgcBlockConfig b1{config_.in_channels, config_.extractor_channels1, config_.spatial_scales,
                       config_.g3d_windows, 1};
    StgcBlockConfig b2{config_.extractor_channels1, config_.extractor_channels2,
                       config_.spatial_scales, config_.g3d_windows, 2};
    ex.block1 = make_block(prefix + "block1.", b1, rng);
    ex.block2 = make_block(prefix + "block2.", b2, rng);
    extractors_.push_back(std::move(ex));
  }
  if (config_.distance_embedding) {
    for (int k = 1; k < m; ++k) {
      const std::string prefix = "mlp" + std::to_string(k) + ".";
      detail::DistanceMlp mlp;
      mlp.w = params_.add(prefix + "w", Tensor({config_.extractor_channels2, 1}), rng, real(1));
      mlp.b = params_.add_const_init(prefix + "b", Tensor::zeros({config_.extractor_channels2}));
      mlp.bn = make_bn(prefix, config_.extractor_channels2, rng);
      mlps_.push_back(std::move(mlp));
    }
  }
  StgcBlockConfig fcfg{m * config_.extractor_channels2, config_.fusion_channels,
                       config_.spatial_scales, config_.g3d_windows, 2};
  fusion_ = make_block("fusion.", fcfg, rng);
  head_w = params_.add("head.w", Tensor({config_.fusion_channels, config_.num_classes}), rng,
                       real(1) / std::sqrt(static_cast<real>(config_.fusion_channels)));
  head_b = params_.add_const_init("head.b", Tensor::zeros({config_.num_classes}));
}

// ---- model forward ------------------------------------------------------------

Var GsGcnModel::extract_person_features(int person, const Var& z, ForwardCtx& ctx) const {
  if (person < 0 || person >= config_.group_size) {
    throw ModelError("extract_person_features: person index " + std::to_string(person) +
                     " out of range");
  }
  const auto& ex = extractors_[static_cast<size_t>(person)];
  return ex.block2.forward(ex.block1.forward(z, ctx), ctx);
}

Var GsGcnModel::distance_embed(int person, const Var& features, const Tensor& distance,
                               ForwardCtx& ctx) const {
  if (person == 0) {
    throw ModelError("distance_embed: the reference person's features pass through unchanged; "
                     "no MLP exists for k = 0");
  }
  if (!config_.distance_embedding) {
    throw ModelError("distance_embed: model built without distance embedding");
  }
  if (person < 1 || person >= config_.group_size) {
    throw ModelError("distance_embed: person index " + std::to_string(person) + " out of range");
  }
  const Shape& fs = features.shape();
  if (distance.rank() != 3 || distance.dim(0) != 1 || distance.dim(1) != fs[1] ||
      distance.dim(2) != fs[2]) {
    throw ModelError("distance_embed: distance tensor " + distance.shape_str() +
                     " does not match features " + features.value().shape_str());
  }
  Var neg_exp = vexp(mul_scalar(Var::constant(distance), real(-1)));
  Var gate = mlps_[static_cast<size_t>(person - 1)].forward(neg_exp, ctx);
  return mul(features, gate);
}

Var GsGcnModel::forward(const Tensor& input, const std::vector<Tensor>& distances,
                        const std::vector<std::uint8_t>& present, ForwardCtx& ctx,
                        ForwardTrace* trace) const {
  const int m = config_.group_size;
  const int t_len = config_.window_length;
  const int k = graph_.num_joints;
  const Shape expect{m, config_.in_channels, t_len, k};
  if (input.shape() != expect) {
    throw ModelError("forward: input shape " + input.shape_str() + " does not match configured " +
                     shape_to_string(expect));
  }
  if (static_cast<int>(present.size()) != m) {
    throw ModelError("forward: present mask must have M entries");
  }
  if (!present[0]) throw ModelError("forward: the reference person (slot 0) must be present");
  if (m > 1 && static_cast<int>(distances.size()) != m - 1) {
    throw ModelError("forward: expected " + std::to_string(m - 1) + " distance tensors, got " +
                     std::to_string(distances.size()));
  }

  Var zs = Var::constant(input);
  std::vector<Var> embedded;
  if (trace) {
    trace->features.assign(static_cast<size_t>(m), Var());
    trace->embedded.assign(static_cast<size_t>(m), Var());
  }
  for (int p = 0; p < m; ++p) {
    if (!present[static_cast<size_t>(p)]) {
      embedded.push_back(Var::constant(Tensor({config_.extractor_channels2, t_len / 2, k})));
      if (trace) trace->embedded[static_cast<size_t>(p)] = embedded.back();
      continue;
    }
    Var z = reshape(slice(zs, 0, p, p + 1), {config_.in_channels, t_len, k});
    Var f = extract_person_features(p, z, ctx);
    Var fhat;
    if (p == 0 || !config_.distance_embedding) {
      fhat = f;
    } else {
      fhat = distance_embed(p, f, distances[static_cast<size_t>(p - 1)], ctx);
    }
    if (trace) {
      trace->features[static_cast<size_t>(p)] = f;
      trace->embedded[static_cast<size_t>(p)] = fhat;
    }
    embedded.push_back(std::move(fhat));
  }

  Var cat = m == 1 ? embedded[0] : concat(std::span<const Var>(embedded), 0);
  Var fused = fusion_.forward(cat, ctx);
  Var pooled = mean(fused, {1, 2}, false);
  Var logits = add(reshape(matmul(reshape(pooled, {1, config_.fusion_channels}), head_w),
                           {config_.num_classes}),
                   head_b);
  if (trace) {
    trace->fused = fused;
    trace->pooled = pooled;
    trace->logits = logits;
  }
  return logits;
}

Tensor GsGcnModel::predict(const Tensor& input, const std::vector<Tensor>& distances,
                           const std::vector<std::uint8_t>& present) const {
  NoGradGuard ng;
  ForwardCtx ctx;
  ctx.mode = BnMode::eval;
  Var logits = forward(input, distances, present, ctx);
  return softmax(logits, 0).value();
}

}  // namespace gsgcn
