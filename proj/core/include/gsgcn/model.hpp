#pragma once

#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "gsgcn/autodiff.hpp"
#include "gsgcn/graph.hpp"
#include "gsgcn/tensor.hpp"

namespace gsgcn {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Ordered, named collection of learnable tensors.
class ParamStore {
 public:
  struct Entry {
    Var var;
    bool decay = true;  // weight decay applies; masks and bn stats are exempt
  };

  Var add(const std::string& name, Tensor init, std::mt19937& rng, real init_scale,
          bool decay = true);
  Var add_const_init(const std::string& name, Tensor init, bool decay = true);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Var> vars() const;
  Var find(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::int64_t total_elements() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-sample batch-norm statistics collected during training forwards,
// keyed by BN site index; merged across a batch before the running update.
class BnStatsSink {
 public:
  void add(int site, const Tensor& mean, const Tensor& var);
  void merge(const BnStatsSink& other);
  std::int64_t count(int site) const;
  Tensor mean_avg(int site) const;
  Tensor var_avg(int site) const;
  int num_sites() const { return static_cast<int>(counts_.size()); }

 private:
  std::vector<std::int64_t> counts_;
  std::vector<Tensor> mean_sums_;
  std::vector<Tensor> var_sums_;
};

struct ForwardCtx {
  BnMode mode = BnMode::eval;
  BnStatsSink* stats = nullptr;  // train-mode per-sample statistics, when wanted
};

// One batch-norm site: learnable affine plus running statistics.
struct BnLayer {
  Var gamma, beta;
  std::shared_ptr<BnStats> stats;
  int site_index = -1;

  Var forward(const Var& x, int channel_axis, ForwardCtx& ctx) const;
};

struct StgcBlockConfig {
  int in_channels = 0;
  int out_channels = 0;
  int spatial_scales = 8;
  std::vector<int> g3d_windows = {3, 5};
  int temporal_stride = 1;

  int branches() const { return static_cast<int>(g3d_windows.size()) + 1; }
};

struct ModelConfig {
  std::string layout = "crowdpose14";
  int group_size = 3;    // M; 1 disables the multi-person pathway
  int in_channels = 5;   // (x, y, c, vx, vy); 3 drops the speed channels
  int window_length = 64;  // T, divisible by 4
  int num_classes = 14;
  int extractor_channels1 = 96;
  int extractor_channels2 = 192;
  int fusion_channels = 384;
  int spatial_scales = 8;
  std::vector<int> g3d_windows = {3, 5};
  bool distance_embedding = true;

  static ModelConfig defaults() { return {}; }
  // Tiny configuration for gradient checks: 3-joint chain, T=8, M=2.
  static ModelConfig micro();

  void validate() const;
};

// Internal layer structs. Owned by the model; forwards are const and safe to
// run concurrently over distinct graphs.
namespace detail {

struct MsGcnUnit {
  int scale_width = 1;
  std::vector<Var> scale_w;  // per scale: (scale_width, in_channels)
  std::vector<Var> masks;    // per scale: (K, K), additive, init 0
  std::vector<Var> adj;      // per scale: constant normalized adjacency
  Var proj_w;                // (out, scales * scale_width)
  Var proj_b;                // (out)
  BnLayer bn;

  Var forward(const Var& x, ForwardCtx& ctx) const;  // relu(bn(project(concat scales)))
};

struct G3dPathway {
  int tau = 3;
  int stride = 1;
  int scale_width = 1;
  std::vector<Var> scale_w;  // per scale: (scale_width, in_channels)
  std::vector<Var> masks;    // per scale: (tauK, tauK), additive, init 0
  std::vector<Var> adj;      // per scale: constant windowed adjacency (tauK, tauK)
  Var proj_w;
  Var proj_b;
  BnLayer bn;

  Var forward(const Var& x, ForwardCtx& ctx) const;  // bn(project(...)), pre-activation
};

struct TemporalConv {
  int stride = 1;
  Var w;  // (out, 3 * in), tap-major rows
  Var b;  // (out)
  BnLayer bn;

  Var forward(const Var& x, ForwardCtx& ctx) const;  // bn(conv), pre-activation
};

struct StgcBlock {
  StgcBlockConfig cfg;
  G3dPathway g3d_a;  // tau = 3
  G3dPathway g3d_b;  // tau = 5
  MsGcnUnit msgcn;
  TemporalConv tconv;
  bool residual_identity = false;
  Var res_w;  // (out, in) when not identity
  BnLayer res_bn;

  Var forward(const Var& x, ForwardCtx& ctx) const;
};

struct DistanceMlp {
  Var w;  // (C1, 1)
  Var b;  // (C1)
  BnLayer bn;

  // gate = relu(bn(W e^{-d} + b)), pointwise over (T/2, K)
  Var forward(const Var& neg_exp_distance, ForwardCtx& ctx) const;
};

struct PersonExtractor {
  StgcBlock block1;  // C_in -> C1/2 channels... configured by the model
  StgcBlock block2;
};

}  // namespace detail

// Intermediate values of one forward pass, for tests and diagnostics.
struct ForwardTrace {
  std::vector<Var> features;  // per person, (C2, T/2, K); undefined for absent slots
  std::vector<Var> embedded;  // per person after distance embedding
  Var fused;                  // (fusion_channels, T/4, K)
  Var pooled;                 // (fusion_channels)
  Var logits;                 // (num_classes)
};

// The group-skeleton graph convolutional classifier: per-person multi-scale
// spatial-temporal feature extractors, distance-gated feature embedding, a
// fusion block over the concatenated features and an affine head.
class GsGcnModel {
 public:
  GsGcnModel(ModelConfig config, std::uint32_t seed);
  GsGcnModel(const GsGcnModel&) = delete;
  GsGcnModel& operator=(const GsGcnModel&) = delete;

  const ModelConfig& config() const { return config_; }
  const SkeletonGraph& graph() const { return graph_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  struct NamedStats {
    std::string name;
    std::shared_ptr<BnStats> stats;
  };
  const std::vector<NamedStats>& buffers() const { return buffers_; }
  int num_bn_sites() const { return bn_sites_; }

  // Logits for one sample. `input` is (M, C_in, T, K); `distances` holds one
  // (1, T/2, K) tensor per non-reference slot; `present` flags each slot.
  Var forward(const Tensor& input, const std::vector<Tensor>& distances,
              const std::vector<std::uint8_t>& present, ForwardCtx& ctx,
              ForwardTrace* trace = nullptr) const;

  // Eval-mode class probabilities, no graph recording.
  Tensor predict(const Tensor& input, const std::vector<Tensor>& distances,
                 const std::vector<std::uint8_t>& present) const;

  // Features of one person's extractor, (C2, T/2, K). Exposed for tests.
  Var extract_person_features(int person, const Var& z, ForwardCtx& ctx) const;
  // Distance embedding for person k >= 1 (API misuse to call with k = 0).
  Var distance_embed(int person, const Var& features, const Tensor& distance,
                     ForwardCtx& ctx) const;

 private:
  ModelConfig config_;
  SkeletonGraph graph_;
  AdjacencySet adjacency_;
  ParamStore params_;
  std::vector<NamedStats> buffers_;
  int bn_sites_ = 0;

  std::vector<Var> adj_const_;                       // per scale (K, K)
  std::map<std::pair<int, int>, Var> adj_windowed_;  // (tau, scale)

  std::vector<detail::PersonExtractor> extractors_;  // [M]
  std::vector<detail::DistanceMlp> mlps_;            // [M-1]
  detail::StgcBlock fusion_;
  Var head_w;  // (fusion_channels, num_classes)
  Var head_b;  // (num_classes)

  BnLayer make_bn(const std::string& prefix, int channels, std::mt19937& rng);
  detail::MsGcnUnit make_msgcn(const std::string& prefix, int in_ch, int out_ch,
                               std::mt19937& rng);
  detail::G3dPathway make_g3d(const std::string& prefix, int in_ch, int out_ch, int tau,
                              int stride, std::mt19937& rng);
  detail::TemporalConv make_tconv(const std::string& prefix, int in_ch, int out_ch, int stride,
                                  std::mt19937& rng);
  detail::StgcBlock make_block(const std::string& prefix, const StgcBlockConfig& cfg,
                               std::mt19937& rng);
};

}  // namespace gsgcn
