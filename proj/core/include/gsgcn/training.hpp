#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gsgcn/autodiff.hpp"
#include "gsgcn/box.hpp"
#include "gsgcn/model.hpp"

namespace gsgcn {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int batch_size = 16;
  real weight_decay = real(5e-4);
  double initial_lr = 0.05;
  double lr_decay_factor = 0.1;
  std::vector<int> lr_milestones = {100, 200, 300, 400};
  real focal_gamma = real(2.0);
  real momentum = real(0.9);
  int max_epochs = 500;
  std::uint32_t seed = 1;
  // Stop when the mean epoch loss of the last `plateau_window` epochs improves
  // on the window before it by less than `plateau_min_delta`.
  int plateau_window = 20;
  double plateau_min_delta = 1e-4;
  // Optional early stop once train accuracy reaches this value (disabled < 0).
  double target_accuracy = -1.0;
  int checkpoint_interval = 0;  // epochs between periodic checkpoints; 0 = final only
  int num_threads = 2;

  void validate() const;
};

// One model-ready sample plus provenance for detection-style metrics.
struct Sample {
  Tensor input;                    // (M, C_in, T, K)
  std::vector<Tensor> distances;   // M-1 tensors of (1, T/2, K)
  std::vector<std::uint8_t> present;
  int label = -1;
  std::string video_id;
  int reference_track_id = 0;
  int start_frame = 0;
  std::vector<Box> reference_boxes;         // per window frame
  std::vector<std::uint8_t> reference_has_frame;
};

// Focal loss on softmax probabilities with a one-hot target, returned in the
// non-negative minimized form -(1 - p_t)^gamma * log(p_t).
Var focal_loss(const Var& probabilities, int true_class, real gamma);

// Step-decayed learning rate: initial * factor^(milestones passed).
double lr_at(int epoch, const TrainConfig& config);

// One SGD update with L2 weight decay and classical momentum. Entries whose
// decay flag is off (adjacency masks) skip the weight decay term. Throws
// TrainError naming the parameter when a gradient is not finite.
void sgd_step(const std::vector<ParamStore::Entry>& params, const std::vector<Tensor>& grads,
              double lr, real weight_decay, real momentum,
              std::vector<Tensor>& momentum_buffers);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int epochs_run = 0;
  std::string stop_reason;
  bool aborted = false;  // NaN loss/gradient; previously written checkpoints are kept
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  // Directory for periodic + final checkpoints; empty disables checkpointing.
  std::string checkpoint_dir;
  int start_epoch = 0;
};

TrainResult train(GsGcnModel& model, const std::vector<Sample>& dataset, const TrainConfig& config,
                  const TrainHooks& hooks = {});

// ---- checkpoints -------------------------------------------------------------

// Versioned container: magic "GSGCKPT1", u32 version, u32 manifest length, a
// JSON manifest (config echo, epoch, named shapes and byte offsets) and raw
// little-endian 32-bit real arrays.
struct CheckpointMeta {
  int epoch = 0;
  ModelConfig model_config;
};

void save_checkpoint(const GsGcnModel& model, int epoch, const std::string& path,
                     const std::vector<Tensor>* momentum = nullptr);
// Reads parameters and running statistics into `model`, verifying every name
// and shape against the model's manifest expectations.
CheckpointMeta load_checkpoint(GsGcnModel& model, const std::string& path,
                               std::vector<Tensor>* momentum = nullptr);
// Model configuration recorded in a checkpoint, without loading tensors.
ModelConfig peek_checkpoint_config(const std::string& path, int* epoch = nullptr);

}  // namespace gsgcn
