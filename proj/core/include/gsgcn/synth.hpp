#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gsgcn/dataset.hpp"
#include "gsgcn/pose.hpp"
#include "gsgcn/training.hpp"

namespace gsgcn {

class SynthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Six classes: stand/walk/run are decidable from one person's motion;
// gather/queue/fight only from group geometry (their single-person motion
// matches stand/walk/run by construction).
enum class SynthClass : int { stand = 0, walk = 1, run = 2, gather = 3, queue = 4, fight = 5 };
constexpr int kNumSynthClasses = 6;
const char* synth_class_name(int class_id);

struct SceneOptions {
  int num_persons = 4;
  int t_len = 64;
  double noise_sigma = 1.5;   // per-joint pixel jitter
  double drop_rate = 0.02;    // chance a key point is dropped (c = 0)
  bool distractor = false;    // add one far-away standing person
  int canvas_w = 1920;
  int canvas_h = 1080;
};

// Deterministic multi-person scene for one class; every track carries its
// own per-frame action label (core actors the scene class, distractors
// stand). Track 0 is always a core actor.
std::vector<PersonTrack> generate_scene(int class_id, const SceneOptions& options,
                                        std::uint64_t seed);

struct DatasetSpec {
  std::vector<int> scenes_per_class = std::vector<int>(kNumSynthClasses, 10);
  int t_len = 64;
  int min_persons = 3;
  int max_persons = 5;
  double noise_sigma = 1.5;
  double drop_rate = 0.02;
  double distractor_prob = 0.5;
  // class-imbalance mode: when > 1, class counts are skewed so that class 0
  // keeps its count and the rarest class gets count / skew
  double skew = 1.0;
  int eval_every = 5;  // per-scene 4:1 split: every 5th scene goes to eval
  std::uint32_t seed = 1;

  std::vector<int> effective_counts() const;
};

struct GeneratedDataset {
  std::string train_path;
  std::string eval_path;
  std::string manifest_path;
  int train_scenes = 0;
  int eval_scenes = 0;
};

// Writes train/eval JSON-lines pose files plus a manifest (spec echo, seed,
// per-class counts). Byte-identical for identical spec + seed.
GeneratedDataset generate_dataset(const DatasetSpec& spec, const std::string& out_dir);

// ---- ablation harness --------------------------------------------------------

inline const std::vector<std::string> kAblationVariants = {
    "no_multi_person", "no_speed", "no_distance_embedding", "full"};

struct AblationOptions {
  ModelConfig base_model;
  TrainConfig train;
  DatasetOptions data;
  std::vector<std::string> variants = kAblationVariants;
  std::vector<std::uint32_t> seeds = {1, 2, 3};
};

struct AblationRow {
  std::string variant;
  std::vector<double> per_seed_accuracy;
  double mean = 0;
  double stddev = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // in kAblationVariants order
  std::string markdown;
};

// Model/data settings for one named ablation variant.
ModelConfig variant_model_config(const ModelConfig& base, const std::string& variant);
DatasetOptions variant_data_options(const DatasetOptions& base, const std::string& variant);

// Trains every requested variant for every seed with identical epoch-wise
// data order and reports eval accuracy per variant.
AblationResult run_ablation(const PoseFile& train_file, const PoseFile& eval_file,
                            const AblationOptions& options,
                            const std::function<void(const std::string&)>& log = nullptr);

// Directional acceptance: full beats no_multi_person by at least
// `margin_points` accuracy points and is >= every other ablation.
bool ablation_directional_ok(const AblationResult& result, double margin_points = 5.0,
                             std::string* detail = nullptr);

// Eval accuracy of a trained model over samples.
double eval_accuracy(const GsGcnModel& model, const std::vector<Sample>& samples);

}  // namespace gsgcn
