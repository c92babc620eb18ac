#pragma once

#include <string>
#include <vector>

#include "gsgcn/pose.hpp"
#include "gsgcn/training.hpp"

namespace gsgcn {

struct DatasetOptions {
  int group_size = 3;
  int window_length = 64;
  int num_joints = 14;
  bool include_speed = true;
  int speed_interval = 3;
  double missing_distance = 10.0;
};

// One sample per sequence: the lowest-id track is the reference, the window
// starts at its first frame. Sequences whose reference window is unusable
// are skipped.
std::vector<Sample> build_samples(const PoseFile& file, const DatasetOptions& options);

// Sample for an explicit reference track and window start, as used by
// single-shot inference.
Sample build_sample(const PoseFile& file, const PoseSequence& sequence, int reference_track_id,
                    int window_start, const DatasetOptions& options);

}  // namespace gsgcn
