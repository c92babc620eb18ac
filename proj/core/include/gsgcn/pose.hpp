#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gsgcn/box.hpp"
#include "gsgcn/tensor.hpp"

namespace gsgcn {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Keypoint {
  double x = 0;
  double y = 0;
  double c = 0;  // confidence in [0, 1]; 0 marks a missing key point
};

struct FramePose {
  int frame_index = 0;
  Box bbox;
  std::vector<Keypoint> keypoints;  // exactly K entries
  std::optional<int> action;        // class id, when labelled
};

// One person's key point sequence; frame indices strictly increasing.
struct PersonTrack {
  int track_id = 0;
  std::vector<FramePose> frames;

  const FramePose* frame_at(int frame_index) const;
};

struct PoseHeader {
  bool present = false;
  int image_width = 0;
  int image_height = 0;
  int num_keypoints = 0;
};

// Tracks of one video; track ids are unique within a sequence.
struct PoseSequence {
  std::string video_id;
  std::vector<PersonTrack> tracks;

  const PersonTrack* track_by_id(int track_id) const;
};

struct PoseFile {
  PoseHeader header;
  std::vector<PoseSequence> sequences;  // in order of first appearance
};

struct ParseOptions {
  // Enforced key point count; a header's num_keypoints must agree with it.
  std::optional<int> expected_keypoints;
};

// Parses the JSON-lines pose schema. Optional first-line header object:
//   {"type":"header","image_width":W,"image_height":H,"num_keypoints":K}
// then one record per line:
//   {"video_id":str,"frame":int,"track_id":int,"bbox":[x,y,w,h],
//    "keypoints":[[x,y,c] x K],"action":int|null}
// Malformed input fails with the offending line number.
PoseFile parse_pose_file(std::istream& in, const ParseOptions& options = {});
PoseFile parse_pose_file(const std::string& text, const ParseOptions& options = {});
PoseFile load_pose_file(const std::string& path, const ParseOptions& options = {});

// Greedy one-to-one matching in descending IoU order; pairs under the
// threshold are discarded. Returns (detection index, ground truth index)
// pairs in match order.
std::vector<std::pair<int, int>> match_detections_to_gt(const std::vector<Box>& detections,
                                                        const std::vector<Box>& ground_truths,
                                                        double iou_threshold = 0.3);

// A track resampled onto a fixed window of t_len frames.
struct AlignedPose {
  Tensor xy;                       // (2, T, K) pixel coordinates
  Tensor conf;                     // (T, K), 0 where missing
  std::vector<Box> boxes;          // per frame; zero box when absent
  std::vector<std::uint8_t> has_frame;  // per frame
  int start_frame = 0;

  int t_len() const { return conf.dim(0); }
  int num_joints() const { return conf.dim(1); }
  bool any_frame() const;
};

AlignedPose align_track(const PersonTrack& track, int start_frame, int t_len, int num_joints);

// Mean Euclidean distance over all (frame, joint) pairs where both
// confidences are positive; +infinity when no such pair exists.
double pose_distance(const AlignedPose& a, const AlignedPose& b);

// Reference person plus its M-1 nearest neighbours over one window.
struct GroupSample {
  std::vector<AlignedPose> persons;      // [M]; slot 0 is the reference
  std::vector<std::uint8_t> present;     // [M]; padded slots are absent
  std::vector<double> neighbor_distance; // [M]; 0 for reference, +inf for padding
  int start_frame = 0;
  int t_len = 0;
  int reference_track_id = 0;
  int label = -1;  // reference person's action over the window, -1 if unlabelled
};

// Picks the M-1 tracks closest to the reference (ascending pose distance,
// ties by lower track id) and pads missing slots with absent persons.
GroupSample select_group(const PersonTrack& reference, const std::vector<PersonTrack>& all_tracks,
                         int start_frame, int t_len, int group_size, int num_joints);

// v(t) = p(t) - p(t - d); zero for t < d and wherever either endpoint is
// missing per `valid`.
Tensor compute_speed(const Tensor& xy, const Tensor& valid, int frame_interval);

struct AssembleOptions {
  double scene_scale = 1.0;
  int speed_interval = 3;
  bool include_speed = true;  // false drops the two speed channels (C_in = 3)
  double missing_distance = 10.0;
};

// Input tensor (M, C_in, T, K): channels (x, y, c, vx, vy) with coordinates
// scene-normalized and centred on the reference person's mean valid key
// point position. Absent persons are all-zero slices.
Tensor assemble_input(const GroupSample& sample, const AssembleOptions& options);

// Per-joint distances between two persons at even frames, scene-normalized;
// shape (1, T/2, K). Missing key points saturate to options.missing_distance.
Tensor compute_distance_tensor(const AlignedPose& reference, const AlignedPose& other,
                               const AssembleOptions& options);

// Image diagonal when the header carries dimensions, otherwise the 95th
// percentile of per-frame bounding box diagonals in the sequence.
double scene_scale(const PoseHeader& header, const PoseSequence& sequence);

}  // namespace gsgcn
