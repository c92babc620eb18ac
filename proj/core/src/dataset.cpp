#include "gsgcn/dataset.hpp"

#include <algorithm>

namespace gsgcn {

namespace {

Sample sample_from_group(GroupSample group, const std::string& video_id, double scale,
                         const DatasetOptions& options) {
  AssembleOptions ao;
  ao.scene_scale = scale;
  ao.speed_interval = options.speed_interval;
  ao.include_speed = options.include_speed;
  ao.missing_distance = options.missing_distance;

  Sample s;
  s.input = assemble_input(group, ao);
  for (int k = 1; k < options.group_size; ++k) {
    if (group.present[static_cast<size_t>(k)]) {
      s.distances.push_back(
          compute_distance_tensor(group.persons[0], group.persons[static_cast<size_t>(k)], ao));
    } else {
      // saturated distances; the slot is masked out anyway
      Tensor d({1, options.window_length / 2, options.num_joints});
      d.fill(static_cast<real>(options.missing_distance));
      s.distances.push_back(std::move(d));
    }
  }
  s.present = group.present;
  s.label = group.label;
  s.video_id = video_id;
  s.reference_track_id = group.reference_track_id;
  s.start_frame = group.start_frame;
  s.reference_boxes = group.persons[0].boxes;
  s.reference_has_frame = group.persons[0].has_frame;
  return s;
}

}  // namespace

Sample build_sample(const PoseFile& file, const PoseSequence& sequence, int reference_track_id,
                    int window_start, const DatasetOptions& options) {
  const PersonTrack* ref = sequence.track_by_id(reference_track_id);
  if (!ref) {
    throw DataError("reference track " + std::to_string(reference_track_id) +
                    " not found in video \"" + sequence.video_id + "\"");
  }
  GroupSample group = select_group(*ref, sequence.tracks, window_start, options.window_length,
                                   options.group_size, options.num_joints);
  return sample_from_group(std::move(group), sequence.video_id,
                           scene_scale(file.header, sequence), options);
}

std::vector<Sample> build_samples(const PoseFile& file, const DatasetOptions& options) {
  std::vector<Sample> out;
  for (const PoseSequence& seq : file.sequences) {
    if (seq.tracks.empty()) continue;
    const PersonTrack* ref = &seq.tracks[0];
    for (const auto& t : seq.tracks) {
      if (t.track_id < ref->track_id) ref = &t;
    }
    if (ref->frames.empty()) continue;
    const int start = ref->frames.front().frame_index;
    try {
      out.push_back(build_sample(file, seq, ref->track_id, start, options));
    } catch (const DataError&) {
      continue;  // window unusable for this sequence
    }
  }
  return out;
}

}  // namespace gsgcn
