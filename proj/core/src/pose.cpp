#include "gsgcn/pose.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace gsgcn {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double h = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  return w > 0 && h > 0 ? w * h : 0.0;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

const FramePose* PersonTrack::frame_at(int frame_index) const {
  auto it = std::lower_bound(frames.begin(), frames.end(), frame_index,
                             [](const FramePose& f, int idx) { return f.frame_index < idx; });
  if (it == frames.end() || it->frame_index != frame_index) return nullptr;
  return &*it;
}

const PersonTrack* PoseSequence::track_by_id(int track_id) const {
  for (const auto& t : tracks) {
    if (t.track_id == track_id) return &t;
  }
  return nullptr;
}

namespace {

[[noreturn]] void fail_line(int line_no, const std::string& what) {
  throw DataError("pose file line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

PoseFile parse_pose_file(std::istream& in, const ParseOptions& options) {
  PoseFile out;
  std::optional<int> keypoint_count = options.expected_keypoints;

  // (sequence index, track id) -> track index; track -> frame set for dup checks
  std::map<std::string, size_t> seq_index;
  std::map<std::pair<std::string, int>, std::set<int>> seen_frames;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail_line(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (line_no == 1 && j.is_object() && j.value("type", "") == "header") {
      out.header.present = true;
      out.header.image_width = j.value("image_width", 0);
      out.header.image_height = j.value("image_height", 0);
      out.header.num_keypoints = j.value("num_keypoints", 0);
      if (out.header.num_keypoints > 0) {
        if (keypoint_count && *keypoint_count != out.header.num_keypoints) {
          fail_line(line_no, "header num_keypoints " + std::to_string(out.header.num_keypoints) +
                                 " does not match configured K " + std::to_string(*keypoint_count));
        }
        keypoint_count = out.header.num_keypoints;
      }
      continue;
    }
    try {
      FramePose pose;
      const std::string video_id = j.value("video_id", std::string("default"));
      const int track_id = j.at("track_id").get<int>();
      pose.frame_index = j.at("frame").get<int>();
      const auto& bbox = j.at("bbox");
      if (!bbox.is_array() || bbox.size() != 4) fail_line(line_no, "bbox must be [x,y,w,h]");
      pose.bbox = Box{bbox[0].get<double>(), bbox[1].get<double>(), bbox[2].get<double>(),
                      bbox[3].get<double>()};
      if (pose.bbox.w <= 0 || pose.bbox.h <= 0) {
        fail_line(line_no, "bbox width/height must be positive");
      }
      const auto& kps = j.at("keypoints");
      if (!kps.is_array()) fail_line(line_no, "keypoints must be an array");
      if (keypoint_count && static_cast<int>(kps.size()) != *keypoint_count) {
        fail_line(line_no, "expected " + std::to_string(*keypoint_count) + " keypoints, got " +
                               std::to_string(kps.size()));
      }
      if (!keypoint_count) keypoint_count = static_cast<int>(kps.size());
      for (const auto& kp : kps) {
        if (!kp.is_array() || kp.size() != 3) fail_line(line_no, "keypoint must be [x,y,c]");
        Keypoint k{kp[0].get<double>(), kp[1].get<double>(), kp[2].get<double>()};
        if (k.c < 0.0 || k.c > 1.0) {
          fail_line(line_no, "keypoint confidence " + std::to_string(k.c) + " outside [0,1]");
        }
        pose.keypoints.push_back(k);
      }
      if (j.contains("action") && !j["action"].is_null()) {
        pose.action = j["action"].get<int>();
      }

      if (!seen_frames[{video_id, track_id}].insert(pose.frame_index).second) {
        fail_line(line_no, "duplicate (track_id=" + std::to_string(track_id) +
                               ", frame=" + std::to_string(pose.frame_index) + ") in video \"" +
                               video_id + "\"");
      }
      auto [it, inserted] = seq_index.try_emplace(video_id, out.sequences.size());
      if (inserted) {
        out.sequences.push_back(PoseSequence{video_id, {}});
      }
      PoseSequence& seq = out.sequences[it->second];
      PersonTrack* track = nullptr;
      for (auto& t : seq.tracks) {
        if (t.track_id == track_id) {
          track = &t;
          break;
        }
      }
      if (!track) {
        seq.tracks.push_back(PersonTrack{track_id, {}});
        track = &seq.tracks.back();
      }
      track->frames.push_back(std::move(pose));
    } catch (const nlohmann::json::exception& e) {
      fail_line(line_no, std::string("schema error: ") + e.what());
    }
  }

  for (auto& seq : out.sequences) {
    for (auto& track : seq.tracks) {
      std::sort(track.frames.begin(), track.frames.end(),
                [](const FramePose& a, const FramePose& b) { return a.frame_index < b.frame_index; });
    }
  }
  return out;
}

PoseFile parse_pose_file(const std::string& text, const ParseOptions& options) {
  std::istringstream is(text);
  return parse_pose_file(is, options);
}

PoseFile load_pose_file(const std::string& path, const ParseOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open pose file: " + path);
  return parse_pose_file(in, options);
}

std::vector<std::pair<int, int>> match_detections_to_gt(const std::vector<Box>& detections,
                                                        const std::vector<Box>& ground_truths,
                                                        double iou_threshold) {
  struct Cand {
    double iou;
    int det;
    int gt;
  };
  std::vector<Cand> cands;
  for (int d = 0; d < static_cast<int>(detections.size()); ++d) {
    for (int g = 0; g < static_cast<int>(ground_truths.size()); ++g) {
      const double v = iou(detections[static_cast<size_t>(d)], ground_truths[static_cast<size_t>(g)]);
      if (v >= iou_threshold) cands.push_back({v, d, g});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.det != b.det) return a.det < b.det;
    return a.gt < b.gt;
  });
  std::vector<char> det_used(detections.size(), 0), gt_used(ground_truths.size(), 0);
  std::vector<std::pair<int, int>> pairs;
  for (const Cand& c : cands) {
    if (det_used[static_cast<size_t>(c.det)] || gt_used[static_cast<size_t>(c.gt)]) continue;
    det_used[static_cast<size_t>(c.det)] = 1;
    gt_used[static_cast<size_t>(c.gt)] = 1;
    pairs.emplace_back(c.det, c.gt);
  }
  return pairs;
}

bool AlignedPose::any_frame() const {
  return std::any_of(has_frame.begin(), has_frame.end(), [](std::uint8_t b) { return b != 0; });
}

AlignedPose align_track(const PersonTrack& track, int start_frame, int t_len, int num_joints) {
  AlignedPose out;
  out.start_frame = start_frame;
  out.xy = Tensor({2, t_len, num_joints});
  out.conf = Tensor({t_len, num_joints});
  out.boxes.assign(static_cast<size_t>(t_len), Box{});
  out.has_frame.assign(static_cast<size_t>(t_len), 0);
  for (int t = 0; t < t_len; ++t) {
    const FramePose* f = track.frame_at(start_frame + t);
    if (!f) continue;
    if (static_cast<int>(f->keypoints.size()) != num_joints) {
      throw DataError("track " + std::to_string(track.track_id) + " frame " +
                      std::to_string(f->frame_index) + ": expected " + std::to_string(num_joints) +
                      " keypoints, got " + std::to_string(f->keypoints.size()));
    }
    out.has_frame[static_cast<size_t>(t)] = 1;
    out.boxes[static_cast<size_t>(t)] = f->bbox;
    for (int i = 0; i < num_joints; ++i) {
      const Keypoint& kp = f->keypoints[static_cast<size_t>(i)];
      if (kp.c <= 0) continue;  // missing: coordinates stay ignored zeros
      out.xy.at({0, t, i}) = static_cast<real>(kp.x);
      out.xy.at({1, t, i}) = static_cast<real>(kp.y);
      out.conf.at({t, i}) = static_cast<real>(kp.c);
    }
  }
  return out;
}

double pose_distance(const AlignedPose& a, const AlignedPose& b) {
  if (a.t_len() != b.t_len() || a.num_joints() != b.num_joints()) {
    throw DataError("pose_distance: windows disagree: " + a.conf.shape_str() + " vs " +
                    b.conf.shape_str());
  }
  const int t_len = a.t_len(), k = a.num_joints();
  double total = 0;
  std::int64_t count = 0;
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; i < k; ++i) {
      if (a.conf.at({t, i}) <= 0 || b.conf.at({t, i}) <= 0) continue;
      const double dx = static_cast<double>(a.xy.at({0, t, i})) - b.xy.at({0, t, i});
      const double dy = static_cast<double>(a.xy.at({1, t, i})) - b.xy.at({1, t, i});
      total += std::hypot(dx, dy);
      ++count;
    }
  }
  if (count == 0) return std::numeric_limits<double>::infinity();
  return total / static_cast<double>(count);
}

GroupSample select_group(const PersonTrack& reference, const std::vector<PersonTrack>& all_tracks,
                         int start_frame, int t_len, int group_size, int num_joints) {
  if (group_size < 1) throw DataError("select_group: group size must be >= 1");
  GroupSample sample;
  sample.start_frame = start_frame;
  sample.t_len = t_len;
  sample.reference_track_id = reference.track_id;

  AlignedPose ref = align_track(reference, start_frame, t_len, num_joints);
  if (!ref.any_frame()) {
    throw DataError("select_group: reference track " + std::to_string(reference.track_id) +
                    " has no frames in window [" + std::to_string(start_frame) + ", " +
                    std::to_string(start_frame + t_len) + ")");
  }
  for (const FramePose& f : reference.frames) {
    if (f.frame_index < start_frame) continue;
    if (f.frame_index >= start_frame + t_len) break;
    if (f.action) {
      sample.label = *f.action;
      break;
    }
  }

  struct Cand {
    double dist;
    int track_id;
    AlignedPose pose;
  };
  std::vector<Cand> cands;
  for (const PersonTrack& t : all_tracks) {
    if (t.track_id == reference.track_id) continue;
    AlignedPose p = align_track(t, start_frame, t_len, num_joints);
    if (!p.any_frame()) continue;
    const double d = pose_distance(ref, p);
    if (!std::isfinite(d)) continue;  // no mutually valid key points: not a usable neighbour
    cands.push_back({d, t.track_id, std::move(p)});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.track_id < b.track_id;
  });

  sample.persons.push_back(std::move(ref));
  sample.present.push_back(1);
  sample.neighbor_distance.push_back(0.0);
  for (int slot = 1; slot < group_size; ++slot) {
    if (slot - 1 < static_cast<int>(cands.size())) {
      auto& c = cands[static_cast<size_t>(slot - 1)];
      sample.persons.push_back(std::move(c.pose));
      sample.present.push_back(1);
      sample.neighbor_distance.push_back(c.dist);
    } else {
      AlignedPose absent;
      absent.start_frame = start_frame;
      absent.xy = Tensor({2, t_len, num_joints});
      absent.conf = Tensor({t_len, num_joints});
      absent.boxes.assign(static_cast<size_t>(t_len), Box{});
      absent.has_frame.assign(static_cast<size_t>(t_len), 0);
      sample.persons.push_back(std::move(absent));
      sample.present.push_back(0);
      sample.neighbor_distance.push_back(std::numeric_limits<double>::infinity());
    }
  }
  return sample;
}

Tensor compute_speed(const Tensor& xy, const Tensor& valid, int frame_interval) {
  if (xy.rank() != 3 || xy.dim(0) != 2) {
    throw DataError("compute_speed: expected coordinates of shape (2, T, K), got " + xy.shape_str());
  }
  if (frame_interval < 1) throw DataError("compute_speed: frame interval must be >= 1");
  const int t_len = xy.dim(1), k = xy.dim(2);
  Tensor v({2, t_len, k});
  for (int t = frame_interval; t < t_len; ++t) {
    for (int i = 0; i < k; ++i) {
      if (valid.at({t, i}) <= 0 || valid.at({t - frame_interval, i}) <= 0) continue;
      v.at({0, t, i}) = xy.at({0, t, i}) - xy.at({0, t - frame_interval, i});
      v.at({1, t, i}) = xy.at({1, t, i}) - xy.at({1, t - frame_interval, i});
    }
  }
  return v;
}

namespace {

// Mean valid key point position of the reference person, snapped to 1/8
// pixel so that integer translations of the raw coordinates cancel exactly.
std::pair<double, double> reference_center(const AlignedPose& ref) {
  double sx = 0, sy = 0;
  std::int64_t n = 0;
  const int t_len = ref.t_len(), k = ref.num_joints();
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; i < k; ++i) {
      if (ref.conf.at({t, i}) <= 0) continue;
      sx += ref.xy.at({0, t, i});
      sy += ref.xy.at({1, t, i});
      ++n;
    }
  }
  if (n == 0) return {0.0, 0.0};
  const double cx = std::round(sx / static_cast<double>(n) * 8.0) / 8.0;
  const double cy = std::round(sy / static_cast<double>(n) * 8.0) / 8.0;
  return {cx, cy};
}

}  // namespace

Tensor assemble_input(const GroupSample& sample, const AssembleOptions& options) {
  const int m = static_cast<int>(sample.persons.size());
  if (m == 0) throw DataError("assemble_input: empty sample");
  const int t_len = sample.persons[0].t_len();
  const int k = sample.persons[0].num_joints();
  const int channels = options.include_speed ? 5 : 3;
  const double scale = options.scene_scale;
  if (scale <= 0) throw DataError("assemble_input: scene scale must be positive");

  const auto [cx, cy] = reference_center(sample.persons[0]);
  Tensor out({m, channels, t_len, k});
  for (int p = 0; p < m; ++p) {
    if (!sample.present[static_cast<size_t>(p)]) continue;  // absent slot stays zero
    const AlignedPose& pose = sample.persons[static_cast<size_t>(p)];
    Tensor norm_xy({2, t_len, k});
    for (int t = 0; t < t_len; ++t) {
      for (int i = 0; i < k; ++i) {
        const real c = pose.conf.at({t, i});
        if (c <= 0) continue;
        norm_xy.at({0, t, i}) =
            static_cast<real>((static_cast<double>(pose.xy.at({0, t, i})) - cx) / scale);
        norm_xy.at({1, t, i}) =
            static_cast<real>((static_cast<double>(pose.xy.at({1, t, i})) - cy) / scale);
        out.at({p, 0, t, i}) = norm_xy.at({0, t, i});
        out.at({p, 1, t, i}) = norm_xy.at({1, t, i});
        out.at({p, 2, t, i}) = c;
      }
    }
    if (options.include_speed) {
      Tensor v = compute_speed(norm_xy, pose.conf, options.speed_interval);
      for (int t = 0; t < t_len; ++t) {
        for (int i = 0; i < k; ++i) {
          out.at({p, 3, t, i}) = v.at({0, t, i});
          out.at({p, 4, t, i}) = v.at({1, t, i});
        }
      }
    }
  }
  return out;
}

Tensor compute_distance_tensor(const AlignedPose& reference, const AlignedPose& other,
                               const AssembleOptions& options) {
  const int t_len = reference.t_len(), k = reference.num_joints();
  if (other.t_len() != t_len || other.num_joints() != k) {
    throw DataError("compute_distance_tensor: windows disagree");
  }
  if (t_len % 2 != 0) {
    throw DataError("compute_distance_tensor: window length must be even, got " +
                    std::to_string(t_len));
  }
  const double scale = options.scene_scale;
  Tensor d({1, t_len / 2, k});
  for (int th = 0; th < t_len / 2; ++th) {
    const int t = 2 * th;  // even frames, matching the stride-2 downsampling phase
    for (int i = 0; i < k; ++i) {
      if (reference.conf.at({t, i}) <= 0 || other.conf.at({t, i}) <= 0) {
        d.at({0, th, i}) = static_cast<real>(options.missing_distance);
        continue;
      }
      const double dx =
          (static_cast<double>(reference.xy.at({0, t, i})) - other.xy.at({0, t, i})) / scale;
      const double dy =
          (static_cast<double>(reference.xy.at({1, t, i})) - other.xy.at({1, t, i})) / scale;
      d.at({0, th, i}) = static_cast<real>(std::hypot(dx, dy));
    }
  }
  return d;
}

double scene_scale(const PoseHeader& header, const PoseSequence& sequence) {
  if (header.present && header.image_width > 0 && header.image_height > 0) {
    return std::hypot(static_cast<double>(header.image_width),
                      static_cast<double>(header.image_height));
  }
  std::vector<double> diagonals;
  for (const auto& track : sequence.tracks) {
    for (const auto& f : track.frames) {
      diagonals.push_back(std::hypot(f.bbox.w, f.bbox.h));
    }
  }
  if (diagonals.empty()) {
    throw DataError("scene_scale: sequence \"" + sequence.video_id +
                    "\" has no frames and the pose file has no image dimensions");
  }
  std::sort(diagonals.begin(), diagonals.end());
  // nearest-rank 95th percentile
  const size_t idx = (diagonals.size() * 95 + 99) / 100;
  return diagonals[std::min(idx == 0 ? 0 : idx - 1, diagonals.size() - 1)];
}

}  // namespace gsgcn
