#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "gsgcn/dataset.hpp"
#include "gsgcn/pose.hpp"
#include "support/test_util.hpp"

using namespace gsgcn;
using namespace gsgcn::testutil;

namespace {

std::string pose_line(const std::string& video, int frame, int track, double x, double y,
                      int num_kp = 14, double conf = 1.0, int action = 0) {
  std::ostringstream os;
  os << R"({"video_id":")" << video << R"(","frame":)" << frame << R"(,"track_id":)" << track
     << R"(,"bbox":[)" << x - 10 << ',' << y - 10 << R"(,20,40],"keypoints":[)";
  for (int i = 0; i < num_kp; ++i) {
    if (i) os << ',';
    os << '[' << x + i << ',' << y + i << ',' << conf << ']';
  }
  os << R"(],"action":)" << action << '}';
  return os.str();
}

// track whose keypoints sit at (x0 + i, y0 + i) for all frames
PersonTrack const_track(int id, int frames, double x0, double y0, int k = 4,
                        std::optional<int> action = 0) {
  PersonTrack t;
  t.track_id = id;
  for (int f = 0; f < frames; ++f) {
    FramePose p;
    p.frame_index = f;
    p.bbox = Box{x0 - 10, y0 - 10, 20, 40};
    p.action = action;
    for (int i = 0; i < k; ++i) p.keypoints.push_back(Keypoint{x0 + i, y0 + i, 1.0});
    t.frames.push_back(std::move(p));
  }
  return t;
}

}  // namespace

TEST_CASE("parse_pose_file") {
  SUBCASE("empty file yields no sequences") {
    PoseFile f = parse_pose_file(std::string{});
    CHECK(f.sequences.empty());
    CHECK_FALSE(f.header.present);
  }
  SUBCASE("single line, K=14") {
    PoseFile f = parse_pose_file(pose_line("v", 0, 7, 100, 200));
    REQUIRE(f.sequences.size() == 1);
    REQUIRE(f.sequences[0].tracks.size() == 1);
    const PersonTrack& t = f.sequences[0].tracks[0];
    CHECK(t.track_id == 7);
    REQUIRE(t.frames.size() == 1);
    CHECK(t.frames[0].keypoints.size() == 14);
    CHECK(t.frames[0].keypoints[0].x == doctest::Approx(100));
  }
  SUBCASE("frames are sorted") {
    std::string text = pose_line("v", 5, 1, 0, 0) + "\n" + pose_line("v", 3, 1, 0, 0);
    PoseFile f = parse_pose_file(text);
    REQUIRE(f.sequences[0].tracks[0].frames.size() == 2);
    CHECK(f.sequences[0].tracks[0].frames[0].frame_index == 3);
    CHECK(f.sequences[0].tracks[0].frames[1].frame_index == 5);
  }
  SUBCASE("duplicate (track, frame) fails with the line number") {
    std::string text = pose_line("v", 3, 1, 0, 0) + "\n" + pose_line("v", 3, 1, 0, 0);
    CHECK_THROWS_WITH_AS(parse_pose_file(text), doctest::Contains("line 2"), DataError);
  }
  SUBCASE("wrong keypoint count fails naming the line") {
    ParseOptions opt;
    opt.expected_keypoints = 14;
    CHECK_THROWS_WITH_AS(parse_pose_file(pose_line("v", 0, 1, 0, 0, 13), opt),
                         doctest::Contains("line 1"), DataError);
  }
  SUBCASE("keypoint count drift inside one file fails") {
    std::string text = pose_line("v", 0, 1, 0, 0, 14) + "\n" + pose_line("v", 1, 1, 0, 0, 12);
    CHECK_THROWS_WITH_AS(parse_pose_file(text), doctest::Contains("line 2"), DataError);
  }
  SUBCASE("malformed JSON fails naming the line") {
    std::string text = pose_line("v", 0, 1, 0, 0) + "\n{oops";
    CHECK_THROWS_WITH_AS(parse_pose_file(text), doctest::Contains("line 2"), DataError);
  }
  SUBCASE("header line is honoured") {
    std::string text =
        R"({"type":"header","image_width":1920,"image_height":1080,"num_keypoints":14})";
    text += "\n" + pose_line("v", 0, 1, 0, 0);
    PoseFile f = parse_pose_file(text);
    CHECK(f.header.present);
    CHECK(f.header.image_width == 1920);
    ParseOptions opt;
    opt.expected_keypoints = 12;
    CHECK_THROWS_WITH_AS(parse_pose_file(text, opt), doctest::Contains("num_keypoints"),
                         DataError);
  }
  SUBCASE("invalid confidence fails") {
    CHECK_THROWS_AS(parse_pose_file(pose_line("v", 0, 1, 0, 0, 14, 1.5)), DataError);
  }
}

TEST_CASE("match_detections_to_gt") {
  SUBCASE("identical boxes match at IoU 1") {
    std::vector<Box> det{{0, 0, 2, 2}};
    std::vector<Box> gt{{0, 0, 2, 2}};
    auto pairs = match_detections_to_gt(det, gt);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0] == std::pair<int, int>(0, 0));
  }
  SUBCASE("disjoint boxes never match") {
    std::vector<Box> det{{0, 0, 1, 1}};
    std::vector<Box> gt{{5, 5, 1, 1}};
    CHECK(match_detections_to_gt(det, gt).empty());
  }
  SUBCASE("IoU exactly 1/3 passes the 0.3 threshold") {
    // intersection 2, union 6
    std::vector<Box> det{{0, 0, 2, 2}};
    std::vector<Box> gt{{1, 0, 2, 2}};
    CHECK(iou(det[0], gt[0]) == doctest::Approx(1.0 / 3));
    CHECK(match_detections_to_gt(det, gt).size() == 1);
  }
  SUBCASE("matching is one-to-one and greedy by IoU") {
    std::vector<Box> det{{0, 0, 4, 4}, {0.5, 0, 4, 4}};
    std::vector<Box> gt{{0.25, 0, 4, 4}};
    auto pairs = match_detections_to_gt(det, gt);
    REQUIRE(pairs.size() == 1);
    std::vector<char> det_seen(det.size(), 0), gt_seen(gt.size(), 0);
    for (auto [d, g] : pairs) {
      CHECK_FALSE(det_seen[d]);
      CHECK_FALSE(gt_seen[g]);
      det_seen[d] = gt_seen[g] = 1;
    }
  }
}

TEST_CASE("pose_distance") {
  PersonTrack a = const_track(0, 4, 100, 100);
  PersonTrack b = const_track(1, 4, 103, 104);
  AlignedPose pa = align_track(a, 0, 4, 4);
  AlignedPose pb = align_track(b, 0, 4, 4);
  SUBCASE("identity is zero, translation is the hypotenuse") {
    CHECK(pose_distance(pa, pa) == doctest::Approx(0));
    CHECK(pose_distance(pa, pb) == doctest::Approx(5));
    CHECK(pose_distance(pa, pb) == doctest::Approx(pose_distance(pb, pa)));
  }
  SUBCASE("no overlapping valid keypoints gives infinity") {
    PersonTrack c = const_track(2, 4, 0, 0);
    for (auto& f : c.frames) {
      for (auto& kp : f.keypoints) kp.c = 0;
    }
    AlignedPose pc = align_track(c, 0, 4, 4);
    CHECK(std::isinf(pose_distance(pa, pc)));
  }
}

TEST_CASE("select_group") {
  std::vector<PersonTrack> tracks;
  tracks.push_back(const_track(0, 8, 0, 0));     // reference
  tracks.push_back(const_track(1, 8, 10, 0));    // d=10
  tracks.push_back(const_track(2, 8, 0, 5));     // d=5
  tracks.push_back(const_track(3, 8, 100, 0));   // d=100
  tracks.push_back(const_track(4, 8, 0, 50));    // d=50

  SUBCASE("picks the two nearest of five for M=3") {
    GroupSample g = select_group(tracks[0], tracks, 0, 8, 3, 4);
    REQUIRE(g.persons.size() == 3);
    CHECK(g.present == std::vector<std::uint8_t>{1, 1, 1});
    CHECK(g.neighbor_distance[1] == doctest::Approx(5));
    CHECK(g.neighbor_distance[2] == doctest::Approx(10));
    CHECK(std::is_sorted(g.neighbor_distance.begin() + 1, g.neighbor_distance.end()));
  }
  SUBCASE("pads with absent persons when alone") {
    std::vector<PersonTrack> only_ref{tracks[0]};
    GroupSample g = select_group(tracks[0], only_ref, 0, 8, 3, 4);
    CHECK(g.present == std::vector<std::uint8_t>{1, 0, 0});
    for (std::int64_t i = 0; i < g.persons[1].conf.numel(); ++i) {
      CHECK(g.persons[1].conf[i] == 0);
    }
  }
  SUBCASE("equal distances break ties toward the lower track id") {
    std::vector<PersonTrack> t2;
    t2.push_back(const_track(0, 8, 0, 0));
    t2.push_back(const_track(9, 8, 7, 0));
    t2.push_back(const_track(4, 8, -7, 0));
    GroupSample g = select_group(t2[0], t2, 0, 8, 2, 4);
    CHECK(g.persons[1].xy.at({0, 0, 0}) == doctest::Approx(-7));
  }
  SUBCASE("reference absent from the window fails") {
    CHECK_THROWS_AS(select_group(tracks[0], tracks, 100, 8, 3, 4), DataError);
  }
}

TEST_CASE("compute_speed") {
  const int t_len = 8, k = 2;
  Tensor xy({2, t_len, k});
  Tensor valid = Tensor::ones({t_len, k});
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; i < k; ++i) {
      xy.at({0, t, i}) = static_cast<real>(t);      // vx = d after warmup
      xy.at({1, t, i}) = static_cast<real>(2 * t);  // vy = 2d
    }
  }
  Tensor v = compute_speed(xy, valid, 3);
  SUBCASE("zero before the interval, d*velocity after") {
    for (int i = 0; i < k; ++i) {
      for (int t = 0; t < 3; ++t) {
        CHECK(v.at({0, t, i}) == 0);
        CHECK(v.at({1, t, i}) == 0);
      }
      for (int t = 3; t < t_len; ++t) {
        CHECK(v.at({0, t, i}) == doctest::Approx(3));
        CHECK(v.at({1, t, i}) == doctest::Approx(6));
      }
    }
  }
  SUBCASE("constant sequence has zero speed") {
    Tensor c = Tensor::full({2, t_len, k}, real(42));
    Tensor vc = compute_speed(c, valid, 3);
    for (std::int64_t i = 0; i < vc.numel(); ++i) CHECK(vc[i] == 0);
  }
  SUBCASE("missing endpoints zero the speed") {
    Tensor holes = valid;
    holes.at({4, 0}) = 0;
    Tensor vh = compute_speed(xy, holes, 3);
    CHECK(vh.at({0, 4, 0}) == 0);   // endpoint missing
    CHECK(vh.at({0, 7, 0}) == 0);   // origin missing
    CHECK(vh.at({0, 7, 1}) == doctest::Approx(3));
  }
}

TEST_CASE("assemble_input") {
  std::vector<PersonTrack> tracks;
  tracks.push_back(const_track(0, 8, 500, 300));
  tracks.push_back(const_track(1, 8, 520, 300));
  GroupSample g = select_group(tracks[0], tracks, 0, 8, 3, 4);
  AssembleOptions opt;
  opt.scene_scale = 100.0;

  SUBCASE("shape and padding contract") {
    Tensor z = assemble_input(g, opt);
    CHECK(z.shape() == Shape{3, 5, 8, 4});
    for (int c = 0; c < 5; ++c) {
      for (int t = 0; t < 8; ++t) {
        for (int i = 0; i < 4; ++i) CHECK(z.at({2, c, t, i}) == 0);
      }
    }
  }
  SUBCASE("reference centred mean is approximately zero") {
    Tensor z = assemble_input(g, opt);
    double sx = 0, sy = 0;
    for (int t = 0; t < 8; ++t) {
      for (int i = 0; i < 4; ++i) {
        sx += z.at({0, 0, t, i});
        sy += z.at({0, 1, t, i});
      }
    }
    CHECK(std::abs(sx / 32) < 1e-3);
    CHECK(std::abs(sy / 32) < 1e-3);
  }
  SUBCASE("integer translation of the whole scene is bit-invisible") {
    std::vector<PersonTrack> shifted = tracks;
    for (auto& tr : shifted) {
      for (auto& f : tr.frames) {
        f.bbox.x += 357;
        f.bbox.y += 123;
        for (auto& kp : f.keypoints) {
          kp.x += 357;
          kp.y += 123;
        }
      }
    }
    GroupSample g2 = select_group(shifted[0], shifted, 0, 8, 3, 4);
    Tensor a = assemble_input(g, opt);
    Tensor b = assemble_input(g2, opt);
    CHECK(bitwise_equal(a, b));
  }
  SUBCASE("no_speed drops to three channels") {
    AssembleOptions o3 = opt;
    o3.include_speed = false;
    CHECK(assemble_input(g, o3).shape() == Shape{3, 3, 8, 4});
  }
}

TEST_CASE("compute_distance_tensor") {
  PersonTrack a = const_track(0, 8, 0, 0);
  PersonTrack b = const_track(1, 8, 30, 40);
  AlignedPose pa = align_track(a, 0, 8, 4);
  AlignedPose pb = align_track(b, 0, 8, 4);
  AssembleOptions opt;
  opt.scene_scale = 10.0;

  SUBCASE("identical poses give zeros") {
    Tensor d = compute_distance_tensor(pa, pa, opt);
    CHECK(d.shape() == Shape{1, 4, 4});
    for (std::int64_t i = 0; i < d.numel(); ++i) CHECK(d[i] == 0);
  }
  SUBCASE("offset (30,40) at scale 10 gives 5") {
    Tensor d = compute_distance_tensor(pa, pb, opt);
    for (std::int64_t i = 0; i < d.numel(); ++i) CHECK(d[i] == doctest::Approx(5));
  }
  SUBCASE("missing keypoints saturate") {
    PersonTrack c = b;
    c.frames[0].keypoints[0].c = 0;  // frame 0 = first even frame
    AlignedPose pc = align_track(c, 0, 8, 4);
    Tensor d = compute_distance_tensor(pa, pc, opt);
    CHECK(d.at({0, 0, 0}) == doctest::Approx(10.0));  // default missing_distance
    CHECK(d.at({0, 0, 1}) == doctest::Approx(5));
  }
  SUBCASE("odd window length is rejected") {
    AlignedPose p7 = align_track(a, 0, 7, 4);
    CHECK_THROWS_AS(compute_distance_tensor(p7, p7, opt), DataError);
  }
}

TEST_CASE("scene_scale") {
  PoseHeader h;
  h.present = true;
  h.image_width = 1920;
  h.image_height = 1080;
  PoseSequence seq;
  SUBCASE("image diagonal when the header is present") {
    CHECK(scene_scale(h, seq) == doctest::Approx(std::hypot(1920.0, 1080.0)));
  }
  SUBCASE("bbox-diagonal percentile fallback") {
    PoseHeader none;
    seq.tracks.push_back(const_track(0, 20, 0, 0));
    // diagonal of the 20x40 test box
    CHECK(scene_scale(none, seq) == doctest::Approx(std::hypot(20.0, 40.0)));
    seq.tracks.clear();
    CHECK_THROWS_AS(scene_scale(none, seq), DataError);
  }
}

TEST_CASE("build_samples end to end on a hand-made file") {
  std::ostringstream os;
  os << R"({"type":"header","image_width":1920,"image_height":1080,"num_keypoints":14})" << "\n";
  for (int f = 0; f < 8; ++f) {
    os << pose_line("v0", f, 0, 400, 300, 14, 1.0, 2) << "\n";
    os << pose_line("v0", f, 1, 430, 300, 14, 1.0, 2) << "\n";
  }
  PoseFile file = parse_pose_file(os.str());
  DatasetOptions opt;
  opt.group_size = 3;
  opt.window_length = 8;
  opt.num_joints = 14;
  auto samples = build_samples(file, opt);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].label == 2);
  CHECK(samples[0].input.shape() == Shape{3, 5, 8, 14});
  CHECK(samples[0].distances.size() == 2);
  CHECK(samples[0].present == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(samples[0].reference_track_id == 0);
}
