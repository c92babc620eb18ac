#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gsgcn/metrics.hpp"
#include "support/pr_oracle.hpp"

using namespace gsgcn;
using namespace gsgcn::testutil;

namespace {

std::vector<Detection> random_case(std::mt19937& rng, int max_items, int num_frames,
                                   bool scored) {
  std::uniform_int_distribution<int> count(0, max_items);
  std::uniform_int_distribution<int> frame(0, num_frames - 1);
  std::uniform_real_distribution<double> pos(0, 20), size(1, 8), score(0, 1);
  std::vector<Detection> out;
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    Detection d;
    d.frame = frame(rng);
    d.bbox = Box{pos(rng), pos(rng), size(rng), size(rng)};
    d.class_id = 0;
    d.score = scored ? score(rng) : 1.0;
    out.push_back(d);
  }
  return out;
}

}  // namespace

TEST_CASE("accuracy") {
  CHECK(accuracy({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0));
  CHECK(accuracy({1, 2, 3}, {0, 0, 0}) == doctest::Approx(0.0));
  CHECK(accuracy({1, 2, 3, 4}, {1, 2, 3, 0}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(accuracy({}, {}), MetricError);
  CHECK_THROWS_AS(accuracy({1}, {1, 2}), MetricError);
}

TEST_CASE("frame_ap fixed cases") {
  const Box b1{0, 0, 4, 4};
  const Box b2{10, 10, 4, 4};
  SUBCASE("perfect detector") {
    std::vector<Detection> gt{{0, b1, 0, 1}, {1, b2, 0, 1}};
    std::vector<Detection> det{{0, b1, 0, 0.9}, {1, b2, 0, 0.8}};
    CHECK(frame_ap(det, gt, 0.5) == doctest::Approx(1.0));
  }
  SUBCASE("no detections") {
    std::vector<Detection> gt{{0, b1, 0, 1}};
    CHECK(frame_ap({}, gt, 0.5) == doctest::Approx(0.0));
  }
  SUBCASE("two ground truths, hit then miss: AP = 0.5") {
    std::vector<Detection> gt{{0, b1, 0, 1}, {1, b2, 0, 1}};
    std::vector<Detection> det{{0, b1, 0, 0.9},         // hit
                               {5, b2, 0, 0.8}};        // wrong frame: miss
    CHECK(frame_ap(det, gt, 0.5) == doctest::Approx(0.5));
  }
  SUBCASE("duplicate detections of one ground truth count once") {
    std::vector<Detection> gt{{0, b1, 0, 1}};
    std::vector<Detection> det{{0, b1, 0, 0.9}, {0, b1, 0, 0.8}, {0, b1, 0, 0.7}};
    // one TP at rank 1, then FPs: precision envelope keeps AP = 1.0
    CHECK(frame_ap(det, gt, 0.5) == doctest::Approx(1.0));
    // but adding them before the hit hurts
    std::vector<Detection> det2{{0, Box{100, 100, 4, 4}, 0, 0.95}, {0, b1, 0, 0.9}};
    CHECK(frame_ap(det2, gt, 0.5) == doctest::Approx(0.5));
  }
  SUBCASE("invalid threshold") {
    CHECK_THROWS_AS(frame_ap({}, {}, 0.0), MetricError);
    CHECK_THROWS_AS(frame_ap({}, {}, 1.0), MetricError);
  }
}

TEST_CASE("frame_ap agrees with the brute-force oracle on random cases") {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    auto gt = random_case(rng, 10, 4, false);
    auto det = random_case(rng, 10, 4, true);
    if (gt.empty()) continue;
    const double a = frame_ap(det, gt, 0.5);
    const double b = frame_ap_oracle(det, gt, 0.5);
    CHECK(std::abs(a - b) < 1e-9);
  }
}

TEST_CASE("frame_ap invariants") {
  std::mt19937 rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    auto gt = random_case(rng, 6, 3, false);
    auto det = random_case(rng, 6, 3, true);
    if (gt.empty() || det.empty()) continue;
    const double base = frame_ap(det, gt, 0.5);
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);

    // strictly monotone score rescaling changes nothing
    auto scaled = det;
    for (auto& d : scaled) d.score = 0.2 + 0.5 * d.score;
    CHECK(frame_ap(scaled, gt, 0.5) == doctest::Approx(base).epsilon(1e-12));

    // a top-scored false positive can only lower AP
    auto with_fp = det;
    Detection fp;
    fp.frame = 0;
    fp.bbox = Box{500, 500, 2, 2};
    fp.score = 2.0;
    with_fp.push_back(fp);
    CHECK(frame_ap(with_fp, gt, 0.5) <= base + 1e-12);
  }
}

TEST_CASE("frame_map") {
  const Box b{0, 0, 4, 4};
  SUBCASE("perfect detections reach 100% at every threshold") {
    std::vector<Detection> gt{{0, b, 0, 1}, {1, b, 1, 1}};
    std::vector<Detection> det{{0, b, 0, 0.9}, {1, b, 1, 0.9}};
    FrameMapResult r = frame_map(det, gt);
    for (const auto& [thr, v] : r.map_at) CHECK(v == doctest::Approx(1.0));
    CHECK(r.map_avg == doctest::Approx(1.0));
  }
  SUBCASE("single class, single threshold equals frame_ap") {
    std::mt19937 rng(5);
    auto gt = random_case(rng, 8, 3, false);
    auto det = random_case(rng, 8, 3, true);
    if (!gt.empty()) {
      FrameMapResult r = frame_map(det, gt, {0.5});
      CHECK(r.map_at.at(0.5) == doctest::Approx(frame_ap(det, gt, 0.5)));
      CHECK(r.map_avg == doctest::Approx(r.map_at.at(0.5)));
    }
  }
  SUBCASE("classes with no ground truth are skipped, not zeroed") {
    std::vector<Detection> gt{{0, b, 0, 1}};
    std::vector<Detection> det{{0, b, 0, 0.9}, {0, Box{50, 50, 3, 3}, 7, 0.9}};
    FrameMapResult r = frame_map(det, gt, {0.5});
    CHECK(r.map_at.at(0.5) == doctest::Approx(1.0));  // class 7 has no GT: excluded
  }
  SUBCASE("average equals the mean of the per-threshold values") {
    std::mt19937 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      auto gt = random_case(rng, 8, 3, false);
      auto det = random_case(rng, 8, 3, true);
      if (gt.empty()) continue;
      FrameMapResult r = frame_map(det, gt);
      double mean = 0;
      for (const auto& [thr, v] : r.map_at) mean += v;
      mean /= static_cast<double>(r.map_at.size());
      CHECK(r.map_avg == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("report prints every threshold") {
    std::vector<Detection> gt{{0, b, 0, 1}};
    std::vector<Detection> det{{0, b, 0, 0.9}};
    const std::string report = frame_map_report(frame_map(det, gt));
    CHECK(report.find("f-mAP@50") != std::string::npos);
    CHECK(report.find("f-mAP@60") != std::string::npos);
    CHECK(report.find("f-mAP@75") != std::string::npos);
    CHECK(report.find("f-mAP@avg") != std::string::npos);
  }
}
