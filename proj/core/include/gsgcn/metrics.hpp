#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsgcn/box.hpp"

namespace gsgcn {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One scored box, the unit of frame-AP evaluation. Ground truths reuse the
// type with score ignored.
struct Detection {
  int frame = 0;
  Box bbox;
  int class_id = 0;
  double score = 1.0;
};

// Fraction of exact label matches; inputs must be non-empty and equal length.
double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

// Average precision for one class at one IoU threshold: detections sorted by
// descending score, greedily matched to unmatched same-frame ground truths
// (highest IoU first), all-points interpolation of the PR curve.
double frame_ap(const std::vector<Detection>& detections,
                const std::vector<Detection>& ground_truths, double iou_threshold);

struct FrameMapResult {
  std::map<double, double> map_at;                      // threshold -> mAP
  double map_avg = 0;                                   // mean over thresholds
  std::map<double, std::map<int, double>> ap_per_class; // threshold -> class -> AP
};

// mAP over classes with at least one ground truth, at each threshold
// (defaults 0.5 / 0.6 / 0.75), plus their average.
FrameMapResult frame_map(const std::vector<Detection>& detections,
                         const std::vector<Detection>& ground_truths,
                         const std::vector<double>& thresholds = {0.5, 0.6, 0.75});

std::string frame_map_report(const FrameMapResult& result);

}  // namespace gsgcn
