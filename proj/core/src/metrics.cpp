#include "gsgcn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace gsgcn {

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.empty() || predicted.size() != truth.size()) {
    throw MetricError("accuracy: need equal-length non-empty label lists");
  }
  std::int64_t hit = 0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == truth[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

double frame_ap(const std::vector<Detection>& detections,
                const std::vector<Detection>& ground_truths, double iou_threshold) {
  if (iou_threshold <= 0 || iou_threshold >= 1) {
    throw MetricError("frame_ap: IoU threshold must lie in (0, 1)");
  }
  const size_t num_gt = ground_truths.size();
  if (num_gt == 0) return 0.0;  // defined as 0 when detections exist, caller skips when neither
  if (detections.empty()) return 0.0;

  std::vector<int> order(detections.size());
  for (size_t i = 0; i < order.size(); ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return detections[static_cast<size_t>(a)].score > detections[static_cast<size_t>(b)].score;
  });

  std::vector<char> gt_used(num_gt, 0);
  std::vector<char> tp(order.size(), 0);
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = detections[static_cast<size_t>(order[rank])];
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < num_gt; ++g) {
      if (gt_used[g] || ground_truths[g].frame != d.frame) continue;
      const double v = iou(d.bbox, ground_truths[g].bbox);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      gt_used[static_cast<size_t>(best)] = 1;
      tp[rank] = 1;
    }
  }

  // all-points interpolation: sum of recall steps times the precision envelope
  std::vector<double> precision(order.size()), recall(order.size());
  int cum_tp = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    cum_tp += tp[i];
    precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(cum_tp) / static_cast<double>(num_gt);
  }
  double envelope = 0;
  double ap = 0;
  for (size_t i = order.size(); i-- > 0;) {
    envelope = std::max(envelope, precision[i]);
    const double prev_recall = i == 0 ? 0.0 : recall[i - 1];
    ap += (recall[i] - prev_recall) * envelope;
  }
  return ap;
}

FrameMapResult frame_map(const std::vector<Detection>& detections,
                         const std::vector<Detection>& ground_truths,
                         const std::vector<double>& thresholds) {
  std::set<int> classes;
  for (const auto& g : ground_truths) classes.insert(g.class_id);

  FrameMapResult result;
  for (double thr : thresholds) {
    double sum = 0;
    int counted = 0;
    for (int c : classes) {
      std::vector<Detection> dc, gc;
      for (const auto& d : detections) {
        if (d.class_id == c) dc.push_back(d);
      }
      for (const auto& g : ground_truths) {
        if (g.class_id == c) gc.push_back(g);
      }
      const double ap = frame_ap(dc, gc, thr);
      result.ap_per_class[thr][c] = ap;
      sum += ap;
      ++counted;
    }
    result.map_at[thr] = counted > 0 ? sum / counted : 0.0;
  }
  double avg = 0;
  for (const auto& [thr, v] : result.map_at) avg += v;
  result.map_avg = result.map_at.empty() ? 0.0 : avg / static_cast<double>(result.map_at.size());
  return result;
}

std::string frame_map_report(const FrameMapResult& result) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  for (const auto& [thr, v] : result.map_at) {
    os << "f-mAP@" << static_cast<int>(std::lround(thr * 100)) << ": " << v * 100 << "%\n";
  }
  os << "f-mAP@avg: " << result.map_avg * 100 << "%\n";
  return os.str();
}

}  // namespace gsgcn
