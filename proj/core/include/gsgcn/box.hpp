#pragma once

namespace gsgcn {

// Axis-aligned pixel box, (x, y) top-left corner.
struct Box {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;

  double area() const { return w > 0 && h > 0 ? w * h : 0.0; }
};

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

}  // namespace gsgcn
