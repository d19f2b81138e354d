#pragma once

#include <algorithm>

namespace repdet {

// Axis-aligned image-space box, corners (x1,y1) top-left / (x2,y2)
// bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double area() const { return std::max(0.0, w()) * std::max(0.0, h()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }
  bool contains(double px, double py) const {
    // strict: boundary points do not count as inside
    return px > x1 && px < x2 && py > y1 && py < y2;
  }
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

}  // namespace repdet
