#pragma once

#include <cstdint>
#include <cstddef>

namespace bvr::geom {

// Image coordinates: origin at the top-left, x rightward, y downward, pixel
// (0,0) covering [0,1)×[0,1).
struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

// Axis-aligned box as opposing corners. x_tl ≤ x_br and y_tl ≤ y_br.
struct Box {
  double x_tl = 0.0, y_tl = 0.0, x_br = 0.0, y_br = 0.0;

  double width() const { return x_br - x_tl; }
  double height() const { return y_br - y_tl; }
  double area() const { return width() * height(); }
  Point2 center() const { return {(x_tl + x_br) / 2.0, (y_tl + y_br) / 2.0}; }
  bool valid() const;

  static Box from_center_size(double xc, double yc, double w, double h) {
    return {xc - w / 2.0, yc - h / 2.0, xc + w / 2.0, yc + h / 2.0};
  }
};

// One pyramid level: H×W bins of `stride` pixels each.
struct LevelSpec {
  int stride = 1;
  std::size_t h = 1;
  std::size_t w = 1;
};

enum class PointKind { center = 0, top_left = 1, bottom_right = 2 };

Point2 extract_point(const Box& box, PointKind kind);

// (dx, dy) = key − query, in image pixels.
Point2 relative_location(const Point2& query, const Point2& key);

// Intersection over union in [0,1]; 0 for disjoint or degenerate boxes.
double iou(const Box& a, const Box& b);

// Instrumentation: extract_point call counts per kind, used to verify that
// center-point query mode never extracts corners.
std::uint64_t extract_count(PointKind kind);
void reset_extract_counts();

}  // namespace bvr::geom
