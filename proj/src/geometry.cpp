#include "bvr/geometry.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "bvr/errors.hpp"

namespace bvr::geom {

namespace {
std::atomic<std::uint64_t> g_extract_counts[3] = {{0}, {0}, {0}};
}

bool Box::valid() const {
  return std::isfinite(x_tl) && std::isfinite(y_tl) && std::isfinite(x_br) &&
         std::isfinite(y_br) && x_tl <= x_br && y_tl <= y_br;
}

Point2 extract_point(const Box& box, PointKind kind) {
  if (!box.valid()) throw ConfigError("extract_point: invalid box");
  g_extract_counts[static_cast<int>(kind)].fetch_add(1, std::memory_order_relaxed);
  switch (kind) {
    case PointKind::center:
      return box.center();
    case PointKind::top_left:
      return {box.x_tl, box.y_tl};
    case PointKind::bottom_right:
      return {box.x_br, box.y_br};
  }
  throw ConfigError("extract_point: unknown kind");
}

Point2 relative_location(const Point2& query, const Point2& key) {
  return {key.x - query.x, key.y - query.y};
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw ConfigError("iou: invalid box");
  const double ix = std::max(0.0, std::min(a.x_br, b.x_br) - std::max(a.x_tl, b.x_tl));
  const double iy = std::max(0.0, std::min(a.y_br, b.y_br) - std::max(a.y_tl, b.y_tl));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;  // degenerate boxes
  return inter / uni;
}

std::uint64_t extract_count(PointKind kind) {
  return g_extract_counts[static_cast<int>(kind)].load(std::memory_order_relaxed);
}

void reset_extract_counts() {
  for (auto& c : g_extract_counts) c.store(0, std::memory_order_relaxed);
}

}  // namespace bvr::geom
