#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bvr/errors.hpp"
#include "bvr/geometry.hpp"
#include "bvr/rng.hpp"

using namespace bvr;
using geom::Box;
using geom::Point2;

TEST_CASE("extract_point: center and corners") {
  CHECK(geom::extract_point({0, 0, 4, 4}, geom::PointKind::center).x == 2.0);
  CHECK(geom::extract_point({0, 0, 4, 4}, geom::PointKind::center).y == 2.0);
  const Point2 tl = geom::extract_point({1, 2, 5, 8}, geom::PointKind::top_left);
  CHECK(tl.x == 1.0);
  CHECK(tl.y == 2.0);
  const Point2 br = geom::extract_point({1, 2, 5, 8}, geom::PointKind::bottom_right);
  CHECK(br.x == 5.0);
  CHECK(br.y == 8.0);
}

TEST_CASE("extract_point center lies inside the box") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double x0 = rng.uniform(0, 50), y0 = rng.uniform(0, 50);
    const Box b{x0, y0, x0 + rng.uniform(0, 20), y0 + rng.uniform(0, 20)};
    const Point2 c = geom::extract_point(b, geom::PointKind::center);
    CHECK(c.x >= b.x_tl);
    CHECK(c.x <= b.x_br);
    CHECK(c.y >= b.y_tl);
    CHECK(c.y <= b.y_br);
  }
}

TEST_CASE("relative_location subtracts query from key") {
  const Point2 zero = geom::relative_location({3, 4}, {3, 4});
  CHECK(zero.x == 0.0);
  CHECK(zero.y == 0.0);
  const Point2 d = geom::relative_location({2, 2}, {5, 1});
  CHECK(d.x == 3.0);
  CHECK(d.y == -1.0);
}

TEST_CASE("relative_location is translation invariant") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Point2 q{rng.uniform(-10, 10), rng.uniform(-10, 10)};
    const Point2 k{rng.uniform(-10, 10), rng.uniform(-10, 10)};
    const double tx = rng.uniform(-100, 100), ty = rng.uniform(-100, 100);
    const Point2 a = geom::relative_location(q, k);
    const Point2 b = geom::relative_location({q.x + tx, q.y + ty}, {k.x + tx, k.y + ty});
    CHECK(a.x == doctest::Approx(b.x).epsilon(1e-12));
    CHECK(a.y == doctest::Approx(b.y).epsilon(1e-12));
  }
}

TEST_CASE("iou: identity, disjoint, hand-computed overlap") {
  const Box a{0, 0, 2, 2};
  CHECK(geom::iou(a, a) == 1.0);
  CHECK(geom::iou(a, {5, 5, 7, 7}) == 0.0);
  // intersection 2, union 6
  CHECK(geom::iou(a, {1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("iou is symmetric and vanishes after a full-width translation") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double x0 = rng.uniform(0, 30), y0 = rng.uniform(0, 30);
    const Box a{x0, y0, x0 + rng.uniform(0.1, 15), y0 + rng.uniform(0.1, 15)};
    const double x1 = rng.uniform(0, 30), y1 = rng.uniform(0, 30);
    const Box b{x1, y1, x1 + rng.uniform(0.1, 15), y1 + rng.uniform(0.1, 15)};
    CHECK(geom::iou(a, b) == geom::iou(b, a));
    const Box shifted{a.x_tl + a.width(), a.y_tl, a.x_br + a.width(), a.y_br};
    CHECK(geom::iou(a, shifted) == 0.0);
  }
}

TEST_CASE("degenerate zero-area boxes are valid iou inputs with result 0") {
  const Box point{3, 3, 3, 3};
  CHECK(geom::iou(point, point) == 0.0);
  CHECK(geom::iou(point, {0, 0, 10, 10}) == 0.0);
  CHECK_THROWS_AS(geom::iou({5, 5, 1, 1}, point), ConfigError);  // misordered corners
}

TEST_CASE("box center-size conversion round-trips") {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double xc = rng.uniform(-5, 60), yc = rng.uniform(-5, 60);
    const double w = rng.uniform(0.1, 30), h = rng.uniform(0.1, 30);
    const Box b = Box::from_center_size(xc, yc, w, h);
    CHECK(b.center().x == doctest::Approx(xc).epsilon(1e-12));
    CHECK(b.center().y == doctest::Approx(yc).epsilon(1e-12));
    CHECK(b.width() == doctest::Approx(w).epsilon(1e-12));
    CHECK(b.height() == doctest::Approx(h).epsilon(1e-12));
  }
}

TEST_CASE("extraction instrumentation counts per kind") {
  geom::reset_extract_counts();
  const Box b{0, 0, 4, 4};
  geom::extract_point(b, geom::PointKind::center);
  geom::extract_point(b, geom::PointKind::top_left);
  geom::extract_point(b, geom::PointKind::top_left);
  CHECK(geom::extract_count(geom::PointKind::center) == 1);
  CHECK(geom::extract_count(geom::PointKind::top_left) == 2);
  CHECK(geom::extract_count(geom::PointKind::bottom_right) == 0);
  geom::reset_extract_counts();
  CHECK(geom::extract_count(geom::PointKind::top_left) == 0);
}
