#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bvr/array.hpp"
#include "bvr/geometry.hpp"

namespace bvr::synthdata {

// Deterministic scenes: axis-aligned rectangles with class-specific fill
// patterns (solid / horizontal stripes / checker) on a noisy background.
// Boxes have integer corners in [1, image_size−1] so centers and corners are
// strictly interior, and pairwise IoU stays ≤ 0.3.
struct SceneSpec {
  std::size_t image_size = 64;
  std::size_t channels = 3;
  std::size_t objects_min = 1;
  std::size_t objects_max = 5;
  std::size_t num_classes = 3;
  std::size_t box_min = 8;
  std::size_t box_max = 40;
  double aspect_jitter = 0.25;  // h = w·exp(U(−j, j)), clamped to [box_min, box_max]
  double noise = 0.1;           // additive uniform noise amplitude
  std::uint64_t seed = 0;

  void validate() const;
};

struct Annotation {
  geom::Box box;
  int class_id = 0;
};

struct Example {
  Array image;  // (channels, size, size), values in [0, 1]
  std::vector<Annotation> objects;
};

struct Dataset {
  SceneSpec spec;
  std::vector<Example> examples;
};

// Deterministic given the spec: example i draws from Rng(seed ^ i).
Example render_example(const SceneSpec& spec, std::uint64_t index);
Dataset generate(const SceneSpec& spec, std::size_t count);

// Directory layout: manifest.json plus images/NNNNNN.bvra and
// annotations/NNNNNN.json per example.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> problems;
  std::vector<std::size_t> class_counts;
};

// Validates the on-disk form: readable files, finite pixels in [0,1], boxes
// strictly interior with ordered corners, class ids in range.
ValidationReport validate(const std::string& dir);

}  // namespace bvr::synthdata
