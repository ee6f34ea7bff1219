#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace bvr {

// Dense row-major array of 64-bit floats with explicit shape metadata. All
// extents are positive; emptiness is represented at the module level (an
// Array in default-constructed state has rank 0 and no data).
class Array {
 public:
  Array() = default;
  explicit Array(std::vector<std::size_t> shape);  // zero-filled
  Array(std::vector<std::size_t> shape, std::vector<double> data);

  static Array scalar(double v);
  static Array full(std::vector<std::size_t> shape, double v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool defined() const { return !shape_.empty(); }
  std::size_t extent(std::size_t axis) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const;
  bool same_shape(const Array& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Product of extents; throws ConfigError on an empty shape or a zero extent.
std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Flat binary format: magic "BVRA", u32 version (1), u32 rank, u64 extents,
// then 64-bit float payload; everything little-endian. Used by checkpoints,
// dataset images and test fixtures.
void save_array(const std::string& path, const Array& a);
Array load_array(const std::string& path);
void write_array(std::ostream& out, const Array& a);
Array read_array(std::istream& in, const std::string& what);

}  // namespace bvr
