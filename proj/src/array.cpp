#include "bvr/array.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bvr/errors.hpp"

namespace bvr {

Array::Array(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Array::Array(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_)) {
    throw ConfigError("array data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_str(shape_));
  }
}

Array Array::scalar(double v) { return Array({1}, {v}); }

Array Array::full(std::vector<std::size_t> shape, double v) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = v;
  return a;
}

std::size_t Array::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for shape " +
                      shape_str(shape_));
  }
  return shape_[axis];
}

bool Array::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw ConfigError("array shape must have at least one extent");
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw ConfigError("array extents must be positive, got shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

namespace {

constexpr char kMagic[4] = {'B', 'V', 'R', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

bool get_u64(std::istream& in, std::uint64_t& v) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

}  // namespace

void write_array(std::ostream& out, const Array& a) {
  if (!a.defined()) throw IoError("cannot serialize an undefined array");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(a.rank()));
  for (std::size_t e : a.shape()) put_u64(out, static_cast<std::uint64_t>(e));
  for (std::size_t i = 0; i < a.size(); ++i) put_f64(out, a[i]);
}

Array read_array(std::istream& in, const std::string& what) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(what + ": missing or wrong magic bytes (expected BVRA)");
  }
  std::uint32_t version = 0, rank = 0;
  if (!get_u32(in, version)) throw IoError(what + ": truncated before version field");
  if (version != kVersion) {
    throw IoError(what + ": unsupported format version " + std::to_string(version));
  }
  if (!get_u32(in, rank)) throw IoError(what + ": truncated before rank field");
  if (rank == 0 || rank > 8) throw IoError(what + ": implausible rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint64_t e = 0;
    if (!get_u64(in, e)) throw IoError(what + ": truncated in extents section");
    if (e == 0) throw IoError(what + ": zero extent in header");
    shape[i] = static_cast<std::size_t>(e);
  }
  const std::size_t n = shape_product(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    if (!get_u64(in, bits)) {
      throw IoError(what + ": truncated in data section (" + std::to_string(i) + " of " +
                    std::to_string(n) + " values present)");
    }
    std::memcpy(&data[i], &bits, 8);
  }
  return Array(std::move(shape), std::move(data));
}

void save_array(const std::string& path, const Array& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_array(out, a);
  if (!out) throw IoError("write failed for " + path);
}

Array load_array(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_array(in, path);
}

}  // namespace bvr
