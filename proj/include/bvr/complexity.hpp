#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bvr/relation.hpp"

namespace bvr::complexity {

// Minimal arbitrary-precision unsigned integer, enough for the cost formulas
// on any sweep the CLI can express.
class BigUint {
 public:
  BigUint() = default;
  BigUint(std::uint64_t v);  // NOLINT: implicit by design

  BigUint operator+(const BigUint& o) const;
  BigUint operator*(const BigUint& o) const;
  bool operator==(const BigUint& o) const { return limbs_ == o.limbs_; }
  bool operator<(const BigUint& o) const;
  bool operator<=(const BigUint& o) const { return *this < o || *this == o; }

  bool is_zero() const { return limbs_.empty(); }
  std::string str() const;   // decimal
  double to_double() const;  // may lose precision, used for ratios only
  std::uint64_t to_u64() const;  // throws if it does not fit

 private:
  std::vector<std::uint32_t> limbs_;  // base 2^32, little-endian, normalized
};

struct CostQuery {
  std::uint64_t d0 = 512;
  std::uint64_t d1 = 512;
  std::uint64_t heads = 8;     // G
  std::uint64_t keys = 50;     // K
  std::uint64_t h = 100;
  std::uint64_t w = 100;
  std::uint64_t map_size = 400;  // M

  void validate() const;
};

struct Cost {
  BigUint time;    // multiply-accumulates
  BigUint memory;  // array elements
};

// time = (d0 + d0·d1 + d1·G)·K·H·W, memory = (2 + d0 + d1 + G)·K·H·W
Cost cost_direct(const CostQuery& q);
// time = (d0 + d0·d1 + d1·G)·M² + G·K·H·W, memory = (2 + d0 + d1 + G)·M² + G·K·H·W
Cost cost_shared(const CostQuery& q);

// Runs the real geometry-term pipeline under an OpCounter and reconciles the
// counted MACs with the analytical formula. The itemization documents the
// bookkeeping constants: the shared path's bilinear sampling costs 4 taps per
// channel per pair against the formula's single G·K·H·W unit, plus 2·K·H·W
// for the coordinate scaling; the direct path needs no constants at all.
struct ValidationReport {
  bool match = false;
  std::uint64_t counted_macs = 0;
  std::uint64_t expected_macs = 0;   // analytic formula + documented constants
  std::uint64_t counted_bytes = 0;
  std::uint64_t expected_bytes = 0;  // documented allocation itemization
  BigUint analytic_time;             // the closed-form model value
  std::string itemization;
};

ValidationReport validate_against_counter(const CostQuery& q, relation::GeometryMode mode,
                                          std::uint64_t seed);

}  // namespace bvr::complexity
