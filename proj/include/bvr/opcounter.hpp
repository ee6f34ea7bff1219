#pragma once

#include <cstdint>

namespace bvr {

// Exact operation accounting for the cost model.
//
// macs counts element operations that involve a multiply or a transcendental
// evaluation, one unit each: matrix multiply and convolution count their
// multiplies, sigmoid/log/exp-family evaluations count one per element (the
// scale factor inside a sin/cos embedding entry folds into that unit), and
// bilinear sampling counts its four taps per channel. Pure additions,
// subtractions, comparisons and data movement (concat, gather, reshape,
// transpose, max pooling, pairwise offset construction) count zero: a
// multiply-accumulate requires the multiply.
//
// bytes counts every array materialized on a recording tape (leaves and op
// outputs) at 8 bytes per element. Backward passes are not instrumented.
class OpCounter {
 public:
  void add_macs(std::uint64_t n) { macs_ += n; }
  void add_bytes(std::uint64_t n) { bytes_ += n; }
  std::uint64_t macs() const { return macs_; }
  std::uint64_t bytes() const { return bytes_; }
  void reset() {
    macs_ = 0;
    bytes_ = 0;
  }

 private:
  std::uint64_t macs_ = 0;
  std::uint64_t bytes_ = 0;
};

}  // namespace bvr
