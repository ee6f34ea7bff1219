#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bvr::gradcheck {

struct ScopeReport {
  std::string scope;
  double worst = 0.0;
  double threshold = 0.0;
  std::string detail;  // worst kernel / parameter coordinate
  bool pass = false;
};

// Finite-difference suites behind `bvr gradcheck` and the acceptance run.
ScopeReport check_kernels(std::uint64_t seed);         // every kernel, ≥10 instances, ≤1e-5
ScopeReport check_relation(std::uint64_t seed);        // attention params + key locations, ≤1e-5
ScopeReport check_keypoints(std::uint64_t seed);       // point head through both losses, ≤1e-5
ScopeReport check_end2end_subset(std::uint64_t seed);  // seeded 3 coords per module, ≤1e-4

// scope: kernels | relation | keypoints | end2end-subset | all
std::vector<ScopeReport> run_scope(const std::string& scope, std::uint64_t seed);

}  // namespace bvr::gradcheck
