#pragma once

#include <array>
#include <string>
#include <vector>

#include "bvr/geometry.hpp"
#include "bvr/relation.hpp"
#include "bvr/rng.hpp"
#include "bvr/tape.hpp"

namespace bvr::keypoints {

// Auxiliary point kinds, indexed to match geom::PointKind.
constexpr std::size_t kNumKinds = 3;

// Two shared 3×3 convs (C→C, ReLU) followed by one 3×3 conv per kind emitting
// 3 channels: a score (through sigmoid) and raw Δx, Δy offsets. Offsets stay
// unconstrained here; decoding applies a sigmoid so key locations land inside
// their bin.
struct PointHeadVals {
  Val conv1_w, conv1_b, conv2_w, conv2_b;
  std::array<Val, kNumKinds> branch_w, branch_b;
};

void init_point_head(ParamStore& store, const std::string& prefix, std::size_t channels,
                     Rng& rng);
PointHeadVals bind_point_head(Tape& t, ParamStore& store, const std::string& prefix);
std::vector<std::string> point_head_param_names(const std::string& prefix);

struct LevelPointPreds {
  Val shared_feat;                          // (C, H, W)
  std::array<Val, kNumKinds> score;         // (H, W), in (0,1)
  std::array<Val, kNumKinds> offset;        // (2, H, W), raw
  geom::LevelSpec spec;
};

LevelPointPreds point_head_forward(Tape& t, Val level_feat, const PointHeadVals& params,
                                   const geom::LevelSpec& spec);

struct LevelPointTargets {
  std::array<Array, kNumKinds> score;                       // (H, W) binary
  std::array<std::vector<std::size_t>, kNumKinds> positive_bins;  // flat row-major indices
  std::array<std::vector<double>, kNumKinds> offsets;       // 2 per positive bin: Δx, Δy
};

// Every ground-truth center/corner is assigned to every level: bin
// (⌊y/S⌋, ⌊x/S⌋) gets score 1 and offset targets the fractional parts.
std::vector<LevelPointTargets> assign_targets(const std::vector<geom::Box>& gt,
                                              const std::vector<geom::LevelSpec>& levels);

struct PointLosses {
  Val score_loss;   // 0.05 · mean focal loss (α=0.25, γ=2) over all bins and kinds
  Val offset_loss;  // 0.2 · mean smooth L1 over positive bins (0 when none)
};

PointLosses point_losses(Tape& t, const std::vector<LevelPointPreds>& preds,
                         const std::vector<LevelPointTargets>& targets);

enum class KeySharing { shared_across_levels, per_level };

struct KeyBudget {
  std::size_t k = 50;
  KeySharing sharing = KeySharing::shared_across_levels;
};

// Peak-test survivor before top-k truncation.
struct Candidate {
  std::size_t level = 0, row = 0, col = 0;
  double score = 0.0;
};

// Bins whose score equals their 3×3 max-pooled value. Ties order by
// (level, row, col) ascending under equal scores.
std::vector<Candidate> peak_candidates(const Array& score_map, const Array& pooled,
                                       std::size_t level);

struct SelectedKeys {
  // One KeySet per kind in shared mode; one per (kind, level) otherwise.
  std::array<std::vector<relation::KeySet>, kNumKinds> per_kind;
  KeySharing sharing = KeySharing::shared_across_levels;
};

// Peak test on every level's score map, then top-k by score (pooled across
// levels or per level). Key locations decode as (bin + sigmoid(offset))·stride
// — or the bare bin lattice when subpixel is off — and key features are
// bilinear samples of the shared-conv feature at the sub-pixel bin coordinate.
SelectedKeys select_keys(Tape& t, const std::vector<LevelPointPreds>& preds,
                         const KeyBudget& budget, bool subpixel);

relation::KeySet select_keys_for_kind(Tape& t, const std::vector<LevelPointPreds>& preds,
                                      std::size_t kind, std::size_t k, bool subpixel,
                                      const std::vector<std::size_t>* level_filter = nullptr);

}  // namespace bvr::keypoints
