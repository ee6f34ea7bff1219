#include "bvr/keypoints.hpp"

#include <algorithm>
#include <cmath>

#include "bvr/errors.hpp"

namespace bvr::keypoints {

namespace {

constexpr double kFocalAlpha = 0.25;
constexpr double kScoreLossWeight = 0.05;
constexpr double kOffsetLossWeight = 0.2;
constexpr double kLogEps = 1e-12;
// Score-branch bias prior so early score maps sit near 0.01.
constexpr double kScoreBiasInit = -4.59511985013459;

Array conv_weight(std::size_t cout, std::size_t cin, Rng& rng) {
  Array w({cout, cin, 3, 3});
  const double stddev = std::sqrt(2.0 / (9.0 * static_cast<double>(cin)));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = stddev * rng.normal();
  return w;
}

// log(max(x, eps)), composed from kernels so it stays differentiable and total.
Val clamped_log(Tape& t, Val x) {
  return t.log(t.add_const(t.relu(t.add_const(x, -kLogEps)), kLogEps));
}

}  // namespace

std::vector<std::string> point_head_param_names(const std::string& prefix) {
  std::vector<std::string> names = {prefix + ".conv1.w", prefix + ".conv1.b",
                                    prefix + ".conv2.w", prefix + ".conv2.b"};
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    names.push_back(prefix + ".branch" + std::to_string(k) + ".w");
    names.push_back(prefix + ".branch" + std::to_string(k) + ".b");
  }
  return names;
}

void init_point_head(ParamStore& store, const std::string& prefix, std::size_t channels,
                     Rng& rng) {
  if (channels == 0) throw ConfigError("point head: channels must be positive");
  store.add(prefix + ".conv1.w", conv_weight(channels, channels, rng));
  store.add(prefix + ".conv1.b", Array({channels, 1, 1}));
  store.add(prefix + ".conv2.w", conv_weight(channels, channels, rng));
  store.add(prefix + ".conv2.b", Array({channels, 1, 1}));
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    store.add(prefix + ".branch" + std::to_string(k) + ".w", conv_weight(3, channels, rng));
    Array b({3, 1, 1});
    b[0] = kScoreBiasInit;
    store.add(prefix + ".branch" + std::to_string(k) + ".b", std::move(b));
  }
}

PointHeadVals bind_point_head(Tape& t, ParamStore& store, const std::string& prefix) {
  PointHeadVals v;
  v.conv1_w = t.param_from(store, prefix + ".conv1.w");
  v.conv1_b = t.param_from(store, prefix + ".conv1.b");
  v.conv2_w = t.param_from(store, prefix + ".conv2.w");
  v.conv2_b = t.param_from(store, prefix + ".conv2.b");
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    v.branch_w[k] = t.param_from(store, prefix + ".branch" + std::to_string(k) + ".w");
    v.branch_b[k] = t.param_from(store, prefix + ".branch" + std::to_string(k) + ".b");
  }
  return v;
}

LevelPointPreds point_head_forward(Tape& t, Val level_feat, const PointHeadVals& params,
                                   const geom::LevelSpec& spec) {
  const Array& f = t.value(level_feat);
  if (f.rank() != 3 || f.extent(1) != spec.h || f.extent(2) != spec.w) {
    throw ConfigError("point_head_forward: feature shape " + shape_str(f.shape()) +
                      " does not match level spec");
  }
  LevelPointPreds out;
  out.spec = spec;
  Val x = t.relu(t.add(t.conv3x3(level_feat, params.conv1_w), params.conv1_b));
  x = t.relu(t.add(t.conv3x3(x, params.conv2_w), params.conv2_b));
  out.shared_feat = x;
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    Val branch = t.add(t.conv3x3(x, params.branch_w[k]), params.branch_b[k]);  // (3,H,W)
    out.score[k] = t.reshape(t.gather(branch, 0, {0}), {spec.h, spec.w});
    out.score[k] = t.sigmoid(out.score[k]);
    out.offset[k] = t.gather(branch, 0, {1, 2});  // (2,H,W) raw
  }
  return out;
}

std::vector<LevelPointTargets> assign_targets(const std::vector<geom::Box>& gt,
                                              const std::vector<geom::LevelSpec>& levels) {
  std::vector<LevelPointTargets> targets(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (std::size_t k = 0; k < kNumKinds; ++k) {
      targets[l].score[k] = Array({levels[l].h, levels[l].w});
    }
  }
  for (const geom::Box& box : gt) {
    if (!box.valid()) throw ConfigError("assign_targets: invalid box");
    const geom::Point2 pts[kNumKinds] = {box.center(), {box.x_tl, box.y_tl}, {box.x_br, box.y_br}};
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const double s = static_cast<double>(levels[l].stride);
      for (std::size_t k = 0; k < kNumKinds; ++k) {
        const double bx = pts[k].x / s, by = pts[k].y / s;
        const auto col = static_cast<std::size_t>(std::floor(bx));
        const auto row = static_cast<std::size_t>(std::floor(by));
        if (bx < 0.0 || by < 0.0 || col >= levels[l].w || row >= levels[l].h) {
          throw ConfigError("assign_targets: point outside level extent");
        }
        const std::size_t flat = row * levels[l].w + col;
        auto& tl = targets[l];
        if (tl.score[k][flat] == 0.0) {
          tl.score[k][flat] = 1.0;
          tl.positive_bins[k].push_back(flat);
          tl.offsets[k].push_back(bx - std::floor(bx));
          tl.offsets[k].push_back(by - std::floor(by));
        } else {
          // A later box landing in an occupied bin overwrites the offset target.
          for (std::size_t i = 0; i < tl.positive_bins[k].size(); ++i) {
            if (tl.positive_bins[k][i] == flat) {
              tl.offsets[k][2 * i] = bx - std::floor(bx);
              tl.offsets[k][2 * i + 1] = by - std::floor(by);
              break;
            }
          }
        }
      }
    }
  }
  // Deterministic ordering for the loss reduction.
  for (auto& lvl : targets) {
    for (std::size_t k = 0; k < kNumKinds; ++k) {
      std::vector<std::size_t> order(lvl.positive_bins[k].size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return lvl.positive_bins[k][a] < lvl.positive_bins[k][b];
      });
      std::vector<std::size_t> bins;
      std::vector<double> offs;
      for (std::size_t i : order) {
        bins.push_back(lvl.positive_bins[k][i]);
        offs.push_back(lvl.offsets[k][2 * i]);
        offs.push_back(lvl.offsets[k][2 * i + 1]);
      }
      lvl.positive_bins[k] = std::move(bins);
      lvl.offsets[k] = std::move(offs);
    }
  }
  return targets;
}

PointLosses point_losses(Tape& t, const std::vector<LevelPointPreds>& preds,
                         const std::vector<LevelPointTargets>& targets) {
  if (preds.size() != targets.size()) {
    throw ConfigError("point_losses: prediction/target level count mismatch");
  }
  Val score_sum, offset_sum;
  std::size_t total_bins = 0, total_pos = 0;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const std::size_t hw = preds[l].spec.h * preds[l].spec.w;
    for (std::size_t k = 0; k < kNumKinds; ++k) {
      const Array& tgt = targets[l].score[k];
      if (tgt.size() != hw) throw ConfigError("point_losses: target shape mismatch");
      Val p = preds[l].score[k];
      Val pos_mask = t.input(tgt);
      Val neg_mask = t.add_const(t.scale(pos_mask, -1.0), 1.0);
      Val one_minus_p = t.add_const(t.scale(p, -1.0), 1.0);
      Val pos_term =
          t.mul(pos_mask, t.mul(t.mul(one_minus_p, one_minus_p), clamped_log(t, p)));
      Val neg_term = t.mul(neg_mask, t.mul(t.mul(p, p), clamped_log(t, one_minus_p)));
      Val focal = t.add(t.scale(pos_term, -kFocalAlpha), t.scale(neg_term, -(1.0 - kFocalAlpha)));
      Val part = t.reduce_sum(focal);
      score_sum = score_sum.valid() ? t.add(score_sum, part) : part;
      total_bins += hw;

      const auto& bins = targets[l].positive_bins[k];
      if (!bins.empty()) {
        Val flat = t.reshape(preds[l].offset[k], {2, hw});
        Val sel = t.transpose(t.gather(flat, 1, bins));  // (n, 2)
        Array tgt_off({bins.size(), 2},
                      std::vector<double>(targets[l].offsets[k].begin(),
                                          targets[l].offsets[k].end()));
        Val diff = t.sub(sel, t.input(std::move(tgt_off)));
        Val part_off = t.reduce_sum(t.smooth_l1(diff));
        offset_sum = offset_sum.valid() ? t.add(offset_sum, part_off) : part_off;
        total_pos += bins.size();
      }
    }
  }
  PointLosses out;
  out.score_loss = t.scale(score_sum, kScoreLossWeight / static_cast<double>(total_bins));
  out.offset_loss = offset_sum.valid()
                        ? t.scale(offset_sum, kOffsetLossWeight / static_cast<double>(total_pos))
                        : t.input(Array::scalar(0.0));
  return out;
}

std::vector<Candidate> peak_candidates(const Array& score_map, const Array& pooled,
                                       std::size_t level) {
  if (!score_map.same_shape(pooled) || score_map.rank() != 2) {
    throw ConfigError("peak_candidates: shape mismatch");
  }
  const std::size_t h = score_map.extent(0), w = score_map.extent(1);
  std::vector<Candidate> out;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      if (score_map[i] == pooled[i]) out.push_back({level, r, c, score_map[i]});
    }
  }
  return out;
}

namespace {

bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.level != b.level) return a.level < b.level;
  if (a.row != b.row) return a.row < b.row;
  return a.col < b.col;
}

relation::KeySet build_key_set(Tape& t, const std::vector<LevelPointPreds>& preds,
                               std::size_t kind, const std::vector<Candidate>& chosen,
                               bool subpixel) {
  relation::KeySet ks;
  ks.count = chosen.size();
  if (chosen.empty()) return ks;

  // Gather per level (in level order), then restore the global score order.
  std::vector<Val> feat_parts, loc_parts;
  std::vector<std::size_t> grouped_order;  // positions in `chosen`, level-grouped
  for (std::size_t l = 0; l < preds.size(); ++l) {
    std::vector<std::size_t> flat_bins;
    std::vector<double> bin_coords;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      if (chosen[i].level != l) continue;
      grouped_order.push_back(i);
      flat_bins.push_back(chosen[i].row * preds[l].spec.w + chosen[i].col);
      bin_coords.push_back(static_cast<double>(chosen[i].col));
      bin_coords.push_back(static_cast<double>(chosen[i].row));
    }
    if (flat_bins.empty()) continue;
    const std::size_t n = flat_bins.size();
    const std::size_t hw = preds[l].spec.h * preds[l].spec.w;
    Val bins = t.input(Array({n, 2}, std::move(bin_coords)));
    Val off;
    if (subpixel) {
      Val flat = t.reshape(preds[l].offset[kind], {2, hw});
      off = t.sigmoid(t.transpose(t.gather(flat, 1, flat_bins)));  // (n,2) in (0,1)
    } else {
      off = t.input(Array({n, 2}));
    }
    Val coords = t.add(bins, off);
    feat_parts.push_back(t.bilinear_sample(preds[l].shared_feat, coords));
    loc_parts.push_back(t.scale(coords, static_cast<double>(preds[l].spec.stride)));
  }
  Val feats = feat_parts.size() == 1 ? feat_parts[0] : t.concat(feat_parts, 0);
  Val locs = loc_parts.size() == 1 ? loc_parts[0] : t.concat(loc_parts, 0);

  // grouped_order[j] = original index of grouped row j; invert it.
  std::vector<std::size_t> perm(chosen.size());
  for (std::size_t j = 0; j < grouped_order.size(); ++j) perm[grouped_order[j]] = j;
  bool identity = true;
  for (std::size_t i = 0; i < perm.size(); ++i) identity = identity && perm[i] == i;
  if (!identity) {
    feats = t.gather(feats, 0, perm);
    locs = t.gather(locs, 0, perm);
  }
  ks.features = feats;
  ks.locations = locs;
  for (const Candidate& c : chosen) {
    ks.scores.push_back(c.score);
    ks.kinds.push_back(static_cast<int>(kind));
    ks.levels.push_back(c.level);
  }
  return ks;
}

}  // namespace

relation::KeySet select_keys_for_kind(Tape& t, const std::vector<LevelPointPreds>& preds,
                                      std::size_t kind, std::size_t k, bool subpixel,
                                      const std::vector<std::size_t>* level_filter) {
  if (preds.empty()) throw ConfigError("select_keys: needs at least one level");
  if (k == 0) throw ConfigError("select_keys: budget must be at least 1");
  std::vector<Candidate> candidates;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    if (level_filter &&
        std::find(level_filter->begin(), level_filter->end(), l) == level_filter->end()) {
      continue;
    }
    const Val pooled_v = t.maxpool3x3(preds[l].score[kind]);
    auto part = peak_candidates(t.value(preds[l].score[kind]), t.value(pooled_v), l);
    candidates.insert(candidates.end(), part.begin(), part.end());
  }
  std::sort(candidates.begin(), candidates.end(), candidate_before);
  if (candidates.size() > k) candidates.resize(k);
  return build_key_set(t, preds, kind, candidates, subpixel);
}

SelectedKeys select_keys(Tape& t, const std::vector<LevelPointPreds>& preds,
                         const KeyBudget& budget, bool subpixel) {
  SelectedKeys out;
  out.sharing = budget.sharing;
  for (std::size_t kind = 0; kind < kNumKinds; ++kind) {
    if (budget.sharing == KeySharing::shared_across_levels) {
      out.per_kind[kind].push_back(select_keys_for_kind(t, preds, kind, budget.k, subpixel));
    } else {
      for (std::size_t l = 0; l < preds.size(); ++l) {
        std::vector<std::size_t> only{l};
        out.per_kind[kind].push_back(
            select_keys_for_kind(t, preds, kind, budget.k, subpixel, &only));
      }
    }
  }
  return out;
}

}  // namespace bvr::keypoints
