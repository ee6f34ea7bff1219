#include "bvr/detector.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "bvr/errors.hpp"
#include "bvr/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bvr::detector {

namespace {

constexpr double kFocalAlpha = 0.25;
constexpr double kLogEps = 1e-12;
constexpr double kClsBiasInit = -4.59511985013459;
constexpr double kPosIouThresh = 0.5;
constexpr double kNegIouThresh = 0.4;

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::size_t log2_exact(std::size_t v) {
  std::size_t n = 0;
  while (v > 1) {
    v >>= 1;
    ++n;
  }
  return n;
}

Array conv_weight(std::size_t cout, std::size_t cin, Rng& rng) {
  Array w({cout, cin, 3, 3});
  const double stddev = std::sqrt(2.0 / (9.0 * static_cast<double>(cin)));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = stddev * rng.normal();
  return w;
}

Array linear_weight(std::size_t in, std::size_t out, Rng& rng, double stddev) {
  Array w({in, out});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = stddev * rng.normal();
  return w;
}

Val clamped_log(Tape& t, Val x) {
  return t.log(t.add_const(t.relu(t.add_const(x, -kLogEps)), kLogEps));
}

// Focal loss sum (α=0.25, γ=2) over probabilities with 0/1 masks; ignored
// entries carry zero in both masks.
Val focal_sum(Tape& t, Val p, Val pos_mask, Val neg_mask) {
  Val one_minus_p = t.add_const(t.scale(p, -1.0), 1.0);
  Val pos_term = t.mul(pos_mask, t.mul(t.mul(one_minus_p, one_minus_p), clamped_log(t, p)));
  Val neg_term = t.mul(neg_mask, t.mul(t.mul(p, p), clamped_log(t, one_minus_p)));
  return t.reduce_sum(
      t.add(t.scale(pos_term, -kFocalAlpha), t.scale(neg_term, -(1.0 - kFocalAlpha))));
}

Val down2(Tape& t, Val x) {
  const Array& a = t.value(x);
  std::vector<std::size_t> rows, cols;
  for (std::size_t i = 0; i < a.extent(1); i += 2) rows.push_back(i);
  for (std::size_t i = 0; i < a.extent(2); i += 2) cols.push_back(i);
  return t.gather(t.gather(x, 1, rows), 2, cols);
}

Array bin_centers(const geom::LevelSpec& spec) {
  Array pts({spec.h * spec.w, 2});
  const double s = static_cast<double>(spec.stride);
  for (std::size_t i = 0; i < spec.h; ++i) {
    for (std::size_t j = 0; j < spec.w; ++j) {
      pts[(i * spec.w + j) * 2] = (static_cast<double>(j) + 0.5) * s;
      pts[(i * spec.w + j) * 2 + 1] = (static_cast<double>(i) + 0.5) * s;
    }
  }
  return pts;
}

const relation::KeySet& key_set_for(const keypoints::SelectedKeys& keys, std::size_t kind,
                                    std::size_t level) {
  const auto& sets = keys.per_kind[kind];
  if (sets.empty()) throw ConfigError("detector: key sets missing for kind");
  if (keys.sharing == keypoints::KeySharing::shared_across_levels) return sets[0];
  if (level >= sets.size()) throw ConfigError("detector: per-level key set missing");
  return sets[level];
}

// Size-to-level rule for center-point assignment: max side below 4·stride
// goes to that level; the last level takes everything larger.
std::size_t level_for_box(const geom::Box& box, const std::vector<int>& strides) {
  const double side = std::max(box.width(), box.height());
  for (std::size_t l = 0; l + 1 < strides.size(); ++l) {
    if (side < 4.0 * static_cast<double>(strides[l + 1])) return l;
  }
  return strides.size() - 1;
}

}  // namespace

std::vector<geom::LevelSpec> DetectorConfig::levels() const {
  std::vector<geom::LevelSpec> out;
  for (int s : strides) {
    out.push_back({s, image_size / static_cast<std::size_t>(s),
                   image_size / static_cast<std::size_t>(s)});
  }
  return out;
}

void DetectorConfig::validate() const {
  if (image_size < 8 || image_channels == 0) throw ConfigError("detector: bad image extent");
  if (strides.empty()) throw ConfigError("detector: needs at least one pyramid level");
  for (std::size_t i = 0; i < strides.size(); ++i) {
    if (strides[i] <= 0 || !is_power_of_two(static_cast<std::size_t>(strides[i]))) {
      throw ConfigError("detector: strides must be powers of two");
    }
    if (i > 0 && strides[i] != 2 * strides[i - 1]) {
      throw ConfigError("detector: each stride must double the previous");
    }
  }
  if (image_size % static_cast<std::size_t>(strides.back()) != 0) {
    throw ConfigError("detector: image size must be divisible by the last stride");
  }
  if (backbone_widths.size() != log2_exact(static_cast<std::size_t>(strides[0]))) {
    throw ConfigError("detector: backbone_widths must have log2(strides[0]) entries");
  }
  for (std::size_t w : backbone_widths) {
    if (w == 0) throw ConfigError("detector: backbone widths must be positive");
  }
  if (num_classes == 0) throw ConfigError("detector: needs at least one class");
  if (query_mode == QueryMode::anchor_box) {
    if (anchor_scales.empty() || anchor_ratios.empty()) {
      throw ConfigError("detector: anchor mode needs at least one scale and ratio");
    }
    for (double s : anchor_scales) {
      if (s <= 0.0) throw ConfigError("detector: anchor scales must be positive");
    }
    for (double r : anchor_ratios) {
      if (r <= 0.0) throw ConfigError("detector: anchor ratios must be positive");
    }
  }
  relation.validate();
  if (any_bvr() && !appearance && geometry_mode == relation::GeometryMode::off) {
    throw ConfigError("detector: appearance and geometry cannot both be off while BVR is on");
  }
  if (score_thresh < 0.0 || score_thresh >= 1.0 || nms_iou <= 0.0 || nms_iou > 1.0) {
    throw ConfigError("detector: score_thresh in [0,1) and nms_iou in (0,1] required");
  }
  if (train.batch == 0 || train.threads == 0) {
    throw ConfigError("detector: batch and threads must be positive");
  }
}

std::vector<geom::Box> build_anchors(const geom::LevelSpec& level,
                                     const std::vector<double>& scales,
                                     const std::vector<double>& ratios) {
  std::vector<geom::Box> anchors;
  anchors.reserve(scales.size() * ratios.size() * level.h * level.w);
  const double s = static_cast<double>(level.stride);
  for (double scale : scales) {
    for (double ratio : ratios) {
      const double w = scale * s * std::sqrt(ratio);
      const double h = scale * s / std::sqrt(ratio);
      for (std::size_t i = 0; i < level.h; ++i) {
        for (std::size_t j = 0; j < level.w; ++j) {
          const double cx = (static_cast<double>(j) + 0.5) * s;
          const double cy = (static_cast<double>(i) + 0.5) * s;
          anchors.push_back(geom::Box::from_center_size(cx, cy, w, h));
        }
      }
    }
  }
  return anchors;
}

std::array<double, 4> encode_box(const geom::Box& gt, const geom::Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  if (aw <= 0.0 || ah <= 0.0) throw ConfigError("encode_box: degenerate anchor");
  if (gt.width() <= 0.0 || gt.height() <= 0.0) throw ConfigError("encode_box: degenerate box");
  const geom::Point2 ac = anchor.center(), gc = gt.center();
  return {(gc.x - ac.x) / aw, (gc.y - ac.y) / ah, std::log(gt.width() / aw),
          std::log(gt.height() / ah)};
}

geom::Box decode_box(const geom::Box& anchor, const std::array<double, 4>& delta) {
  const double aw = anchor.width(), ah = anchor.height();
  const geom::Point2 ac = anchor.center();
  const double cx = delta[0] * aw + ac.x;
  const double cy = delta[1] * ah + ac.y;
  const double w = std::exp(std::min(delta[2], 10.0)) * aw;
  const double h = std::exp(std::min(delta[3], 10.0)) * ah;
  return geom::Box::from_center_size(cx, cy, w, h);
}

void init_detector_params(ParamStore& store, const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t c = cfg.relation.channels;
  std::size_t prev = cfg.image_channels;
  for (std::size_t i = 0; i < cfg.backbone_widths.size(); ++i) {
    store.add("backbone.stem" + std::to_string(i) + ".w",
              conv_weight(cfg.backbone_widths[i], prev, rng));
    store.add("backbone.stem" + std::to_string(i) + ".b", Array({cfg.backbone_widths[i], 1, 1}));
    prev = cfg.backbone_widths[i];
  }
  for (std::size_t l = 0; l < cfg.strides.size(); ++l) {
    store.add("backbone.level" + std::to_string(l) + ".w",
              conv_weight(c, l == 0 ? prev : c, rng));
    store.add("backbone.level" + std::to_string(l) + ".b", Array({c, 1, 1}));
  }
  for (const char* branch : {"cls_head", "reg_head"}) {
    for (std::size_t d = 0; d < cfg.head_depth; ++d) {
      store.add(std::string(branch) + ".conv" + std::to_string(d) + ".w",
                conv_weight(c, c, rng));
      store.add(std::string(branch) + ".conv" + std::to_string(d) + ".b", Array({c, 1, 1}));
    }
  }
  const std::size_t slots = cfg.anchors_per_pos();
  for (std::size_t a = 0; a < slots; ++a) {
    store.add("cls_head.out" + std::to_string(a) + ".w",
              linear_weight(c, cfg.num_classes, rng, 0.01));
    store.add("cls_head.out" + std::to_string(a) + ".b",
              Array::full({cfg.num_classes}, kClsBiasInit));
    store.add("reg_head.out" + std::to_string(a) + ".w", linear_weight(c, 4, rng, 0.01));
    store.add("reg_head.out" + std::to_string(a) + ".b", Array({4}));
  }
  if (cfg.any_bvr()) {
    keypoints::init_point_head(store, "points", c, rng);
    if (cfg.cls_bvr) relation::init_attention_params(store, "bvr_cls", cfg.relation, rng);
    if (cfg.reg_bvr) relation::init_attention_params(store, "bvr_reg", cfg.relation, rng);
  }
}

ForwardResult detector_forward(Tape& t, Val image, ParamStore& store, const DetectorConfig& cfg,
                               const keypoints::SelectedKeys* keys_override) {
  cfg.validate();
  const Array& img = t.value(image);
  if (img.shape() != std::vector<std::size_t>{cfg.image_channels, cfg.image_size, cfg.image_size}) {
    throw ConfigError("detector_forward: image shape " + shape_str(img.shape()) +
                      " does not match config");
  }
  const auto level_specs = cfg.levels();
  const std::size_t c = cfg.relation.channels;

  Val x = t.add_const(image, -0.5);
  for (std::size_t i = 0; i < cfg.backbone_widths.size(); ++i) {
    const std::string p = "backbone.stem" + std::to_string(i);
    x = t.relu(t.add(t.conv3x3(x, t.param_from(store, p + ".w")), t.param_from(store, p + ".b")));
    x = down2(t, x);
  }
  std::vector<Val> pyramid;
  for (std::size_t l = 0; l < level_specs.size(); ++l) {
    if (l > 0) x = down2(t, pyramid.back());
    const std::string p = "backbone.level" + std::to_string(l);
    x = t.relu(t.add(t.conv3x3(x, t.param_from(store, p + ".w")), t.param_from(store, p + ".b")));
    pyramid.push_back(x);
  }

  ForwardResult out;
  if (cfg.any_bvr()) {
    auto head = keypoints::bind_point_head(t, store, "points");
    for (std::size_t l = 0; l < pyramid.size(); ++l) {
      out.point_preds.push_back(keypoints::point_head_forward(t, pyramid[l], head, level_specs[l]));
    }
    out.has_points = true;
    if (keys_override) {
      out.keys = *keys_override;
    } else {
      keypoints::KeyBudget budget{cfg.relation.key_budget, cfg.key_sharing};
      out.keys = keypoints::select_keys(t, out.point_preds, budget, cfg.subpixel);
    }
  }

  relation::AttentionParams cls_params, reg_params;
  std::optional<relation::SharedLocationMap> cls_map, reg_map;
  const bool shared_geom = cfg.geometry_mode == relation::GeometryMode::shared;
  if (cfg.cls_bvr) {
    cls_params = relation::bind_attention_params(t, store, "bvr_cls", cfg.relation);
    if (shared_geom) {
      cls_map = relation::build_shared_map(t, cls_params, cfg.relation,
                                           relation::RelationConfig::unit_length(cfg.strides[0]));
    }
  }
  if (cfg.reg_bvr) {
    reg_params = relation::bind_attention_params(t, store, "bvr_reg", cfg.relation);
    if (shared_geom) {
      reg_map = relation::build_shared_map(t, reg_params, cfg.relation,
                                           relation::RelationConfig::unit_length(cfg.strides[0]));
    }
  }

  const std::size_t slots = cfg.anchors_per_pos();
  for (std::size_t l = 0; l < level_specs.size(); ++l) {
    const geom::LevelSpec& spec = level_specs[l];
    const std::size_t hw = spec.h * spec.w;
    const double unit = relation::RelationConfig::unit_length(spec.stride);

    auto head_stack = [&](const char* branch) {
      Val f = pyramid[l];
      for (std::size_t d = 0; d < cfg.head_depth; ++d) {
        const std::string p = std::string(branch) + ".conv" + std::to_string(d);
        f = t.relu(
            t.add(t.conv3x3(f, t.param_from(store, p + ".w")), t.param_from(store, p + ".b")));
      }
      return t.transpose(t.reshape(f, {c, hw}));  // (HW, C)
    };

    Val cls_rows = head_stack("cls_head");
    if (cfg.cls_bvr) {
      const relation::KeySet& centers = key_set_for(out.keys, 0, l);
      relation::QuerySet qs{cls_rows, t.input(bin_centers(spec))};
      relation::SharedLocationMap level_map;
      if (shared_geom) level_map = relation::with_unit(*cls_map, unit);
      cls_rows = relation::bvr_attend(t, qs, centers, cls_params, cfg.relation, cfg.geometry_mode,
                                      cfg.appearance, unit, shared_geom ? &level_map : nullptr);
    }
    std::vector<Val> slot_logits;
    for (std::size_t a = 0; a < slots; ++a) {
      const std::string p = "cls_head.out" + std::to_string(a);
      slot_logits.push_back(
          t.add(t.matmul(cls_rows, t.param_from(store, p + ".w")), t.param_from(store, p + ".b")));
    }

    Val reg_base = head_stack("reg_head");
    std::vector<geom::Box> anchors;
    if (cfg.query_mode == QueryMode::anchor_box) {
      anchors = build_anchors(spec, cfg.anchor_scales, cfg.anchor_ratios);
    }
    std::vector<Val> slot_deltas;
    for (std::size_t a = 0; a < slots; ++a) {
      Val rows = reg_base;
      if (cfg.reg_bvr) {
        Array tl_pts({hw, 2}), br_pts({hw, 2});
        if (cfg.query_mode == QueryMode::anchor_box) {
          for (std::size_t i = 0; i < hw; ++i) {
            const geom::Box& anchor = anchors[a * hw + i];
            const geom::Point2 tl = geom::extract_point(anchor, geom::PointKind::top_left);
            const geom::Point2 br = geom::extract_point(anchor, geom::PointKind::bottom_right);
            tl_pts[i * 2] = tl.x;
            tl_pts[i * 2 + 1] = tl.y;
            br_pts[i * 2] = br.x;
            br_pts[i * 2 + 1] = br.y;
          }
        } else {
          tl_pts = bin_centers(spec);  // center-point mode always queries the center
          br_pts = bin_centers(spec);
        }
        relation::SharedLocationMap level_map;
        if (shared_geom) level_map = relation::with_unit(*reg_map, unit);
        const relation::SharedLocationMap* map_ptr = shared_geom ? &level_map : nullptr;
        relation::QuerySet q_tl{rows, t.input(std::move(tl_pts))};
        relation::QuerySet q_br{rows, t.input(std::move(br_pts))};
        Val tl_out = relation::bvr_attend(t, q_tl, key_set_for(out.keys, 1, l), reg_params,
                                          cfg.relation, cfg.geometry_mode, cfg.appearance, unit,
                                          map_ptr);
        Val br_out = relation::bvr_attend(t, q_br, key_set_for(out.keys, 2, l), reg_params,
                                          cfg.relation, cfg.geometry_mode, cfg.appearance, unit,
                                          map_ptr);
        // Both corner residuals added to the same base.
        rows = t.sub(t.add(tl_out, br_out), rows);
      }
      const std::string p = "reg_head.out" + std::to_string(a);
      slot_deltas.push_back(
          t.add(t.matmul(rows, t.param_from(store, p + ".w")), t.param_from(store, p + ".b")));
    }

    LevelOutput lo;
    lo.cls_logits = slots == 1 ? slot_logits[0] : t.concat(slot_logits, 0);
    lo.reg_deltas = slots == 1 ? slot_deltas[0] : t.concat(slot_deltas, 0);
    out.levels.push_back(lo);
  }
  return out;
}

namespace {

struct LevelAssignment {
  Array pos_mask;  // (A·HW, ncls)
  Array neg_mask;
  std::vector<std::size_t> pos_rows;
  std::vector<double> reg_targets;  // 4 per positive row
};

LevelAssignment assign_anchor_level(const geom::LevelSpec& spec, const DetectorConfig& cfg,
                                    const std::vector<GroundTruth>& gt) {
  const std::vector<geom::Box> anchors =
      build_anchors(spec, cfg.anchor_scales, cfg.anchor_ratios);
  LevelAssignment out;
  out.pos_mask = Array({anchors.size(), cfg.num_classes});
  out.neg_mask = Array({anchors.size(), cfg.num_classes});
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double best = 0.0;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = geom::iou(anchors[i], gt[g].box);
      if (v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best >= kPosIouThresh) {
      for (std::size_t cidx = 0; cidx < cfg.num_classes; ++cidx) {
        const bool hit = static_cast<std::size_t>(gt[best_gt].class_id) == cidx;
        out.pos_mask[i * cfg.num_classes + cidx] = hit ? 1.0 : 0.0;
        out.neg_mask[i * cfg.num_classes + cidx] = hit ? 0.0 : 1.0;
      }
      out.pos_rows.push_back(i);
      const auto d = encode_box(gt[best_gt].box, anchors[i]);
      out.reg_targets.insert(out.reg_targets.end(), d.begin(), d.end());
    } else if (best < kNegIouThresh) {
      for (std::size_t cidx = 0; cidx < cfg.num_classes; ++cidx) {
        out.neg_mask[i * cfg.num_classes + cidx] = 1.0;
      }
    }  // in the ignore band: both masks zero
  }
  return out;
}

LevelAssignment assign_center_level(const geom::LevelSpec& spec, std::size_t level_idx,
                                    const DetectorConfig& cfg,
                                    const std::vector<GroundTruth>& gt) {
  const std::size_t hw = spec.h * spec.w;
  LevelAssignment out;
  out.pos_mask = Array({hw, cfg.num_classes});
  out.neg_mask = Array::full({hw, cfg.num_classes}, 1.0);
  const double s = static_cast<double>(spec.stride);
  for (std::size_t i = 0; i < spec.h; ++i) {
    for (std::size_t j = 0; j < spec.w; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * s;
      const double cy = (static_cast<double>(i) + 0.5) * s;
      int chosen = -1;
      double chosen_area = 0.0;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const geom::Box& b = gt[g].box;
        if (level_for_box(b, cfg.strides) != level_idx) continue;
        if (cx <= b.x_tl || cx >= b.x_br || cy <= b.y_tl || cy >= b.y_br) continue;
        if (chosen < 0 || b.area() < chosen_area) {
          chosen = static_cast<int>(g);
          chosen_area = b.area();
        }
      }
      if (chosen < 0) continue;
      const std::size_t row = i * spec.w + j;
      const geom::Box& b = gt[static_cast<std::size_t>(chosen)].box;
      for (std::size_t cidx = 0; cidx < cfg.num_classes; ++cidx) {
        const bool hit = static_cast<std::size_t>(gt[static_cast<std::size_t>(chosen)].class_id) == cidx;
        out.pos_mask[row * cfg.num_classes + cidx] = hit ? 1.0 : 0.0;
        out.neg_mask[row * cfg.num_classes + cidx] = hit ? 0.0 : 1.0;
      }
      out.pos_rows.push_back(row);
      out.reg_targets.push_back(std::log((cx - b.x_tl) / s));
      out.reg_targets.push_back(std::log((cy - b.y_tl) / s));
      out.reg_targets.push_back(std::log((b.x_br - cx) / s));
      out.reg_targets.push_back(std::log((b.y_br - cy) / s));
    }
  }
  return out;
}

}  // namespace

LossBreakdown detection_loss(Tape& t, const ForwardResult& fwd,
                             const std::vector<GroundTruth>& gt, const DetectorConfig& cfg) {
  const auto level_specs = cfg.levels();
  if (fwd.levels.size() != level_specs.size()) {
    throw ConfigError("detection_loss: level count mismatch");
  }
  Val cls_sum, reg_sum;
  std::size_t total_pos = 0;
  for (std::size_t l = 0; l < level_specs.size(); ++l) {
    LevelAssignment assign = cfg.query_mode == QueryMode::anchor_box
                                 ? assign_anchor_level(level_specs[l], cfg, gt)
                                 : assign_center_level(level_specs[l], l, cfg, gt);
    Val p = t.sigmoid(fwd.levels[l].cls_logits);
    Val part = focal_sum(t, p, t.input(assign.pos_mask), t.input(assign.neg_mask));
    cls_sum = cls_sum.valid() ? t.add(cls_sum, part) : part;
    if (!assign.pos_rows.empty()) {
      Val rows = t.gather(fwd.levels[l].reg_deltas, 0, assign.pos_rows);
      Array targets({assign.pos_rows.size(), 4}, std::move(assign.reg_targets));
      Val part_reg = t.reduce_sum(t.smooth_l1(t.sub(rows, t.input(std::move(targets)))));
      reg_sum = reg_sum.valid() ? t.add(reg_sum, part_reg) : part_reg;
      total_pos += assign.pos_rows.size();
    }
  }
  LossBreakdown out;
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, total_pos));
  out.cls = t.scale(cls_sum, norm);
  out.reg = reg_sum.valid() ? t.scale(reg_sum, norm) : t.input(Array::scalar(0.0));
  if (fwd.has_points) {
    std::vector<geom::Box> boxes;
    for (const GroundTruth& g : gt) boxes.push_back(g.box);
    auto targets = keypoints::assign_targets(boxes, level_specs);
    auto pt = keypoints::point_losses(t, fwd.point_preds, targets);
    out.pt_score = pt.score_loss;
    out.pt_offset = pt.offset_loss;
  } else {
    out.pt_score = t.input(Array::scalar(0.0));
    out.pt_offset = t.input(Array::scalar(0.0));
  }
  out.total = t.add(t.add(out.cls, out.reg), t.add(out.pt_score, out.pt_offset));
  return out;
}

std::vector<Detection> postprocess(const std::vector<Array>& cls_logits,
                                   const std::vector<Array>& reg_deltas,
                                   const DetectorConfig& cfg) {
  const auto level_specs = cfg.levels();
  if (cls_logits.size() != level_specs.size() || reg_deltas.size() != level_specs.size()) {
    throw ConfigError("postprocess: level count mismatch");
  }
  struct Cand {
    Detection det;
    std::size_t seq;
  };
  std::vector<Cand> cands;
  const double img = static_cast<double>(cfg.image_size);
  std::size_t seq = 0;
  for (std::size_t l = 0; l < level_specs.size(); ++l) {
    const geom::LevelSpec& spec = level_specs[l];
    const std::size_t hw = spec.h * spec.w;
    const std::size_t slots = cfg.anchors_per_pos();
    const Array& logits = cls_logits[l];
    const Array& deltas = reg_deltas[l];
    if (logits.shape() != std::vector<std::size_t>{slots * hw, cfg.num_classes} ||
        deltas.shape() != std::vector<std::size_t>{slots * hw, 4}) {
      throw ConfigError("postprocess: bad head output shapes at level " + std::to_string(l));
    }
    std::vector<geom::Box> anchors;
    if (cfg.query_mode == QueryMode::anchor_box) {
      anchors = build_anchors(spec, cfg.anchor_scales, cfg.anchor_ratios);
    }
    const double s = static_cast<double>(spec.stride);
    for (std::size_t r = 0; r < slots * hw; ++r) {
      geom::Box box;
      if (cfg.query_mode == QueryMode::anchor_box) {
        box = decode_box(anchors[r],
                         {deltas[r * 4], deltas[r * 4 + 1], deltas[r * 4 + 2], deltas[r * 4 + 3]});
      } else {
        const std::size_t bin = r % hw;
        const double cx = (static_cast<double>(bin % spec.w) + 0.5) * s;
        const double cy = (static_cast<double>(bin / spec.w) + 0.5) * s;
        box = geom::Box{cx - std::exp(std::min(deltas[r * 4], 10.0)) * s,
                        cy - std::exp(std::min(deltas[r * 4 + 1], 10.0)) * s,
                        cx + std::exp(std::min(deltas[r * 4 + 2], 10.0)) * s,
                        cy + std::exp(std::min(deltas[r * 4 + 3], 10.0)) * s};
      }
      box.x_tl = std::clamp(box.x_tl, 0.0, img);
      box.y_tl = std::clamp(box.y_tl, 0.0, img);
      box.x_br = std::clamp(box.x_br, box.x_tl, img);
      box.y_br = std::clamp(box.y_br, box.y_tl, img);
      for (std::size_t cidx = 0; cidx < cfg.num_classes; ++cidx) {
        const double conf = 1.0 / (1.0 + std::exp(-logits[r * cfg.num_classes + cidx]));
        if (conf >= cfg.score_thresh) {
          cands.push_back({{box, static_cast<int>(cidx), conf}, seq++});
        }
      }
    }
  }
  auto order = [](const Cand& a, const Cand& b) {
    if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
    return a.seq < b.seq;
  };
  std::vector<Detection> kept;
  for (std::size_t cidx = 0; cidx < cfg.num_classes; ++cidx) {
    std::vector<Cand> cls;
    for (const Cand& c : cands) {
      if (static_cast<std::size_t>(c.det.class_id) == cidx) cls.push_back(c);
    }
    std::sort(cls.begin(), cls.end(), order);
    std::vector<Detection> survivors;
    for (const Cand& c : cls) {
      bool suppressed = false;
      for (const Detection& k : survivors) {
        if (geom::iou(c.det.box, k.box) > cfg.nms_iou) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) survivors.push_back(c.det);
    }
    kept.insert(kept.end(), survivors.begin(), survivors.end());
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
    return a.confidence > b.confidence;
  });
  if (kept.size() > cfg.max_detections) kept.resize(cfg.max_detections);
  return kept;
}

std::vector<Detection> infer(const Array& image, ParamStore& store, const DetectorConfig& cfg) {
  Tape t;
  ForwardResult fwd = detector_forward(t, t.input(image), store, cfg);
  std::vector<Array> cls, reg;
  for (const LevelOutput& lo : fwd.levels) {
    cls.push_back(t.value(lo.cls_logits));
    reg.push_back(t.value(lo.reg_deltas));
  }
  return postprocess(cls, reg, cfg);
}

double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<GroundTruth>>& gts,
                         std::size_t num_classes, double iou_thresh) {
  if (dets.size() != gts.size()) throw ConfigError("average_precision: image count mismatch");
  double ap_sum = 0.0;
  std::size_t classes_with_gt = 0;
  for (std::size_t cidx = 0; cidx < num_classes; ++cidx) {
    std::size_t ngt = 0;
    for (const auto& g : gts) {
      for (const GroundTruth& gt : g) {
        if (static_cast<std::size_t>(gt.class_id) == cidx) ++ngt;
      }
    }
    if (ngt == 0) continue;
    ++classes_with_gt;

    struct D {
      double conf;
      std::size_t img, idx;
    };
    std::vector<D> ds;
    for (std::size_t img = 0; img < dets.size(); ++img) {
      for (std::size_t i = 0; i < dets[img].size(); ++i) {
        if (static_cast<std::size_t>(dets[img][i].class_id) == cidx) {
          ds.push_back({dets[img][i].confidence, img, i});
        }
      }
    }
    std::sort(ds.begin(), ds.end(), [](const D& a, const D& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.img != b.img) return a.img < b.img;
      return a.idx < b.idx;
    });

    std::vector<std::vector<bool>> matched(gts.size());
    for (std::size_t img = 0; img < gts.size(); ++img) matched[img].assign(gts[img].size(), false);

    std::size_t tp = 0, fp = 0;
    std::vector<std::pair<double, double>> points;  // (recall, precision) at cutoffs
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Detection& det = dets[ds[i].img][ds[i].idx];
      double best = 0.0;
      int best_gt = -1;
      const auto& img_gts = gts[ds[i].img];
      for (std::size_t g = 0; g < img_gts.size(); ++g) {
        if (static_cast<std::size_t>(img_gts[g].class_id) != cidx || matched[ds[i].img][g]) continue;
        const double v = geom::iou(det.box, img_gts[g].box);
        if (v >= iou_thresh && v > best) {
          best = v;
          best_gt = static_cast<int>(g);
        }
      }
      if (best_gt >= 0) {
        matched[ds[i].img][static_cast<std::size_t>(best_gt)] = true;
        ++tp;
      } else {
        ++fp;
      }
      if (i + 1 == ds.size() || ds[i + 1].conf != ds[i].conf) {
        points.emplace_back(static_cast<double>(tp) / static_cast<double>(ngt),
                            static_cast<double>(tp) / static_cast<double>(tp + fp));
      }
    }

    // All-point interpolation over the cutoff points.
    double ap = 0.0;
    double env = 0.0, prev_recall = 0.0;
    std::vector<double> envelope(points.size());
    for (std::size_t i = points.size(); i > 0; --i) {
      env = std::max(env, points[i - 1].second);
      envelope[i - 1] = env;
    }
    for (std::size_t i = 0; i < points.size(); ++i) {
      ap += (points[i].first - prev_recall) * envelope[i];
      prev_recall = points[i].first;
    }
    ap_sum += ap;
  }
  return classes_with_gt == 0 ? 0.0 : ap_sum / static_cast<double>(classes_with_gt);
}

ApSummary evaluate_ap(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<GroundTruth>>& gts,
                      std::size_t num_classes) {
  ApSummary out;
  double sum = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double thr = 0.5 + 0.05 * k;
    const double ap = average_precision(dets, gts, num_classes, thr);
    sum += ap;
    if (k == 0) out.ap50 = ap;
    if (k == 5) out.ap75 = ap;
    if (k == 8) out.ap90 = ap;
  }
  out.mean = sum / 10.0;
  return out;
}

std::vector<GroundTruth> to_ground_truth(const std::vector<synthdata::Annotation>& objects) {
  std::vector<GroundTruth> out;
  out.reserve(objects.size());
  for (const auto& o : objects) out.push_back({o.box, o.class_id});
  return out;
}

ApSummary evaluate_dataset(ParamStore& store, const DetectorConfig& cfg,
                           const synthdata::Dataset& ds) {
  std::vector<std::vector<Detection>> dets(ds.examples.size());
  std::vector<std::vector<GroundTruth>> gts(ds.examples.size());
  const std::size_t threads = std::min<std::size_t>(cfg.train.threads, ds.examples.size());
  auto worker = [&](std::size_t w) {
    for (std::size_t i = w; i < ds.examples.size(); i += threads) {
      dets[i] = infer(ds.examples[i].image, store, cfg);
      gts[i] = to_ground_truth(ds.examples[i].objects);
    }
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& th : pool) th.join();
  }
  return evaluate_ap(dets, gts, cfg.num_classes);
}

TrainResult train(const synthdata::Dataset& train_set, const synthdata::Dataset& val_set,
                  const DetectorConfig& cfg, std::uint64_t seed,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (train_set.examples.empty()) throw ConfigError("train: empty training set");
  TrainResult result;
  init_detector_params(result.params, cfg, seed);
  std::map<std::string, Array> velocity;
  for (const auto& [name, p] : result.params.entries()) velocity.emplace(name, Array(p.shape()));

  Rng order_rng(seed ^ 0xda3e39cb94b95bdbULL);
  double lr = cfg.train.lr;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    if (std::find(cfg.train.decay_epochs.begin(), cfg.train.decay_epochs.end(), epoch) !=
        cfg.train.decay_epochs.end()) {
      lr *= cfg.train.decay_factor;
    }
    std::vector<std::size_t> order(train_set.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);

    double ep_total = 0.0, ep_cls = 0.0, ep_reg = 0.0, ep_pts = 0.0, ep_pto = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch) {
      const std::size_t n = std::min(cfg.train.batch, order.size() - start);
      struct ImageResult {
        GradMap grads;
        double total = 0, cls = 0, reg = 0, pts = 0, pto = 0;
      };
      std::vector<ImageResult> results(n);
      std::mutex failure_mutex;
      std::string failure;
      auto worker = [&](std::size_t w, std::size_t stride_w) {
        for (std::size_t i = w; i < n; i += stride_w) {
          try {
            const auto& ex = train_set.examples[order[start + i]];
            Tape t;
            ForwardResult fwd = detector_forward(t, t.input(ex.image), result.params, cfg);
            LossBreakdown loss = detection_loss(t, fwd, to_ground_truth(ex.objects), cfg);
            results[i].total = t.scalar(loss.total);
            results[i].cls = t.scalar(loss.cls);
            results[i].reg = t.scalar(loss.reg);
            results[i].pts = t.scalar(loss.pt_score);
            results[i].pto = t.scalar(loss.pt_offset);
            results[i].grads = t.backward(loss.total);
          } catch (const std::exception& e) {
            const std::lock_guard<std::mutex> lock(failure_mutex);
            if (failure.empty()) failure = e.what();
          }
        }
      };
      const std::size_t threads = std::min<std::size_t>(cfg.train.threads, n);
      if (threads <= 1) {
        worker(0, 1);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker, w, threads);
        for (auto& th : pool) th.join();
      }
      if (!failure.empty()) {
        throw NumericError("train: aborted at epoch " + std::to_string(epoch) + ": " + failure);
      }

      // Fixed, index-ordered reduction keeps results thread-count independent.
      GradMap batch_grads;
      for (std::size_t i = 0; i < n; ++i) {
        for (auto& [name, g] : results[i].grads) {
          auto it = batch_grads.find(name);
          if (it == batch_grads.end()) {
            batch_grads.emplace(name, std::move(g));
          } else {
            for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
          }
        }
        ep_total += results[i].total;
        ep_cls += results[i].cls;
        ep_reg += results[i].reg;
        ep_pts += results[i].pts;
        ep_pto += results[i].pto;
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (auto& [name, p] : result.params.entries()) {
        auto it = batch_grads.find(name);
        if (it == batch_grads.end()) continue;
        Array& v = velocity.at(name);
        const Array& g = it->second;
        for (std::size_t k = 0; k < p.size(); ++k) {
          v[k] = cfg.train.momentum * v[k] + g[k] * inv_n + cfg.train.weight_decay * p[k];
          p[k] -= lr * v[k];
        }
        if (!p.all_finite()) {
          throw NumericError("train: parameter " + name + " became non-finite");
        }
      }
      ++steps;
    }
    (void)steps;

    EpochMetrics m;
    m.epoch = epoch;
    const double inv = 1.0 / static_cast<double>(train_set.examples.size());
    m.loss_total = ep_total * inv;
    m.loss_cls = ep_cls * inv;
    m.loss_reg = ep_reg * inv;
    m.loss_pt_score = ep_pts * inv;
    m.loss_pt_offset = ep_pto * inv;
    m.lr = lr;
    if (!val_set.examples.empty()) m.ap = evaluate_dataset(result.params, cfg, val_set);
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

void save_checkpoint(const std::string& dir, const ParamStore& store,
                     const std::string& config_json, std::size_t epoch, std::uint64_t seed) {
  fs::create_directories(fs::path(dir) / "params");
  json names = json::array();
  for (const auto& [name, p] : store.entries()) {
    names.push_back(name);
    save_array((fs::path(dir) / "params" / (name + ".bvra")).string(), p);
  }
  json manifest{{"format", "bvr-checkpoint"},
                {"version", 1},
                {"epoch", epoch},
                {"seed", seed},
                {"params", names}};
  if (!config_json.empty()) {
    manifest["config"] = json::parse(config_json);
  }
  std::ofstream out((fs::path(dir) / "manifest.json").string(), std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::string& dir) {
  std::ifstream in((fs::path(dir) / "manifest.json").string());
  if (!in) throw IoError("cannot open checkpoint manifest in " + dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  ParamStore store;
  for (const json& name : manifest.at("params")) {
    const std::string n = name.get<std::string>();
    store.add(n, load_array((fs::path(dir) / "params" / (n + ".bvra")).string()));
  }
  return store;
}

}  // namespace bvr::detector
