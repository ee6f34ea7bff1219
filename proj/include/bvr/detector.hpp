#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "bvr/geometry.hpp"
#include "bvr/keypoints.hpp"
#include "bvr/relation.hpp"
#include "bvr/synthdata.hpp"
#include "bvr/tape.hpp"

namespace bvr::detector {

enum class QueryMode { anchor_box, center_point };

struct TrainSettings {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 3;
  std::size_t batch = 4;
  std::vector<std::size_t> decay_epochs = {2};  // 0-based epoch index where lr drops
  double decay_factor = 0.1;
  std::size_t threads = 2;
};

struct DetectorConfig {
  std::size_t image_size = 64;
  std::size_t image_channels = 3;
  std::vector<int> strides = {4, 8, 16};               // each double the previous
  std::vector<std::size_t> backbone_widths = {8, 16};  // stem convs down to strides[0]
  std::size_t head_depth = 1;
  std::size_t num_classes = 3;
  std::vector<double> anchor_scales = {2.0, 2.5198420997897464, 3.1748021039363987};
  std::vector<double> anchor_ratios = {1.0};
  QueryMode query_mode = QueryMode::anchor_box;
  bool cls_bvr = true;
  bool reg_bvr = true;
  bool appearance = true;
  relation::GeometryMode geometry_mode = relation::GeometryMode::shared;
  bool subpixel = true;
  keypoints::KeySharing key_sharing = keypoints::KeySharing::shared_across_levels;
  relation::RelationConfig relation;
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 50;
  TrainSettings train;

  bool any_bvr() const { return cls_bvr || reg_bvr; }
  std::size_t anchors_per_pos() const {
    return query_mode == QueryMode::anchor_box ? anchor_scales.size() * anchor_ratios.size() : 1;
  }
  std::vector<geom::LevelSpec> levels() const;
  void validate() const;
};

struct Detection {
  geom::Box box;
  int class_id = 0;
  double confidence = 0.0;
};

struct GroundTruth {
  geom::Box box;
  int class_id = 0;
};

// One box per (scale, ratio) slot per bin, centered at ((j+0.5)·S, (i+0.5)·S)
// with w = scale·S·√ratio, h = scale·S/√ratio. Slot-major, then row-major.
std::vector<geom::Box> build_anchors(const geom::LevelSpec& level,
                                     const std::vector<double>& scales,
                                     const std::vector<double>& ratios);

std::array<double, 4> encode_box(const geom::Box& gt, const geom::Box& anchor);
geom::Box decode_box(const geom::Box& anchor, const std::array<double, 4>& delta);

void init_detector_params(ParamStore& store, const DetectorConfig& cfg, std::uint64_t seed);

struct LevelOutput {
  Val cls_logits;  // (A·H·W, num_classes), slot-major rows
  Val reg_deltas;  // (A·H·W, 4)
};

struct ForwardResult {
  std::vector<LevelOutput> levels;
  std::vector<keypoints::LevelPointPreds> point_preds;
  keypoints::SelectedKeys keys;
  bool has_points = false;
};

// Full forward pass for one image. keys_override substitutes the selected key
// sets (test hook for empty-key and key-machinery isolation checks).
ForwardResult detector_forward(Tape& t, Val image, ParamStore& store, const DetectorConfig& cfg,
                               const keypoints::SelectedKeys* keys_override = nullptr);

struct LossBreakdown {
  Val total, cls, reg, pt_score, pt_offset;
};

LossBreakdown detection_loss(Tape& t, const ForwardResult& fwd,
                             const std::vector<GroundTruth>& gt, const DetectorConfig& cfg);

// Decode + clip + score threshold + per-class greedy NMS, confidence-sorted.
std::vector<Detection> postprocess(const std::vector<Array>& cls_logits,
                                   const std::vector<Array>& reg_deltas,
                                   const DetectorConfig& cfg);

std::vector<Detection> infer(const Array& image, ParamStore& store, const DetectorConfig& cfg);

struct ApSummary {
  double ap50 = 0.0, ap75 = 0.0, ap90 = 0.0, mean = 0.0;
};

// AP at a single IoU threshold: greedy confidence-descending matching, PR
// points at distinct confidence cutoffs, all-point interpolation, averaged
// over classes that have ground truth.
double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<GroundTruth>>& gts,
                         std::size_t num_classes, double iou_thresh);

// AP50/AP75/AP90 and the mean over IoU 0.5:0.05:0.95.
ApSummary evaluate_ap(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<GroundTruth>>& gts,
                      std::size_t num_classes);

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_total = 0.0, loss_cls = 0.0, loss_reg = 0.0;
  double loss_pt_score = 0.0, loss_pt_offset = 0.0;
  double lr = 0.0;
  ApSummary ap;
};

struct TrainResult {
  ParamStore params;
  std::vector<EpochMetrics> log;
};

std::vector<GroundTruth> to_ground_truth(const std::vector<synthdata::Annotation>& objects);

// SGD with momentum and weight decay over shuffled per-image steps; batches
// run concurrently per image with a fixed, index-ordered gradient reduction,
// so results are bit-identical for any thread count.
TrainResult train(const synthdata::Dataset& train_set, const synthdata::Dataset& val_set,
                  const DetectorConfig& cfg, std::uint64_t seed,
                  const std::function<void(const EpochMetrics&)>& on_epoch = nullptr);

ApSummary evaluate_dataset(ParamStore& store, const DetectorConfig& cfg,
                           const synthdata::Dataset& ds);

// Checkpoint directory: params/<name>.bvra per parameter plus manifest.json
// with the config snapshot, epoch and seed.
void save_checkpoint(const std::string& dir, const ParamStore& store,
                     const std::string& config_json, std::size_t epoch, std::uint64_t seed);
ParamStore load_checkpoint(const std::string& dir);

}  // namespace bvr::detector
