// Regenerates the pinned regression fixtures under tests/fixtures/. Run from
// the repository root after intentional behavior changes:
//   ./build/tools/gen_fixtures tests/fixtures

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "bvr/detector.hpp"
#include "bvr/keypoints.hpp"
#include "bvr/rng.hpp"
#include "bvr/synthdata.hpp"
#include "bvr/tape.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bvr::detector::DetectorConfig fixture_config(bool with_bvr) {
  bvr::detector::DetectorConfig cfg;
  cfg.image_size = 32;
  cfg.strides = {4, 8};
  cfg.backbone_widths = {4, 8};
  cfg.head_depth = 1;
  cfg.num_classes = 2;
  cfg.anchor_scales = {2.0, 3.0};
  cfg.anchor_ratios = {1.0};
  cfg.relation.channels = 16;
  cfg.relation.heads = 2;
  cfg.relation.embed_dim = 8;
  cfg.relation.mlp_dim = 8;
  cfg.relation.key_budget = 4;
  cfg.relation.map_size = 16;
  cfg.cls_bvr = with_bvr;
  cfg.reg_bvr = with_bvr;
  cfg.train.epochs = 1;
  cfg.train.batch = 2;
  cfg.train.threads = 1;
  cfg.train.decay_epochs = {};
  return cfg;
}

bvr::synthdata::SceneSpec fixture_scene() {
  bvr::synthdata::SceneSpec scene;
  scene.image_size = 32;
  scene.box_min = 6;
  scene.box_max = 16;
  scene.objects_min = 1;
  scene.objects_max = 2;
  scene.num_classes = 2;
  scene.seed = 11;
  return scene;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string out = argc > 1 ? argv[1] : "tests/fixtures";
  fs::create_directories(out);

  // Point head forward on fixed random weights and input.
  {
    bvr::Rng rng(404);
    bvr::ParamStore store;
    bvr::keypoints::init_point_head(store, "points", 4, rng);
    bvr::Array feat({4, 3, 3});
    for (std::size_t i = 0; i < feat.size(); ++i) feat[i] = rng.uniform(-1.0, 1.0);
    bvr::save_array((fs::path(out) / "point_head_input.bvra").string(), feat);
    for (const auto& [name, p] : store.entries()) {
      std::string fname = name;
      for (char& ch : fname) {
        if (ch == '.') ch = '_';
      }
      bvr::save_array((fs::path(out) / ("point_head_" + fname + ".bvra")).string(), p);
    }
    bvr::Tape t;
    auto head = bvr::keypoints::bind_point_head(t, store, "points");
    auto preds = bvr::keypoints::point_head_forward(t, t.input(feat), head, {4, 3, 3});
    for (std::size_t k = 0; k < bvr::keypoints::kNumKinds; ++k) {
      bvr::save_array((fs::path(out) / ("point_head_score" + std::to_string(k) + ".bvra")).string(),
                      t.value(preds.score[k]));
      bvr::save_array(
          (fs::path(out) / ("point_head_offset" + std::to_string(k) + ".bvra")).string(),
          t.value(preds.offset[k]));
    }
  }

  // Vanilla (all modules off) detector forward on a fixed scene.
  {
    auto cfg = fixture_config(false);
    auto scene = fixture_scene();
    bvr::synthdata::Example ex = bvr::synthdata::render_example(scene, 0);
    bvr::save_array((fs::path(out) / "detector_input.bvra").string(), ex.image);
    bvr::ParamStore store;
    bvr::detector::init_detector_params(store, cfg, 17);
    bvr::Tape t;
    auto fwd = bvr::detector::detector_forward(t, t.input(ex.image), store, cfg);
    for (std::size_t l = 0; l < fwd.levels.size(); ++l) {
      bvr::save_array((fs::path(out) / ("detector_cls" + std::to_string(l) + ".bvra")).string(),
                      t.value(fwd.levels[l].cls_logits));
      bvr::save_array((fs::path(out) / ("detector_reg" + std::to_string(l) + ".bvra")).string(),
                      t.value(fwd.levels[l].reg_deltas));
    }
  }

  // Loss after one full-module training step on a fixed seed.
  {
    auto cfg = fixture_config(true);
    auto scene = fixture_scene();
    bvr::synthdata::Dataset train_ds = bvr::synthdata::generate(scene, 2);
    bvr::synthdata::Dataset empty_val;
    auto result = bvr::detector::train(train_ds, empty_val, cfg, 17);
    json j{{"loss_total_after_one_epoch", result.log.at(0).loss_total},
           {"loss_cls", result.log.at(0).loss_cls},
           {"loss_reg", result.log.at(0).loss_reg},
           {"loss_point_score", result.log.at(0).loss_pt_score},
           {"loss_point_offset", result.log.at(0).loss_pt_offset}};
    std::ofstream f((fs::path(out) / "train_step.json").string());
    f << j.dump(2) << "\n";
  }

  std::cout << "fixtures written to " << out << "\n";
  return 0;
}
