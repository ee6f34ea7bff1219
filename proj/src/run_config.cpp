#include "bvr/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bvr/errors.hpp"

using nlohmann::json;

namespace bvr::runcfg {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& path) {
  if (!j.is_object()) throw ConfigError("config: expected an object at " + path);
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("config: unknown key " + path + "." + key);
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: bad value for ") + key + ": " + e.what());
    }
  }
}

relation::GeometryMode parse_geometry_mode(const std::string& s) {
  if (s == "shared") return relation::GeometryMode::shared;
  if (s == "direct") return relation::GeometryMode::direct;
  if (s == "off") return relation::GeometryMode::off;
  throw ConfigError("config: geometry_mode must be shared, direct or off, got " + s);
}

std::string geometry_mode_str(relation::GeometryMode m) {
  switch (m) {
    case relation::GeometryMode::shared:
      return "shared";
    case relation::GeometryMode::direct:
      return "direct";
    default:
      return "off";
  }
}

detector::QueryMode parse_query_mode(const std::string& s) {
  if (s == "anchor") return detector::QueryMode::anchor_box;
  if (s == "center") return detector::QueryMode::center_point;
  throw ConfigError("config: query_mode must be anchor or center, got " + s);
}

keypoints::KeySharing parse_key_sharing(const std::string& s) {
  if (s == "shared") return keypoints::KeySharing::shared_across_levels;
  if (s == "per-level") return keypoints::KeySharing::per_level;
  throw ConfigError("config: key_sharing must be shared or per-level, got " + s);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  reject_unknown(j, {"schema_version", "seed", "scene", "detector"}, "$");
  if (!j.contains("schema_version")) throw ConfigError("config: schema_version is required");
  if (j.at("schema_version").get<int>() != 1) {
    throw ConfigError("config: unsupported schema_version (expected 1)");
  }
  RunConfig cfg;
  read(j, "seed", cfg.seed);

  if (j.contains("scene")) {
    const json& s = j.at("scene");
    reject_unknown(s,
                   {"image_size", "channels", "objects_min", "objects_max", "num_classes",
                    "box_min", "box_max", "aspect_jitter", "noise"},
                   "$.scene");
    read(s, "image_size", cfg.scene.image_size);
    read(s, "channels", cfg.scene.channels);
    read(s, "objects_min", cfg.scene.objects_min);
    read(s, "objects_max", cfg.scene.objects_max);
    read(s, "num_classes", cfg.scene.num_classes);
    read(s, "box_min", cfg.scene.box_min);
    read(s, "box_max", cfg.scene.box_max);
    read(s, "aspect_jitter", cfg.scene.aspect_jitter);
    read(s, "noise", cfg.scene.noise);
  }
  cfg.scene.seed = cfg.seed;

  if (j.contains("detector")) {
    const json& d = j.at("detector");
    reject_unknown(d,
                   {"strides", "backbone_widths", "head_depth", "num_classes", "anchor_scales",
                    "anchor_ratios", "query_mode", "cls_bvr", "reg_bvr", "appearance",
                    "geometry_mode", "subpixel", "key_sharing", "relation", "score_thresh",
                    "nms_iou", "max_detections", "train"},
                   "$.detector");
    auto& dc = cfg.detector;
    read(d, "strides", dc.strides);
    read(d, "backbone_widths", dc.backbone_widths);
    read(d, "head_depth", dc.head_depth);
    read(d, "num_classes", dc.num_classes);
    read(d, "anchor_scales", dc.anchor_scales);
    read(d, "anchor_ratios", dc.anchor_ratios);
    if (d.contains("query_mode")) dc.query_mode = parse_query_mode(d.at("query_mode"));
    read(d, "cls_bvr", dc.cls_bvr);
    read(d, "reg_bvr", dc.reg_bvr);
    read(d, "appearance", dc.appearance);
    if (d.contains("geometry_mode")) dc.geometry_mode = parse_geometry_mode(d.at("geometry_mode"));
    read(d, "subpixel", dc.subpixel);
    if (d.contains("key_sharing")) dc.key_sharing = parse_key_sharing(d.at("key_sharing"));
    read(d, "score_thresh", dc.score_thresh);
    read(d, "nms_iou", dc.nms_iou);
    read(d, "max_detections", dc.max_detections);
    if (d.contains("relation")) {
      const json& r = d.at("relation");
      reject_unknown(
          r, {"channels", "heads", "embed_dim", "mlp_dim", "key_budget", "map_size"},
          "$.detector.relation");
      read(r, "channels", dc.relation.channels);
      read(r, "heads", dc.relation.heads);
      read(r, "embed_dim", dc.relation.embed_dim);
      read(r, "mlp_dim", dc.relation.mlp_dim);
      read(r, "key_budget", dc.relation.key_budget);
      read(r, "map_size", dc.relation.map_size);
    }
    if (d.contains("train")) {
      const json& tr = d.at("train");
      reject_unknown(tr,
                     {"lr", "momentum", "weight_decay", "epochs", "batch", "decay_epochs",
                      "decay_factor", "threads"},
                     "$.detector.train");
      read(tr, "lr", dc.train.lr);
      read(tr, "momentum", dc.train.momentum);
      read(tr, "weight_decay", dc.train.weight_decay);
      read(tr, "epochs", dc.train.epochs);
      read(tr, "batch", dc.train.batch);
      read(tr, "decay_epochs", dc.train.decay_epochs);
      read(tr, "decay_factor", dc.train.decay_factor);
      read(tr, "threads", dc.train.threads);
    }
  }
  if (cfg.detector.image_size != cfg.scene.image_size ||
      cfg.detector.image_channels != cfg.scene.channels) {
    cfg.detector.image_size = cfg.scene.image_size;
    cfg.detector.image_channels = cfg.scene.channels;
  }
  cfg.scene.validate();
  cfg.detector.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string to_json(const RunConfig& cfg) {
  const auto& s = cfg.scene;
  const auto& d = cfg.detector;
  json j{
      {"schema_version", 1},
      {"seed", cfg.seed},
      {"scene",
       {{"image_size", s.image_size},
        {"channels", s.channels},
        {"objects_min", s.objects_min},
        {"objects_max", s.objects_max},
        {"num_classes", s.num_classes},
        {"box_min", s.box_min},
        {"box_max", s.box_max},
        {"aspect_jitter", s.aspect_jitter},
        {"noise", s.noise}}},
      {"detector",
       {{"strides", d.strides},
        {"backbone_widths", d.backbone_widths},
        {"head_depth", d.head_depth},
        {"num_classes", d.num_classes},
        {"anchor_scales", d.anchor_scales},
        {"anchor_ratios", d.anchor_ratios},
        {"query_mode", d.query_mode == detector::QueryMode::anchor_box ? "anchor" : "center"},
        {"cls_bvr", d.cls_bvr},
        {"reg_bvr", d.reg_bvr},
        {"appearance", d.appearance},
        {"geometry_mode", geometry_mode_str(d.geometry_mode)},
        {"subpixel", d.subpixel},
        {"key_sharing",
         d.key_sharing == keypoints::KeySharing::shared_across_levels ? "shared" : "per-level"},
        {"relation",
         {{"channels", d.relation.channels},
          {"heads", d.relation.heads},
          {"embed_dim", d.relation.embed_dim},
          {"mlp_dim", d.relation.mlp_dim},
          {"key_budget", d.relation.key_budget},
          {"map_size", d.relation.map_size}}},
        {"score_thresh", d.score_thresh},
        {"nms_iou", d.nms_iou},
        {"max_detections", d.max_detections},
        {"train",
         {{"lr", d.train.lr},
          {"momentum", d.train.momentum},
          {"weight_decay", d.train.weight_decay},
          {"epochs", d.train.epochs},
          {"batch", d.train.batch},
          {"decay_epochs", d.train.decay_epochs},
          {"decay_factor", d.train.decay_factor},
          {"threads", d.train.threads}}}}}};
  return j.dump(2) + "\n";
}

std::string config_hash(const std::string& canonical_json) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_json) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace bvr::runcfg
