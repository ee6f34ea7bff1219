#include "bvr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bvr/errors.hpp"
#include "bvr/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bvr::synthdata {

namespace {

constexpr double kBackground = 0.1;
constexpr double kLight = 0.9;
constexpr double kDark = 0.3;

std::string index_name(std::uint64_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(i));
  return buf;
}

double pattern_value(int class_id, std::size_t dx, std::size_t dy) {
  switch (class_id % 3) {
    case 0:
      return kLight;  // solid
    case 1:
      return (dy / 2) % 2 == 0 ? kLight : kDark;  // horizontal stripes
    default:
      return ((dx / 2) + (dy / 2)) % 2 == 0 ? kLight : kDark;  // checker
  }
}

}  // namespace

void SceneSpec::validate() const {
  if (image_size < 8 || channels == 0) throw ConfigError("scene: image too small or no channels");
  if (objects_min < 1 || objects_max < objects_min) {
    throw ConfigError("scene: objects range must satisfy 1 <= min <= max");
  }
  if (num_classes < 1) throw ConfigError("scene: need at least one class");
  if (box_min < 2 || box_max < box_min) throw ConfigError("scene: invalid box size range");
  if (box_max + 2 > image_size) {
    throw ConfigError("scene: box_max must leave a 1-pixel interior margin");
  }
  if (noise < 0.0 || noise > 1.0 || aspect_jitter < 0.0) {
    throw ConfigError("scene: noise and aspect_jitter must be sane");
  }
}

Example render_example(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(spec.seed ^ index);
  const std::size_t size = spec.image_size;

  const std::size_t count = spec.objects_min + rng.uniform_int(spec.objects_max - spec.objects_min + 1);
  std::vector<Annotation> objects;
  for (std::size_t n = 0; n < count; ++n) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const std::size_t w = spec.box_min + rng.uniform_int(spec.box_max - spec.box_min + 1);
      const double aspect = std::exp(rng.uniform(-spec.aspect_jitter, spec.aspect_jitter));
      const std::size_t h = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(static_cast<double>(w) * aspect)), spec.box_min,
          spec.box_max);
      const std::size_t x0 = 1 + rng.uniform_int(size - 1 - w);
      const std::size_t y0 = 1 + rng.uniform_int(size - 1 - h);
      geom::Box box{static_cast<double>(x0), static_cast<double>(y0),
                    static_cast<double>(x0 + w), static_cast<double>(y0 + h)};
      bool overlaps = false;
      for (const Annotation& other : objects) {
        if (geom::iou(box, other.box) > 0.3) {
          overlaps = true;
          break;
        }
      }
      if (!overlaps) {
        objects.push_back({box, static_cast<int>(rng.uniform_int(spec.num_classes))});
        break;
      }
    }
  }

  Array image({spec.channels, size, size});
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = kBackground;
  for (const Annotation& obj : objects) {
    const auto x0 = static_cast<std::size_t>(obj.box.x_tl);
    const auto y0 = static_cast<std::size_t>(obj.box.y_tl);
    const auto x1 = static_cast<std::size_t>(obj.box.x_br);
    const auto y1 = static_cast<std::size_t>(obj.box.y_br);
    for (std::size_t py = y0; py < y1; ++py) {
      for (std::size_t px = x0; px < x1; ++px) {
        const double v = pattern_value(obj.class_id, px - x0, py - y0);
        for (std::size_t c = 0; c < spec.channels; ++c) {
          image[(c * size + py) * size + px] = v;
        }
      }
    }
  }
  if (spec.noise > 0.0) {
    for (std::size_t i = 0; i < image.size(); ++i) {
      image[i] = std::clamp(image[i] + spec.noise * (rng.uniform() - 0.5), 0.0, 1.0);
    }
  }
  return Example{std::move(image), std::move(objects)};
}

Dataset generate(const SceneSpec& spec, std::size_t count) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.examples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.examples.push_back(render_example(spec, i));
  return ds;
}

namespace {

json spec_to_json(const SceneSpec& s) {
  return json{{"image_size", s.image_size},   {"channels", s.channels},
              {"objects_min", s.objects_min}, {"objects_max", s.objects_max},
              {"num_classes", s.num_classes}, {"box_min", s.box_min},
              {"box_max", s.box_max},         {"aspect_jitter", s.aspect_jitter},
              {"noise", s.noise},             {"seed", s.seed}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.image_size = j.at("image_size").get<std::size_t>();
  s.channels = j.at("channels").get<std::size_t>();
  s.objects_min = j.at("objects_min").get<std::size_t>();
  s.objects_max = j.at("objects_max").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.box_min = j.at("box_min").get<std::size_t>();
  s.box_max = j.at("box_max").get<std::size_t>();
  s.aspect_jitter = j.at("aspect_jitter").get<double>();
  s.noise = j.at("noise").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "annotations");
  json manifest{{"format", "bvr-dataset"},
                {"version", 1},
                {"count", ds.examples.size()},
                {"seed", ds.spec.seed},
                {"spec", spec_to_json(ds.spec)}};
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const std::string stem = index_name(i);
    save_array((fs::path(dir) / "images" / (stem + ".bvra")).string(), ds.examples[i].image);
    json ann = json::array();
    for (const Annotation& a : ds.examples[i].objects) {
      ann.push_back(json{{"box", {a.box.x_tl, a.box.y_tl, a.box.x_br, a.box.y_br}},
                         {"class_id", a.class_id}});
    }
    write_text((fs::path(dir) / "annotations" / (stem + ".json")).string(),
               json{{"objects", ann}}.dump(2) + "\n");
  }
}

Dataset load_dataset(const std::string& dir) {
  const json manifest = read_json((fs::path(dir) / "manifest.json").string());
  Dataset ds;
  ds.spec = spec_from_json(manifest.at("spec"));
  const auto count = manifest.at("count").get<std::size_t>();
  ds.examples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string stem = index_name(i);
    Example ex;
    ex.image = load_array((fs::path(dir) / "images" / (stem + ".bvra")).string());
    const json ann = read_json((fs::path(dir) / "annotations" / (stem + ".json")).string());
    for (const json& obj : ann.at("objects")) {
      const auto& b = obj.at("box");
      ex.objects.push_back(
          {geom::Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                     b.at(3).get<double>()},
           obj.at("class_id").get<int>()});
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

ValidationReport validate(const std::string& dir) {
  ValidationReport report;
  auto note = [&report](const std::string& msg) {
    report.ok = false;
    report.problems.push_back(msg);
  };
  json manifest;
  try {
    manifest = read_json((fs::path(dir) / "manifest.json").string());
  } catch (const IoError& e) {
    note(e.what());
    return report;
  }
  SceneSpec spec;
  std::size_t count = 0;
  try {
    spec = spec_from_json(manifest.at("spec"));
    spec.validate();
    count = manifest.at("count").get<std::size_t>();
  } catch (const std::exception& e) {
    note(std::string("manifest: ") + e.what());
    return report;
  }
  report.class_counts.assign(spec.num_classes, 0);
  const double size = static_cast<double>(spec.image_size);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string stem = index_name(i);
    try {
      Array image = load_array((fs::path(dir) / "images" / (stem + ".bvra")).string());
      if (image.shape() !=
          std::vector<std::size_t>{spec.channels, spec.image_size, spec.image_size}) {
        note("image " + std::to_string(i) + ": unexpected shape " + shape_str(image.shape()));
      }
      bool in_range = true;
      for (std::size_t p = 0; p < image.size(); ++p) {
        if (!std::isfinite(image[p]) || image[p] < 0.0 || image[p] > 1.0) in_range = false;
      }
      if (!in_range) note("image " + std::to_string(i) + ": pixel out of [0,1] or non-finite");
    } catch (const IoError& e) {
      note(std::string(e.what()));
    }
    try {
      const json ann = read_json((fs::path(dir) / "annotations" / (stem + ".json")).string());
      for (const json& obj : ann.at("objects")) {
        const auto& b = obj.at("box");
        const geom::Box box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                            b.at(3).get<double>()};
        const int cls = obj.at("class_id").get<int>();
        if (!box.valid() || box.x_tl >= box.x_br || box.y_tl >= box.y_br) {
          note("image " + std::to_string(i) + ": degenerate or misordered box corners");
        } else if (box.x_tl <= 0.0 || box.y_tl <= 0.0 || box.x_br >= size || box.y_br >= size) {
          note("image " + std::to_string(i) + ": box not strictly inside the image");
        }
        if (cls < 0 || static_cast<std::size_t>(cls) >= spec.num_classes) {
          note("image " + std::to_string(i) + ": class id out of range");
        } else {
          report.class_counts[static_cast<std::size_t>(cls)]++;
        }
      }
    } catch (const std::exception& e) {
      note("image " + std::to_string(i) + ": " + e.what());
    }
  }
  return report;
}

}  // namespace bvr::synthdata
