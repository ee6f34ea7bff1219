// Command-line driver: dataset generation, training, evaluation, the
// complexity sweep and the gradient-check suites.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bvr/complexity.hpp"
#include "bvr/detector.hpp"
#include "bvr/errors.hpp"
#include "bvr/gradcheck.hpp"
#include "bvr/run_config.hpp"
#include "bvr/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct AblationFlags {
  bool no_cls_bvr = false;
  bool no_reg_bvr = false;
  bool no_appearance = false;
  bool no_geometry = false;
  bool no_subpixel = false;
  std::string geometry_mode;  // empty = keep config
  std::string key_sharing;
  std::string query_mode;
  long long k = -1;
  long long epochs = -1;
};

void apply_overrides(bvr::runcfg::RunConfig& cfg, const AblationFlags& f) {
  auto& d = cfg.detector;
  if (f.no_cls_bvr) d.cls_bvr = false;
  if (f.no_reg_bvr) d.reg_bvr = false;
  if (f.no_appearance) d.appearance = false;
  if (f.no_geometry) d.geometry_mode = bvr::relation::GeometryMode::off;
  if (f.no_subpixel) d.subpixel = false;
  if (!f.geometry_mode.empty()) {
    if (f.geometry_mode == "shared") {
      d.geometry_mode = bvr::relation::GeometryMode::shared;
    } else if (f.geometry_mode == "direct") {
      d.geometry_mode = bvr::relation::GeometryMode::direct;
    } else {
      throw bvr::ConfigError("--geometry-mode must be shared or direct");
    }
  }
  if (!f.key_sharing.empty()) {
    if (f.key_sharing == "shared") {
      d.key_sharing = bvr::keypoints::KeySharing::shared_across_levels;
    } else if (f.key_sharing == "per-level") {
      d.key_sharing = bvr::keypoints::KeySharing::per_level;
    } else {
      throw bvr::ConfigError("--key-sharing must be shared or per-level");
    }
  }
  if (!f.query_mode.empty()) {
    if (f.query_mode == "anchor") {
      d.query_mode = bvr::detector::QueryMode::anchor_box;
    } else if (f.query_mode == "center") {
      d.query_mode = bvr::detector::QueryMode::center_point;
    } else {
      throw bvr::ConfigError("--query-mode must be anchor or center");
    }
  }
  if (f.k > 0) d.relation.key_budget = static_cast<std::size_t>(f.k);
  if (f.epochs >= 0) d.train.epochs = static_cast<std::size_t>(f.epochs);
  d.validate();
}

void prepare_out_dir(const std::string& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw bvr::IoError("output path exists and is not a directory: " + out);
  }
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw bvr::IoError("output directory " + out + " is not empty (use --force)");
  }
  fs::create_directories(out);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw bvr::IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw bvr::IoError("write failed for " + path);
}

void write_run_manifest(const std::string& out, const std::string& snapshot,
                        const std::vector<std::pair<std::string, std::string>>& artifacts) {
  json m{{"config_hash", bvr::runcfg::config_hash(snapshot)}, {"artifacts", json::object()}};
  for (const auto& [key, path] : artifacts) m["artifacts"][key] = path;
  write_text((fs::path(out) / "manifest.json").string(), m.dump(2) + "\n");
}

std::string metrics_line(const bvr::detector::EpochMetrics& m) {
  json j{{"epoch", m.epoch},
         {"loss_total", m.loss_total},
         {"loss_cls", m.loss_cls},
         {"loss_reg", m.loss_reg},
         {"loss_point_score", m.loss_pt_score},
         {"loss_point_offset", m.loss_pt_offset},
         {"lr", m.lr},
         {"ap50", m.ap.ap50},
         {"ap75", m.ap.ap75},
         {"ap90", m.ap.ap90},
         {"ap", m.ap.mean}};
  return j.dump();
}

std::string ap_csv(const bvr::detector::ApSummary& ap) {
  std::ostringstream os;
  os << "ap,ap50,ap75,ap90\n";
  os.precision(17);
  os << ap.mean << "," << ap.ap50 << "," << ap.ap75 << "," << ap.ap90 << "\n";
  return os.str();
}

int cmd_gen_data(const std::string& config_path, std::size_t count, const std::string& out,
                 bool force, long long seed_override) {
  bvr::runcfg::RunConfig cfg = bvr::runcfg::load_run_config(config_path);
  if (seed_override >= 0) {
    cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.scene.seed = cfg.seed;
  }
  prepare_out_dir(out, force);
  bvr::synthdata::Dataset ds = bvr::synthdata::generate(cfg.scene, count);
  bvr::synthdata::save_dataset(ds, out);
  const std::string snapshot = bvr::runcfg::to_json(cfg);
  write_text((fs::path(out) / "config_snapshot.json").string(), snapshot);
  std::cout << "wrote " << count << " examples to " << out << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const AblationFlags& flags,
              const std::string& data_dir, const std::string& val_dir, const std::string& out,
              bool force) {
  bvr::runcfg::RunConfig cfg = bvr::runcfg::load_run_config(config_path);
  apply_overrides(cfg, flags);

  auto report = bvr::synthdata::validate(data_dir);
  if (!report.ok) {
    std::ostringstream os;
    os << "training dataset failed validation:";
    for (const auto& p : report.problems) os << "\n  " << p;
    throw bvr::ConfigError(os.str());
  }
  bvr::synthdata::Dataset train_set = bvr::synthdata::load_dataset(data_dir);
  bvr::synthdata::Dataset val_set;
  if (!val_dir.empty()) {
    auto vreport = bvr::synthdata::validate(val_dir);
    if (!vreport.ok) throw bvr::ConfigError("validation dataset failed validation");
    val_set = bvr::synthdata::load_dataset(val_dir);
  }

  prepare_out_dir(out, force);
  const std::string snapshot = bvr::runcfg::to_json(cfg);
  write_text((fs::path(out) / "config_snapshot.json").string(), snapshot);

  std::ostringstream metrics;
  std::ostringstream curve;
  curve << "epoch,loss_total,loss_cls,loss_reg,loss_point_score,loss_point_offset,lr,ap50,ap\n";
  curve.precision(17);
  bvr::detector::TrainResult result =
      bvr::detector::train(train_set, val_set, cfg.detector, cfg.seed,
                           [&](const bvr::detector::EpochMetrics& m) {
                             metrics << metrics_line(m) << "\n";
                             curve << m.epoch << "," << m.loss_total << "," << m.loss_cls << ","
                                   << m.loss_reg << "," << m.loss_pt_score << ","
                                   << m.loss_pt_offset << "," << m.lr << "," << m.ap.ap50 << ","
                                   << m.ap.mean << "\n";
                             std::cout << metrics_line(m) << "\n";
                           });

  write_text((fs::path(out) / "metrics.jsonl").string(), metrics.str());
  write_text((fs::path(out) / "loss_curve.csv").string(), curve.str());
  bvr::detector::save_checkpoint((fs::path(out) / "checkpoint").string(), result.params, snapshot,
                                 cfg.detector.train.epochs, cfg.seed);
  const bvr::detector::ApSummary final_ap =
      result.log.empty() ? bvr::detector::ApSummary{} : result.log.back().ap;
  write_text((fs::path(out) / "ap_summary.csv").string(), ap_csv(final_ap));
  write_run_manifest(out, snapshot,
                     {{"config", "config_snapshot.json"},
                      {"metrics", "metrics.jsonl"},
                      {"loss_curve", "loss_curve.csv"},
                      {"checkpoint", "checkpoint"},
                      {"ap_summary", "ap_summary.csv"}});
  return kExitOk;
}

int cmd_eval(const std::string& config_path, const AblationFlags& flags,
             const std::string& checkpoint, const std::string& data_dir, const std::string& out,
             bool force) {
  bvr::runcfg::RunConfig cfg = bvr::runcfg::load_run_config(config_path);
  apply_overrides(cfg, flags);
  auto report = bvr::synthdata::validate(data_dir);
  if (!report.ok) throw bvr::ConfigError("dataset failed validation");
  bvr::synthdata::Dataset ds = bvr::synthdata::load_dataset(data_dir);
  bvr::ParamStore store = bvr::detector::load_checkpoint(checkpoint);
  prepare_out_dir(out, force);
  const bvr::detector::ApSummary ap = bvr::detector::evaluate_dataset(store, cfg.detector, ds);
  const std::string snapshot = bvr::runcfg::to_json(cfg);
  write_text((fs::path(out) / "config_snapshot.json").string(), snapshot);
  write_text((fs::path(out) / "ap_summary.csv").string(), ap_csv(ap));
  write_run_manifest(out, snapshot,
                     {{"config", "config_snapshot.json"}, {"ap_summary", "ap_summary.csv"}});
  std::cout << ap_csv(ap);
  return kExitOk;
}

// An empty list is a valid (empty) sweep and yields a header-only CSV.
std::vector<std::uint64_t> parse_list(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) {
      try {
        out.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw bvr::ConfigError("sweep lists must be comma-separated integers, got " + csv);
      }
    }
  }
  return out;
}

int cmd_bench_complexity(const std::string& d0s, const std::string& d1s, const std::string& gs,
                         const std::string& ks, const std::string& hs, const std::string& ws,
                         const std::string& ms, bool validate, const std::string& out_path) {
  std::ostringstream csv;
  csv << "d0,d1,G,K,H,W,M,direct_time,shared_time,direct_mem,shared_mem,ratio";
  if (validate) csv << ",validate";
  csv << "\n";
  for (std::uint64_t d0 : parse_list(d0s)) {
    for (std::uint64_t d1 : parse_list(d1s)) {
      for (std::uint64_t g : parse_list(gs)) {
        for (std::uint64_t k : parse_list(ks)) {
          for (std::uint64_t h : parse_list(hs)) {
            for (std::uint64_t w : parse_list(ws)) {
              for (std::uint64_t m : parse_list(ms)) {
                const bvr::complexity::CostQuery q{d0, d1, g, k, h, w, m};
                const auto direct = bvr::complexity::cost_direct(q);
                const auto shared = bvr::complexity::cost_shared(q);
                const double ratio =
                    shared.time.is_zero() ? 0.0 : direct.time.to_double() / shared.time.to_double();
                csv << d0 << "," << d1 << "," << g << "," << k << "," << h << "," << w << "," << m
                    << "," << direct.time.str() << "," << shared.time.str() << ","
                    << direct.memory.str() << "," << shared.memory.str() << "," << ratio;
                if (validate) {
                  if (k * h * w <= 1000000ull && d0 % 4 == 0 && m % 2 == 0 && k > 0) {
                    const auto rd = bvr::complexity::validate_against_counter(
                        q, bvr::relation::GeometryMode::direct, 1);
                    const auto rs = bvr::complexity::validate_against_counter(
                        q, bvr::relation::GeometryMode::shared, 1);
                    csv << "," << ((rd.match && rs.match) ? "match" : "mismatch");
                  } else {
                    csv << ",skipped";
                  }
                }
                csv << "\n";
              }
            }
          }
        }
      }
    }
  }
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    write_text(out_path, csv.str());
  }
  return kExitOk;
}

// Runs one forward pass and dumps the selected keys as JSON records.
int cmd_dump_keys(const std::string& config_path, const AblationFlags& flags,
                  const std::string& checkpoint, const std::string& data_dir, std::size_t index,
                  const std::string& out_path) {
  bvr::runcfg::RunConfig cfg = bvr::runcfg::load_run_config(config_path);
  apply_overrides(cfg, flags);
  if (!cfg.detector.any_bvr()) {
    throw bvr::ConfigError("dump-keys: both branch modules are off, no keys are selected");
  }
  bvr::synthdata::Dataset ds = bvr::synthdata::load_dataset(data_dir);
  if (index >= ds.examples.size()) {
    throw bvr::ConfigError("dump-keys: image index out of range");
  }
  bvr::ParamStore store;
  if (checkpoint.empty()) {
    bvr::detector::init_detector_params(store, cfg.detector, cfg.seed);
  } else {
    store = bvr::detector::load_checkpoint(checkpoint);
  }
  bvr::Tape t;
  auto fwd = bvr::detector::detector_forward(t, t.input(ds.examples[index].image), store,
                                             cfg.detector);
  static const char* kKindNames[3] = {"center", "top_left", "bottom_right"};
  json records = json::array();
  for (std::size_t kind = 0; kind < bvr::keypoints::kNumKinds; ++kind) {
    for (const auto& set : fwd.keys.per_kind[kind]) {
      if (set.count == 0) continue;
      const bvr::Array& locs = t.value(set.locations);
      for (std::size_t i = 0; i < set.count; ++i) {
        records.push_back(json{{"kind", kKindNames[kind]},
                               {"level", set.levels[i]},
                               {"score", set.scores[i]},
                               {"x", locs[i * 2]},
                               {"y", locs[i * 2 + 1]}});
      }
    }
  }
  json out{{"image_index", index},
           {"key_sharing", fwd.keys.sharing == bvr::keypoints::KeySharing::shared_across_levels
                               ? "shared"
                               : "per-level"},
           {"keys", records}};
  if (out_path.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    write_text(out_path, out.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, const std::string& fault) {
  if (!fault.empty()) bvr::testing::set_backward_fault(fault);
  const auto reports = bvr::gradcheck::run_scope(scope, seed);
  bvr::testing::clear_backward_fault();
  bool all_pass = true;
  for (const auto& r : reports) {
    std::cout << r.scope << ": worst relative error " << r.worst << " (threshold " << r.threshold
              << ") at " << (r.detail.empty() ? "-" : r.detail) << " -> "
              << (r.pass ? "pass" : "FAIL") << "\n";
    all_pass = all_pass && r.pass;
  }
  return all_pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-representation attention detector workbench"};
  app.require_subcommand(1);

  std::string config_path, data_dir, val_dir, out_dir, checkpoint;
  bool force = false;
  std::size_t count = 100;
  long long seed_override = -1;
  AblationFlags flags;

  auto add_ablation_flags = [&flags](CLI::App* cmd) {
    cmd->add_flag("--no-cls-bvr", flags.no_cls_bvr, "disable the classification-branch module");
    cmd->add_flag("--no-reg-bvr", flags.no_reg_bvr, "disable the regression-branch module");
    cmd->add_flag("--no-appearance", flags.no_appearance, "drop the appearance term");
    cmd->add_flag("--no-geometry", flags.no_geometry, "drop the geometry term");
    cmd->add_flag("--no-subpixel", flags.no_subpixel, "decode keys at integer bin corners");
    cmd->add_option("--geometry-mode", flags.geometry_mode, "shared|direct");
    cmd->add_option("--key-sharing", flags.key_sharing, "shared|per-level");
    cmd->add_option("--query-mode", flags.query_mode, "anchor|center");
    cmd->add_option("--k", flags.k, "top-k key budget");
    cmd->add_option("--epochs", flags.epochs, "override training epochs");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "run config JSON")->required();
  gen->add_option("--count", count, "number of images")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed_override, "override the config seed");
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  CLI::App* train = app.add_subcommand("train", "train a detector");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--data", data_dir, "training dataset directory")->required();
  train->add_option("--val", val_dir, "validation dataset directory");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--force", force, "overwrite a non-empty output directory");
  add_ablation_flags(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "run config JSON")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_flag("--force", force, "overwrite a non-empty output directory");
  add_ablation_flags(eval);

  std::string d0s = "512", d1s = "512", gs = "8", ks = "50", hs = "100", ws = "100", ms = "400";
  std::string csv_out;
  bool validate = false;
  CLI::App* bench = app.add_subcommand("bench-complexity", "geometry-term cost model sweep");
  bench->add_option("--d0", d0s, "comma-separated embedding dims");
  bench->add_option("--d1", d1s, "comma-separated MLP inner dims");
  bench->add_option("--heads", gs, "comma-separated head counts");
  bench->add_option("--keys", ks, "comma-separated key counts");
  bench->add_option("--height", hs, "comma-separated feature heights");
  bench->add_option("--width", ws, "comma-separated feature widths");
  bench->add_option("--map", ms, "comma-separated map sizes");
  bench->add_option("--out", csv_out, "CSV output path (stdout when omitted)");
  bench->add_flag("--validate", validate, "instrumented cross-check on tiny rows");

  std::size_t image_index = 0;
  std::string keys_out;
  CLI::App* dump = app.add_subcommand("dump-keys", "dump selected keypoints for one image");
  dump->add_option("--config", config_path, "run config JSON")->required();
  dump->add_option("--checkpoint", checkpoint, "checkpoint directory (fresh init when omitted)");
  dump->add_option("--data", data_dir, "dataset directory")->required();
  dump->add_option("--index", image_index, "image index in the dataset");
  dump->add_option("--out", keys_out, "output path (stdout when omitted)");
  add_ablation_flags(dump);

  std::string scope = "all";
  std::uint64_t gc_seed = 1;
  std::string fault;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gc->add_option("--scope", scope, "kernels|relation|keypoints|end2end-subset|all");
  gc->add_option("--seed", gc_seed, "suite seed");
  CLI::Option* fault_opt =
      gc->add_option("--inject-backward-fault", fault, "corrupt a kernel's backward rule");
  fault_opt->group("");  // test hook, hidden from help

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, count, out_dir, force, seed_override);
    if (train->parsed()) return cmd_train(config_path, flags, data_dir, val_dir, out_dir, force);
    if (eval->parsed()) return cmd_eval(config_path, flags, checkpoint, data_dir, out_dir, force);
    if (bench->parsed()) {
      return cmd_bench_complexity(d0s, d1s, gs, ks, hs, ws, ms, validate, csv_out);
    }
    if (dump->parsed()) {
      return cmd_dump_keys(config_path, flags, checkpoint, data_dir, image_index, keys_out);
    }
    if (gc->parsed()) return cmd_gradcheck(scope, gc_seed, fault);
  } catch (const bvr::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const bvr::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const bvr::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
