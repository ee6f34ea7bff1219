#pragma once

#include <cstdint>
#include <string>

#include "bvr/detector.hpp"
#include "bvr/synthdata.hpp"

namespace bvr::runcfg {

// One JSON document drives every subcommand; flags override fields and the
// post-override snapshot is written beside every run's outputs.
struct RunConfig {
  std::uint64_t seed = 7;
  synthdata::SceneSpec scene;
  detector::DetectorConfig detector;
};

// Strict parse: schema_version must be 1, unknown keys are rejected with
// their JSON path, all other fields default.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Canonical snapshot (sorted keys, 2-space indent, trailing newline).
std::string to_json(const RunConfig& cfg);

// FNV-1a 64 over the canonical snapshot, as hex.
std::string config_hash(const std::string& canonical_json);

}  // namespace bvr::runcfg
