// Acceptance suite. Each criterion runs as one test case and prints a single
// [PASS]/[FAIL] line; the toy end-to-end criterion also writes its AP table
// under ./acceptance_out/.
//
// Criterion 5 carries a known-red sub-check, kept faithful rather than
// loosened: at d0=d1=512, G=8, K=50, M=400 the analytic formulas give a
// shared/direct ratio of 3.12 at H·W = 10⁴; the ratio first reaches 10 at
// H·W ≈ 3.2·10⁴. The suite asserts the stated 10× bound at the stated
// H·W = 10⁴ boundary and reports the measured crossover alongside.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "bvr/complexity.hpp"
#include "bvr/detector.hpp"
#include "bvr/gradcheck.hpp"
#include "bvr/keypoints.hpp"
#include "bvr/relation.hpp"
#include "bvr/synthdata.hpp"
#include "bvr/tape.hpp"

using namespace bvr;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kPublishedSeed = 1202;  // fixed seed for the toy experiments
constexpr std::size_t kTrainImages = 2000;
constexpr std::size_t kValImages = 500;
constexpr std::size_t kMainEpochs = 3;      // baseline and full module
constexpr std::size_t kAblationEpochs = 1;  // ablation rows only need to complete

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& text) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, text.c_str());
  std::fflush(stdout);
}

Array rand_array(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

double max_abs_diff(const Array& a, const Array& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Independent per-pair double-loop reference of the whole attention module.
Array naive_attend(const Array& fq, const Array& qpts, const Array& fk, const Array& kpts,
                   const ParamStore& store, const relation::RelationConfig& cfg, double unit,
                   bool geometry, bool appearance) {
  const std::size_t nq = fq.extent(0), nk = fk.extent(0);
  const std::size_t c = cfg.channels, hd = cfg.head_dim();
  Array out = fq;
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    const Array& wq = store.at("bvr.wq" + std::to_string(g));
    const Array& wk = store.at("bvr.wk" + std::to_string(g));
    const Array& wv = store.at("bvr.wv" + std::to_string(g));
    const Array& w1 = store.at("bvr.mlp_w1");
    const Array& w2 = store.at("bvr.mlp_w2");
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> logits(nk, 0.0);
      for (std::size_t j = 0; j < nk; ++j) {
        double sa = 0.0;
        if (appearance) {
          for (std::size_t d = 0; d < hd; ++d) {
            double qp = 0.0, kp = 0.0;
            for (std::size_t e = 0; e < c; ++e) {
              qp += fq[i * c + e] * wq[e * hd + d];
              kp += fk[j * c + e] * wk[e * hd + d];
            }
            sa += qp * kp;
          }
          sa /= std::sqrt(static_cast<double>(hd));
        }
        double sg = 0.0;
        if (geometry) {
          const double dx = (kpts[j * 2] - qpts[i * 2]) / unit;
          const double dy = (kpts[j * 2 + 1] - qpts[i * 2 + 1]) / unit;
          std::vector<double> emb(cfg.embed_dim);
          const std::size_t half = cfg.embed_dim / 2, pairs = cfg.embed_dim / 4;
          for (std::size_t axis = 0; axis < 2; ++axis) {
            const double v = axis == 0 ? dx : dy;
            for (std::size_t p = 0; p < pairs; ++p) {
              const double angle =
                  v / std::pow(1000.0, 4.0 * static_cast<double>(p) /
                                           static_cast<double>(cfg.embed_dim));
              emb[axis * half + 2 * p] = std::sin(angle);
              emb[axis * half + 2 * p + 1] = std::cos(angle);
            }
          }
          std::vector<double> hidden(cfg.mlp_dim, 0.0);
          for (std::size_t h = 0; h < cfg.mlp_dim; ++h) {
            for (std::size_t e = 0; e < cfg.embed_dim; ++e) {
              hidden[h] += emb[e] * w1[e * cfg.mlp_dim + h];
            }
            hidden[h] = std::max(hidden[h], 0.0);
          }
          for (std::size_t h = 0; h < cfg.mlp_dim; ++h) sg += hidden[h] * w2[h * cfg.heads + g];
        }
        logits[j] = sa + sg;
      }
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double denom = 0.0;
      std::vector<double> weights(nk);
      for (std::size_t j = 0; j < nk; ++j) {
        weights[j] = std::exp(logits[j] - mx);
        denom += weights[j];
      }
      for (std::size_t j = 0; j < nk; ++j) weights[j] /= denom;
      for (std::size_t j = 0; j < nk; ++j) {
        for (std::size_t d = 0; d < hd; ++d) {
          double value = 0.0;
          for (std::size_t e = 0; e < c; ++e) value += fk[j * c + e] * wv[e * hd + d];
          out[i * c + g * hd + d] += weights[j] * value;
        }
      }
    }
  }
  return out;
}

struct AblationRow {
  std::string name;
  detector::ApSummary ap;
  double seconds = 0.0;
};

detector::DetectorConfig toy_config() {
  detector::DetectorConfig cfg;  // library defaults are the toy defaults
  cfg.train.epochs = kMainEpochs;
  cfg.train.lr = 0.02;
  cfg.train.batch = 4;
  cfg.train.threads = 2;
  cfg.train.decay_epochs = {kMainEpochs - 1};
  return cfg;
}

}  // namespace

TEST_CASE("criterion 1: attention matches the naive pairwise reference") {
  const auto t0 = Clock::now();
  Rng rng(kPublishedSeed);
  double worst = 0.0;
  for (int instance = 0; instance < 100; ++instance) {
    relation::RelationConfig cfg;
    const std::size_t heads[] = {1, 2, 4};
    cfg.heads = heads[rng.uniform_int(3)];
    cfg.channels = cfg.heads * (1 + rng.uniform_int(16 / cfg.heads));
    cfg.embed_dim = 8;
    cfg.mlp_dim = 4;
    cfg.key_budget = 10;
    cfg.map_size = 16;
    const std::size_t nq = 1 + rng.uniform_int(20), nk = 1 + rng.uniform_int(10);
    ParamStore store;
    relation::init_attention_params(store, "bvr", cfg, rng);
    Array fq = rand_array(rng, {nq, cfg.channels});
    Array fk = rand_array(rng, {nk, cfg.channels});
    Array qpts = rand_array(rng, {nq, 2}, 0.0, 20.0);
    Array kpts = rand_array(rng, {nk, 2}, 0.0, 20.0);
    const double unit = 2.0;
    Tape t;
    relation::AttentionParams params = relation::bind_attention_params(t, store, "bvr", cfg);
    relation::QuerySet q{t.input(fq), t.input(qpts)};
    relation::KeySet k;
    k.count = nk;
    k.features = t.input(fk);
    k.locations = t.input(kpts);
    Val out =
        relation::bvr_attend(t, q, k, params, cfg, relation::GeometryMode::direct, true, unit);
    const Array want = naive_attend(fq, qpts, fk, kpts, store, cfg, unit, true, true);
    worst = std::max(worst, max_abs_diff(t.value(out), want));
  }
  const double dt = seconds_since(t0);
  const bool pass = worst <= 1e-10 && dt < 5.0;
  std::ostringstream os;
  os << "attention oracle equivalence on 100 instances: max |diff| = " << worst << " (<= 1e-10), "
     << dt << " s (< 5 s)";
  report(1, pass, os.str());
  CHECK(worst <= 1e-10);
  CHECK(dt < 5.0);
}

TEST_CASE("criterion 2: shared and direct geometry agree on the lattice") {
  Rng rng(kPublishedSeed + 1);
  relation::RelationConfig cfg;
  cfg.channels = 8;
  cfg.heads = 4;
  cfg.embed_dim = 16;
  cfg.mlp_dim = 8;
  cfg.key_budget = 8;
  cfg.map_size = 32;
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    ParamStore store;
    relation::init_attention_params(store, "bvr", cfg, rng);
    Tape t;
    relation::AttentionParams params = relation::bind_attention_params(t, store, "bvr", cfg);
    relation::SharedLocationMap map = relation::build_shared_map(t, params, cfg, 1.0);  // U = 1
    // Integer offsets inside the [-16, 15] coverage window.
    const std::size_t nq = 2, nk = 5;
    Array qpts({nq, 2}, {40.0, 40.0, 50.0, 37.0});
    Array kpts({nk, 2});
    for (std::size_t j = 0; j < nk; ++j) {
      kpts[j * 2] = 45.0 + static_cast<double>(rng.uniform_int(11));      // offsets in [-5, 15]
      kpts[j * 2 + 1] = 38.0 + static_cast<double>(rng.uniform_int(12));  // offsets in [-2, 13]
    }
    Val qv = t.input(qpts), kv = t.input(kpts);
    const Array& shared = t.value(relation::geometry_term_shared(t, qv, kv, map));
    const Array& direct = t.value(relation::geometry_term_direct(t, qv, kv, params, cfg, 1.0));
    worst = std::max(worst, max_abs_diff(shared, direct));
  }
  const bool pass = worst <= 1e-9;
  std::ostringstream os;
  os << "shared/direct geometry equivalence on 100 weight draws: max |diff| = " << worst
     << " (<= 1e-9)";
  report(2, pass, os.str());
  CHECK(worst <= 1e-9);
}

TEST_CASE("criterion 3: gradient suites") {
  const auto t0 = Clock::now();
  const auto kernels = gradcheck::check_kernels(kPublishedSeed);
  const auto rel = gradcheck::check_relation(kPublishedSeed);
  const auto kp = gradcheck::check_keypoints(kPublishedSeed);
  const auto e2e = gradcheck::check_end2end_subset(kPublishedSeed);
  const double dt = seconds_since(t0);
  const bool pass = kernels.pass && rel.pass && kp.pass && e2e.pass && dt < 120.0;
  std::ostringstream os;
  os << "gradient suites: kernels " << kernels.worst << ", relation " << rel.worst
     << ", keypoints " << kp.worst << " (<= 1e-5 each), end-to-end subset " << e2e.worst
     << " (<= 1e-4), " << dt << " s (< 2 min)";
  report(3, pass, os.str());
  CHECK(kernels.pass);
  CHECK(rel.pass);
  CHECK(kp.pass);
  CHECK(e2e.pass);
  CHECK(dt < 120.0);
}

TEST_CASE("criterion 4: key selection equals brute force on 1000 instances") {
  Rng rng(kPublishedSeed + 2);
  bool all_equal = true;
  for (int instance = 0; instance < 1000 && all_equal; ++instance) {
    const std::size_t num_levels = 1 + rng.uniform_int(3);
    Tape t;
    std::vector<keypoints::LevelPointPreds> preds;
    std::vector<Array> maps;
    for (std::size_t l = 0; l < num_levels; ++l) {
      const std::size_t h = 2 + rng.uniform_int(4), w = 2 + rng.uniform_int(4);
      Array score({h, w});
      for (std::size_t i = 0; i < score.size(); ++i) {
        score[i] = 0.1 * static_cast<double>(rng.uniform_int(10));  // quantized: forces ties
      }
      maps.push_back(score);
      keypoints::LevelPointPreds p;
      p.spec = {4 << l, h, w};
      p.shared_feat = t.input(Array::full({2, h, w}, 1.0));
      for (std::size_t k = 0; k < keypoints::kNumKinds; ++k) {
        p.score[k] = t.input(score);
        p.offset[k] = t.input(Array({2, h, w}));
      }
      preds.push_back(p);
    }
    const std::size_t k = 1 + rng.uniform_int(8);

    // Oracle: enumerate bins, padded-window max, equality, global sort, truncate.
    struct Key {
      std::size_t level, row, col;
      double score;
    };
    auto oracle = [&](const std::vector<std::size_t>* only) {
      std::vector<Key> cands;
      for (std::size_t l = 0; l < maps.size(); ++l) {
        if (only && std::find(only->begin(), only->end(), l) == only->end()) continue;
        const std::size_t h = maps[l].extent(0), w = maps[l].extent(1);
        for (std::size_t r = 0; r < h; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            double best = -1e300;
            for (int dr = -1; dr <= 1; ++dr) {
              for (int dc = -1; dc <= 1; ++dc) {
                const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                if (rr < 0 || rr >= static_cast<long>(h) || cc < 0 || cc >= static_cast<long>(w)) {
                  continue;
                }
                best = std::max(best, maps[l][static_cast<std::size_t>(rr) * w +
                                              static_cast<std::size_t>(cc)]);
              }
            }
            if (maps[l][r * w + c] == best) cands.push_back({l, r, c, maps[l][r * w + c]});
          }
        }
      }
      std::sort(cands.begin(), cands.end(), [](const Key& a, const Key& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.level != b.level) return a.level < b.level;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
      });
      if (cands.size() > k) cands.resize(k);
      return cands;
    };
    auto matches = [&](const relation::KeySet& got, const std::vector<Key>& want) {
      if (got.count != want.size()) return false;
      const Array* locs = got.count ? &t.value(got.locations) : nullptr;
      for (std::size_t i = 0; i < want.size(); ++i) {
        const double s = static_cast<double>(preds[want[i].level].spec.stride);
        if (got.scores[i] != want[i].score || got.levels[i] != want[i].level) return false;
        if (std::abs((*locs)[i * 2] - (static_cast<double>(want[i].col) + 0.5) * s) > 1e-12 ||
            std::abs((*locs)[i * 2 + 1] - (static_cast<double>(want[i].row) + 0.5) * s) > 1e-12) {
          return false;
        }
      }
      return true;
    };

    all_equal = matches(keypoints::select_keys_for_kind(t, preds, 0, k, true), oracle(nullptr));
    for (std::size_t l = 0; l < num_levels && all_equal; ++l) {
      std::vector<std::size_t> only{l};
      all_equal =
          matches(keypoints::select_keys_for_kind(t, preds, 0, k, true, &only), oracle(&only));
    }
  }
  report(4, all_equal,
         "key selection equals brute-force enumeration on 1000 instances, both sharing modes, "
         "exact including ties");
  CHECK(all_equal);
}

TEST_CASE("criterion 5: cost model formulas, instrumentation, and the 10x bound") {
  using namespace bvr::complexity;
  // Spot values from the formulas.
  const CostQuery tiny{4, 4, 2, 3, 2, 2, 4};
  const bool spots = cost_direct(tiny).time.str() == "336" &&
                     cost_direct(tiny).memory.str() == "144" &&
                     cost_shared(tiny).time.str() == "472" &&
                     cost_direct({512, 512, 8, 50, 100, 100, 400}).time ==
                         BigUint(266752) * BigUint(50) * BigUint(10000);

  // Instrumented equality on a small grid.
  bool instrumented = true;
  for (const CostQuery& q : {CostQuery{8, 4, 2, 3, 4, 4, 8}, CostQuery{16, 8, 4, 2, 3, 5, 16},
                             CostQuery{8, 8, 2, 1, 8, 8, 4}}) {
    instrumented = instrumented &&
                   validate_against_counter(q, relation::GeometryMode::direct, 1).match &&
                   validate_against_counter(q, relation::GeometryMode::shared, 1).match;
  }

  // The stated bound: >= 10x at the published defaults with H·W = 10⁴ (binding point
  // of the stated domain). The formulas give 3.12x there; 10x first holds at
  // H·W >= 32,010. Direction (shared < direct) holds everywhere above the
  // map amortization point.
  CostQuery big{512, 512, 8, 50, 100, 100, 400};
  const double ratio_1e4 =
      cost_direct(big).time.to_double() / cost_shared(big).time.to_double();
  big.h = 179;
  big.w = 179;  // 32,041 >= crossover
  const double ratio_cross =
      cost_direct(big).time.to_double() / cost_shared(big).time.to_double();
  big.h = 1000;
  big.w = 100;
  const double ratio_1e5 =
      cost_direct(big).time.to_double() / cost_shared(big).time.to_double();
  const bool direction = ratio_1e4 > 1.0 && ratio_cross >= 10.0 && ratio_1e5 >= 10.0;
  const bool ten_x_at_1e4 = ratio_1e4 >= 10.0;

  const bool pass = spots && instrumented && direction && ten_x_at_1e4;
  std::ostringstream os;
  os << "cost model: formula spot values " << (spots ? "ok" : "WRONG") << "; instrumented counts "
     << (instrumented ? "exact" : "MISMATCH") << "; shared<direct direction "
     << (direction ? "ok" : "WRONG") << "; >=10x at H*W=1e4: measured ratio " << ratio_1e4
     << (ten_x_at_1e4 ? "" : " — bound unmet by the formulas themselves (crossover at H*W=32,010; "
                             "ratio(3.2e4)=" +
                                 std::to_string(ratio_cross) +
                                 ", ratio(1e5)=" + std::to_string(ratio_1e5) + ")");
  report(5, pass, os.str());
  CHECK(spots);
  CHECK(instrumented);
  CHECK(direction);
  // Faithful to the stated criterion; see the note at the top of this file.
  CHECK(ten_x_at_1e4);
}

TEST_CASE("criterion 6: toy end-to-end, baseline vs full module plus ablations") {
  const auto t0 = Clock::now();
  fs::create_directories("acceptance_out");

  synthdata::SceneSpec scene;
  scene.seed = kPublishedSeed;
  const synthdata::Dataset train_set = synthdata::generate(scene, kTrainImages);
  scene.seed = kPublishedSeed + 1;
  const synthdata::Dataset val_set = synthdata::generate(scene, kValImages);

  std::vector<AblationRow> rows;
  auto run = [&](const std::string& name, detector::DetectorConfig cfg) {
    const auto r0 = Clock::now();
    auto result = detector::train(train_set, val_set, cfg, kPublishedSeed);
    AblationRow row{name, result.log.back().ap, seconds_since(r0)};
    rows.push_back(row);
    std::printf("  run %-12s ap50=%.3f ap75=%.3f ap=%.3f (%.0f s)\n", name.c_str(), row.ap.ap50,
                row.ap.ap75, row.ap.mean, row.seconds);
    std::fflush(stdout);
    return row.ap;
  };

  detector::DetectorConfig base_cfg = toy_config();
  base_cfg.cls_bvr = false;
  base_cfg.reg_bvr = false;
  const detector::ApSummary baseline = run("baseline", base_cfg);

  const detector::ApSummary full = run("full", toy_config());

  auto ablation = [&](const std::string& name, auto&& mutate) {
    detector::DetectorConfig cfg = toy_config();
    cfg.train.epochs = kAblationEpochs;
    cfg.train.decay_epochs = {};
    mutate(cfg);
    run(name, cfg);
  };
  ablation("no-cls-bvr", [](detector::DetectorConfig& c) { c.cls_bvr = false; });
  ablation("no-reg-bvr", [](detector::DetectorConfig& c) { c.reg_bvr = false; });
  ablation("no-appearance", [](detector::DetectorConfig& c) { c.appearance = false; });
  ablation("no-geometry",
           [](detector::DetectorConfig& c) { c.geometry_mode = relation::GeometryMode::off; });
  ablation("no-subpixel", [](detector::DetectorConfig& c) { c.subpixel = false; });
  ablation("per-level-keys",
           [](detector::DetectorConfig& c) { c.key_sharing = keypoints::KeySharing::per_level; });

  std::ofstream csv("acceptance_out/ablations.csv");
  csv << "run,ap50,ap75,ap90,ap,seconds\n";
  csv.precision(17);
  for (const AblationRow& r : rows) {
    csv << r.name << "," << r.ap.ap50 << "," << r.ap.ap75 << "," << r.ap.ap90 << "," << r.ap.mean
        << "," << r.seconds << "\n";
  }
  csv.close();

  const double dt = seconds_since(t0);
  const bool baseline_ok = baseline.ap50 >= 0.5;
  const bool full_ok = full.ap50 >= baseline.ap50;
  const bool table_ok = rows.size() == 8 && fs::exists("acceptance_out/ablations.csv");
  const bool budget_ok = dt <= 3600.0;
  const bool pass = baseline_ok && full_ok && table_ok && budget_ok;
  std::ostringstream os;
  os << "toy end-to-end: baseline ap50 = " << baseline.ap50 << " (>= 0.5), full ap50 = "
     << full.ap50 << " (>= baseline), " << rows.size()
     << " runs completed, table at acceptance_out/ablations.csv, total " << dt
     << " s (<= 3600 s)";
  report(6, pass, os.str());
  CHECK(baseline_ok);
  CHECK(full_ok);
  CHECK(table_ok);
  CHECK(budget_ok);
}

TEST_CASE("criterion 7: identical config and seed give byte-identical metrics logs") {
  const std::string dir = (fs::temp_directory_path() / "bvr_acceptance_determinism").string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir + "/cfg.json");
    cfg << R"({
  "schema_version": 1,
  "seed": 77,
  "scene": {"image_size": 32, "box_min": 6, "box_max": 16, "objects_min": 1, "objects_max": 2,
            "num_classes": 2},
  "detector": {
    "strides": [4, 8],
    "backbone_widths": [4, 6],
    "num_classes": 2,
    "anchor_scales": [2.0, 3.0],
    "anchor_ratios": [1.0],
    "relation": {"channels": 16, "heads": 2, "embed_dim": 8, "mlp_dim": 8, "key_budget": 4,
                 "map_size": 16},
    "train": {"lr": 0.01, "epochs": 2, "batch": 2, "threads": 2, "decay_epochs": [1]}
  }
})";
  }
  auto shell = [&](const std::string& args) {
    const std::string cmd = std::string(BVR_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  bool pass = shell("gen-data --config " + dir + "/cfg.json --count 8 --out " + dir + "/data") == 0;
  pass = pass &&
         shell("gen-data --config " + dir + "/cfg.json --seed 78 --count 4 --out " + dir + "/val") ==
             0;
  pass = pass && shell("train --config " + dir + "/cfg.json --data " + dir + "/data --val " + dir +
                       "/val --out " + dir + "/run1") == 0;
  pass = pass && shell("train --config " + dir + "/cfg.json --data " + dir + "/data --val " + dir +
                       "/val --out " + dir + "/run2") == 0;
  pass = pass && slurp(dir + "/run1/metrics.jsonl") == slurp(dir + "/run2/metrics.jsonl") &&
         slurp(dir + "/run1/ap_summary.csv") == slurp(dir + "/run2/ap_summary.csv");
  report(7, pass, "cmd_train twice with identical config+seed: metrics logs byte-identical");
  CHECK(pass);
}

TEST_CASE("criterion 8: invariant suite") {
  Rng rng(kPublishedSeed + 3);
  bool softmax_ok = true, permutation_ok = true, translation_ok = true, residual_ok = true,
       roundtrip_ok = true, ap_oracle_ok = true;

  // Softmax normalization within 1e-12.
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    const Array& y = t.value(t.softmax(t.input(rand_array(rng, {5, 9}, -30, 30)), 1));
    for (std::size_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 9; ++c) sum += y[r * 9 + c];
      softmax_ok = softmax_ok && std::abs(sum - 1.0) <= 1e-12;
    }
  }

  relation::RelationConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_dim = 4;
  cfg.key_budget = 6;
  cfg.map_size = 16;
  for (int rep = 0; rep < 10; ++rep) {
    ParamStore store;
    relation::init_attention_params(store, "bvr", cfg, rng);
    const std::size_t nq = 3, nk = 5;
    Array fq = rand_array(rng, {nq, cfg.channels});
    Array fk = rand_array(rng, {nk, cfg.channels});
    Array qpts = rand_array(rng, {nq, 2}, 0.0, 12.0);
    Array kpts = rand_array(rng, {nk, 2}, 0.0, 12.0);
    auto attend = [&](const Array& fq2, const Array& qp, const Array& fk2, const Array& kp) {
      Tape t;
      relation::AttentionParams params = relation::bind_attention_params(t, store, "bvr", cfg);
      relation::QuerySet q{t.input(fq2), t.input(qp)};
      relation::KeySet k;
      k.count = fk2.extent(0);
      k.features = t.input(fk2);
      k.locations = t.input(kp);
      return t.value(
          relation::bvr_attend(t, q, k, params, cfg, relation::GeometryMode::direct, true, 2.0));
    };
    const Array base = attend(fq, qpts, fk, kpts);

    // Key permutation invariance within 1e-12.
    std::vector<std::size_t> perm = {3, 1, 4, 0, 2};
    Array fk_p({nk, cfg.channels}), kpts_p({nk, 2});
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t e = 0; e < cfg.channels; ++e) {
        fk_p[j * cfg.channels + e] = fk[perm[j] * cfg.channels + e];
      }
      kpts_p[j * 2] = kpts[perm[j] * 2];
      kpts_p[j * 2 + 1] = kpts[perm[j] * 2 + 1];
    }
    permutation_ok = permutation_ok && max_abs_diff(base, attend(fq, qpts, fk_p, kpts_p)) <= 1e-12;

    // Translation invariance of the geometry term within 1e-12.
    Array qpts_t = qpts, kpts_t = kpts;
    const double tx = rng.uniform(-40, 40), ty = rng.uniform(-40, 40);
    for (std::size_t i = 0; i < qpts_t.size(); i += 2) {
      qpts_t[i] += tx;
      qpts_t[i + 1] += ty;
    }
    for (std::size_t i = 0; i < kpts_t.size(); i += 2) {
      kpts_t[i] += tx;
      kpts_t[i + 1] += ty;
    }
    translation_ok = translation_ok && max_abs_diff(base, attend(fq, qpts_t, fk, kpts_t)) <= 1e-12;

    // Residual identity with zero value transform, exact.
    for (std::size_t g = 0; g < cfg.heads; ++g) {
      store.at("bvr.wv" + std::to_string(g)) = Array({cfg.channels, cfg.head_dim()});
    }
    const Array ident = attend(fq, qpts, fk, kpts);
    for (std::size_t i = 0; i < ident.size(); ++i) {
      residual_ok = residual_ok && ident[i] == fq[i];
    }
  }

  // Delta encode/decode round-trip within 1e-9.
  for (int rep = 0; rep < 200; ++rep) {
    const geom::Box anchor = geom::Box::from_center_size(
        rng.uniform(5, 60), rng.uniform(5, 60), rng.uniform(2, 30), rng.uniform(2, 30));
    const geom::Box gt = geom::Box::from_center_size(rng.uniform(5, 60), rng.uniform(5, 60),
                                                     rng.uniform(2, 30), rng.uniform(2, 30));
    const geom::Box back = detector::decode_box(anchor, detector::encode_box(gt, anchor));
    roundtrip_ok = roundtrip_ok && std::abs(back.x_tl - gt.x_tl) <= 1e-9 &&
                   std::abs(back.y_tl - gt.y_tl) <= 1e-9 && std::abs(back.x_br - gt.x_br) <= 1e-9 &&
                   std::abs(back.y_br - gt.y_br) <= 1e-9;
  }

  // AP oracle equality on random small instances (the enumerate-all-cutoffs
  // oracle lives in test_detector; here a spot grid re-checks the pinned
  // values).
  {
    const geom::Box box{4, 4, 14, 14};
    std::vector<std::vector<detector::GroundTruth>> gts = {{{box, 0}}};
    std::vector<std::vector<detector::Detection>> perfect = {{{box, 0, 0.9}}};
    std::vector<std::vector<detector::Detection>> ranked = {
        {{{40, 40, 50, 50}, 0, 0.9}, {box, 0, 0.8}}};
    ap_oracle_ok = detector::evaluate_ap(perfect, gts, 1).mean == 1.0 &&
                   detector::average_precision(ranked, gts, 1, 0.5) == 0.5 &&
                   detector::average_precision({{}}, {{{box, 0}}}, 1, 0.5) == 0.0;
  }

  const bool pass = softmax_ok && permutation_ok && translation_ok && residual_ok &&
                    roundtrip_ok && ap_oracle_ok;
  std::ostringstream os;
  os << "invariants: softmax " << (softmax_ok ? "ok" : "FAIL") << ", key permutation "
     << (permutation_ok ? "ok" : "FAIL") << ", translation " << (translation_ok ? "ok" : "FAIL")
     << ", residual identity " << (residual_ok ? "ok" : "FAIL") << ", delta round-trip "
     << (roundtrip_ok ? "ok" : "FAIL") << ", AP values " << (ap_oracle_ok ? "ok" : "FAIL");
  report(8, pass, os.str());
  CHECK(pass);
}
