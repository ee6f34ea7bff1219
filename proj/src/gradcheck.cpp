#include "bvr/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <map>

#include "bvr/detector.hpp"
#include "bvr/errors.hpp"
#include "bvr/keypoints.hpp"
#include "bvr/relation.hpp"
#include "bvr/rng.hpp"
#include "bvr/synthdata.hpp"
#include "bvr/tape.hpp"

namespace bvr::gradcheck {

namespace {

constexpr double kStep = 1e-6;
// Deep composites produce some legitimately tiny gradient coordinates; a
// coarser step keeps the central-difference roundoff below the relative-error
// floor while its truncation term stays negligible. The end-to-end path gets
// a middle step: very large perturbations start crossing ReLU kinks there.
constexpr double kRelationStep = 1e-5;
constexpr double kKeypointStep = 5e-4;
constexpr double kEndToEndStep = 1e-4;
constexpr double kKernelThreshold = 1e-5;
constexpr double kEndToEndThreshold = 1e-4;

Array rand_array(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// Values bounded away from zero, both signs: keeps ReLU-style kinks off the
// finite-difference path.
Array rand_signed(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  return a;
}

// Dot with a fixed array so every output coordinate carries a distinct
// gradient signal. The mix is drawn once per finite-difference target: the
// function under test must stay deterministic across evaluations.
Val mixed_sum(Tape& t, Val x, const Array& mix) {
  return t.reduce_sum(t.mul(x, t.input(mix)));
}

}  // namespace

ScopeReport check_kernels(std::uint64_t seed) {
  ScopeReport report;
  report.scope = "kernels";
  report.threshold = kKernelThreshold;

  struct KernelCase {
    std::string name;
    std::function<double(Rng&)> run;  // one instance -> max rel error
  };

  std::vector<KernelCase> cases;
  auto fd = [](const std::function<Val(Tape&, Val)>& fn, const Array& point,
               double step = kStep) { return finite_difference_check(fn, point, step); };

  cases.push_back({"matmul(a)", [&fd](Rng& rng) {
                     Array b = rand_array(rng, {4, 3}, -1, 1);
                     Array mix = rand_array(rng, {2, 3}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.matmul(x, t.input(b)), mix);
                         },
                         rand_array(rng, {2, 4}, -1, 1));
                   }});
  cases.push_back({"matmul(b)", [&fd](Rng& rng) {
                     Array a = rand_array(rng, {2, 4}, -1, 1);
                     Array mix = rand_array(rng, {2, 3}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.matmul(t.input(a), x), mix);
                         },
                         rand_array(rng, {4, 3}, -1, 1));
                   }});
  cases.push_back({"matmul_nt", [&fd](Rng& rng) {
                     Array b = rand_array(rng, {3, 4}, -1, 1);
                     Array mix = rand_array(rng, {2, 3}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.matmul_nt(x, t.input(b)), mix);
                         },
                         rand_array(rng, {2, 4}, -1, 1));
                   }});
  cases.push_back({"transpose", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {5, 3}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.transpose(x), mix); },
                         rand_array(rng, {3, 5}, -1, 1));
                   }});
  cases.push_back({"add", [&fd](Rng& rng) {
                     Array b = rand_array(rng, {3, 1, 2}, -1, 1);  // broadcast
                     Array mix = rand_array(rng, {3, 4, 2}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.add(x, t.input(b)), mix); },
                         rand_array(rng, {3, 4, 2}, -1, 1));
                   }});
  cases.push_back({"add(bcast side)", [&fd](Rng& rng) {
                     Array a = rand_array(rng, {3, 4, 2}, -1, 1);
                     Array mix = rand_array(rng, {3, 4, 2}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.add(t.input(a), x), mix); },
                         rand_array(rng, {4, 2}, -1, 1));
                   }});
  cases.push_back({"sub", [&fd](Rng& rng) {
                     Array b = rand_array(rng, {2, 3}, -1, 1);
                     Array mix = rand_array(rng, {2, 3}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.sub(t.input(b), x), mix); },
                         rand_array(rng, {2, 3}, -1, 1));
                   }});
  cases.push_back({"mul", [&fd](Rng& rng) {
                     Array b = rand_array(rng, {2, 1}, 0.5, 1.5);
                     Array mix = rand_array(rng, {2, 4}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.mul(x, t.input(b)), mix); },
                         rand_array(rng, {2, 4}, -1, 1));
                   }});
  cases.push_back({"scale", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {6}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.scale(x, -2.5), mix); },
                         rand_array(rng, {6}, -1, 1));
                   }});
  cases.push_back({"add_const", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {6}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.add_const(x, 0.7), mix); },
                         rand_array(rng, {6}, -1, 1));
                   }});
  cases.push_back({"relu", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {3, 4}, -1, 1);
                     return fd([&](Tape& t, Val x) { return mixed_sum(t, t.relu(x), mix); },
                               rand_signed(rng, {3, 4}, 0.1, 1.0));
                   }});
  cases.push_back({"sigmoid", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {3, 4}, -1, 1);
                     return fd([&](Tape& t, Val x) { return mixed_sum(t, t.sigmoid(x), mix); },
                               rand_array(rng, {3, 4}, -2, 2));
                   }});
  cases.push_back({"log", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {5}, -1, 1);
                     return fd([&](Tape& t, Val x) { return mixed_sum(t, t.log(x), mix); },
                               rand_array(rng, {5}, 0.2, 2.0));
                   }});
  cases.push_back({"smooth_l1", [&fd](Rng& rng) {
                     Array p({6});
                     for (std::size_t i = 0; i < 6; ++i) {
                       const double mag =
                           i % 2 == 0 ? rng.uniform(0.05, 0.8) : rng.uniform(1.2, 2.0);
                       p[i] = mag * (rng.uniform() < 0.5 ? -1.0 : 1.0);
                     }
                     Array mix = rand_array(rng, {6}, -1, 1);
                     return fd([&](Tape& t, Val x) { return mixed_sum(t, t.smooth_l1(x), mix); },
                               p);
                   }});
  cases.push_back({"softmax", [&fd](Rng& rng) {
                     const std::size_t axis = rng.uniform_int(2);
                     Array mix = rand_array(rng, {3, 4}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.softmax(x, axis), mix); },
                         rand_array(rng, {3, 4}, -2, 2));
                   }});
  cases.push_back({"conv3x3(x)", [&fd](Rng& rng) {
                     Array w = rand_array(rng, {3, 2, 3, 3}, -0.5, 0.5);
                     Array mix = rand_array(rng, {3, 4, 5}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.conv3x3(x, t.input(w)), mix);
                         },
                         rand_array(rng, {2, 4, 5}, -1, 1));
                   }});
  cases.push_back({"conv3x3(w)", [&fd](Rng& rng) {
                     Array xin = rand_array(rng, {2, 4, 5}, -1, 1);
                     Array mix = rand_array(rng, {3, 4, 5}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.conv3x3(t.input(xin), x), mix);
                         },
                         rand_array(rng, {3, 2, 3, 3}, -0.5, 0.5));
                   }});
  cases.push_back({"maxpool3x3", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {5, 6}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.maxpool3x3(x), mix); },
                         rand_array(rng, {5, 6}, -1, 1));
                   }});
  cases.push_back({"concat", [&fd](Rng& rng) {
                     Array b = rand_array(rng, {2, 3}, -1, 1);
                     Array mix = rand_array(rng, {6, 3}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.concat({x, t.input(b), x}, 0), mix);
                         },
                         rand_array(rng, {2, 3}, -1, 1));
                   }});
  cases.push_back({"gather", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {4, 4}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.gather(x, 0, {0, 2, 1, 2}), mix);
                         },
                         rand_array(rng, {3, 4}, -1, 1));
                   }});
  cases.push_back({"reshape", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {2, 6}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) { return mixed_sum(t, t.reshape(x, {2, 6}), mix); },
                         rand_array(rng, {3, 4}, -1, 1));
                   }});
  cases.push_back({"bilinear_sample(grid)", [&fd](Rng& rng) {
                     Array coords({4, 2});
                     for (std::size_t i = 0; i < 4; ++i) {
                       coords[i * 2] = static_cast<double>(rng.uniform_int(4)) + rng.uniform(0.1, 0.9);
                       coords[i * 2 + 1] =
                           static_cast<double>(rng.uniform_int(3)) + rng.uniform(0.1, 0.9);
                     }
                     Array mix = rand_array(rng, {4, 2}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.bilinear_sample(x, t.input(coords)), mix);
                         },
                         rand_array(rng, {2, 4, 5}, -1, 1));
                   }});
  cases.push_back({"bilinear_sample(coords)", [&fd](Rng& rng) {
                     Array grid = rand_array(rng, {2, 4, 5}, -1, 1);
                     Array coords({4, 2});
                     for (std::size_t i = 0; i < 4; ++i) {
                       coords[i * 2] = static_cast<double>(rng.uniform_int(4)) + rng.uniform(0.1, 0.9);
                       coords[i * 2 + 1] =
                           static_cast<double>(rng.uniform_int(3)) + rng.uniform(0.1, 0.9);
                     }
                     Array mix = rand_array(rng, {4, 2}, -1, 1);
                     // Piecewise bilinear in the coordinates: the central
                     // difference is exact for any step inside the cell, and
                     // the larger step drowns the roundoff floor.
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.bilinear_sample(t.input(grid), x), mix);
                         },
                         coords, 1e-3);
                   }});
  cases.push_back({"sincos_embed", [&fd](Rng& rng) {
                     Array mix = rand_array(rng, {3, 8}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.sincos_embed(x, 8, 0.5), mix);
                         },
                         rand_array(rng, {3, 2}, -5, 5));
                   }});
  cases.push_back({"pair_offsets", [&fd](Rng& rng) {
                     Array keys = rand_array(rng, {3, 2}, -4, 4);
                     Array mix = rand_array(rng, {6, 2}, -1, 1);
                     return fd(
                         [&](Tape& t, Val x) {
                           return mixed_sum(t, t.pair_offsets(x, t.input(keys)), mix);
                         },
                         rand_array(rng, {2, 2}, -4, 4));
                   }});
  cases.push_back({"reduce_sum", [&fd](Rng& rng) {
                     return fd([](Tape& t, Val x) { return t.reduce_sum(t.mul(x, x)); },
                               rand_array(rng, {7}, -1, 1));
                   }});
  cases.push_back({"reduce_mean", [&fd](Rng& rng) {
                     return fd([](Tape& t, Val x) { return t.reduce_mean(t.mul(x, x)); },
                               rand_array(rng, {7}, -1, 1));
                   }});

  Rng rng(seed);
  report.pass = true;
  for (const KernelCase& kc : cases) {
    for (int instance = 0; instance < 10; ++instance) {
      const double err = kc.run(rng);
      if (err > report.worst) {
        report.worst = err;
        report.detail = kc.name + " instance " + std::to_string(instance);
      }
      if (err > kKernelThreshold) report.pass = false;
    }
  }
  return report;
}

ScopeReport check_relation(std::uint64_t seed) {
  ScopeReport report;
  report.scope = "relation";
  report.threshold = kKernelThreshold;

  relation::RelationConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_dim = 4;
  cfg.key_budget = 4;
  cfg.map_size = 16;

  Rng rng(seed);
  const std::size_t nq = 3, nk = 4;
  ParamStore store;
  relation::init_attention_params(store, "bvr", cfg, rng);
  store.add("probe.key_feat", rand_array(rng, {nk, cfg.channels}, -1, 1));
  Array key_loc({nk, 2});
  for (std::size_t i = 0; i < nk; ++i) {
    key_loc[i * 2] = rng.uniform_int(12) + rng.uniform(0.15, 0.85);
    key_loc[i * 2 + 1] = rng.uniform_int(12) + rng.uniform(0.15, 0.85);
  }
  store.add("probe.key_loc", std::move(key_loc));
  Array qfeat = rand_array(rng, {nq, cfg.channels}, -1, 1);
  Array qpts({nq, 2});
  for (std::size_t i = 0; i < nq; ++i) {
    qpts[i * 2] = rng.uniform_int(12) + rng.uniform(0.15, 0.85);
    qpts[i * 2 + 1] = rng.uniform_int(12) + rng.uniform(0.15, 0.85);
  }
  Array mix = rand_array(rng, {nq, cfg.channels}, -1, 1);
  const double unit = 2.0;

  report.pass = true;
  for (relation::GeometryMode mode :
       {relation::GeometryMode::direct, relation::GeometryMode::shared}) {
    auto build = [&](Tape& t, ParamStore& s) {
      relation::AttentionParams params = relation::bind_attention_params(t, s, "bvr", cfg);
      relation::KeySet keys;
      keys.count = nk;
      keys.features = t.param_from(s, "probe.key_feat");
      keys.locations = t.param_from(s, "probe.key_loc");
      relation::QuerySet queries{t.input(qfeat), t.input(qpts)};
      relation::SharedLocationMap map;
      if (mode == relation::GeometryMode::shared) {
        map = relation::build_shared_map(t, params, cfg, unit);
      }
      Val out = relation::bvr_attend(t, queries, keys, params, cfg, mode, true, unit,
                                     mode == relation::GeometryMode::shared ? &map : nullptr);
      return t.reduce_sum(t.mul(out, t.input(mix)));
    };
    FdWorst w = finite_difference_check_store(build, store, kRelationStep);
    if (w.rel_err > report.worst) {
      report.worst = w.rel_err;
      report.detail = (mode == relation::GeometryMode::direct ? "direct:" : "shared:") + w.param +
                      "[" + std::to_string(w.index) + "]";
    }
    if (w.rel_err > kKernelThreshold) report.pass = false;
  }
  return report;
}

ScopeReport check_keypoints(std::uint64_t seed) {
  ScopeReport report;
  report.scope = "keypoints";
  report.threshold = kKernelThreshold;

  Rng rng(seed);
  const std::size_t c = 4;
  std::vector<geom::LevelSpec> levels = {{4, 4, 4}, {8, 2, 2}};
  ParamStore store;
  keypoints::init_point_head(store, "points", c, rng);
  store.add("probe.feat0", rand_array(rng, {c, 4, 4}, -1, 1));
  store.add("probe.feat1", rand_array(rng, {c, 2, 2}, -1, 1));
  std::vector<geom::Box> boxes = {{2.3, 3.1, 9.5, 11.2}, {6.7, 1.4, 14.2, 7.9}};

  auto build = [&](Tape& t, ParamStore& s) {
    auto head = keypoints::bind_point_head(t, s, "points");
    std::vector<keypoints::LevelPointPreds> preds;
    preds.push_back(
        keypoints::point_head_forward(t, t.param_from(s, "probe.feat0"), head, levels[0]));
    preds.push_back(
        keypoints::point_head_forward(t, t.param_from(s, "probe.feat1"), head, levels[1]));
    auto targets = keypoints::assign_targets(boxes, levels);
    auto losses = keypoints::point_losses(t, preds, targets);
    return t.add(losses.score_loss, losses.offset_loss);
  };
  FdWorst w = finite_difference_check_store(build, store, kKeypointStep);
  report.worst = w.rel_err;
  report.detail = w.param + "[" + std::to_string(w.index) + "]";
  report.pass = w.rel_err <= kKernelThreshold;
  return report;
}

ScopeReport check_end2end_subset(std::uint64_t seed) {
  ScopeReport report;
  report.scope = "end2end-subset";
  report.threshold = kEndToEndThreshold;

  detector::DetectorConfig cfg;
  cfg.image_size = 16;
  cfg.strides = {4, 8};
  cfg.backbone_widths = {4, 6};
  cfg.head_depth = 1;
  cfg.num_classes = 2;
  cfg.anchor_scales = {2.0};
  cfg.anchor_ratios = {1.0};
  cfg.relation.channels = 8;
  cfg.relation.heads = 2;
  cfg.relation.embed_dim = 8;
  cfg.relation.mlp_dim = 4;
  cfg.relation.key_budget = 3;
  cfg.relation.map_size = 8;
  cfg.geometry_mode = relation::GeometryMode::shared;

  synthdata::SceneSpec scene;
  scene.image_size = 16;
  scene.box_min = 4;
  scene.box_max = 10;
  scene.objects_min = 1;
  scene.objects_max = 2;
  scene.num_classes = 2;
  scene.seed = seed;
  synthdata::Example ex = synthdata::render_example(scene, 0);
  const std::vector<detector::GroundTruth> gt = detector::to_ground_truth(ex.objects);

  ParamStore store;
  detector::init_detector_params(store, cfg, seed);

  auto build = [&](Tape& t, ParamStore& s) {
    detector::ForwardResult fwd = detector::detector_forward(t, t.input(ex.image), s, cfg);
    return detector::detection_loss(t, fwd, gt, cfg).total;
  };

  // Seeded 3-coordinate subset per module prefix; the full sweep would take
  // hours at this depth.
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& [name, p] : store.entries()) {
    groups[name.substr(0, name.find('.'))].push_back(name);
  }
  Rng pick(seed ^ 0x5bf03635ULL);
  std::vector<std::pair<std::string, std::size_t>> subset;
  for (const auto& [group, names] : groups) {
    for (int i = 0; i < 3; ++i) {
      const std::string& name = names[pick.uniform_int(names.size())];
      subset.emplace_back(name, pick.uniform_int(store.at(name).size()));
    }
  }
  FdWorst w = finite_difference_check_store(build, store, kEndToEndStep, &subset);
  report.worst = w.rel_err;
  report.detail = w.param + "[" + std::to_string(w.index) + "]";
  report.pass = w.rel_err <= kEndToEndThreshold;
  return report;
}

std::vector<ScopeReport> run_scope(const std::string& scope, std::uint64_t seed) {
  std::vector<ScopeReport> reports;
  if (scope == "kernels" || scope == "all") reports.push_back(check_kernels(seed));
  if (scope == "relation" || scope == "all") reports.push_back(check_relation(seed));
  if (scope == "keypoints" || scope == "all") reports.push_back(check_keypoints(seed));
  if (scope == "end2end-subset" || scope == "all") reports.push_back(check_end2end_subset(seed));
  if (reports.empty()) {
    throw ConfigError("gradcheck: unknown scope " + scope +
                      " (expected kernels|relation|keypoints|end2end-subset|all)");
  }
  return reports;
}

}  // namespace bvr::gradcheck
