#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "bvr/errors.hpp"
#include "bvr/gradcheck.hpp"
#include "bvr/relation.hpp"
#include "test_util.hpp"

using namespace bvr;
using namespace bvr::relation;
using testutil::bit_equal;
using testutil::max_abs_diff;
using testutil::rand_array;

namespace {

// Independent embedding: straight transcription of the angle rule.
std::vector<double> naive_embed(double dx, double dy, std::size_t d0) {
  std::vector<double> out(d0);
  const std::size_t half = d0 / 2, pairs = d0 / 4;
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const double v = axis == 0 ? dx : dy;
    for (std::size_t i = 0; i < pairs; ++i) {
      const double angle = v / std::pow(1000.0, 4.0 * static_cast<double>(i) / static_cast<double>(d0));
      out[axis * half + 2 * i] = std::sin(angle);
      out[axis * half + 2 * i + 1] = std::cos(angle);
    }
  }
  return out;
}

// Independent geometry term for one pair: embed -> W1 -> ReLU -> W2.
std::vector<double> naive_geometry(double dx_units, double dy_units, const Array& w1,
                                   const Array& w2, std::size_t d0, std::size_t d1,
                                   std::size_t heads) {
  const std::vector<double> emb = naive_embed(dx_units, dy_units, d0);
  std::vector<double> hidden(d1, 0.0);
  for (std::size_t j = 0; j < d1; ++j) {
    for (std::size_t i = 0; i < d0; ++i) hidden[j] += emb[i] * w1[i * d1 + j];
    hidden[j] = std::max(hidden[j], 0.0);
  }
  std::vector<double> out(heads, 0.0);
  for (std::size_t g = 0; g < heads; ++g) {
    for (std::size_t j = 0; j < d1; ++j) out[g] += hidden[j] * w2[j * heads + g];
  }
  return out;
}

// Per-pair double-loop reference for the whole attention module.
Array naive_attend(const Array& fq, const Array& qpts, const Array& fk, const Array& kpts,
                   const ParamStore& store, const std::string& prefix, const RelationConfig& cfg,
                   double unit, GeometryMode geometry, bool appearance) {
  const std::size_t nq = fq.extent(0), nk = fk.extent(0);
  const std::size_t c = cfg.channels, hd = cfg.head_dim();
  Array out = fq;
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    const Array& wq = store.at(prefix + ".wq" + std::to_string(g));
    const Array& wk = store.at(prefix + ".wk" + std::to_string(g));
    const Array& wv = store.at(prefix + ".wv" + std::to_string(g));
    const Array& w1 = store.at(prefix + ".mlp_w1");
    const Array& w2 = store.at(prefix + ".mlp_w2");
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> logits(nk, 0.0);
      for (std::size_t j = 0; j < nk; ++j) {
        double sa = 0.0;
        if (appearance) {
          for (std::size_t d = 0; d < hd; ++d) {
            double qproj = 0.0, kproj = 0.0;
            for (std::size_t e = 0; e < c; ++e) {
              qproj += fq[i * c + e] * wq[e * hd + d];
              kproj += fk[j * c + e] * wk[e * hd + d];
            }
            sa += qproj * kproj;
          }
          sa /= std::sqrt(static_cast<double>(hd));
        }
        double sg = 0.0;
        if (geometry != GeometryMode::off) {
          const double dx = (kpts[j * 2] - qpts[i * 2]) / unit;
          const double dy = (kpts[j * 2 + 1] - qpts[i * 2 + 1]) / unit;
          sg = naive_geometry(dx, dy, w1, w2, cfg.embed_dim, cfg.mlp_dim, cfg.heads)[g];
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
      double wsum = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        weights[j] /= denom;
        wsum += weights[j];
      }
      REQUIRE(std::abs(wsum - 1.0) <= 1e-12);  // normalization invariant
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

RelationConfig tiny_config() {
  RelationConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_dim = 4;
  cfg.key_budget = 8;
  cfg.map_size = 16;
  return cfg;
}

struct Instance {
  ParamStore store;
  Array fq, qpts, fk, kpts;
};

Instance make_instance(Rng& rng, const RelationConfig& cfg, std::size_t nq, std::size_t nk,
                       double coord_range = 12.0) {
  Instance inst;
  relation::init_attention_params(inst.store, "bvr", cfg, rng);
  inst.fq = rand_array(rng, {nq, cfg.channels});
  inst.fk = rand_array(rng, {nk, cfg.channels});
  inst.qpts = rand_array(rng, {nq, 2}, 0.0, coord_range);
  inst.kpts = rand_array(rng, {nk, 2}, 0.0, coord_range);
  return inst;
}

Val attend_on_tape(Tape& t, Instance& inst, const RelationConfig& cfg, GeometryMode mode,
                   bool appearance, double unit) {
  AttentionParams params = bind_attention_params(t, inst.store, "bvr", cfg);
  QuerySet q{t.input(inst.fq), t.input(inst.qpts)};
  KeySet k;
  k.count = inst.fk.extent(0);
  k.features = t.input(inst.fk);
  k.locations = t.input(inst.kpts);
  SharedLocationMap map;
  if (mode == GeometryMode::shared) map = build_shared_map(t, params, cfg, unit);
  return bvr_attend(t, q, k, params, cfg, mode, appearance, unit,
                    mode == GeometryMode::shared ? &map : nullptr);
}

}  // namespace

TEST_CASE("sinusoidal embedding of the zero offset is the sin=0/cos=1 pattern") {
  Tape t;
  const Array& e = t.value(sinusoidal_embed(t, t.input(Array({1, 2}, {0.0, 0.0})), 8));
  for (std::size_t i = 0; i < 8; i += 2) {
    CHECK(e[i] == 0.0);
    CHECK(e[i + 1] == 1.0);
  }
}

TEST_CASE("sinusoidal embedding is separable per axis") {
  Tape t;
  const Array& e = t.value(sinusoidal_embed(t, t.input(Array({1, 2}, {2.7, 0.0})), 12));
  // dy half must equal the zero pattern
  for (std::size_t i = 6; i < 12; i += 2) {
    CHECK(e[i] == 0.0);
    CHECK(e[i + 1] == 1.0);
  }
}

TEST_CASE("sinusoidal embedding of (3,-1) with d0=8 matches the angle formula") {
  Tape t;
  const Array& e = t.value(sinusoidal_embed(t, t.input(Array({1, 2}, {3.0, -1.0})), 8));
  const std::vector<double> want = naive_embed(3.0, -1.0, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(e[i] == doctest::Approx(want[i]).epsilon(1e-15));
}

TEST_CASE("geometry term with zero MLP weights is identically zero") {
  RelationConfig cfg = tiny_config();
  ParamStore store;
  Rng rng(21);
  init_attention_params(store, "bvr", cfg, rng);
  store.at("bvr.mlp_w1") = Array({cfg.embed_dim, cfg.mlp_dim});
  store.at("bvr.mlp_w2") = Array({cfg.mlp_dim, cfg.heads});
  Tape t;
  AttentionParams params = bind_attention_params(t, store, "bvr", cfg);
  Val term = geometry_term_direct(t, t.input(rand_array(rng, {3, 2}, 0, 10)),
                                  t.input(rand_array(rng, {4, 2}, 0, 10)), params, cfg, 2.0);
  const Array& a = t.value(term);
  CHECK(a.shape() == std::vector<std::size_t>{3, 4, cfg.heads});
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == 0.0);
}

TEST_CASE("single pair with tiny hand-set weights matches hand arithmetic") {
  RelationConfig cfg;
  cfg.channels = 1;
  cfg.heads = 1;
  cfg.embed_dim = 4;
  cfg.mlp_dim = 2;
  cfg.key_budget = 1;
  cfg.map_size = 8;
  ParamStore store;
  Rng rng(22);
  init_attention_params(store, "bvr", cfg, rng);
  store.at("bvr.mlp_w1") = Array({4, 2}, {0.5, -0.25, 1.0, 0.75, -0.5, 0.25, 0.0, 1.0});
  store.at("bvr.mlp_w2") = Array({2, 1}, {2.0, -1.0});
  const double unit = 2.0;
  const double qx = 1.0, qy = 3.0, kx = 4.0, ky = 2.0;
  Tape t;
  AttentionParams params = bind_attention_params(t, store, "bvr", cfg);
  Val term = geometry_term_direct(t, t.input(Array({1, 2}, {qx, qy})),
                                  t.input(Array({1, 2}, {kx, ky})), params, cfg, unit);

  const std::vector<double> want =
      naive_geometry((kx - qx) / unit, (ky - qy) / unit, store.at("bvr.mlp_w1"),
                     store.at("bvr.mlp_w2"), 4, 2, 1);
  CHECK(t.value(term)[0] == doctest::Approx(want[0]).epsilon(1e-14));
}

TEST_CASE("geometry term depends only on relative location") {
  RelationConfig cfg = tiny_config();
  Rng rng(23);
  Instance inst = make_instance(rng, cfg, 3, 4);
  auto eval = [&](double shift) {
    Tape t;
    AttentionParams params = bind_attention_params(t, inst.store, "bvr", cfg);
    Array q = inst.qpts, k = inst.kpts;
    for (std::size_t i = 0; i < q.size(); ++i) q[i] += shift;
    for (std::size_t i = 0; i < k.size(); ++i) k[i] += shift;
    return t.value(geometry_term_direct(t, t.input(q), t.input(k), params, cfg, 2.0));
  };
  CHECK(max_abs_diff(eval(0.0), eval(37.25)) <= 1e-12);
}

TEST_CASE("shared map lattice bins equal direct evaluations") {
  RelationConfig cfg = tiny_config();
  cfg.map_size = 8;
  Rng rng(24);
  ParamStore store;
  init_attention_params(store, "bvr", cfg, rng);
  Tape t;
  AttentionParams params = bind_attention_params(t, store, "bvr", cfg);
  SharedLocationMap map = build_shared_map(t, params, cfg, 1.0);
  const Array& grid = t.value(map.grid);  // (G, M, M)
  const std::size_t m = cfg.map_size;

  // Direct oracle over all 64 bins, unit 1: offset (q - M/2, p - M/2).
  Array pts({m * m, 2});
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t q = 0; q < m; ++q) {
      pts[(p * m + q) * 2] = static_cast<double>(q) - 4.0;
      pts[(p * m + q) * 2 + 1] = static_cast<double>(p) - 4.0;
    }
  }
  Val direct = geometry_term_direct(t, t.input(Array({1, 2}, {0.0, 0.0})), t.input(pts), params,
                                    cfg, 1.0);  // (1, M*M, G)
  const Array& d = t.value(direct);
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t q = 0; q < m; ++q) {
      for (std::size_t g = 0; g < cfg.heads; ++g) {
        CHECK(grid[(g * m + p) * m + q] ==
              doctest::Approx(d[(p * m + q) * cfg.heads + g]).epsilon(1e-12));
      }
    }
  }
  // Center bin is the zero-offset geometry term.
  Val zero = geometry_term_direct(t, t.input(Array({1, 2}, {5.0, 5.0})),
                                  t.input(Array({1, 2}, {5.0, 5.0})), params, cfg, 1.0);
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    CHECK(grid[(g * m + m / 2) * m + m / 2] == doctest::Approx(t.value(zero)[g]).epsilon(1e-12));
  }
}

TEST_CASE("shared equals direct at lattice-aligned offsets within 1e-9") {
  RelationConfig cfg = tiny_config();
  Rng rng(25);
  for (int rep = 0; rep < 10; ++rep) {
    ParamStore store;
    init_attention_params(store, "bvr", cfg, rng);
    Tape t;
    AttentionParams params = bind_attention_params(t, store, "bvr", cfg);
    SharedLocationMap map = build_shared_map(t, params, cfg, 1.0);  // U = 1
    // Integer offsets inside coverage for both queries: M = 16 gives [-8, 7].
    Array qpts({2, 2}, {10.0, 12.0, 20.0, 9.0});
    Array kpts({3, 2});
    for (std::size_t i = 0; i < 3; ++i) {
      kpts[i * 2] = 12.0 + static_cast<double>(rng.uniform_int(6));   // [12, 17]
      kpts[i * 2 + 1] = 4.0 + static_cast<double>(rng.uniform_int(13));  // [4, 16]
    }
    Val qs = t.input(qpts), ks = t.input(kpts);
    const Array& shrd = t.value(geometry_term_shared(t, qs, ks, map));
    const Array& dir = t.value(geometry_term_direct(t, qs, ks, params, cfg, 1.0));
    CHECK(max_abs_diff(shrd, dir) <= 1e-9);
  }
}

TEST_CASE("shared map clamps offsets beyond coverage to the border bin") {
  RelationConfig cfg = tiny_config();
  cfg.map_size = 8;
  Rng rng(26);
  ParamStore store;
  init_attention_params(store, "bvr", cfg, rng);
  Tape t;
  AttentionParams params = bind_attention_params(t, store, "bvr", cfg);
  SharedLocationMap map = build_shared_map(t, params, cfg, 1.0);
  const Array& grid = t.value(map.grid);
  // dx far beyond +coverage, dy = 0 -> column M-1, row M/2.
  Val term = geometry_term_shared(t, t.input(Array({1, 2}, {0.0, 0.0})),
                                  t.input(Array({1, 2}, {1000.0, 0.0})), map);
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    CHECK(t.value(term)[g] == grid[(g * 8 + 4) * 8 + 7]);
  }
}

TEST_CASE("attention with a single key adds the value transform residually") {
  RelationConfig cfg = tiny_config();
  Rng rng(27);
  Instance inst = make_instance(rng, cfg, 4, 1);
  Tape t;
  Val out = attend_on_tape(t, inst, cfg, GeometryMode::direct, true, 2.0);
  const Array& got = t.value(out);
  const std::size_t c = cfg.channels, hd = cfg.head_dim();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t g = 0; g < cfg.heads; ++g) {
      const Array& wv = inst.store.at("bvr.wv" + std::to_string(g));
      for (std::size_t d = 0; d < hd; ++d) {
        double value = 0.0;
        for (std::size_t e = 0; e < c; ++e) value += inst.fk[e] * wv[e * hd + d];
        CHECK(got[i * c + g * hd + d] ==
              doctest::Approx(inst.fq[i * c + g * hd + d] + value).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("identical keys collapse to the single-key result") {
  RelationConfig cfg = tiny_config();
  Rng rng(28);
  Instance one = make_instance(rng, cfg, 3, 1);
  Instance many = one;
  many.fk = Array({5, cfg.channels});
  many.kpts = Array({5, 2});
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t e = 0; e < cfg.channels; ++e) many.fk[j * cfg.channels + e] = one.fk[e];
    many.kpts[j * 2] = one.kpts[0];
    many.kpts[j * 2 + 1] = one.kpts[1];
  }
  Tape t1, t2;
  const Array& a = t1.value(attend_on_tape(t1, one, cfg, GeometryMode::direct, true, 2.0));
  const Array& b = t2.value(attend_on_tape(t2, many, cfg, GeometryMode::direct, true, 2.0));
  CHECK(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("attention matches the naive double-loop reference on random instances") {
  Rng rng(29);
  for (int rep = 0; rep < 10; ++rep) {
    RelationConfig cfg;
    cfg.heads = rep % 3 == 0 ? 1 : (rep % 3 == 1 ? 2 : 4);
    cfg.channels = 4 * cfg.heads;
    cfg.embed_dim = 8;
    cfg.mlp_dim = 4;
    cfg.key_budget = 10;
    cfg.map_size = 16;
    const std::size_t nq = 1 + rng.uniform_int(6), nk = 1 + rng.uniform_int(7);
    Instance inst = make_instance(rng, cfg, nq, nk);
    const double unit = 2.0;
    for (GeometryMode mode : {GeometryMode::direct, GeometryMode::off}) {
      for (bool appearance : {true, false}) {
        if (mode == GeometryMode::off && !appearance) continue;
        Tape t;
        const Array& got = t.value(attend_on_tape(t, inst, cfg, mode, appearance, unit));
        const Array want = naive_attend(inst.fq, inst.qpts, inst.fk, inst.kpts, inst.store, "bvr",
                                        cfg, unit, mode, appearance);
        CHECK(max_abs_diff(got, want) <= 1e-10);
      }
    }
  }
}

TEST_CASE("key permutation leaves the output unchanged within 1e-12") {
  RelationConfig cfg = tiny_config();
  Rng rng(30);
  Instance inst = make_instance(rng, cfg, 3, 6);
  Instance perm = inst;
  const std::vector<std::size_t> p = {4, 0, 5, 2, 1, 3};
  for (std::size_t j = 0; j < 6; ++j) {
    for (std::size_t e = 0; e < cfg.channels; ++e) {
      perm.fk[j * cfg.channels + e] = inst.fk[p[j] * cfg.channels + e];
    }
    perm.kpts[j * 2] = inst.kpts[p[j] * 2];
    perm.kpts[j * 2 + 1] = inst.kpts[p[j] * 2 + 1];
  }
  Tape t1, t2;
  const Array& a = t1.value(attend_on_tape(t1, inst, cfg, GeometryMode::direct, true, 2.0));
  const Array& b = t2.value(attend_on_tape(t2, perm, cfg, GeometryMode::direct, true, 2.0));
  CHECK(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("translating every point by a common offset leaves the output unchanged") {
  RelationConfig cfg = tiny_config();
  Rng rng(31);
  Instance inst = make_instance(rng, cfg, 4, 5);
  Instance moved = inst;
  for (std::size_t i = 0; i < moved.qpts.size(); i += 2) {
    moved.qpts[i] += 13.5;
    moved.qpts[i + 1] -= 6.25;
  }
  for (std::size_t i = 0; i < moved.kpts.size(); i += 2) {
    moved.kpts[i] += 13.5;
    moved.kpts[i + 1] -= 6.25;
  }
  for (GeometryMode mode : {GeometryMode::direct, GeometryMode::shared}) {
    Tape t1, t2;
    const Array& a = t1.value(attend_on_tape(t1, inst, cfg, mode, true, 2.0));
    const Array& b = t2.value(attend_on_tape(t2, moved, cfg, mode, true, 2.0));
    CHECK(max_abs_diff(a, b) <= 1e-12);
  }
}

TEST_CASE("zero value transform reduces attention to the exact identity") {
  RelationConfig cfg = tiny_config();
  Rng rng(32);
  Instance inst = make_instance(rng, cfg, 3, 5);
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    inst.store.at("bvr.wv" + std::to_string(g)) =
        Array({cfg.channels, cfg.head_dim()});
  }
  Tape t;
  const Array& out = t.value(attend_on_tape(t, inst, cfg, GeometryMode::direct, true, 2.0));
  CHECK(bit_equal(out, inst.fq));
}

TEST_CASE("empty key set returns the query features unchanged") {
  RelationConfig cfg = tiny_config();
  Rng rng(33);
  ParamStore store;
  init_attention_params(store, "bvr", cfg, rng);
  Tape t;
  AttentionParams params = bind_attention_params(t, store, "bvr", cfg);
  Array fq = rand_array(rng, {4, cfg.channels});
  QuerySet q{t.input(fq), t.input(rand_array(rng, {4, 2}, 0, 10))};
  KeySet empty;
  Val out = bvr_attend(t, q, empty, params, cfg, GeometryMode::direct, true, 2.0);
  CHECK(out.id == q.features.id);
}

TEST_CASE("disabling both similarity terms is a configuration error") {
  RelationConfig cfg = tiny_config();
  Rng rng(34);
  Instance inst = make_instance(rng, cfg, 2, 2);
  Tape t;
  CHECK_THROWS_AS(attend_on_tape(t, inst, cfg, GeometryMode::off, false, 2.0), ConfigError);
}

TEST_CASE("relation gradients pass finite-difference checks") {
  const auto report = gradcheck::check_relation(202);
  INFO(report.detail);
  CHECK(report.worst <= report.threshold);
}

TEST_CASE("relation config invariants are enforced") {
  RelationConfig cfg = tiny_config();
  cfg.channels = 7;  // not divisible by heads
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.embed_dim = 6;  // not divisible by 4
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.map_size = 9;  // odd
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
